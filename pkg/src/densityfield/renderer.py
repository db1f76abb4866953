"""Volume rendering with color sampling.

Rays are discretized with stratified sampling spaced linearly in inverse
depth. Density integrates to per-sample alphas and transmittances
(alpha_i = 1 - exp(-sigma_i * delta_i), the standard absorption form);
colors are not predicted but bilinearly sampled from posed source frames,
with out-of-frustum mass tracked per frame for the invalid-ray policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .field import DensityModel
from .geometry import Camera, ImageGrid, Ray, bilinear_sample_many, pixel_grid, \
    project_points, rays_for_pixels

SKY_WEIGHT_EPS = 1e-4  # below this accumulated weight a pixel renders as depth 0


# ---------------------------------------------------------------------------
# reproducible per-ray randomness


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= np.uint64(0xBF58476D1CE4E5B9)
    x ^= x >> np.uint64(27)
    x *= np.uint64(0x94D049BB133111EB)
    x ^= x >> np.uint64(31)
    return x


def ray_uniforms(seed: int, ray_ids: np.ndarray, n_bins: int) -> np.ndarray:
    """One uniform [0, 1) draw per (ray, bin), a pure function of
    (seed, ray id, bin) so any parallel schedule reproduces the same samples."""
    ray_ids = np.asarray(ray_ids, dtype=np.uint64)
    base = _splitmix64(ray_ids ^ _splitmix64(np.full_like(ray_ids, seed)))
    keys = _splitmix64(base[:, None] + np.arange(1, n_bins + 1, dtype=np.uint64))
    return (keys >> np.uint64(11)).astype(np.float64) / float(1 << 53)


# ---------------------------------------------------------------------------
# ray discretization


def stratified_depths(s: int, z_near: float, z_far: float,
                      rng: np.random.Generator | None = None,
                      r=None) -> np.ndarray:
    """Depths d_i = 1 / ((1 - s_i)/z_near + s_i/z_far), s_i = (i + r_i) / S.

    One independent uniform r per bin (from ``rng``, or given explicitly
    as a scalar / (S,) array). Strictly increasing, inside [z_near, z_far].
    """
    if s < 2:
        raise ValueError(f"stratified_depths: need S >= 2, got {s}")
    if r is None:
        rng = rng or np.random.default_rng()
        r = rng.random(s)
    r = np.broadcast_to(np.asarray(r, dtype=np.float64), (s,))
    si = (np.arange(s) + r) / s
    return 1.0 / ((1.0 - si) / z_near + si / z_far)


def _depths_from_uniforms(r: np.ndarray, z_near: float, z_far: float) -> np.ndarray:
    """(n, S) uniforms -> (n, S) stratified inverse-depth samples."""
    s = r.shape[-1]
    si = (np.arange(s) + r) / s
    return 1.0 / ((1.0 - si) / z_near + si / z_far)


def _deltas(depths: np.ndarray, z_far: float) -> np.ndarray:
    d = np.empty_like(depths)
    d[..., :-1] = depths[..., 1:] - depths[..., :-1]
    d[..., -1] = z_far - depths[..., -1]  # bounded last interval keeps sum(w) <= 1
    return d


def composite_sigmas(sigmas: np.ndarray, depths: np.ndarray, z_far: float):
    """Alpha compositing of raw densities (numpy, no graph).

    sigmas, depths: (..., S). Returns (alphas, transmittances, weights).
    """
    sd = sigmas * _deltas(depths, z_far)
    alphas = 1.0 - np.exp(-sd)
    acc = np.zeros_like(sd)
    acc[..., 1:] = np.cumsum(sd[..., :-1], axis=-1)
    trans = np.exp(-acc)
    return alphas, trans, alphas * trans


# ---------------------------------------------------------------------------
# sample / output records


@dataclass
class RaySample:
    """Per-ray discretization record (values, not graph nodes)."""

    depths: np.ndarray          # (S,)
    deltas: np.ndarray          # (S,)
    densities: np.ndarray       # (S,)
    alphas: np.ndarray          # (S,)
    transmittances: np.ndarray  # (S,)
    weights: np.ndarray         # (S,) w_i = T_i * alpha_i
    colors: np.ndarray          # (K, S, 3) per render frame
    frame_outside: np.ndarray   # (K, S) bool, sample outside frame k's frustum
    input_outside: np.ndarray   # (S,) bool, sample outside the input frustum


@dataclass
class RenderOutput:
    """Composited quantities for one ray."""

    colors: np.ndarray       # (K, 3) per render frame
    depth: float             # expected ray termination depth
    invalid_raw: np.ndarray  # (K,) out-of-frustum mass per frame
    weight_sum: float
    sample: RaySample | None = None


class RenderBatch:
    """Graph-valued compositing results for a batch of rays (training path)."""

    def __init__(self, weights: Tensor, depth: Tensor, colors: list[Tensor],
                 invalid_raw: np.ndarray, weight_sum: Tensor,
                 depths: np.ndarray, input_outside: np.ndarray,
                 sigmas: np.ndarray):
        self.weights = weights          # (n, S)
        self.depth = depth              # (n,)
        self.colors = colors            # K tensors (n, 3)
        self.invalid_raw = invalid_raw  # (n, K) values (mask decisions only)
        self.weight_sum = weight_sum    # (n,)
        self.depths = depths            # (n, S) sample depths
        self.input_outside = input_outside  # (n, S)
        self.sigmas = sigmas            # (n, S) density values


# ---------------------------------------------------------------------------
# compositing


def _sample_frame_colors(points: np.ndarray, frames) -> tuple[np.ndarray, np.ndarray]:
    """colors (K, n, 3) and outside-frustum flags (K, n) for flat points."""
    k = len(frames)
    colors = np.zeros((k, points.shape[0], 3), np.float32)
    outside = np.zeros((k, points.shape[0]), bool)
    for i, (image, cam) in enumerate(frames):
        uv, _, in_frustum = project_points(cam, points)
        vals, valid = bilinear_sample_many(image, uv, border="mark_invalid")
        ok = in_frustum & valid
        colors[i] = np.where(ok[:, None], vals, 0.0)  # invalid color contributes 0
        outside[i] = ~in_frustum
    return colors, outside


def composite_rays(model: DensityModel, origins: np.ndarray, dirs: np.ndarray,
                   frames, s: int, r_uniform: np.ndarray) -> RenderBatch:
    """Differentiable compositing for (n,) rays with S samples each.

    ``r_uniform`` is the (n, S) stratified jitter. Gradients flow to the
    model parameters through density only; sampled colors are data.
    """
    if not frames:
        raise ValueError("composite: frames must be nonempty")
    cam = model.input_camera
    n = origins.shape[0]
    r = np.broadcast_to(np.asarray(r_uniform, np.float64), (n, s))
    depths = _depths_from_uniforms(r, cam.z_near, cam.z_far)  # (n, S)
    points = (origins[:, None, :] + depths[..., None] * dirs[:, None, :])
    flat = points.reshape(n * s, 3)

    sigma, input_outside = model.density_graph(flat)
    sigma = ad.reshape(sigma, (n, s))
    input_outside = input_outside.reshape(n, s)

    deltas = _deltas(depths, cam.z_far).astype(np.float32)
    sd = ad.mul(sigma, Tensor(deltas))
    alpha = ad.sub(1.0, ad.exp(ad.mul(sd, -1.0)))
    trans = ad.exp(ad.mul(ad.cumsum_exclusive(sd), -1.0))
    weights = ad.mul(trans, alpha)  # (n, S)

    depth = ad.tsum(ad.mul(weights, Tensor(depths.astype(np.float32))), axis=1)
    weight_sum = ad.tsum(weights, axis=1)

    colors, frame_outside = _sample_frame_colors(flat, frames)
    w3 = ad.broadcast_to(ad.reshape(weights, (n, s, 1)), (n, s, 3))
    chat = [ad.tsum(ad.mul(w3, Tensor(colors[k].reshape(n, s, 3))), axis=1)
            for k in range(len(frames))]

    invalid_mass = (input_outside[None, :, :] | frame_outside.reshape(len(frames), n, s))
    iv_raw = np.stack([(weights.data * invalid_mass[k]).sum(axis=1)
                       for k in range(len(frames))], axis=1)  # (n, K)
    return RenderBatch(weights, depth, chat, iv_raw, weight_sum,
                       depths, input_outside, sigma.data)


def composite(model: DensityModel, ray: Ray, frames, s: int,
              rng: np.random.Generator | None = None,
              r=None) -> RenderOutput:
    """Composite a single ray; returns values plus the discretization record."""
    cam = model.input_camera
    if r is None:
        rng = rng or np.random.default_rng()
        r = rng.random(s)
    r = np.broadcast_to(np.asarray(r, np.float64), (1, s))
    batch = composite_rays(model, ray.origin[None, :], ray.direction[None, :],
                           frames, s, r)
    depths = batch.depths[0]
    deltas = _deltas(depths, cam.z_far)
    weights = batch.weights.data[0]
    wsum = float(batch.weight_sum.data[0])
    if wsum > 1.0 + 1e-5:
        raise AssertionError(f"composite: weight sum {wsum} exceeds 1")
    points = ray.origin[None, :] + depths[:, None] * ray.direction[None, :]
    colors, frame_outside = _sample_frame_colors(points, frames)
    sigmas = batch.sigmas[0]
    alphas, trans, _ = composite_sigmas(sigmas, depths, cam.z_far)
    sample = RaySample(
        depths=depths, deltas=deltas, densities=sigmas, alphas=alphas,
        transmittances=trans, weights=weights, colors=colors,
        frame_outside=frame_outside.reshape(len(frames), s),
        input_outside=batch.input_outside[0])
    return RenderOutput(
        colors=np.stack([c.data[0] for c in batch.colors]),
        depth=float(batch.depth.data[0]),
        invalid_raw=batch.invalid_raw[0],
        weight_sum=wsum,
        sample=sample)


# ---------------------------------------------------------------------------
# full-frame rendering


def _depth_for_rays(model: DensityModel, origins, dirs, s: int,
                    chunk: int = 8192):
    """(depth, weight_sum) numpy arrays for (n,) rays, mid-bin sampling."""
    cam = model.input_camera
    n = origins.shape[0]
    depth = np.zeros(n, np.float32)
    wsum = np.zeros(n, np.float32)
    for lo in range(0, n, chunk):
        o, d = origins[lo:lo + chunk], dirs[lo:lo + chunk]
        dep = _depths_from_uniforms(np.full((o.shape[0], s), 0.5),
                                    cam.z_near, cam.z_far)
        pts = (o[:, None, :] + dep[..., None] * d[:, None, :]).reshape(-1, 3)
        sig = model.density_values(pts).reshape(-1, s)
        _, _, w = composite_sigmas(sig, dep, cam.z_far)
        depth[lo:lo + chunk] = (w * dep).sum(axis=1)
        wsum[lo:lo + chunk] = w.sum(axis=1)
    return depth, wsum


def render_depth_map(model: DensityModel, cam: Camera, res: tuple[int, int],
                     s: int) -> ImageGrid:
    """Expected-termination-depth map; 0 where accumulated weight < 1e-4 (sky)."""
    h, w = res
    uv = pixel_grid(w, h).reshape(-1, 2)
    origins, dirs = rays_for_pixels(cam, uv)
    depth, wsum = _depth_for_rays(model, origins, dirs, s)
    depth = np.where(wsum < SKY_WEIGHT_EPS, 0.0, depth)
    return ImageGrid(depth.reshape(h, w, 1))


def render_novel_view(model: DensityModel, input_frame, target_cam: Camera,
                      res: tuple[int, int], s: int, tau: float = 0.3,
                      chunk: int = 8192):
    """Render ``target_cam`` sampling colors from the input frame only.

    Returns (color ImageGrid, valid mask (H, W) bool). A pixel is valid
    when its out-of-frustum mass stays at or below tau and it received
    any rendered mass at all.
    """
    h, w = res
    cam = model.input_camera
    uv = pixel_grid(w, h).reshape(-1, 2)
    origins, dirs = rays_for_pixels(target_cam, uv)
    n = origins.shape[0]
    color = np.zeros((n, 3), np.float32)
    valid = np.zeros(n, bool)
    for lo in range(0, n, chunk):
        o, d = origins[lo:lo + chunk], dirs[lo:lo + chunk]
        m = o.shape[0]
        dep = _depths_from_uniforms(np.full((m, s), 0.5), cam.z_near, cam.z_far)
        pts = (o[:, None, :] + dep[..., None] * d[:, None, :]).reshape(-1, 3)
        sig = model.density_values(pts).reshape(m, s)
        _, _, wgt = composite_sigmas(sig, dep, cam.z_far)
        _, _, in_input = project_points(model.input_camera, pts)
        cols, frame_outside = _sample_frame_colors(pts, [input_frame])
        cols = cols[0].reshape(m, s, 3)
        outside = (frame_outside[0] | ~in_input).reshape(m, s)
        color[lo:lo + chunk] = (wgt[..., None] * cols).sum(axis=1)
        iv = (wgt * outside).sum(axis=1)
        valid[lo:lo + chunk] = (iv <= tau) & (wgt.sum(axis=1) >= SKY_WEIGHT_EPS)
    return ImageGrid(color.reshape(h, w, 3), clamp01=True), valid.reshape(h, w)
