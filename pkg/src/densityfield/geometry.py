"""Cameras, rays, bilinear image sampling and positional encoding.

Conventions (fixed project-wide): camera frame has +z forward, +y down,
+x right. Pixel coordinates are normalized to [-1, 1]^2 everywhere past
image I/O, with texel centers at (i + 0.5) / N. All functions here are
pure; ``Camera`` and ``ImageGrid`` are immutable after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_FREQS = 7  # default frequency count for positional encoding


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: world-to-camera pose and projection onto [-1, 1]^2."""

    pose_world_to_cam: np.ndarray  # (4, 4)
    proj: np.ndarray               # (3, 4), maps camera coords to normalized pixels
    width: int
    height: int
    z_near: float
    z_far: float

    def __post_init__(self):
        pose = np.asarray(self.pose_world_to_cam, dtype=np.float64)
        proj = np.asarray(self.proj, dtype=np.float64)
        if pose.shape != (4, 4) or proj.shape != (3, 4):
            raise ValueError(f"camera: pose {pose.shape} / proj {proj.shape}")
        if not np.allclose(pose[3], [0, 0, 0, 1], atol=1e-9):
            raise ValueError("camera: pose bottom row must be (0, 0, 0, 1)")
        r = pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("camera: rotation block is not orthonormal")
        if not (self.z_near > 0 and self.z_far > self.z_near):
            raise ValueError(f"camera: need 0 < z_near < z_far, "
                             f"got {self.z_near}, {self.z_far}")
        pose.setflags(write=False)
        proj.setflags(write=False)
        object.__setattr__(self, "pose_world_to_cam", pose)
        object.__setattr__(self, "proj", proj)

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        r = self.pose_world_to_cam[:3, :3]
        t = self.pose_world_to_cam[:3, 3]
        return -r.T @ t

    def to_json(self) -> dict:
        return {
            "pose_world_to_cam": self.pose_world_to_cam.tolist(),
            "proj": self.proj.tolist(),
            "width": self.width,
            "height": self.height,
            "z_near": self.z_near,
            "z_far": self.z_far,
        }

    @staticmethod
    def from_json(d: dict) -> "Camera":
        return Camera(np.array(d["pose_world_to_cam"]), np.array(d["proj"]),
                      int(d["width"]), int(d["height"]),
                      float(d["z_near"]), float(d["z_far"]))


@dataclass(frozen=True)
class Ray:
    """World-space ray with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=np.float64)
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            d = d / n
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def point_at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


class ImageGrid:
    """C-channel raster stored (H, W, C); ``data`` is the flat
    channel-interleaved row-major view. Immutable after construction."""

    def __init__(self, array: np.ndarray, clamp01: bool = False):
        arr = np.asarray(array, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"image grid: expected (H, W, C), got {arr.shape}")
        if clamp01:
            arr = np.clip(arr, 0.0, 1.0)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        self.array = arr

    @staticmethod
    def color(array: np.ndarray) -> "ImageGrid":
        """Color image; values clamped to [0, 1] on construction."""
        return ImageGrid(array, clamp01=True)

    @property
    def height(self) -> int:
        return self.array.shape[0]

    @property
    def width(self) -> int:
        return self.array.shape[1]

    @property
    def channels(self) -> int:
        return self.array.shape[2]

    @property
    def data(self) -> np.ndarray:
        return self.array.reshape(-1)


def make_camera(width: int, height: int, fov_x_deg: float,
                pose_world_to_cam: np.ndarray | None = None,
                z_near: float = 1.0, z_far: float = 100.0) -> Camera:
    """Camera with square pixels and centered principal point.

    The focal length is expressed in normalized units, so projections land
    directly in [-1, 1]^2 regardless of resolution.
    """
    fx = 1.0 / np.tan(np.deg2rad(fov_x_deg) / 2.0)
    fy = fx * (width / height)
    proj = np.array([[fx, 0, 0, 0], [0, fy, 0, 0], [0, 0, 1, 0]], dtype=np.float64)
    if pose_world_to_cam is None:
        pose_world_to_cam = np.eye(4)
    return Camera(pose_world_to_cam, proj, width, height, z_near, z_far)


def pose_world_to_cam(position, yaw_deg: float = 0.0, pitch_deg: float = 0.0) -> np.ndarray:
    """World-to-camera pose for a camera at ``position``.

    yaw rotates about the (down) y axis, positive turning toward +x;
    pitch rotates about the x axis, positive looking down (+y).
    """
    cy, sy = np.cos(np.deg2rad(yaw_deg)), np.sin(np.deg2rad(yaw_deg))
    cp, sp = np.cos(np.deg2rad(pitch_deg)), np.sin(np.deg2rad(pitch_deg))
    r_yaw = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    r_pitch = np.array([[1, 0, 0], [0, cp, sp], [0, -sp, cp]])
    r_cam_to_world = r_yaw @ r_pitch
    pose = np.eye(4)
    pose[:3, :3] = r_cam_to_world.T
    pose[:3, 3] = -r_cam_to_world.T @ np.asarray(position, dtype=np.float64)
    return pose


# ---------------------------------------------------------------------------
# projection and rays


def project_points(cam: Camera, pts: np.ndarray):
    """Project (n, 3) world points; returns (uv (n, 2), z (n,), in_frustum (n,)).

    Degenerate depths (z <= 1e-9, behind the camera) yield clamped finite
    coordinates and in_frustum False instead of faulting, so batched
    rendering stays branch-free.
    """
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    cam_pts = pts @ cam.pose_world_to_cam[:3, :3].T + cam.pose_world_to_cam[:3, 3]
    h = cam_pts @ cam.proj[:, :3].T + cam.proj[:, 3]
    z = h[:, 2]
    safe_z = np.maximum(z, 1e-9)
    uv = np.clip(h[:, :2] / safe_z[:, None], -4.0, 4.0)
    in_frustum = ((z >= cam.z_near) & (z <= cam.z_far)
                  & (np.abs(uv[:, 0]) <= 1.0) & (np.abs(uv[:, 1]) <= 1.0))
    if single:
        return uv[0], z[0], bool(in_frustum[0])
    return uv, z, in_frustum


def project(cam: Camera, x) -> tuple[np.ndarray, float, bool]:
    """Project one world point; see :func:`project_points`."""
    return project_points(cam, np.asarray(x, dtype=np.float64))


def rays_for_pixels(cam: Camera, uv: np.ndarray):
    """Rays through normalized pixel coordinates; returns (origins, dirs) (n, 3)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    k_inv = np.linalg.inv(cam.proj[:, :3])
    ones = np.ones((uv.shape[0], 1))
    d_cam = np.concatenate([uv, ones], axis=1) @ k_inv.T
    r = cam.pose_world_to_cam[:3, :3]
    d_world = d_cam @ r  # R^T applied to rows
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, d_world.shape)
    return np.ascontiguousarray(origins), d_world


def ray_for_pixel(cam: Camera, u) -> Ray:
    """Ray from the camera center through a normalized pixel coordinate."""
    origins, dirs = rays_for_pixels(cam, u)
    return Ray(origins[0], dirs[0])


def pixel_grid(width: int, height: int) -> np.ndarray:
    """Normalized coordinates of all texel centers, shape (H, W, 2)."""
    us = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    vs = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    uu, vv = np.meshgrid(us, vs)
    return np.stack([uu, vv], axis=-1)


# ---------------------------------------------------------------------------
# bilinear sampling


def bilinear_sample_many(grid: ImageGrid, uv: np.ndarray, border: str = "clamp"):
    """Bilinearly sample (n, 2) normalized coordinates from an image.

    border='clamp': outside coordinates clamp to the border texel, all
    samples valid. border='mark_invalid': outside samples return zeros
    with valid=False (feeds the out-of-frustum bookkeeping).
    Returns (values (n, C), valid (n,)).
    """
    if border not in ("clamp", "mark_invalid"):
        raise ValueError(f"bilinear_sample: unknown border mode {border!r}")
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    h, w = grid.height, grid.width
    inside = (np.abs(uv[:, 0]) <= 1.0) & (np.abs(uv[:, 1]) <= 1.0)
    px = np.clip((uv[:, 0] + 1.0) * 0.5 * w - 0.5, 0.0, w - 1.0)
    py = np.clip((uv[:, 1] + 1.0) * 0.5 * h - 0.5, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(px), w - 2 if w > 1 else 0).astype(np.int64)
    y0 = np.minimum(np.floor(py), h - 2 if h > 1 else 0).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (px - x0)[:, None]
    fy = (py - y0)[:, None]
    a = grid.array
    vals = ((1 - fy) * ((1 - fx) * a[y0, x0] + fx * a[y0, x1])
            + fy * ((1 - fx) * a[y1, x0] + fx * a[y1, x1]))
    if border == "mark_invalid":
        vals = np.where(inside[:, None], vals, 0.0)
        valid = inside
    else:
        valid = np.ones(uv.shape[0], dtype=bool)
    return vals.astype(np.float32), valid


def bilinear_sample(grid: ImageGrid, u, border: str = "clamp"):
    """Single-point variant of :func:`bilinear_sample_many`."""
    vals, valid = bilinear_sample_many(grid, u, border)
    return vals[0], bool(valid[0])


# ---------------------------------------------------------------------------
# positional encoding


def positional_encode(x, n_freq: int = N_FREQS) -> np.ndarray:
    """gamma(x) = [x, sin(x pi 2^0), cos(x pi 2^0), ..., sin(x pi 2^(n-1)), ...].

    Input must already be normalized to [-1, 1] (depth via
    :func:`normalize_inverse_depth`, pixel coordinates by convention);
    output has (1 + 2 * n_freq) entries per input element. This is the
    exact double-precision form; :func:`encode_array` is the batched
    float32 fast path.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    ang = x[:, None] * (np.pi * 2.0 ** np.arange(n_freq))
    out = np.empty((x.shape[0], 1 + 2 * n_freq))
    out[:, 0] = x
    out[:, 1::2] = np.sin(ang)
    out[:, 2::2] = np.cos(ang)
    return out.reshape(-1)


def encode_array(x: np.ndarray, n_freq: int = N_FREQS) -> np.ndarray:
    """Vectorized positional encoding: (n, k) -> (n, k * (1 + 2 * n_freq)).

    Per-element layout [x, sin ..., cos ...] matches
    :func:`positional_encode`. The frequency ladder is built by
    angle doubling from one sin/cos pair (sin 2a = 2 sin a cos a), which
    is exact in structure and avoids n_freq transcendental passes.
    """
    x = np.asarray(x)
    n, k = x.shape
    out = np.empty((n, k, 1 + 2 * n_freq), dtype=np.float32)
    out[:, :, 0] = x
    ang = (x * np.pi).astype(np.float32)
    s, c = np.sin(ang), np.cos(ang)
    for j in range(n_freq):
        out[:, :, 1 + 2 * j] = s
        out[:, :, 2 + 2 * j] = c
        if j + 1 < n_freq:
            s, c = 2.0 * s * c, 1.0 - 2.0 * s * s
    return np.clip(out.reshape(n, k * (1 + 2 * n_freq)), -1.0, 1.0)


def normalize_inverse_depth(d, z_near: float, z_far: float):
    """Map metric depth to [-1, 1] linearly in inverse depth.

    z_near maps to -1 and z_far to +1, matching the renderer's
    inverse-depth sample spacing.
    """
    d = np.maximum(np.asarray(d, dtype=np.float64), 1e-9)
    t = (1.0 / d - 1.0 / z_near) / (1.0 / z_far - 1.0 / z_near)
    return 2.0 * t - 1.0
