"""Metrics: depth-prediction table metrics, PSNR/SSIM for view synthesis,
and the carved-occupancy protocol (O_acc, IE_acc, IE_rec) with
top-down density-slice export.

Carving: each range scan marks the space in front of its measurements as
free; scans accumulate into a polar-binned structure answering occupied /
visible queries. The metrics restrict to a point cuboid in front of the
input camera, with the IE variants evaluated only on points invisible
from the input view (at or behind the input-scan surfaces).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .field import DensityModel
from .geometry import Camera, ImageGrid, bilinear_sample_many, project_points
from .loss import ssim_map
from .renderer import render_depth_map
from .synthworld import Scene

DENSITY_THRESHOLD = 0.5  # sigma above this counts as predicted-occupied
DEFAULT_CUBOID = ((-4.0, 4.0), (0.0, 1.0), (3.0, 20.0))  # x, y (down), z
DEFAULT_GRID = (16, 10, 17)  # 2720 points


# ---------------------------------------------------------------------------
# carved occupancy


@dataclass
class CarvedOccupancy:
    """Accumulated polar-binned scans; answers occ(x) / vis(x) queries.

    bins[i, j] is the minimum measured distance of scan i in azimuth bin j
    (bin centers at (j + 0.5) * 360 / b degrees), +inf where the bin holds
    no measurement. Queries interpolate linearly between the two nearest
    bin centers (wrapping at 360); a missing neighbor falls back to the
    measured one, and a point with no measured neighbor is never free.
    """

    poses: list           # vehicle-to-world, scan 0 = input frame
    bins: np.ndarray      # (N, b) min distance per bin, inf = empty
    y_slice: tuple
    b: int

    def _is_free(self, scan: int, pts: np.ndarray) -> np.ndarray:
        pose = self.poses[scan]
        r, t = pose[:3, :3], pose[:3, 3]
        local = (np.atleast_2d(pts) - t) @ r  # world -> vehicle
        d = np.hypot(local[:, 0], local[:, 2])
        alpha = np.arctan2(local[:, 0], local[:, 2]) % (2 * np.pi)
        a = alpha * self.b / (2 * np.pi) - 0.5
        j0 = np.floor(a).astype(np.int64) % self.b
        j1 = (j0 + 1) % self.b
        frac = a - np.floor(a)
        th0 = self.bins[scan, j0]
        th1 = self.bins[scan, j1]
        ok0, ok1 = np.isfinite(th0), np.isfinite(th1)
        th = np.where(ok0 & ok1, (1 - frac) * th0 + frac * th1,
                      np.where(ok0, th0, th1))
        return (ok0 | ok1) & (d < th)

    def free_mask(self, pts: np.ndarray) -> np.ndarray:
        """Carved by at least one scan."""
        pts = np.atleast_2d(pts)
        free = np.zeros(pts.shape[0], bool)
        for i in range(len(self.poses)):
            free |= self._is_free(i, pts)
        return free

    def occ_mask(self, pts: np.ndarray) -> np.ndarray:
        return ~self.free_mask(pts)

    def vis_mask(self, pts: np.ndarray) -> np.ndarray:
        """Visible = strictly in front of the input-frame scan surface."""
        return self._is_free(0, np.atleast_2d(pts))


def occ(carved: CarvedOccupancy, x) -> bool:
    return bool(carved.occ_mask(np.asarray(x))[0])


def vis(carved: CarvedOccupancy, x) -> bool:
    return bool(carved.vis_mask(np.asarray(x))[0])


def build_carved(scans, y_min: float, y_max: float, b: int = 360) -> CarvedOccupancy:
    """Bin every scan's slice points by azimuth, keeping the minimum polar
    distance per bin (the outlier-robust choice). ``scans`` is a list of
    (vehicle-to-world pose, world points)."""
    poses, bins = [], []
    for pose, points in scans:
        pose = np.asarray(pose, np.float64)
        row = np.full(b, np.inf)
        points = np.atleast_2d(np.asarray(points, np.float64))
        if points.size:
            local = (points - pose[:3, 3]) @ pose[:3, :3]
            sel = (local[:, 1] >= y_min) & (local[:, 1] <= y_max)
            local = local[sel]
            if local.shape[0]:
                d = np.hypot(local[:, 0], local[:, 2])
                alpha = np.arctan2(local[:, 0], local[:, 2]) % (2 * np.pi)
                idx = np.minimum((alpha * b / (2 * np.pi)).astype(np.int64), b - 1)
                np.minimum.at(row, idx, d)
        poses.append(pose)
        bins.append(row)
    return CarvedOccupancy(poses, np.stack(bins), (y_min, y_max), b)


# ---------------------------------------------------------------------------
# oracle labels (same occ/vis interface, from the analytic scene)


class OracleLabels:
    """Ground-truth occupancy and input-view visibility from the scene."""

    def __init__(self, scene: Scene, input_origin):
        self.scene = scene
        self.origin = np.asarray(input_origin, np.float64)

    def occ_mask(self, pts) -> np.ndarray:
        return self.scene.occupied(pts)

    def vis_mask(self, pts) -> np.ndarray:
        return self.scene.visible_from(self.origin, pts)


# ---------------------------------------------------------------------------
# occupancy metrics


@dataclass
class OccupancyReport:
    o_acc: float
    ie_acc: float | None
    ie_rec: float | None
    n_points: int
    n_invisible: int
    n_invisible_empty: int

    def to_json(self) -> dict:
        return {"O_acc": self.o_acc, "IE_acc": self.ie_acc,
                "IE_rec": self.ie_rec, "counts": {
                    "total": self.n_points,
                    "invisible": self.n_invisible,
                    "invisible_empty": self.n_invisible_empty}}


def cuboid_points(cam: Camera, cuboid=DEFAULT_CUBOID, grid=DEFAULT_GRID) -> np.ndarray:
    """Evenly spaced world points in a camera-frame cuboid (x right, y down,
    z forward); default 16 x 10 x 17 = 2720 points."""
    (x0, x1), (y0, y1), (z0, z1) = cuboid
    nx, ny, nz = grid
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    zs = np.linspace(z0, z1, nz)
    pts = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
    r = cam.pose_world_to_cam[:3, :3]
    t = cam.pose_world_to_cam[:3, 3]
    return (pts - t) @ r  # camera -> world


def model_predictor(model: DensityModel):
    """Predicted-occupied where the field density exceeds 0.5."""
    return lambda pts: model.density_values(pts) > DENSITY_THRESHOLD


def oracle_predictor(scene: Scene):
    return lambda pts: scene.occupied(pts)


def depth_carve_predictor(model: DensityModel, cam: Camera,
                          res: tuple[int, int], s: int,
                          extend: float | None = None):
    """Baseline: carve the model's own rendered depth map.

    A point is occupied when it lies behind the rendered surface along its
    pixel ray (within ``extend`` meters when given, the depth + 4 m variant).
    Sky pixels (depth 0) occupy nothing.
    """
    depth = render_depth_map(model, cam, res, s)

    def predict(pts):
        pts = np.atleast_2d(pts)
        uv, _, _ = project_points(cam, pts)
        surf, _ = bilinear_sample_many(depth, uv, border="clamp")
        surf = surf[:, 0]
        d = np.linalg.norm(pts - cam.center, axis=1)
        behind = (surf > 0) & (d > surf)
        if extend is not None:
            behind &= d <= surf + extend
        return behind

    return predict


def occupancy_metrics(predictor, labels, cam: Camera,
                      cuboid=DEFAULT_CUBOID, grid=DEFAULT_GRID) -> OccupancyReport:
    """O_acc over all cuboid points; IE_acc / IE_rec over the points
    invisible from the input view (IE metrics absent when the relevant
    subset is empty). ``labels`` provides occ_mask / vis_mask; the
    predictor maps points to predicted-occupied flags."""
    pts = cuboid_points(cam, cuboid, grid)
    pred_occ = np.asarray(predictor(pts), bool)
    lab_occ = labels.occ_mask(pts)
    lab_vis = labels.vis_mask(pts)
    correct = pred_occ == lab_occ
    invisible = ~lab_vis
    inv_empty = invisible & ~lab_occ
    o_acc = float(correct.mean())
    ie_acc = float(correct[invisible].mean()) if invisible.any() else None
    ie_rec = (float((~pred_occ[inv_empty]).mean()) if inv_empty.any() else None)
    return OccupancyReport(o_acc, ie_acc, ie_rec, len(pts),
                           int(invisible.sum()), int(inv_empty.sum()))


# ---------------------------------------------------------------------------
# depth metrics


def depth_metrics(pred, gt, max_depth: float = 80.0) -> dict:
    """Standard depth-prediction metrics over pixels with 0 < gt <= max_depth.

    delta thresholds use max(pred/gt, gt/pred) with a strict inequality.
    """
    pred = pred.array[..., 0] if isinstance(pred, ImageGrid) else np.asarray(pred)
    gt = gt.array[..., 0] if isinstance(gt, ImageGrid) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"depth_metrics: shapes {pred.shape} vs {gt.shape}")
    mask = (gt > 0) & (gt <= max_depth)
    if not mask.any():
        raise ValueError("depth_metrics: no valid ground-truth pixels")
    p = np.maximum(pred[mask].astype(np.float64), 1e-6)
    g = gt[mask].astype(np.float64)
    err = p - g
    ratio = np.maximum(p / g, g / p)
    return {
        "abs_rel": float(np.mean(np.abs(err) / g)),
        "sq_rel": float(np.mean(err ** 2 / g)),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25 ** 2)),
        "delta3": float(np.mean(ratio < 1.25 ** 3)),
        "n_valid": int(mask.sum()),
    }


# ---------------------------------------------------------------------------
# image metrics


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99."""
    a = a.array if isinstance(a, ImageGrid) else np.asarray(a)
    b = b.array if isinstance(b, ImageGrid) else np.asarray(b)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0:
        return 99.0
    return min(99.0, -10.0 * np.log10(mse))


def ssim_global(a, b) -> float:
    """Mean SSIM over all pixels and channels (3x3 window, clamp padding)."""
    a = a.array if isinstance(a, ImageGrid) else np.asarray(a)
    b = b.array if isinstance(b, ImageGrid) else np.asarray(b)
    ta = Tensor(np.ascontiguousarray(a.transpose(2, 0, 1)))
    tb = Tensor(np.ascontiguousarray(b.transpose(2, 0, 1)))
    return float(ssim_map(ta, tb).data.mean())


# ---------------------------------------------------------------------------
# density slice export


def export_density_slice(model: DensityModel, x_range=(-9.0, 9.0),
                         z_range=(3.0, 21.0), y_range=(0.0, 1.0),
                         res: tuple[int, int] = (96, 96),
                         n_y: int = 8) -> ImageGrid:
    """Top-down density map: max sigma over y samples per (x, z) cell.

    Row 0 is the far end of z_range (top of the view); values are raw
    densities (export as PFM, or tone-map 1 - exp(-sigma) for PNG).
    """
    h, w = res
    xs = x_range[0] + (np.arange(w) + 0.5) * (x_range[1] - x_range[0]) / w
    zs = z_range[0] + (np.arange(h) + 0.5) * (z_range[1] - z_range[0]) / h
    ys = y_range[0] + (np.arange(n_y) + 0.5) * (y_range[1] - y_range[0]) / n_y
    out = np.zeros((h, w), np.float32)
    for y in ys:
        gx, gz = np.meshgrid(xs, zs[::-1])
        pts = np.stack([gx.ravel(), np.full(gx.size, y), gz.ravel()], axis=1)
        out = np.maximum(out, model.density_values(pts).reshape(h, w))
    return ImageGrid(out[:, :, None])


def write_report(path, metrics: dict, config_echo: dict | None = None,
                 seed: int | None = None) -> None:
    """Deterministic JSON report: metrics plus config echo and seed."""
    doc = {"metrics": metrics, "config": config_echo, "seed": seed}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
