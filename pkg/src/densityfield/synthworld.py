"""Deterministic synthetic scenes with analytic hit, occupancy, visibility
and range-scan oracles; the desk-scale stand-in for driving datasets.

World frame matches the input camera at the origin: +z forward, +y down,
+x right; the ground plane sits at positive y (below the camera). Albedo
is view independent and scenes are static, so the photometric-consistency
assumption of the training loss holds exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera, ImageGrid, Ray, make_camera, pixel_grid, \
    pose_world_to_cam, rays_for_pixels

_T_MIN = 1e-6  # minimum hit distance; avoids self-hits at ray origins


# ---------------------------------------------------------------------------
# albedo


@dataclass(frozen=True)
class Albedo:
    """Solid color or two-color checker with a metric period."""

    kind: str = "solid"  # "solid" | "checker"
    color: tuple = (0.5, 0.5, 0.5)
    color2: tuple = (0.9, 0.9, 0.9)
    period: float = 1.0

    def eval(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "solid":
            return np.broadcast_to(np.asarray(self.color, np.float32),
                                   (pts.shape[0], 3)).copy()
        if self.kind == "checker":
            cells = np.floor(pts / self.period).astype(np.int64).sum(axis=1)
            a = np.asarray(self.color, np.float32)
            b = np.asarray(self.color2, np.float32)
            return np.where((cells % 2 == 0)[:, None], a, b)
        raise ValueError(f"unknown albedo kind {self.kind!r}")

    def to_json(self) -> dict:
        return {"kind": self.kind, "color": list(self.color),
                "color2": list(self.color2), "period": self.period}

    @staticmethod
    def from_json(d: dict) -> "Albedo":
        return Albedo(d["kind"], tuple(d["color"]), tuple(d["color2"]),
                      d["period"])


# ---------------------------------------------------------------------------
# primitives


@dataclass(frozen=True)
class Box:
    """Axis-aligned box: center position plus full extents."""

    center: tuple
    size: tuple
    albedo: Albedo

    def __post_init__(self):
        if min(self.size) <= 0:
            raise ValueError(f"box: extents must be positive, got {self.size}")

    def ray_t(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        c = np.asarray(self.center)
        h = np.asarray(self.size) / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t1 = (c - h - origins) * inv
            t2 = (c + h - origins) * inv
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        t = np.where(tn > _T_MIN, tn, tf)
        return np.where((tn <= tf) & (t > _T_MIN), t, np.inf)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.abs(np.atleast_2d(pts) - np.asarray(self.center))
        return np.all(d <= np.asarray(self.size) / 2.0 + 1e-12, axis=1)

    def to_json(self) -> dict:
        return {"kind": "box", "center": list(self.center),
                "size": list(self.size), "albedo": self.albedo.to_json()}


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: Albedo

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"sphere: radius must be positive, got {self.radius}")

    def ray_t(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - np.asarray(self.center)
        b = np.sum(oc * dirs, axis=1)
        c = np.sum(oc * oc, axis=1) - self.radius ** 2
        disc = b * b - c
        ok = disc >= 0
        root = np.sqrt(np.where(ok, disc, 0.0))
        t_near = -b - root
        t_far = -b + root
        t = np.where(t_near > _T_MIN, t_near, t_far)
        return np.where(ok & (t > _T_MIN), t, np.inf)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.atleast_2d(pts) - np.asarray(self.center)
        return np.sum(d * d, axis=1) <= self.radius ** 2 + 1e-12

    def to_json(self) -> dict:
        return {"kind": "sphere", "center": list(self.center),
                "radius": self.radius, "albedo": self.albedo.to_json()}


def _primitive_from_json(d: dict):
    if d["kind"] == "box":
        return Box(tuple(d["center"]), tuple(d["size"]), Albedo.from_json(d["albedo"]))
    if d["kind"] == "sphere":
        return Sphere(tuple(d["center"]), d["radius"], Albedo.from_json(d["albedo"]))
    raise ValueError(f"unknown primitive kind {d['kind']!r}")


# ---------------------------------------------------------------------------
# scene


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    ground_y: float | None = None        # y of the ground plane (y is down)
    ground_albedo: Albedo | None = None
    background: tuple = (0.70, 0.80, 0.90)

    def intersect_batch(self, origins: np.ndarray, dirs: np.ndarray):
        """Nearest positive hit per ray.

        Returns (hit (n,), t (n,), albedo (n, 3)); albedo is the surface
        color directly (no shading), background color where the ray
        escapes. t is inf for misses.
        """
        origins = np.atleast_2d(np.asarray(origins, np.float64))
        dirs = np.atleast_2d(np.asarray(dirs, np.float64))
        n = origins.shape[0]
        best_t = np.full(n, np.inf)
        best_id = np.full(n, -1, np.int64)
        for idx, prim in enumerate(self.primitives):
            t = prim.ray_t(origins, dirs)
            closer = t < best_t
            best_t = np.where(closer, t, best_t)
            best_id[closer] = idx
        if self.ground_y is not None:
            dy = dirs[:, 1]
            with np.errstate(divide="ignore", invalid="ignore"):
                tg = (self.ground_y - origins[:, 1]) / dy
            tg = np.where((np.abs(dy) > 1e-12) & (tg > _T_MIN), tg, np.inf)
            closer = tg < best_t
            best_t = np.where(closer, tg, best_t)
            best_id[closer] = -2
        hit = np.isfinite(best_t)
        albedo = np.broadcast_to(np.asarray(self.background, np.float32),
                                 (n, 3)).copy()
        pts = origins + best_t[:, None] * dirs
        for idx, prim in enumerate(self.primitives):
            sel = best_id == idx
            if sel.any():
                albedo[sel] = prim.albedo.eval(pts[sel])
        sel = best_id == -2
        if sel.any():
            albedo[sel] = self.ground_albedo.eval(pts[sel])
        return hit, best_t, albedo

    def occupied(self, pts: np.ndarray) -> np.ndarray:
        """Occupancy oracle: inside any (closed) primitive or at/below ground."""
        pts = np.atleast_2d(np.asarray(pts, np.float64))
        occ = np.zeros(pts.shape[0], bool)
        for prim in self.primitives:
            occ |= prim.contains(pts)
        if self.ground_y is not None:
            occ |= pts[:, 1] >= self.ground_y - 1e-12
        return occ

    def visible_from(self, origin: np.ndarray, pts: np.ndarray) -> np.ndarray:
        """Line-of-sight oracle: True when nothing blocks origin -> point.

        Points on a surface count as visible; points strictly behind a
        nearer surface (including primitive interiors) do not.
        """
        origin = np.asarray(origin, np.float64)
        pts = np.atleast_2d(np.asarray(pts, np.float64))
        delta = pts - origin
        dist = np.linalg.norm(delta, axis=1)
        dirs = delta / np.maximum(dist[:, None], 1e-12)
        hit, t, _ = self.intersect_batch(np.broadcast_to(origin, pts.shape), dirs)
        return ~hit | (t >= dist - 1e-6)

    def to_json(self) -> dict:
        return {
            "primitives": [p.to_json() for p in self.primitives],
            "ground_y": self.ground_y,
            "ground_albedo": (self.ground_albedo.to_json()
                              if self.ground_albedo else None),
            "background": list(self.background),
        }

    @staticmethod
    def from_json(d: dict) -> "Scene":
        return Scene(
            tuple(_primitive_from_json(p) for p in d["primitives"]),
            d["ground_y"],
            Albedo.from_json(d["ground_albedo"]) if d["ground_albedo"] else None,
            tuple(d["background"]))


def intersect(scene: Scene, ray: Ray):
    """(hit, distance, albedo color) for a single ray."""
    hit, t, alb = scene.intersect_batch(ray.origin[None], ray.direction[None])
    return bool(hit[0]), float(t[0]), alb[0]


def occupancy_oracle(scene: Scene, x) -> bool:
    return bool(scene.occupied(np.asarray(x))[0])


def render_gt(scene: Scene, cam: Camera, res: tuple[int, int]):
    """Analytic render: (color ImageGrid, depth ImageGrid).

    Depth is the ray-distance of the nearest hit (0 where the ray
    escapes), identical to the intersect oracle per pixel.
    """
    h, w = res
    uv = pixel_grid(w, h).reshape(-1, 2)
    origins, dirs = rays_for_pixels(cam, uv)
    hit, t, albedo = scene.intersect_batch(origins, dirs)
    depth = np.where(hit, t, 0.0).astype(np.float32)
    return (ImageGrid(albedo.reshape(h, w, 3), clamp01=True),
            ImageGrid(depth.reshape(h, w, 1)))


# ---------------------------------------------------------------------------
# camera rig and scans


@dataclass(frozen=True)
class CameraRig:
    """Input camera plus named auxiliary training cameras."""

    input: Camera
    aux: tuple  # ((name, Camera), ...)

    def __post_init__(self):
        for name, cam in self.aux:
            if cam.z_near != self.input.z_near or cam.z_far != self.input.z_far:
                raise ValueError(f"rig: camera {name!r} must share z_near/z_far")

    def frames(self) -> list[tuple[str, Camera]]:
        return [("input", self.input)] + list(self.aux)

    def to_json(self) -> dict:
        return {"input": self.input.to_json(),
                "aux": [[name, cam.to_json()] for name, cam in self.aux]}

    @staticmethod
    def from_json(d: dict) -> "CameraRig":
        return CameraRig(Camera.from_json(d["input"]),
                         tuple((n, Camera.from_json(c)) for n, c in d["aux"]))


def simulate_scan(scene: Scene, pose: np.ndarray, n_rays: int,
                  y_slice: tuple[float, float], n_levels: int = 4) -> np.ndarray:
    """Cylindrical range scan: horizontal rays evenly spaced over 360 degrees
    of azimuth, emitted at ``n_levels`` heights inside the vehicle-frame
    y slice. ``pose`` is the vehicle-to-world transform. Returns world-frame
    hit points only (misses dropped); fully deterministic.
    """
    pose = np.asarray(pose, np.float64)
    y_min, y_max = y_slice
    n_az = n_rays // n_levels
    if n_az < 1:
        raise ValueError(f"simulate_scan: n_rays {n_rays} < n_levels {n_levels}")
    az = np.arange(n_az) * (2.0 * np.pi / n_az)
    heights = y_min + (np.arange(n_levels) + 0.5) * (y_max - y_min) / n_levels
    d_local = np.stack([np.sin(az), np.zeros_like(az), np.cos(az)], axis=1)
    dirs = np.tile(d_local @ pose[:3, :3].T, (n_levels, 1))
    origins = np.repeat(
        (np.stack([np.zeros(n_levels), heights, np.zeros(n_levels)], axis=1)
         @ pose[:3, :3].T) + pose[:3, 3], n_az, axis=0)
    hit, t, _ = scene.intersect_batch(origins, dirs)
    return (origins + t[:, None] * dirs)[hit]


def forward_trajectory(n_poses: int = 20, spacing: float = 1.0) -> list[np.ndarray]:
    """Vehicle-to-world poses moving straight along +z from the input camera."""
    out = []
    for i in range(n_poses):
        p = np.eye(4)
        p[2, 3] = i * spacing
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# benchmark scene profiles


PROFILES = ("two_object_occlusion", "street", "random", "plane")

_GROUND_Y = 1.5          # meters below the camera
_GROUND_CHECKER = Albedo("checker", (0.45, 0.45, 0.45), (0.82, 0.82, 0.80), 1.0)


def _perimeter_walls(z_back: float = 19.0, x_side: float = 14.0,
                     z_rear: float = -5.0) -> list[Box]:
    """Enclosing walls so every scan azimuth measures something. The side
    walls sit outside the forward cameras' view; only the backstop is seen.
    The checker period is large so reprojection across plausible depth
    hypotheses never aliases onto the same pattern."""
    wall = Albedo("checker", (0.38, 0.33, 0.30), (0.78, 0.73, 0.65), 4.0)
    h, top = 6.0, _GROUND_Y - 3.0
    span = 2 * x_side + 4
    return [
        Box((0.0, top, z_back + 0.5), (span, h, 1.0), wall),
        Box((0.0, top, z_rear - 0.5), (span, h, 1.0), wall),
        Box((x_side + 0.5, top, (z_back + z_rear) / 2), (1.0, h, z_back - z_rear + 2), wall),
        Box((-x_side - 0.5, top, (z_back + z_rear) / 2), (1.0, h, z_back - z_rear + 2), wall),
    ]


def _standard_rig(width: int, height: int, z_near: float, z_far: float,
                  lateral_z=(5.5, 8.0), lateral_yaw=(-50.0, -115.0),
                  fov: float = 65.0, lateral_fov: float = 85.0) -> CameraRig:
    def cam(pos, yaw=0.0, pitch=0.0, f=fov):
        return make_camera(width, height, f, pose_world_to_cam(pos, yaw, pitch),
                           z_near, z_far)

    aux = (
        ("stereo", cam((0.54, 0.0, 0.0))),
        ("temporal", cam((0.0, 0.0, 1.0))),
        ("lateral_a", cam((0.0, 0.0, lateral_z[0]), yaw=lateral_yaw[0],
                          pitch=8.0, f=lateral_fov)),
        ("lateral_b", cam((0.0, 0.0, lateral_z[1]), yaw=lateral_yaw[1],
                          pitch=8.0, f=lateral_fov)),
    )
    return CameraRig(cam((0.0, 0.0, 0.0)), aux)


def _two_object_scene() -> Scene:
    # Object 2 sits on the input-camera bearing of object 1, so its central
    # band is occluded from the input view; the laterals (one looking
    # left-forward, one left-backward from points along the trajectory)
    # both observe the gap behind object 1 and the region behind object 2 -
    # the setup that lets training constrain occluded free space.
    obj1 = Box((-1.1, 0.85, 5.5), (1.8, 1.3, 1.2), Albedo("solid", (0.15, 0.25, 0.75)))
    obj2 = Box((-1.8, 0.75, 9.0), (2.8, 1.5, 1.2), Albedo("solid", (0.80, 0.20, 0.15)))
    prims = [obj1, obj2] + _perimeter_walls(z_back=20.0, x_side=16.0)
    return Scene(tuple(prims), _GROUND_Y, _GROUND_CHECKER)


def _street_scene(rng: np.random.Generator) -> Scene:
    prims = []
    n_boxes = int(rng.integers(3, 7))
    palette = [(0.75, 0.25, 0.2), (0.2, 0.45, 0.75), (0.85, 0.65, 0.2),
               (0.3, 0.65, 0.35), (0.6, 0.3, 0.65), (0.8, 0.5, 0.4)]
    for i in range(n_boxes):
        side = 1 if rng.random() < 0.5 else -1
        x = side * rng.uniform(1.6, 4.2)
        z = rng.uniform(4.0, 18.0)
        sx = rng.uniform(0.8, 2.2)
        sz = rng.uniform(0.8, 2.2)
        h = rng.uniform(1.6, 2.6)
        color = palette[int(rng.integers(0, len(palette)))]
        prims.append(Box((x, _GROUND_Y - h / 2, z), (sx, h, sz),
                         Albedo("solid", color)))
    prims += _perimeter_walls()
    return Scene(tuple(prims), _GROUND_Y, _GROUND_CHECKER)


def _random_scene(rng: np.random.Generator) -> Scene:
    prims = []
    for _ in range(int(rng.integers(2, 6))):
        x = rng.uniform(-4.0, 4.0)
        z = rng.uniform(3.5, 15.0)
        if rng.random() < 0.6:
            s = rng.uniform(0.6, 2.0, size=3)
            s[1] = rng.uniform(1.5, 2.5)
            prims.append(Box((x, _GROUND_Y - s[1] / 2, z), tuple(s),
                             Albedo("solid", tuple(rng.uniform(0.15, 0.85, 3)))))
        else:
            r = rng.uniform(0.5, 1.2)
            prims.append(Sphere((x, _GROUND_Y - r, z), r,
                                Albedo("solid", tuple(rng.uniform(0.15, 0.85, 3)))))
    prims += _perimeter_walls()
    return Scene(tuple(prims), _GROUND_Y, _GROUND_CHECKER)


def _plane_scene() -> Scene:
    wall = Box((0.0, 0.0, 5.15), (14.0, 10.0, 0.3),
               Albedo("checker", (0.25, 0.35, 0.75), (0.88, 0.82, 0.65), 0.8))
    return Scene((wall,), None, None, background=(0.7, 0.8, 0.9))


def make_benchmark_scene(seed: int, profile: str,
                         width: int = 64, height: int = 48):
    """Deterministic benchmark scene; returns (Scene, CameraRig, trajectory).

    Profiles: two_object_occlusion (an occluder hiding a second object from
    the input view, laterals observing the gap), street (ground plus boxes
    beside a straight driving corridor), random (mixed primitives), plane
    (a single fronto-parallel checkered wall at z = 5 for quick fits).
    """
    if profile not in PROFILES:
        raise ValueError(
            f"unknown profile {profile!r}; valid profiles: {', '.join(PROFILES)}")
    rng = np.random.default_rng(seed)
    if profile == "two_object_occlusion":
        scene = _two_object_scene()
        rig = _standard_rig(width, height, z_near=2.5, z_far=24.0,
                            lateral_z=(10.2, 12.0), lateral_yaw=(-50.0, -50.0),
                            lateral_fov=100.0)
    elif profile == "street":
        scene = _street_scene(rng)
        rig = _standard_rig(width, height, z_near=2.5, z_far=24.0,
                            lateral_yaw=(-35.0, 35.0), lateral_z=(4.0, 6.0),
                            lateral_fov=85.0)
    elif profile == "random":
        scene = _random_scene(rng)
        rig = _standard_rig(width, height, z_near=2.0, z_far=30.0,
                            lateral_yaw=(-60.0, 60.0), lateral_z=(4.0, 6.0))
    else:  # plane
        scene = _plane_scene()
        aux_spec = [("stereo", (0.54, 0.0, 0.0), 0.0),
                    ("temporal", (0.0, 0.0, 0.8), 0.0),
                    ("lateral_a", (1.0, 0.0, 0.0), -8.0),
                    ("lateral_b", (-1.0, 0.0, 0.0), 8.0)]
        aux = tuple(
            (name, make_camera(width, height, 65.0,
                               pose_world_to_cam(pos, yaw), 2.0, 12.0))
            for name, pos, yaw in aux_spec)
        rig = CameraRig(make_camera(width, height, 65.0,
                                    pose_world_to_cam((0, 0, 0)), 2.0, 12.0), aux)
    return scene, rig, forward_trajectory()


# ---------------------------------------------------------------------------
# serialization


def save_scene(path, scene: Scene, rig: CameraRig, trajectory,
               seed: int, profile: str) -> None:
    doc = {
        "seed": seed,
        "profile": profile,
        "scene": scene.to_json(),
        "rig": rig.to_json(),
        "trajectory": [np.asarray(p).tolist() for p in trajectory],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene(path):
    """Returns (Scene, CameraRig, trajectory, meta dict)."""
    with open(path) as f:
        doc = json.load(f)
    scene = Scene.from_json(doc["scene"])
    rig = CameraRig.from_json(doc["rig"])
    traj = [np.array(p) for p in doc["trajectory"]]
    return scene, rig, traj, {"seed": doc["seed"], "profile": doc["profile"]}
