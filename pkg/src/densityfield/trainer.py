"""Self-supervised training: frame partitioning, patch sampling, the
render-reconstruct-minimize step, Adam, scheduling and checkpoints.

Each step recomputes the feature map from the input frame, randomly
partitions all frames (input included) into reconstruction targets and
color sources, renders the target patches by sampling colors from every
source frame, and minimizes the min-aggregated photometric loss plus
edge-aware smoothness.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import loss as loss_mod
from .autodiff import Tensor
from .field import DensityModel, ModelSpec
from .geometry import Camera, ImageGrid, pixel_grid, rays_for_pixels
from .loss import PatchSpec, invalid_ray_mask, make_d_star, total_loss
from .renderer import composite_rays, ray_uniforms
from .synthworld import CameraRig, Scene, render_gt

CHECKPOINT_MAGIC = b"BTSF"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 4
    patches_per_item: int = 16
    patch_size: int = 8
    samples_per_ray: int = 32
    lambda_l1: float = 0.15
    lambda_ssim: float = 0.85
    lambda_eas: float = 0.002
    tau: float = 0.3
    lr: float = 1e-4
    lr_final: float = 1e-5
    lr_drop_frac: float = 0.8     # final lr for the last 20% of steps
    total_steps: int = 2000
    seed: int = 0
    partition_prob: float = 0.5
    extractor_mode: str = "direct"
    channels: int = 32
    hidden: int = 64
    width: int = 64
    height: int = 48
    use_frames: list | None = None  # aux frame names to train with (None = all)
    log_every: int = 50

    def __post_init__(self):
        if min(self.lambda_l1, self.lambda_ssim, self.lambda_eas) < 0:
            raise ValueError("train config: loss weights must be nonnegative")
        if self.patch_size > min(self.width, self.height):
            raise ValueError(
                f"train config: patch {self.patch_size} exceeds image "
                f"{self.height}x{self.width}")

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(d: dict) -> "TrainConfig":
        return TrainConfig(**d)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(mode=self.extractor_mode, channels=self.channels,
                         hidden=self.hidden, width=self.width, height=self.height)


@dataclass
class AdamState:
    """First/second moments per parameter, aligned with the model's
    parameter order."""

    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params) -> "AdamState":
        return AdamState(m=[np.zeros_like(p.data) for p in params],
                         v=[np.zeros_like(p.data) for p in params])


def adam_update(params, grads, state: AdamState, lr: float) -> None:
    """One Adam step in place; ``grads`` aligned with ``params``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)


def lr_schedule(step: int, total: int, lr: float = 1e-4, lr_final: float = 1e-5,
                drop_frac: float = 0.8) -> float:
    """Base rate, dropping to the final rate for the last (1 - drop_frac)."""
    return lr_final if step >= drop_frac * total else lr


# ---------------------------------------------------------------------------
# frame partitioning and patch sampling


def partition_frames(n_frames: int, rng: np.random.Generator,
                     prob: float = 0.5) -> tuple[list[int], list[int]]:
    """Independently assign each frame to the loss or render set with the
    given probability, resampling until both sets are nonempty. The input
    frame gets no special treatment and may land in either set."""
    if n_frames < 2:
        raise ValueError(f"partition: need >= 2 frames, got {n_frames}")
    while True:
        to_loss = rng.random(n_frames) < prob
        if to_loss.any() and not to_loss.all():
            break
    return (list(np.flatnonzero(to_loss)), list(np.flatnonzero(~to_loss)))


def sample_patches(loss_frames: list[int], image_hw: tuple[int, int],
                   p: int, size: int, rng: np.random.Generator) -> list[PatchSpec]:
    """p patch locations, uniform over loss frames and valid top-left
    positions; reconstruction fields are filled in by the training step."""
    h, w = image_hw
    out = []
    for _ in range(p):
        fid = loss_frames[int(rng.integers(0, len(loss_frames)))]
        top = int(rng.integers(0, h - size + 1))
        left = int(rng.integers(0, w - size + 1))
        out.append(PatchSpec(frame_id=fid, top_left=(top, left),
                             gt=None, recon=[], validity=None))
    return out


# ---------------------------------------------------------------------------
# training samples


@dataclass
class TrainSample:
    """One scene's rig: rendered images plus cameras, input frame first."""

    frames: list            # [(ImageGrid, Camera), ...]
    names: list

    @staticmethod
    def from_scene(scene: Scene, rig: CameraRig, res: tuple[int, int],
                   use_frames: list | None = None) -> "TrainSample":
        frames, names = [], []
        for name, cam in rig.frames():
            if name != "input" and use_frames is not None and name not in use_frames:
                continue
            color, _ = render_gt(scene, cam, res)
            frames.append((color, cam))
            names.append(name)
        return TrainSample(frames, names)


# ---------------------------------------------------------------------------
# the training step


def _patch_rays(cam: Camera, locations, size: int, image_hw):
    """Ray origins/directions for all pixels of the given patches."""
    h, w = image_hw
    grid = pixel_grid(w, h)  # (H, W, 2)
    uv = np.concatenate([
        grid[t:t + size, l:l + size].reshape(-1, 2) for t, l in locations])
    return rays_for_pixels(cam, uv)


def train_step(model: DensityModel, samples: list[TrainSample],
               config: TrainConfig, state: AdamState, step: int):
    """One optimization step over a batch of scene samples.

    Returns a stats dict. Non-finite losses abort the step (weights kept,
    reported via 'skipped'). Deterministic given (seed, config, samples).
    """
    params = model.params()
    total = None
    size = config.patch_size
    n_pix = size * size
    discarded = 0
    rays_total = 0
    for item, sample in enumerate(samples):
        rng = np.random.default_rng([config.seed, step, item])
        model.set_input(*sample.frames[0])
        loss_ids, render_ids = partition_frames(
            len(sample.frames), rng, config.partition_prob)
        render_frames = [sample.frames[k] for k in render_ids]
        patches = sample_patches(
            loss_ids, (config.height, config.width),
            config.patches_per_item, size, rng)

        # group patches by their loss frame to build rays frame by frame
        origins, dirs = [], []
        for patch in patches:
            cam = sample.frames[patch.frame_id][1]
            o, d = _patch_rays(cam, [patch.top_left], size,
                               (config.height, config.width))
            origins.append(o)
            dirs.append(d)
        origins = np.concatenate(origins)
        dirs = np.concatenate(dirs)
        n_rays = origins.shape[0]

        ray_ids = (np.uint64(step) * np.uint64(1 << 32)
                   + np.uint64(item) * np.uint64(1 << 24)
                   + np.arange(n_rays, dtype=np.uint64))
        r = ray_uniforms(config.seed, ray_ids, config.samples_per_ray)
        batch = composite_rays(model, origins, dirs, render_frames,
                               config.samples_per_ray, r)

        k = len(render_frames)
        n_p = len(patches)
        recon_all = [ad.transpose(ad.reshape(c, (n_p, size, size, 3)), (0, 3, 1, 2))
                     for c in batch.colors]  # K tensors (n_p, 3, h, w)
        validity = invalid_ray_mask(batch.invalid_raw, config.tau)
        validity = validity.reshape(n_p, size, size, k).transpose(0, 3, 1, 2)
        d_star_all = make_d_star(ad.reshape(batch.depth, (n_p, size, size)))
        discarded += int((~validity.any(axis=1)).sum())
        rays_total += n_rays

        for i, patch in enumerate(patches):
            img = sample.frames[patch.frame_id][0]
            t, l = patch.top_left
            patch.gt = np.ascontiguousarray(
                img.array[t:t + size, l:l + size].transpose(2, 0, 1))
            patch.recon = [ad.reshape(ad.slice_axis0(rk, i, i + 1),
                                      (3, size, size)) for rk in recon_all]
            patch.validity = validity[i]
            patch.d_star = ad.reshape(ad.slice_axis0(d_star_all, i, i + 1),
                                      (size, size))

        item_loss = total_loss(patches, config.lambda_l1, config.lambda_ssim,
                               config.lambda_eas)
        total = item_loss if total is None else ad.add(total, item_loss)

    loss_value = float(total.data)
    stats = {"step": step, "loss": loss_value,
             "lr": lr_schedule(step, config.total_steps, config.lr,
                               config.lr_final, config.lr_drop_frac),
             "discarded_frac": discarded / max(rays_total, 1),
             "skipped": False, "grad_norm": 0.0}
    if not np.isfinite(loss_value):
        stats["skipped"] = True
        return stats

    ad.backward(total)
    grads = [p.grad for p in params]
    sq = sum(float((g * g).sum()) for g in grads if g is not None)
    stats["grad_norm"] = float(np.sqrt(sq))
    if not np.isfinite(stats["grad_norm"]):
        stats["skipped"] = True
        return stats
    adam_update(params, grads, state, stats["lr"])
    return stats


def train(pool: list[tuple[Scene, CameraRig]], config: TrainConfig,
          log_path=None, model: DensityModel | None = None,
          state: AdamState | None = None, start_step: int = 0):
    """Run the full loop over a scene pool (round-robin batch assembly).

    Returns (model, state, history). ``log_path`` appends JSON-lines
    metrics. Resuming is supported by passing the loaded model/state.
    """
    if model is None:
        model = DensityModel(config.model_spec(),
                             np.random.default_rng(config.seed))
    if config.extractor_mode == "direct" and len(pool) != 1:
        raise ValueError("direct extractor fits a single scene; pool must have 1")
    if state is None:
        state = AdamState.for_params(model.params())
    res = (config.height, config.width)
    samples = [TrainSample.from_scene(s, r, res, config.use_frames)
               for s, r in pool]
    history = []
    log_f = open(log_path, "a") if log_path else None
    t0 = time.time()
    try:
        for step in range(start_step, config.total_steps):
            batch = [samples[(step * config.batch_size + i) % len(samples)]
                     for i in range(config.batch_size)]
            stats = train_step(model, batch, config, state, step)
            if step % config.log_every == 0 or step == config.total_steps - 1:
                stats["elapsed_s"] = round(time.time() - t0, 3)
                history.append(stats)
                if log_f:
                    json.dump({k: v for k, v in stats.items()}, log_f)
                    log_f.write("\n")
                    log_f.flush()
    finally:
        if log_f:
            log_f.close()
    return model, state, history


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: DensityModel, state: AdamState | None, path,
                    step: int = 0, config: TrainConfig | None = None) -> None:
    """Binary checkpoint: magic, version, u64 header length, JSON header
    (shapes, mode, hyperparameters), then the f32 parameter blob in
    header-declared order (Adam moments appended when present)."""
    named = model.named_params()
    header = {
        "model_spec": model.spec.to_json(),
        "param_names": [n for n, _ in named],
        "param_shapes": [list(t.shape) for _, t in named],
        "has_adam": state is not None,
        "adam_step": state.step if state else 0,
        "step": step,
        "config": config.to_json() if config else None,
    }
    hdr = json.dumps(header, sort_keys=True).encode()
    blob = [t.data.astype("<f4").tobytes() for _, t in named]
    if state is not None:
        blob += [m.astype("<f4").tobytes() for m in state.m]
        blob += [v.astype("<f4").tobytes() for v in state.v]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for b in blob:
            f.write(b)


def load_checkpoint(path):
    """Returns (model, adam state or None, step, config dict or None)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"checkpoint: bad magic {magic!r}, "
                             f"expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"checkpoint: version {version} unsupported, "
                             f"expected {CHECKPOINT_VERSION}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen))
        spec = ModelSpec.from_json(header["model_spec"])
        model = DensityModel(spec, np.random.default_rng(0))
        named = dict(model.named_params())
        for name, shape in zip(header["param_names"], header["param_shapes"]):
            n = int(np.prod(shape))
            arr = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            named[name].data = arr.astype(np.float32).copy()
        state = None
        if header["has_adam"]:
            params = model.params()
            state = AdamState.for_params(params)
            state.step = header["adam_step"]
            for dest in (state.m, state.v):
                for i, p in enumerate(params):
                    arr = np.frombuffer(f.read(4 * p.size), dtype="<f4")
                    dest[i] = arr.reshape(p.shape).astype(np.float32).copy()
    return model, state, header["step"], header.get("config")
