"""Training objective: min-aggregated photometric error over render frames,
edge-aware smoothness on inverse depth, and the invalid-ray discard policy.

Per patch, every render frame produces a reconstruction; the per-pixel
photometric cost is the minimum over the frames that are valid for that
pixel, so a single frame that sees the right surface suffices. Pixels
invalid in every frame are dropped from the photometric term entirely.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LAMBDA_L1 = 0.15
LAMBDA_SSIM = 0.85
LAMBDA_EAS = 0.002  # 0.001 * 2
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_TAU = 0.3
_BIG = 1e6  # sentinel added to invalid entries before the per-pixel min


@dataclass
class PatchSpec:
    """One reconstruction target patch and everything needed to score it.

    gt and validity are data; recon entries and d_star are graph tensors
    when produced by the renderer.
    """

    frame_id: int
    top_left: tuple[int, int]
    gt: np.ndarray                    # (3, h, w) ground-truth patch
    recon: list                       # K tensors (3, h, w)
    validity: np.ndarray              # (K, h, w) bool, per (pixel, frame)
    d_star: "Tensor | None" = None    # (h, w) inverse mean-normalized depth


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))


def ssim_map(a, b) -> Tensor:
    """Per-pixel SSIM over the two trailing axes (3x3 box window,
    clamp padding, C1 = 0.01^2, C2 = 0.03^2). Leading axes are batched."""
    a, b = _as_t(a), _as_t(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"ssim_map: shapes {a.shape} and {b.shape} differ")
    mu_a = ad.box_filter(a)
    mu_b = ad.box_filter(b)
    var_a = ad.sub(ad.box_filter(ad.mul(a, a)), ad.mul(mu_a, mu_a))
    var_b = ad.sub(ad.box_filter(ad.mul(b, b)), ad.mul(mu_b, mu_b))
    cov = ad.sub(ad.box_filter(ad.mul(a, b)), ad.mul(mu_a, mu_b))
    num = ad.mul(ad.add(ad.mul(ad.mul(mu_a, mu_b), 2.0), SSIM_C1),
                 ad.add(ad.mul(cov, 2.0), SSIM_C2))
    den = ad.mul(ad.add(ad.add(ad.mul(mu_a, mu_a), ad.mul(mu_b, mu_b)), SSIM_C1),
                 ad.add(ad.add(var_a, var_b), SSIM_C2))
    return ad.div(num, den)


def _photometric_stack(gt: np.ndarray, recon: Tensor, validity: np.ndarray,
                       lambda_l1: float = LAMBDA_L1,
                       lambda_ssim: float = LAMBDA_SSIM) -> Tensor:
    """Masked min-aggregated photometric map.

    gt (n, 3, h, w) data; recon (n, K, 3, h, w) tensor; validity
    (n, K, h, w) bool. Returns (n, h, w) with all-invalid pixels zeroed.
    """
    n, k, c, h, w = recon.shape
    gt_k = Tensor(np.broadcast_to(gt[:, None], (n, k, c, h, w)).copy())
    l1 = ad.tmean(ad.absolute(ad.sub(gt_k, recon)), axis=2)          # (n, K, h, w)
    dssim = ad.mul(ad.sub(1.0, ad.tmean(ssim_map(gt_k, recon), axis=2)), 0.5)
    err = ad.add(ad.mul(l1, lambda_l1), ad.mul(dssim, lambda_ssim))
    err = ad.add(err, Tensor((~validity).astype(np.float32) * _BIG))
    best = ad.min_over_axis(err, axis=1)                             # (n, h, w)
    any_valid = validity.any(axis=1).astype(np.float32)
    return ad.mul(best, Tensor(any_valid))


def photometric_min(gt: np.ndarray, recon: list) -> Tensor:
    """Per-pixel photometric loss for one patch.

    recon: list of (reconstruction (3, h, w), validity (h, w) bool) per
    render frame. Pixels invalid in every frame are masked to zero.
    """
    if not recon:
        raise ValueError("photometric_min: need at least one reconstruction")
    gt = np.asarray(gt, np.float32)
    stack = ad.concat([ad.reshape(_as_t(r), (1, 1) + tuple(_as_t(r).shape))
                       for r, _ in recon], axis=1)
    validity = np.stack([v for _, v in recon])[None]  # (1, K, h, w)
    return ad.reshape(_photometric_stack(gt[None], stack, validity), gt.shape[1:])


def _smoothness_stack(d_star: Tensor, gt: np.ndarray) -> Tensor:
    """Edge-aware smoothness for stacked patches.

    d_star (n, h, w) tensor of inverse mean-normalized depth; gt
    (n, 3, h, w) data. Image gradients gate the penalty: exp(-|dI|)
    with |dI| averaged over channels.
    """
    wx = np.exp(-np.abs(np.diff(gt, axis=-1, append=gt[..., -1:])).mean(axis=1))
    wy = np.exp(-np.abs(np.diff(gt, axis=-2, append=gt[..., -1:, :])).mean(axis=1))
    # forward differences zero on the last column/row; match the weights
    wx[..., :, -1] = 0.0
    wy[..., -1, :] = 0.0
    dx = ad.absolute(ad.forward_diff_x(d_star))
    dy = ad.absolute(ad.forward_diff_y(d_star))
    return ad.add(ad.mul(dx, Tensor(wx.astype(np.float32))),
                  ad.mul(dy, Tensor(wy.astype(np.float32))))


def edge_aware_smoothness(d_star, gt) -> Tensor:
    """Per-pixel smoothness map for one patch; d_star must already be
    inverse depth divided by its patch mean."""
    gt = np.asarray(gt, np.float32)
    d = _as_t(d_star)
    return ad.reshape(
        _smoothness_stack(ad.reshape(d, (1,) + tuple(d.shape)), gt[None]),
        d.shape)


def make_d_star(depth: Tensor, eps: float = 1e-6) -> Tensor:
    """Inverse, per-patch mean-normalized depth: (n, h, w) -> (n, h, w)."""
    inv = ad.div(1.0, ad.add(depth, eps))
    mean = ad.tmean(inv, axis=(1, 2), keepdims=True)
    return ad.div(inv, ad.broadcast_to(mean, inv.shape))


def invalid_ray_mask(invalid_raw, tau: float = DEFAULT_TAU) -> np.ndarray:
    """validity_k = not (IV_raw(k) > tau); IV_raw == tau stays valid.

    Accepts the (..., K) out-of-frustum mass array (or a list of
    RenderOutput). A pixel is discarded downstream only when invalid
    for every frame.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"invalid_ray_mask: tau must be in (0, 1), got {tau}")
    if isinstance(invalid_raw, (list, tuple)):
        invalid_raw = np.stack([o.invalid_raw for o in invalid_raw])
    return ~(np.asarray(invalid_raw) > tau)


def total_loss(patches: list[PatchSpec],
               lambda_l1: float = LAMBDA_L1,
               lambda_ssim: float = LAMBDA_SSIM,
               lambda_eas: float = LAMBDA_EAS) -> Tensor:
    """Sum over patches and pixels of the masked photometric term plus
    weighted smoothness. Differentiable end to end."""
    if not patches:
        raise ValueError("total_loss: patch list is empty")
    n = len(patches)
    k = len(patches[0].recon)
    c, h, w = patches[0].gt.shape
    gt = np.stack([p.gt for p in patches])                          # (n, 3, h, w)
    validity = np.stack([p.validity for p in patches])              # (n, K, h, w)
    recon = ad.concat(
        [ad.reshape(r, (1, 1, c, h, w)) for p in patches for r in p.recon],
        axis=0)
    recon = ad.reshape(recon, (n, k, c, h, w))
    ph = _photometric_stack(gt, recon, validity, lambda_l1, lambda_ssim)
    out = ad.tsum(ph)
    if lambda_eas != 0.0 and patches[0].d_star is not None:
        d_star = ad.concat([ad.reshape(p.d_star, (1, h, w)) for p in patches],
                           axis=0)
        out = ad.add(out, ad.mul(ad.tsum(_smoothness_stack(d_star, gt)), lambda_eas))
    return out
