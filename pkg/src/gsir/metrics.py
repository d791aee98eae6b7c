"""Reconstruction losses, image-quality metrics, and patch quality maps.

The render loss is 0.7 * L1 + 0.3 * (1 - SSIM). SSIM uses the classic 11x11
Gaussian window (sigma 1.5, K1=0.01, K2=0.03), computed per channel and
averaged. The scalar SSIM used in losses is the mean over valid (fully
interior) windows, which makes its adjoint/gradient exact; the dense per-pixel
SSIM index map used for patch pooling is computed with mirrored borders so it
is defined everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

_WINDOW_SIZE = 11
_WINDOW_SIGMA = 1.5
_K1 = 0.01
_K2 = 0.03
_C1 = _K1 * _K1
_C2 = _K2 * _K2

PSNR_CAP_DB = 100.0

_MSSSIM_WEIGHTS = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])


class DimensionMismatchError(ValueError):
    pass


def _kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _window_for(h: int, w: int) -> tuple[np.ndarray, int]:
    size = min(_WINDOW_SIZE, h, w)
    if size % 2 == 0:
        size -= 1
    size = max(size, 1)
    sigma = _WINDOW_SIGMA * size / _WINDOW_SIZE
    return _kernel(size, sigma), size


def _check_dims(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")


def _filt_zero(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(x, kernel, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, kernel, axis=1, mode="constant", cval=0.0)


def _filt_valid(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    half = (kernel.size - 1) // 2
    out = _filt_zero(x, kernel)
    if half == 0:
        return out
    return out[half:-half, half:-half]


def _filt_valid_adjoint(g: np.ndarray, kernel: np.ndarray, shape) -> np.ndarray:
    # Transpose of crop-after-zero-boundary filtering: zero-pad back to full
    # size, then filter again (the window is symmetric).
    half = (kernel.size - 1) // 2
    pad = [(half, half), (half, half)] + [(0, 0)] * (g.ndim - 2)
    return _filt_zero(np.pad(g, pad), kernel)


def _filt_mirror(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    out = correlate1d(x, kernel, axis=0, mode="mirror")
    return correlate1d(out, kernel, axis=1, mode="mirror")


def _ssim_terms(pred: np.ndarray, target: np.ndarray, filt, kernel):
    mx = filt(pred, kernel)
    my = filt(target, kernel)
    sxx = filt(pred * pred, kernel) - mx * mx
    syy = filt(target * target, kernel) - my * my
    sxy = filt(pred * target, kernel) - mx * my
    a1 = 2.0 * mx * my + _C1
    a2 = 2.0 * sxy + _C2
    b1 = mx * mx + my * my + _C1
    b2 = sxx + syy + _C2
    return mx, my, a1, a2, b1, b2


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over valid windows, channels averaged."""
    _check_dims(pred, target)
    kernel, _ = _window_for(*pred.shape[:2])
    _, _, a1, a2, b1, b2 = _ssim_terms(pred, target, _filt_valid, kernel)
    return float(np.mean((a1 * a2) / (b1 * b2)))


def ssim_with_grad(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM plus its analytic gradient w.r.t. every pred pixel."""
    _check_dims(pred, target)
    kernel, _ = _window_for(*pred.shape[:2])
    mx, my, a1, a2, b1, b2 = _ssim_terms(pred, target, _filt_valid, kernel)
    smap = (a1 * a2) / (b1 * b2)
    value = float(np.mean(smap))

    # dS/d(mean), dS/d(var_xx), dS/d(cov_xy) on the valid grid, then pull each
    # back through the filtering operator's adjoint.
    d_mx = 2.0 * my * a2 / (b1 * b2) - smap * 2.0 * mx / b1
    d_sxx = -smap / b2
    d_sxy = 2.0 * a1 / (b1 * b2)
    t1 = _filt_valid_adjoint(d_mx - 2.0 * mx * d_sxx - my * d_sxy, kernel, pred.shape)
    t2 = _filt_valid_adjoint(d_sxx, kernel, pred.shape)
    t3 = _filt_valid_adjoint(d_sxy, kernel, pred.shape)
    grad = (t1 + 2.0 * pred * t2 + target * t3) / smap.size
    return value, grad


def dense_ssim_map(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Per-pixel SSIM index, channel-averaged, defined on the full canvas."""
    _check_dims(pred, target)
    kernel, _ = _window_for(*pred.shape[:2])
    _, _, a1, a2, b1, b2 = _ssim_terms(pred, target, _filt_mirror, kernel)
    smap = (a1 * a2) / (b1 * b2)
    return smap.mean(axis=2) if smap.ndim == 3 else smap


@dataclass(frozen=True)
class LossBreakdown:
    l1: float
    ssim_term: float

    @property
    def total(self) -> float:
        return 0.7 * self.l1 + 0.3 * self.ssim_term


def loss_render(pred: np.ndarray, target: np.ndarray, with_grad: bool = False):
    """0.7 * mean-abs + 0.3 * (1 - SSIM); optionally with d(total)/d(pred).

    The L1 subgradient at exact ties is 0.
    """
    _check_dims(pred, target)
    diff = pred - target
    l1 = float(np.mean(np.abs(diff)))
    if not with_grad:
        breakdown = LossBreakdown(l1=l1, ssim_term=1.0 - ssim(pred, target))
        return breakdown
    ssim_val, ssim_grad = ssim_with_grad(pred, target)
    breakdown = LossBreakdown(l1=l1, ssim_term=1.0 - ssim_val)
    grad = 0.7 * np.sign(diff) / diff.size - 0.3 * ssim_grad
    return breakdown, grad


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10*log10(1/MSE) for unit-range images, capped at 100 dB."""
    _check_dims(pred, target)
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse)))


def _downsample2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape[:2]
    x = x[: h - h % 2, : w - w % 2]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def ms_ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Multi-scale SSIM with the standard 5-scale weights.

    Images smaller than 11 * 2^4 on a side use fewer dyadic scales with the
    weights renormalized.
    """
    _check_dims(pred, target)
    side = min(pred.shape[:2])
    levels = 1
    while levels < 5 and side // (2**levels) >= _WINDOW_SIZE:
        levels += 1
    weights = _MSSSIM_WEIGHTS[:levels] / _MSSSIM_WEIGHTS[:levels].sum()

    value = 1.0
    x, y = pred, target
    for k in range(levels):
        kernel, _ = _window_for(*x.shape[:2])
        _, _, a1, a2, b1, b2 = _ssim_terms(x, y, _filt_valid, kernel)
        if k == levels - 1:
            term = float(np.mean((a1 * a2) / (b1 * b2)))
        else:
            term = float(np.mean(a2 / b2))
        value *= max(term, 0.0) ** weights[k]
        if k < levels - 1:
            x, y = _downsample2(x), _downsample2(y)
    return float(value)


@dataclass
class QualityMaps:
    """Per-patch PSNR (dB) and pooled SSIM grids; one cell per p x p patch."""

    psnr_map: np.ndarray
    ssim_map: np.ndarray
    patch_size: int

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.psnr_map.shape


def quality_maps(target: np.ndarray, recon: np.ndarray, patch_size: int) -> QualityMaps:
    """Patch-wise quality grids driving stage activation.

    PSNR cells use the patch's own MSE over all three channels; SSIM cells
    pool the dense image-wide SSIM index map over the patch, which keeps
    patches smaller than the SSIM window well-defined. Edge patches may be
    partial and use only their valid pixels.
    """
    _check_dims(target, recon)
    if patch_size < 2:
        raise ValueError("patch_size must be >= 2")
    h, w = target.shape[:2]
    gh = -(-h // patch_size)
    gw = -(-w // patch_size)
    smap = dense_ssim_map(recon, target)
    sq_err = np.mean((recon - target) ** 2, axis=2)

    psnr_cells = np.empty((gh, gw))
    ssim_cells = np.empty((gh, gw))
    for r in range(gh):
        ys = slice(r * patch_size, min((r + 1) * patch_size, h))
        for c in range(gw):
            xs = slice(c * patch_size, min((c + 1) * patch_size, w))
            mse = float(np.mean(sq_err[ys, xs]))
            psnr_cells[r, c] = PSNR_CAP_DB if mse <= 0.0 else min(PSNR_CAP_DB, 10.0 * np.log10(1.0 / mse))
            ssim_cells[r, c] = float(np.mean(smap[ys, xs]))
    return QualityMaps(psnr_map=psnr_cells, ssim_map=ssim_cells, patch_size=patch_size)
