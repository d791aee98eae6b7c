"""Forward splatting and its analytic backward pass.

Every pixel accumulates C_p = sum_n c_n * exp(-0.5 * d^T Sigma_n^{-1} d) over
the Gaussians whose cutoff ellipse (``cutoff_sigmas`` standard deviations)
covers the pixel center, with d the offset from the Gaussian center to the
pixel center. The sum is order-independent mathematically; accumulation order
is a fixed function of the set (window-size bucket, then index), so repeated
renders are bit-identical.

Gaussians are evaluated over square pixel windows batched by size. The
backward pass differentiates the same truncated sum by hand: first w.r.t. the
inverse covariance, then through the rotation-scale factorization to
(log_scale, theta). Culling is identical in both directions, so gradients of
culled pixels are exactly zero. ``render_forward_cached`` lets optimizer loops
reuse the forward window stacks in the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet, validate_image

# Std-dev floor (px) applied inside the renderer only; keeps inverses finite
# for degenerate stored scales without touching the parameters themselves.
MIN_RENDER_STD = 0.3

# Window radii are grouped to this granularity so few batch shapes occur.
_BUCKET_STEP = 4


@dataclass(frozen=True)
class RenderConfig:
    cutoff_sigmas: float = 3.0
    tile_size: int = 16  # batch chunking granularity; output is independent of it

    def __post_init__(self) -> None:
        if self.cutoff_sigmas < 1.0:
            raise ValueError("cutoff_sigmas must be >= 1")
        if self.tile_size < 4:
            raise ValueError("tile_size must be >= 4")

    @property
    def chunk_elems(self) -> int:
        return 250_000 * self.tile_size


@dataclass
class GaussianGrads:
    """Per-attribute gradient arrays parallel to a GaussianSet."""

    d_mu: np.ndarray
    d_log_scale: np.ndarray
    d_theta: np.ndarray
    d_color: np.ndarray

    @classmethod
    def zeros(cls, count: int) -> "GaussianGrads":
        return cls(
            d_mu=np.zeros((count, 2)),
            d_log_scale=np.zeros((count, 2)),
            d_theta=np.zeros(count),
            d_color=np.zeros((count, 3)),
        )

    def scaled(self, factor: float) -> "GaussianGrads":
        return GaussianGrads(
            d_mu=self.d_mu * factor,
            d_log_scale=self.d_log_scale * factor,
            d_theta=self.d_theta * factor,
            d_color=self.d_color * factor,
        )


def _cov_entries(gset: GaussianSet):
    """Per-Gaussian inverse-covariance entries and bbox extents.

    Returns Sigma^{-1} = [[ia, ib], [ib, ic]], the floored inverse
    eigenvalues (a1, a2), cos/sin of theta, liveness of each scale w.r.t. the
    floor, and the marginal std-devs (sqrt of Sigma diagonal) for bboxes.
    """
    raw = np.exp(gset.log_scale)
    s1 = np.maximum(raw[:, 0], MIN_RENDER_STD)
    s2 = np.maximum(raw[:, 1], MIN_RENDER_STD)
    live1 = raw[:, 0] > MIN_RENDER_STD
    live2 = raw[:, 1] > MIN_RENDER_STD
    c = np.cos(gset.theta)
    s = np.sin(gset.theta)
    a1 = 1.0 / (s1 * s1)
    a2 = 1.0 / (s2 * s2)
    ia = a1 * c * c + a2 * s * s
    ib = (a1 - a2) * c * s
    ic = a1 * s * s + a2 * c * c
    vx = np.sqrt(s1 * s1 * c * c + s2 * s2 * s * s)
    vy = np.sqrt(s1 * s1 * s * s + s2 * s2 * c * c)
    return ia, ib, ic, a1, a2, c, s, live1, live2, vx, vy


@dataclass
class _Plan:
    entries: dict
    buckets: list
    cj: np.ndarray
    ci: np.ndarray
    pad: int
    dense_idx: np.ndarray


@dataclass
class _ForwardCache:
    plan: _Plan
    width: int
    height: int
    cutoff_sq: float
    chunks: list = field(default_factory=list)  # (idx, r, alpha, dx, dy)


def _window_plan(gset: GaussianSet, width: int, height: int, cfg: RenderConfig) -> _Plan:
    n = gset.count
    ia, ib, ic, a1, a2, c, s, live1, live2, vx, vy = _cov_entries(gset)
    entries = dict(ia=ia, ib=ib, ic=ic, a1=a1, a2=a2, cos=c, sin=s, live1=live1, live2=live2)
    if n == 0:
        return _Plan(entries, [], np.zeros(0, dtype=int), np.zeros(0, dtype=int), 0, np.zeros(0, dtype=int))

    ext = cfg.cutoff_sigmas * np.maximum(vx, vy)
    radius = np.ceil(ext).astype(int) + 1
    cj = np.floor(gset.mu[:, 0]).astype(int)
    ci = np.floor(gset.mu[:, 1]).astype(int)

    visible = (
        (cj + radius >= 0)
        & (cj - radius <= width - 1)
        & (ci + radius >= 0)
        & (ci - radius <= height - 1)
    )
    bucket_r = ((radius + _BUCKET_STEP - 1) // _BUCKET_STEP) * _BUCKET_STEP
    dense_limit = max(width, height)
    dense = visible & (bucket_r >= dense_limit)
    windowed = visible & ~dense

    buckets = []
    pad = 0
    for r in np.unique(bucket_r[windowed]):
        idx = np.nonzero(windowed & (bucket_r == r))[0]
        buckets.append((int(r), idx))
        pad = max(pad, int(r))
    dense_idx = np.nonzero(dense)[0]
    return _Plan(entries, buckets, cj, ci, pad, dense_idx)


def _window_alpha(gset, plan: _Plan, idx, r, cutoff_sq):
    """Alpha stack (M, S, S) plus per-axis center offsets (M, S) for a chunk."""
    size = 2 * r + 1
    offs = np.arange(size) - r
    dx = plan.cj[idx][:, None] + offs[None, :] + 0.5 - gset.mu[idx, 0][:, None]
    dy = plan.ci[idx][:, None] + offs[None, :] + 0.5 - gset.mu[idx, 1][:, None]
    e = plan.entries
    qx = e["ia"][idx][:, None] * dx * dx  # (M, S) column terms
    qy = e["ic"][idx][:, None] * dy * dy  # (M, S) row terms
    bx = e["ib"][idx][:, None] * dx
    q = qy[:, :, None] + qx[:, None, :]
    q += 2.0 * dy[:, :, None] * bx[:, None, :]
    alpha = np.exp(-0.5 * q)
    alpha[q > cutoff_sq] = 0.0
    return alpha, dx, dy


def _dense_q(gset, plan: _Plan, n, width, height):
    dx = (np.arange(width) + 0.5 - gset.mu[n, 0])[None, :]
    dy = (np.arange(height) + 0.5 - gset.mu[n, 1])[None, :]
    e = plan.entries
    q = (
        e["ia"][n] * dx[0][None, :] ** 2
        + 2.0 * e["ib"][n] * dx[0][None, :] * dy[0][:, None]
        + e["ic"][n] * dy[0][:, None] ** 2
    )
    return q, dx, dy


def _chunks(idx: np.ndarray, r: int, cfg: RenderConfig):
    per = max(1, cfg.chunk_elems // ((2 * r + 1) ** 2))
    for start in range(0, idx.size, per):
        yield idx[start : start + per]


def render_forward_cached(
    gset: GaussianSet, width: int, height: int, cfg: RenderConfig | None = None
) -> tuple[np.ndarray, _ForwardCache]:
    """Render and keep the window stacks so a backward pass can reuse them."""
    cfg = cfg or RenderConfig()
    if width < 1 or height < 1:
        raise ValueError("canvas dimensions must be >= 1")
    plan = _window_plan(gset, width, height, cfg)
    cutoff_sq = cfg.cutoff_sigmas**2
    cache = _ForwardCache(plan=plan, width=width, height=height, cutoff_sq=cutoff_sq)

    out = np.zeros((height, width, 3))
    if gset.count == 0:
        return out, cache

    big = 2 * plan.pad + 1
    hp, wp = height + 2 * big, width + 2 * big
    acc = np.zeros((3, hp * wp))
    for r, bidx in plan.buckets:
        size = 2 * r + 1
        row_step = np.arange(size) * wp
        for idx in _chunks(bidx, r, cfg):
            alpha, dx, dy = _window_alpha(gset, plan, idx, r, cutoff_sq)
            cache.chunks.append((idx, r, alpha, dx, dy))
            base = (plan.ci[idx] - r + big) * wp + (plan.cj[idx] - r + big)
            flat = (base[:, None, None] + row_step[None, :, None] + np.arange(size)[None, None, :]).ravel()
            for ch in range(3):
                vals = (alpha * gset.color[idx, ch][:, None, None]).ravel()
                acc[ch] += np.bincount(flat, weights=vals, minlength=hp * wp)
    for ch in range(3):
        out[:, :, ch] = acc[ch].reshape(hp, wp)[big : big + height, big : big + width]

    for n in plan.dense_idx:
        q, _, _ = _dense_q(gset, plan, n, width, height)
        alpha = np.exp(-0.5 * q)
        alpha[q > cutoff_sq] = 0.0
        out += alpha[:, :, None] * gset.color[n]
    return out, cache


def render(gset: GaussianSet, width: int, height: int, cfg: RenderConfig | None = None) -> np.ndarray:
    """Splat a Gaussian set onto a (height, width, 3) canvas."""
    return render_forward_cached(gset, width, height, cfg)[0]


def render_backward(
    gset: GaussianSet,
    d_output: np.ndarray,
    width: int | None = None,
    height: int | None = None,
    cfg: RenderConfig | None = None,
    cache: _ForwardCache | None = None,
) -> GaussianGrads:
    """Gradients of L = sum_p <d_output_p, C_p> w.r.t. every Gaussian attribute.

    ``d_output`` is the loss gradient w.r.t. the rendered image; culled pixels
    contribute nothing by construction. Pass the cache from
    ``render_forward_cached`` (same set, same config) to skip re-evaluating
    the window stacks.
    """
    cfg = cfg or RenderConfig()
    d_output = validate_image(d_output)
    height = height or d_output.shape[0]
    width = width or d_output.shape[1]
    if d_output.shape[:2] != (height, width):
        raise ValueError("d_output dimensions must match the forward render")

    grads = GaussianGrads.zeros(gset.count)
    if gset.count == 0:
        return grads
    if cache is not None and (cache.width, cache.height) == (width, height):
        plan = cache.plan
        cutoff_sq = cache.cutoff_sq
        chunk_iter = [(idx, r, alpha, dx, dy) for idx, r, alpha, dx, dy in cache.chunks]
    else:
        plan = _window_plan(gset, width, height, cfg)
        cutoff_sq = cfg.cutoff_sigmas**2
        chunk_iter = None

    big = 2 * plan.pad + 1
    hp, wp = height + 2 * big, width + 2 * big
    dpad = np.zeros((hp, wp, 3))
    dpad[big : big + height, big : big + width] = d_output
    dflat = dpad.reshape(-1, 3)

    e = plan.entries

    def _accumulate(idx, alpha, dx, dy, win):
        m, rows, cols = alpha.shape
        # win: (M, rows, cols, 3) upstream pixels; gw = <color, win> per pixel
        gw = (win.reshape(m, rows * cols, 3) @ gset.color[idx][:, :, None]).reshape(m, rows, cols)
        grads.d_color[idx] = (
            alpha.reshape(m, 1, rows * cols) @ win.reshape(m, rows * cols, 3)
        ).reshape(m, 3)
        ag = alpha * gw
        rowsum = ag.sum(axis=1)  # (M, cols) -> column moments
        colsum = ag.sum(axis=2)  # (M, rows) -> row moments
        s1 = (rowsum * dx).sum(axis=1)
        s2 = (colsum * dy).sum(axis=1)
        mxx = (rowsum * dx * dx).sum(axis=1)
        myy = (colsum * dy * dy).sum(axis=1)
        t = (ag @ dx[:, :, None]).reshape(m, rows)
        mxy = (t * dy).sum(axis=1)

        ia, ib, ic = e["ia"][idx], e["ib"][idx], e["ic"][idx]
        a1, a2 = e["a1"][idx], e["a2"][idx]
        c, s = e["cos"][idx], e["sin"][idx]
        grads.d_mu[idx, 0] = ia * s1 + ib * s2
        grads.d_mu[idx, 1] = ib * s1 + ic * s2
        gxx, gxy, gyy = -0.5 * mxx, -mxy, -0.5 * myy
        da1 = gxx * c * c + gxy * c * s + gyy * s * s
        da2 = gxx * s * s - gxy * c * s + gyy * c * c
        sin2, cos2 = 2.0 * s * c, c * c - s * s
        grads.d_theta[idx] = (a1 - a2) * (-gxx * sin2 + gxy * cos2 + gyy * sin2)
        grads.d_log_scale[idx, 0] = np.where(e["live1"][idx], da1 * (-2.0 * a1), 0.0)
        grads.d_log_scale[idx, 1] = np.where(e["live2"][idx], da2 * (-2.0 * a2), 0.0)

    def _gather(idx, r):
        size = 2 * r + 1
        row_step = np.arange(size) * wp
        base = (plan.ci[idx] - r + big) * wp + (plan.cj[idx] - r + big)
        flat = base[:, None, None] + row_step[None, :, None] + np.arange(size)[None, None, :]
        return dflat[flat]

    if chunk_iter is not None:
        for idx, r, alpha, dx, dy in chunk_iter:
            _accumulate(idx, alpha, dx, dy, _gather(idx, r))
    else:
        for r, bidx in plan.buckets:
            for idx in _chunks(bidx, r, cfg):
                alpha, dx, dy = _window_alpha(gset, plan, idx, r, cutoff_sq)
                _accumulate(idx, alpha, dx, dy, _gather(idx, r))

    for n in plan.dense_idx:
        q, dx, dy = _dense_q(gset, plan, n, width, height)
        alpha = np.exp(-0.5 * q)
        alpha[q > cutoff_sq] = 0.0
        _accumulate(np.array([n]), alpha[None], dx, dy, d_output[None])
    return grads


def render_additive_check(a: GaussianSet, b: GaussianSet, width: int, height: int,
                          cfg: RenderConfig | None = None) -> float:
    """Max-abs difference between render(a u b) and render(a) + render(b)."""
    from .core import merge_sets

    joint = render(merge_sets(a, b), width, height, cfg)
    split = render(a, width, height, cfg) + render(b, width, height, cfg)
    return float(np.max(np.abs(joint - split))) if joint.size else 0.0
