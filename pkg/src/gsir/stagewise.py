"""Stage-wise residual pipeline: quality-gated masks, increment predictors,
accumulation, predictor training, and multi-stage finetuning.

Each stage reads the reconstruction error left by the previous stages,
predicts one Gaussian candidate per patch token, keeps only the candidates in
patches whose PSNR/SSIM still miss the fidelity targets, and unions them into
the accumulated set. The renderer's additivity makes the accumulated image an
incremental sum of per-stage renders.

Two predictors are provided. HEURISTIC builds candidates from residual-energy
moments and is training-free. The linear predictor maps a flattened patch
residual (plus bias) to raw outputs per token and is small enough for
hand-written gradients; it trains either by distilling short-horizon refined
increments (predict / refine a detached copy / regress), or by direct render
supervision of every accumulated prefix (finetuning).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .core import GaussianSet, canonicalize_theta, merge_sets, validate_image
from .metrics import QualityMaps, loss_render, psnr, quality_maps
from .optim import ArrayAdam, OptimConfig, refine_increment
from .quant import QuantSpec, quantization_error_terms, ste_quantize
from .render import MIN_RENDER_STD, RenderConfig, render, render_backward

_SCALE_FLOOR = MIN_RENDER_STD  # candidate scales never start below the render floor

# Moment scales describe the energy footprint; splats need extra spread to
# tile flat regions without peaking (kept well inside the [0.3, 2p] clamp).
_SCALE_SPREAD = 1.6
_SCALE_CAP_FRAC = 0.75  # of the patch size

# Short-horizon refinement moves each attribute by roughly K/2 * lr in total,
# so K ~ 10 needs faster rates than the long-horizon defaults.
DEFAULT_REFINE_OPTIM = OptimConfig(lr_mu=8e-3, lr_log_scale=0.05, lr_theta=5e-3, lr_color=0.08)

# Plain gradient-descent variant: steps scale with the gradient instead of
# Adam's sign-like unit steps, so refinement of an already-good prediction
# moves ~nothing and the distillation target stops drifting.
GD_REFINE_OPTIM = OptimConfig(lr_mu=0.16, lr_log_scale=1.0, lr_theta=0.1, lr_color=1.6, method="gd")


class StageBudgetError(RuntimeError):
    pass


class DistillMismatchError(ValueError):
    """Predicted and refined sets must be equal-length and index-aligned."""


@dataclass(frozen=True)
class StageControlConfig:
    tau_psnr: float = 35.0
    tau_ssim: float = 0.95
    patch_size: int = 14
    n_stages: int = 4

    def __post_init__(self):
        if self.n_stages < 1:
            raise ValueError("n_stages must be >= 1")
        if self.patch_size < 2:
            raise ValueError("patch_size must be >= 2")

    def grid_shape(self, height: int, width: int) -> tuple[int, int]:
        return (-(-height // self.patch_size), -(-width // self.patch_size))

    def candidate_capacity(self, height: int, width: int) -> int:
        gh, gw = self.grid_shape(height, width)
        return self.n_stages * gh * gw


@dataclass
class StageMask:
    active: np.ndarray  # bool grid, one flag per patch token

    @property
    def count(self) -> int:
        return int(self.active.sum())


def compute_stage_mask(maps: QualityMaps, cfg: StageControlConfig) -> StageMask:
    """Flag the patches whose PSNR or SSIM misses its fidelity target."""
    if maps.patch_size != cfg.patch_size:
        raise ValueError("quality maps were built with a different patch size")
    return StageMask(active=(maps.psnr_map < cfg.tau_psnr) | (maps.ssim_map < cfg.tau_ssim))


def _padded_patches(residual: np.ndarray, p: int) -> np.ndarray:
    """(gh, gw, p, p, 3) view of the residual, zero-padded at the edges."""
    h, w = residual.shape[:2]
    gh, gw = -(-h // p), -(-w // p)
    padded = np.zeros((gh * p, gw * p, 3))
    padded[:h, :w] = residual
    return padded.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4)


class HeuristicPredictor:
    """Training-free candidates from residual-energy moments.

    Per patch: center at the centroid of squared residual energy, scales and
    rotation from the energy-weighted second moments (principal axes), color
    set so each channel's Gaussian integral matches the patch residual mass.
    """

    kind = "heuristic"

    def dense_candidates(self, residual: np.ndarray, patch_size: int, stage: int = 1):
        p = patch_size
        patches = _padded_patches(residual, p)
        gh, gw = patches.shape[:2]
        # squared-magnitude energy: on signed residuals it pulls the centroid
        # into the dominant lobe instead of the dead zone between lobes
        energy = (patches**2).sum(axis=4)  # (gh, gw, p, p)
        wsum = energy.sum(axis=(2, 3))
        coords = np.arange(p) + 0.5
        safe = np.maximum(wsum, 1e-15)

        ex = energy.sum(axis=2) @ coords / safe  # centroid x per patch
        ey = energy.sum(axis=3) @ coords / safe
        exx = energy.sum(axis=2) @ (coords**2) / safe - ex**2
        eyy = energy.sum(axis=3) @ (coords**2) / safe - ey**2
        cross = np.einsum("ghyx,y,x->gh", energy, coords, coords) / safe - ex * ey

        degenerate = wsum < 1e-12
        ex = np.where(degenerate, p / 2.0, ex)
        ey = np.where(degenerate, p / 2.0, ey)
        exx = np.where(degenerate, (p / 4.0) ** 2, exx)
        eyy = np.where(degenerate, (p / 4.0) ** 2, eyy)
        cross = np.where(degenerate, 0.0, cross)

        half_tr = 0.5 * (exx + eyy)
        half_diff = 0.5 * (exx - eyy)
        root = np.sqrt(half_diff**2 + cross**2)
        lam1 = np.maximum(half_tr + root, 0.0)
        lam2 = np.maximum(half_tr - root, 0.0)
        s1 = np.clip(np.sqrt(lam1) * _SCALE_SPREAD, _SCALE_FLOOR, _SCALE_CAP_FRAC * p)
        s2 = np.clip(np.sqrt(lam2) * _SCALE_SPREAD, _SCALE_FLOOR, _SCALE_CAP_FRAC * p)
        theta = canonicalize_theta(0.5 * np.arctan2(2.0 * cross, exx - eyy))

        mass = patches.sum(axis=(2, 3))  # (gh, gw, 3)
        color = mass / (2.0 * np.pi * s1 * s2)[:, :, None]

        origin_x = (np.arange(gw) * p)[None, :]
        origin_y = (np.arange(gh) * p)[:, None]
        mu = np.stack([origin_x + ex, origin_y + ey], axis=-1)
        log_scale = np.stack([np.log(s1), np.log(s2)], axis=-1)
        return {"mu": mu, "log_scale": log_scale, "theta": theta, "color": color}, None


class LinearPredictor:
    """One weight matrix per stage mapping a flattened patch residual (plus
    bias) to 9 raw outputs per token: center offset through a sigmoid scaled
    by the patch size, 2 log-scales, rotation through an (y, x) pair and
    atan2, and 3 colors.
    """

    kind = "linear"
    out_dim = 9

    def __init__(self, patch_size: int, n_stages: int):
        self.patch_size = patch_size
        self.n_stages = n_stages
        self.in_dim = patch_size * patch_size * 3 + 1
        self.weights = [self._fresh_weights() for _ in range(n_stages)]

    def _fresh_weights(self) -> np.ndarray:
        w = np.zeros((self.out_dim, self.in_dim))
        w[2, -1] = w[3, -1] = np.log(self.patch_size / 4.0)  # sane initial scales
        w[4, -1] = 1.0  # atan2 x-component bias; (1, 0) -> theta 0
        return w

    def copy(self) -> "LinearPredictor":
        dup = LinearPredictor(self.patch_size, self.n_stages)
        dup.weights = [w.copy() for w in self.weights]
        return dup

    def _tokens(self, residual: np.ndarray) -> np.ndarray:
        p = self.patch_size
        patches = _padded_patches(residual, p)
        gh, gw = patches.shape[:2]
        x = patches.reshape(gh * gw, p * p * 3)
        return np.hstack([x, np.ones((gh * gw, 1))])

    def dense_candidates(self, residual: np.ndarray, patch_size: int, stage: int = 1):
        if patch_size != self.patch_size:
            raise ValueError("predictor was built for a different patch size")
        if not (1 <= stage <= self.n_stages):
            raise ValueError(f"stage {stage} outside 1..{self.n_stages}")
        p = self.patch_size
        h, w = residual.shape[:2]
        gh, gw = -(-h // p), -(-w // p)
        x = self._tokens(residual)
        z = x @ self.weights[stage - 1].T  # (T, 9)

        sig = 1.0 / (1.0 + np.exp(-z[:, 0:2]))
        origin_x = np.tile(np.arange(gw) * p, gh)
        origin_y = np.repeat(np.arange(gh) * p, gw)
        mu = np.column_stack([origin_x + sig[:, 0] * p, origin_y + sig[:, 1] * p])
        log_scale = z[:, 2:4]
        theta = canonicalize_theta(np.arctan2(z[:, 5], z[:, 4]))
        color = z[:, 6:9]
        dense = {
            "mu": mu.reshape(gh, gw, 2),
            "log_scale": log_scale.reshape(gh, gw, 2),
            "theta": theta.reshape(gh, gw),
            "color": color.reshape(gh, gw, 3),
        }
        cache = {"x": x, "z": z, "sig": sig, "stage": stage, "grid": (gh, gw)}
        return dense, cache

    def backprop_tokens(self, cache: dict, token_idx: np.ndarray, d_mu, d_log_scale, d_theta, d_color) -> np.ndarray:
        """Gradient of the loss w.r.t. this stage's weight matrix, given
        gradients w.r.t. the selected tokens' output parameters."""
        z = cache["z"][token_idx]
        sig = cache["sig"][token_idx]
        x = cache["x"][token_idx]
        dz = np.zeros_like(z)
        dz[:, 0:2] = d_mu * self.patch_size * sig * (1.0 - sig)
        dz[:, 2:4] = d_log_scale
        denom = z[:, 4] ** 2 + z[:, 5] ** 2
        dz[:, 4] = d_theta * (-z[:, 5] / denom)
        dz[:, 5] = d_theta * (z[:, 4] / denom)
        dz[:, 6:9] = d_color
        return dz.T @ x


def predict_increment(model, residual: np.ndarray, mask: StageMask, stage: int = 1,
                      patch_size: int | None = None):
    """Gated increment: one candidate per token, kept only where the mask is
    true, in row-major token order. Returns (set, cache) where the cache is
    predictor-specific backprop state (None for the heuristic)."""
    p = patch_size or getattr(model, "patch_size", None)
    if p is None:
        raise ValueError("patch_size required for stateless predictors")
    dense, cache = model.dense_candidates(residual, p, stage)
    gh, gw = dense["theta"].shape
    if mask.active.shape != (gh, gw):
        raise ValueError("mask grid does not match the patch grid")
    sel = mask.active.reshape(-1)
    delta = GaussianSet.from_arrays(
        mu=dense["mu"].reshape(-1, 2)[sel],
        log_scale=dense["log_scale"].reshape(-1, 2)[sel],
        theta=dense["theta"].reshape(-1)[sel],
        color=dense["color"].reshape(-1, 3)[sel],
        stage_id=np.full(int(sel.sum()), stage, dtype=np.int32),
    )
    if cache is not None:
        cache = dict(cache, token_idx=np.nonzero(sel)[0])
    return delta, cache


@dataclass
class StageRecord:
    stage: int
    added: int
    mask_count: int
    psnr: float
    loss_total: float


@dataclass
class PipelineState:
    """Accumulated set G_i, its render I_i, residual E_i, and per-stage pieces."""

    target: np.ndarray
    accumulated: GaussianSet
    render_acc: np.ndarray
    residual: np.ndarray
    stage: int = 0
    increments: list = field(default_factory=list)
    maps_history: list = field(default_factory=list)
    records: list = field(default_factory=list)


def init_pipeline(target: np.ndarray) -> PipelineState:
    target = validate_image(target)
    return PipelineState(
        target=target,
        accumulated=GaussianSet.empty(),
        render_acc=np.zeros_like(target),
        residual=target.copy(),
    )


def run_stage(
    state: PipelineState,
    model,
    control: StageControlConfig,
    refine_steps: int = 0,
    render_cfg: RenderConfig | None = None,
    optim_cfg: OptimConfig | None = None,
) -> PipelineState:
    """Advance the pipeline one stage: mask, predict, optionally refine the
    increment, and accumulate incrementally (render of the delta only)."""
    if state.stage >= control.n_stages:
        raise StageBudgetError(f"stage budget of {control.n_stages} exhausted")
    render_cfg = render_cfg or RenderConfig()
    height, width = state.target.shape[:2]
    stage = state.stage + 1

    maps = quality_maps(state.target, state.render_acc, control.patch_size)
    mask = compute_stage_mask(maps, control)
    delta, _ = predict_increment(model, state.residual, mask, stage, control.patch_size)
    if refine_steps > 0 and delta.count > 0:
        delta, _ = refine_increment(
            delta, state.residual, state.render_acc, state.target, refine_steps,
            optim=optim_cfg or DEFAULT_REFINE_OPTIM, render_cfg=render_cfg,
        )
    inc_render = render(delta, width, height, render_cfg) if delta.count else np.zeros_like(state.target)

    state.accumulated = merge_sets(state.accumulated, delta)
    state.render_acc = state.render_acc + inc_render
    state.residual = state.residual - inc_render
    state.stage = stage
    state.increments.append(delta)
    state.maps_history.append(maps)
    breakdown = loss_render(state.render_acc, state.target)
    state.records.append(
        StageRecord(
            stage=stage,
            added=delta.count,
            mask_count=mask.count,
            psnr=psnr(state.render_acc, state.target),
            loss_total=breakdown.total,
        )
    )
    return state


def encode_image(
    target: np.ndarray,
    model,
    control: StageControlConfig,
    refine_steps: int = 0,
    render_cfg: RenderConfig | None = None,
    optim_cfg: OptimConfig | None = None,
) -> PipelineState:
    """Run every stage of the pipeline on one image."""
    state = init_pipeline(target)
    for _ in range(control.n_stages):
        run_stage(state, model, control, refine_steps, render_cfg, optim_cfg)
    return state


# --- Gaussian-space regression (distillation target) --------------------------


def theta_distance(a, b):
    """Distance between ellipse orientations under the period-pi symmetry."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % np.pi
    return np.minimum(d, np.pi - d)


def _wrapped_theta_delta(pred, target):
    # signed delta folded into [-pi/2, pi/2); |result| == theta_distance
    return (np.asarray(pred) - np.asarray(target) + np.pi / 2) % np.pi - np.pi / 2


@dataclass(frozen=True)
class DistillWeights:
    mu: float = 1.0
    log_scale: float = 1.0
    theta: float = 0.5
    color: float = 1.0


def gaussian_regression_loss(
    pred: GaussianSet, target: GaussianSet, weights: DistillWeights = DistillWeights(),
    with_grad: bool = False,
):
    """Weighted squared distances between index-aligned primitives, averaged
    over the primitives. Orientation uses the squared period-pi distance."""
    if pred.count != target.count:
        raise DistillMismatchError(f"count mismatch: {pred.count} vs {target.count}")
    if pred.count == 0:
        if with_grad:
            from .render import GaussianGrads

            return 0.0, GaussianGrads.zeros(0)
        return 0.0
    m = pred.count
    d_mu = pred.mu - target.mu
    d_ls = pred.log_scale - target.log_scale
    d_th = _wrapped_theta_delta(pred.theta, target.theta)
    d_c = pred.color - target.color
    loss = (
        weights.mu * np.sum(d_mu**2)
        + weights.log_scale * np.sum(d_ls**2)
        + weights.theta * np.sum(d_th**2)
        + weights.color * np.sum(d_c**2)
    ) / m
    if not with_grad:
        return float(loss)
    from .render import GaussianGrads

    grads = GaussianGrads(
        d_mu=2.0 * weights.mu * d_mu / m,
        d_log_scale=2.0 * weights.log_scale * d_ls / m,
        d_theta=2.0 * weights.theta * d_th / m,
        d_color=2.0 * weights.color * d_c / m,
    )
    return float(loss), grads


# --- training loops -----------------------------------------------------------


@dataclass(frozen=True)
class PODConfig:
    """Distill-training schedule: predict, refine a detached copy, regress."""

    steps: int = 2000
    refine_steps: int = 10
    distill_weight: float = 100.0
    stage_weights: tuple | None = None  # uniform when None
    milestones: tuple = (0, 500, 1000, 1500)
    distill: DistillWeights = DistillWeights()
    predictor_lr: float = 1e-3
    refine_method: str = "adam"
    refine_optim: OptimConfig | None = None  # overrides the method preset

    def __post_init__(self):
        if self.stage_weights is not None and any(w <= 0 for w in self.stage_weights):
            raise ValueError("stage weights must be positive")

    def weight(self, stage: int, n_stages: int) -> float:
        if self.stage_weights is None:
            return 1.0
        return float(self.stage_weights[stage - 1])

    def active_stages(self, step: int, n_stages: int) -> int:
        return max(1, min(n_stages, sum(1 for m in self.milestones if step >= m)))


@dataclass
class TrainLogRow:
    step: int
    active_stages: int
    stage_losses: tuple
    total: float


def write_train_log_csv(rows, path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "active_stages", "stage", "loss", "total"])
        for row in rows:
            for stage, loss in enumerate(row.stage_losses, start=1):
                writer.writerow([row.step, row.active_stages, stage, f"{loss:.8f}", f"{row.total:.8f}"])


def _refine_cfg(cfg: PODConfig) -> OptimConfig:
    if cfg.refine_optim is not None:
        return cfg.refine_optim
    return GD_REFINE_OPTIM if cfg.refine_method == "gd" else DEFAULT_REFINE_OPTIM


def pod_train(
    model: LinearPredictor,
    corpus: list,
    cfg: PODConfig,
    control: StageControlConfig,
    seed: int = 0,
    start_step: int = 0,
    optimizers: list | None = None,
    on_step=None,
) -> tuple[LinearPredictor, list, list]:
    """Train the linear predictor by distilling refined increments.

    Per step and active stage: predict the gated increment, refine a detached
    copy for K steps against the stage residual, and regress the prediction
    onto the refined copy in Gaussian space (distill weight applied). New
    stages activate at the configured milestones with weights copied from the
    previous stage. The corpus is cycled in order, so a run is fully
    determined by (start_step, weights, optimizer state); ``seed`` is kept for
    interface stability and run records.
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    n_stages = min(control.n_stages, model.n_stages)
    if optimizers is None:
        optimizers = [ArrayAdam(w.shape, cfg.predictor_lr) for w in model.weights]
    log: list[TrainLogRow] = []
    for step in range(start_step, cfg.steps):
        active = cfg.active_stages(step, n_stages)
        for k, milestone in enumerate(cfg.milestones[:n_stages]):
            if step == milestone and k >= 1:
                model.weights[k] = model.weights[k - 1].copy()
                optimizers[k] = ArrayAdam(model.weights[k].shape, cfg.predictor_lr)
        target = corpus[step % len(corpus)]
        height, width = target.shape[:2]
        state = init_pipeline(target)
        stage_losses = []
        for stage in range(1, active + 1):
            maps = quality_maps(state.target, state.render_acc, control.patch_size)
            mask = compute_stage_mask(maps, control)
            delta, cache = predict_increment(model, state.residual, mask, stage, control.patch_size)
            if delta.count > 0:
                if cfg.refine_steps > 0:
                    refined, _ = refine_increment(
                        delta, state.residual, state.render_acc, state.target,
                        cfg.refine_steps, optim=_refine_cfg(cfg),
                    )
                else:
                    refined = delta.copy()
                scale = cfg.weight(stage, n_stages) * cfg.distill_weight
                loss, grads = gaussian_regression_loss(delta, refined, cfg.distill, with_grad=True)
                dw = model.backprop_tokens(
                    cache, cache["token_idx"],
                    grads.d_mu * scale, grads.d_log_scale * scale,
                    grads.d_theta * scale, grads.d_color * scale,
                )
                optimizers[stage - 1].step(model.weights[stage - 1], dw)
                stage_losses.append(loss * scale)
            else:
                stage_losses.append(0.0)
            inc = render(delta, width, height) if delta.count else np.zeros_like(target)
            state.accumulated = merge_sets(state.accumulated, delta)
            state.render_acc = state.render_acc + inc
            state.residual = state.residual - inc
            state.stage = stage
        row = TrainLogRow(step=step, active_stages=active, stage_losses=tuple(stage_losses),
                          total=float(sum(stage_losses)))
        log.append(row)
        if on_step is not None:
            on_step(step, model, optimizers, row)
    return model, log, optimizers


@dataclass(frozen=True)
class FinetuneConfig:
    """Direct render supervision of every accumulated prefix (no refinement)."""

    steps: int = 500
    stage_weights: tuple | None = None
    predictor_lr: float = 1e-3
    quant_spec: QuantSpec | None = None  # enables quantization-aware loss on the final set
    quant_gamma: float = 0.1

    def weight(self, stage: int) -> float:
        if self.stage_weights is None:
            return 1.0
        return float(self.stage_weights[stage - 1])


def _split_grads_by_stage(grads, counts):
    """Slice flat per-primitive grads back into per-stage pieces."""
    pieces = []
    start = 0
    for c in counts:
        sl = slice(start, start + c)
        pieces.append((grads.d_mu[sl], grads.d_log_scale[sl], grads.d_theta[sl], grads.d_color[sl]))
        start += c
    return pieces


def finetune_train(
    model: LinearPredictor,
    corpus: list,
    cfg: FinetuneConfig,
    control: StageControlConfig,
    seed: int = 0,
    start_step: int = 0,
    optimizers: list | None = None,
    on_step=None,
) -> tuple[LinearPredictor, list, list]:
    """Finetune all stage weights against render loss on every prefix.

    Gradients reach stage j's weights through every prefix i >= j in which its
    primitives appear; masks and the residual inputs of later stages are
    treated as constants. With ``quant_spec`` set, a quantization-aware loss
    on the final accumulated set is added (straight-through gradients, plus
    the normalized quantization-error penalty pulling parameters onto grid
    points).
    """
    if not corpus:
        raise ValueError("corpus must be non-empty")
    n_stages = min(control.n_stages, model.n_stages)
    if optimizers is None:
        optimizers = [ArrayAdam(w.shape, cfg.predictor_lr) for w in model.weights]
    log = []
    for step in range(start_step, cfg.steps):
        target = corpus[step % len(corpus)]
        height, width = target.shape[:2]
        state = init_pipeline(target)
        caches, deltas, prefix_grads, prefix_losses = [], [], [], []
        for stage in range(1, n_stages + 1):
            maps = quality_maps(state.target, state.render_acc, control.patch_size)
            mask = compute_stage_mask(maps, control)
            delta, cache = predict_increment(model, state.residual, mask, stage, control.patch_size)
            caches.append(cache)
            deltas.append(delta)
            inc = render(delta, width, height) if delta.count else np.zeros_like(target)
            state.accumulated = merge_sets(state.accumulated, delta)
            state.render_acc = state.render_acc + inc
            state.residual = state.residual - inc
            state.stage = stage
            breakdown, grad_img = loss_render(state.render_acc, target, with_grad=True)
            prefix_losses.append(cfg.weight(stage) * breakdown.total)
            prefix_grads.append(cfg.weight(stage) * grad_img)

        weight_grads = [np.zeros_like(w) for w in model.weights]
        # suffix sums: stage j sees the loss of every prefix it belongs to
        upstream = np.zeros_like(target)
        for stage in range(n_stages, 0, -1):
            upstream = upstream + prefix_grads[stage - 1]
            delta = deltas[stage - 1]
            if delta.count == 0:
                continue
            grads = render_backward(delta, upstream, width, height)
            weight_grads[stage - 1] += model.backprop_tokens(
                caches[stage - 1], caches[stage - 1]["token_idx"],
                grads.d_mu, grads.d_log_scale, grads.d_theta, grads.d_color,
            )

        quant_loss = 0.0
        if cfg.quant_spec is not None and state.accumulated.count > 0:
            quant_loss = _accumulate_quant_grads(
                state, cfg, deltas, caches, weight_grads, model, width, height
            )

        for stage in range(n_stages):
            optimizers[stage].step(model.weights[stage], weight_grads[stage])
        row = TrainLogRow(step=step, active_stages=n_stages, stage_losses=tuple(prefix_losses),
                          total=float(sum(prefix_losses) + quant_loss))
        log.append(row)
        if on_step is not None:
            on_step(step, model, optimizers, row)
    return model, log, optimizers


def _accumulate_quant_grads(state, cfg, deltas, caches, weight_grads, model, width, height) -> float:
    """Quantization-aware loss on the final set; gradients pass straight
    through in-range roundings and the error term pulls toward grid points."""
    full = state.accumulated
    qset, pass_mask = ste_quantize(full, cfg.quant_spec, width, height)
    breakdown, grad_img = loss_render(render(qset, width, height), state.target, with_grad=True)
    grads = render_backward(qset, grad_img, width, height)
    grads.d_mu *= pass_mask.mu
    grads.d_log_scale *= pass_mask.log_scale
    grads.d_theta *= pass_mask.theta
    grads.d_color *= pass_mask.color

    errs = quantization_error_terms(full, cfg.quant_spec, width, height)
    n_vals = sum(e.size for e in errs.values())
    err_sq_mean = float(sum(np.sum(e**2) for e in errs.values())) / n_vals
    coef = cfg.quant_gamma * 2.0 / n_vals
    spec = cfg.quant_spec
    grads.d_mu[:, 0] += coef * errs["mu_x"] / (spec.mu_x.alpha * width)
    grads.d_mu[:, 1] += coef * errs["mu_y"] / (spec.mu_y.alpha * height)
    grads.d_log_scale += coef * errs["log_scale"].reshape(-1, 2) / spec.log_scale.alpha
    grads.d_theta += coef * errs["theta"] / spec.theta.alpha
    grads.d_color += coef * errs["color"].reshape(-1, 3) / spec.color.alpha

    counts = [d.count for d in deltas]
    for stage_i, piece in enumerate(_split_grads_by_stage(grads, counts)):
        if counts[stage_i] == 0:
            continue
        weight_grads[stage_i] += model.backprop_tokens(caches[stage_i], caches[stage_i]["token_idx"], *piece)
    return breakdown.total + cfg.quant_gamma * err_sq_mean


# --- density maps -------------------------------------------------------------


def density_map(gset: GaussianSet, cell: int, width: int, height: int) -> np.ndarray:
    """Counts of Gaussian centers per cell; off-canvas centers clip to the
    edge cells so the grid total always equals the set size."""
    if cell < 1:
        raise ValueError("cell must be >= 1")
    gh, gw = -(-height // cell), -(-width // cell)
    counts = np.zeros((gh, gw), dtype=np.int64)
    if gset.count == 0:
        return counts
    cx = np.clip((gset.mu[:, 0] // cell).astype(int), 0, gw - 1)
    cy = np.clip((gset.mu[:, 1] // cell).astype(int), 0, gh - 1)
    np.add.at(counts, (cy, cx), 1)
    return counts


def density_profile(counts: np.ndarray, row: int) -> np.ndarray:
    """1-D density profile along one grid row."""
    return counts[row].copy()


# --- weight (de)serialization --------------------------------------------------

_WEIGHTS_MAGIC = b"GSWM"
_WEIGHTS_VERSION = 1


class WeightsFormatError(ValueError):
    pass


def save_weights(model: LinearPredictor, path, step: int = 0, optimizers: list | None = None) -> None:
    """Flat little-endian binary with a versioned header; optimizer moments
    are included when given so training resumes bit-identically."""
    flags = 1 if optimizers is not None else 0
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(struct.pack("<HHHIIQB", _WEIGHTS_VERSION, model.patch_size, model.n_stages,
                             model.in_dim, model.out_dim, step, flags))
        for w in model.weights:
            fh.write(w.astype("<f8").tobytes())
        if optimizers is not None:
            for opt in optimizers:
                fh.write(struct.pack("<Q", opt.step_count))
                fh.write(opt.m.astype("<f8").tobytes())
                fh.write(opt.v.astype("<f8").tobytes())


def load_weights(path, predictor_lr: float = 1e-3):
    """Returns (model, step, optimizers-or-None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _WEIGHTS_MAGIC:
        raise WeightsFormatError("bad magic: not a predictor weights file")
    version, patch, stages, in_dim, out_dim, step, flags = struct.unpack("<HHHIIQB", blob[4:27])
    if version != _WEIGHTS_VERSION:
        raise WeightsFormatError(f"unsupported weights version {version}")
    model = LinearPredictor(patch, stages)
    if (model.in_dim, model.out_dim) != (in_dim, out_dim):
        raise WeightsFormatError("header dimensions are inconsistent with the patch size")
    pos = 27
    mat_bytes = in_dim * out_dim * 8
    for s in range(stages):
        model.weights[s] = np.frombuffer(blob[pos : pos + mat_bytes], dtype="<f8").reshape(out_dim, in_dim).copy()
        pos += mat_bytes
    optimizers = None
    if flags & 1:
        optimizers = []
        for s in range(stages):
            (count,) = struct.unpack("<Q", blob[pos : pos + 8])
            pos += 8
            opt = ArrayAdam((out_dim, in_dim), predictor_lr)
            opt.step_count = count
            opt.m = np.frombuffer(blob[pos : pos + mat_bytes], dtype="<f8").reshape(out_dim, in_dim).copy()
            pos += mat_bytes
            opt.v = np.frombuffer(blob[pos : pos + mat_bytes], dtype="<f8").reshape(out_dim, in_dim).copy()
            pos += mat_bytes
            optimizers.append(opt)
    if pos != len(blob):
        raise WeightsFormatError("trailing bytes after weight payload")
    return model, step, optimizers
