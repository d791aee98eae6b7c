"""Shared fixtures and numeric oracles for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from gsir.core import GaussianSet
from gsir.render import RenderConfig, render
from gsir.rng import named_rng
from gsir.synthetic import natural_image


def random_scene(
    rng: np.random.Generator,
    count: int,
    width: int,
    height: int,
    sigma_range=(0.6, 2.0),
    color_range=(-1.0, 1.0),
) -> GaussianSet:
    mu = np.column_stack(
        [rng.uniform(1.0, width - 1.0, count), rng.uniform(1.0, height - 1.0, count)]
    )
    log_scale = np.log(rng.uniform(*sigma_range, (count, 2)))
    theta = rng.uniform(0.0, np.pi, count)
    color = rng.uniform(*color_range, (count, 3))
    return GaussianSet.from_arrays(mu, log_scale, theta, color)


def general_position_scene(
    seed: int,
    count: int,
    width: int,
    height: int,
    cfg: RenderConfig,
    margin: float = 0.05,
    sigma_range=(0.6, 2.0),
) -> GaussianSet:
    """A random scene where no pixel center sits near any cutoff boundary.

    Central differences are only a valid oracle away from the renderer's
    truncation discontinuity (the same way the L1 gradient check stays away
    from ties), so offending Gaussians are re-drawn until every pixel's
    Mahalanobis distance clears the cutoff by ``margin``.
    """
    rng = named_rng(seed, "fd-scene")
    cut_sq = cfg.cutoff_sigmas**2
    px = np.arange(width) + 0.5
    py = np.arange(height) + 0.5

    def offending(gset: GaussianSet) -> np.ndarray:
        from gsir.render import _cov_entries

        ia, ib, ic = _cov_entries(gset)[:3]
        dx = px[None, None, :] - gset.mu[:, 0][:, None, None]
        dy = py[None, :, None] - gset.mu[:, 1][:, None, None]
        q = (
            ia[:, None, None] * dx * dx
            + 2.0 * ib[:, None, None] * dx * dy
            + ic[:, None, None] * dy * dy
        )
        near = np.abs(q - cut_sq).min(axis=(1, 2))
        return near < margin

    gset = random_scene(rng, count, width, height, sigma_range=sigma_range)
    for _ in range(200):
        bad = offending(gset)
        if not bad.any():
            return gset
        replacement = random_scene(rng, int(bad.sum()), width, height, sigma_range=sigma_range)
        gset.mu[bad] = replacement.mu
        gset.theta[bad] = replacement.theta
    raise RuntimeError("could not reach general position")


def numeric_render_gradient(gset: GaussianSet, d_output, width, height, cfg, step=1e-4):
    """Central finite differences of sum(d_output * render(set)) per parameter."""

    def value(g: GaussianSet) -> float:
        return float(np.sum(render(g, width, height, cfg) * d_output))

    out = {
        "d_mu": np.zeros_like(gset.mu),
        "d_log_scale": np.zeros_like(gset.log_scale),
        "d_theta": np.zeros_like(gset.theta),
        "d_color": np.zeros_like(gset.color),
    }
    arrays = {"d_mu": "mu", "d_log_scale": "log_scale", "d_theta": "theta", "d_color": "color"}
    for gname, aname in arrays.items():
        arr = getattr(gset, aname)
        flat = arr.reshape(-1)
        grad = out[gname].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = value(gset)
            flat[i] = keep - step
            lo = value(gset)
            flat[i] = keep
            grad[i] = (hi - lo) / (2.0 * step)
    return out


def assert_grads_close(analytic: dict, numeric: dict, rel=1e-4, tiny=1e-8):
    for key, num in numeric.items():
        ana = analytic[key]
        num = np.asarray(num)
        err = np.abs(ana - num)
        small = np.abs(num) < tiny
        ok = np.where(small, err <= tiny, err <= rel * np.maximum(np.abs(num), np.abs(ana)))
        assert ok.all(), f"{key}: max mismatch {err[~ok].max()} (numeric {num[~ok]}, analytic {np.asarray(ana)[~ok]})"


def numeric_image_gradient(fn, image: np.ndarray, step=1e-4) -> np.ndarray:
    """Central finite differences of a scalar image functional."""
    grad = np.zeros_like(image)
    flat = image.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        hi = fn(image)
        flat[i] = keep - step
        lo = fn(image)
        flat[i] = keep
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


@pytest.fixture(scope="session")
def crops64():
    """The five fixed photographic-style 64x64 crops used by acceptance runs."""
    return [natural_image(seed, 64, 64) for seed in range(5)]
