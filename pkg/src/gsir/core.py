"""Core domain types: 2D Gaussian primitives, primitive collections, covariance.

Images are plain numpy arrays of shape (H, W, 3), float64, row-major, with
pixel (i, j) covering the continuous point (j + 0.5, i + 0.5). Targets live in
[0, 1]; renders and residuals are unbounded signed values.

Scales are stored as log-scales so positivity holds by construction; theta is
kept in [0, pi) (a 2D Gaussian ellipse has period pi).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidParameterError(ValueError):
    """Raised for non-finite or structurally invalid primitive parameters."""


@dataclass(frozen=True)
class Covariance2D:
    """A 2x2 positive-definite covariance with its inverse and determinant."""

    sigma: np.ndarray
    sigma_inv: np.ndarray
    det: float


@dataclass
class Gaussian2D:
    """One splat: center (px), log-scales (px), rotation (rad), signed RGB.

    Opacity is absorbed into the color, which is unbounded and may be
    negative (residual stages subtract as well as add).
    """

    mu: np.ndarray
    log_scale: np.ndarray
    theta: float
    color: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(2)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(2)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if not (
            np.all(np.isfinite(self.mu))
            and np.all(np.isfinite(self.log_scale))
            and np.isfinite(self.theta)
            and np.all(np.isfinite(self.color))
        ):
            raise InvalidParameterError("gaussian parameters must be finite")
        self.theta = canonicalize_theta(float(self.theta))


@dataclass
class GaussianSet:
    """Structure-of-arrays collection of primitives with per-primitive stage tags.

    All arrays share leading dimension ``count``. ``stage_id`` is 1-based and
    non-decreasing when sets are built by stage accumulation.
    """

    mu: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    theta: np.ndarray = field(default_factory=lambda: np.zeros((0,)))
    color: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    stage_id: np.ndarray = field(default_factory=lambda: np.zeros((0,), dtype=np.int32))

    def __post_init__(self) -> None:
        self.mu = np.atleast_2d(np.asarray(self.mu, dtype=np.float64)).reshape(-1, 2)
        self.log_scale = np.atleast_2d(np.asarray(self.log_scale, dtype=np.float64)).reshape(-1, 2)
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        self.color = np.atleast_2d(np.asarray(self.color, dtype=np.float64)).reshape(-1, 3)
        self.stage_id = np.asarray(self.stage_id, dtype=np.int32).reshape(-1)
        n = self.mu.shape[0]
        if not (self.log_scale.shape[0] == self.theta.shape[0] == self.color.shape[0] == self.stage_id.shape[0] == n):
            raise InvalidParameterError("parallel attribute arrays must share length")

    @property
    def count(self) -> int:
        return int(self.mu.shape[0])

    @classmethod
    def empty(cls) -> "GaussianSet":
        return cls()

    @classmethod
    def from_arrays(cls, mu, log_scale, theta, color, stage_id=None) -> "GaussianSet":
        theta = np.asarray(theta, dtype=np.float64).reshape(-1)
        if stage_id is None:
            stage_id = np.ones(theta.shape[0], dtype=np.int32)
        return cls(mu=mu, log_scale=log_scale, theta=canonicalize_theta(theta), color=color, stage_id=stage_id)

    def copy(self) -> "GaussianSet":
        return GaussianSet(
            mu=self.mu.copy(),
            log_scale=self.log_scale.copy(),
            theta=self.theta.copy(),
            color=self.color.copy(),
            stage_id=self.stage_id.copy(),
        )

    def select(self, index) -> "GaussianSet":
        return GaussianSet(
            mu=self.mu[index],
            log_scale=self.log_scale[index],
            theta=self.theta[index],
            color=self.color[index],
            stage_id=self.stage_id[index],
        )

    def allclose(self, other: "GaussianSet", atol: float = 0.0) -> bool:
        return (
            self.count == other.count
            and np.allclose(self.mu, other.mu, atol=atol, rtol=0.0)
            and np.allclose(self.log_scale, other.log_scale, atol=atol, rtol=0.0)
            and np.allclose(self.theta, other.theta, atol=atol, rtol=0.0)
            and np.allclose(self.color, other.color, atol=atol, rtol=0.0)
        )


def canonicalize_theta(theta):
    """Wrap a rotation angle (scalar or array) into [0, pi); ties at pi map to 0.

    The ellipse induced by (scales, theta) is unchanged because the rendered
    covariance has period pi in theta.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise InvalidParameterError("theta must be finite")
    wrapped = np.mod(theta, np.pi)
    # mod can return pi when theta is a tiny negative number; fold it to 0
    wrapped = np.where(wrapped >= np.pi, 0.0, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


def build_covariance(log_scale, theta: float) -> Covariance2D:
    """Covariance from rotation-scale factors: sigma = (R S)(R S)^T.

    R rotates by ``theta`` and S = diag(exp(log_scale)), so sigma is positive
    definite for every finite input.
    """
    log_scale = np.asarray(log_scale, dtype=np.float64).reshape(2)
    if not (np.all(np.isfinite(log_scale)) and np.isfinite(theta)):
        raise InvalidParameterError("covariance inputs must be finite")
    s1, s2 = np.exp(log_scale)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, -s], [s, c]])
    rs = rot @ np.diag([s1, s2])
    sigma = rs @ rs.T
    det = float(s1 * s1 * s2 * s2)
    inv_rs = rot @ np.diag([1.0 / (s1 * s1), 1.0 / (s2 * s2)])
    sigma_inv = inv_rs @ rot.T
    return Covariance2D(sigma=sigma, sigma_inv=sigma_inv, det=det)


def merge_sets(a: GaussianSet, b: GaussianSet) -> GaussianSet:
    """Concatenate two primitive collections, a's primitives first.

    Stage tags travel with their primitives, so accumulating per-stage
    increments keeps ``stage_id`` non-decreasing.
    """
    if a.count == 0:
        return b.copy()
    if b.count == 0:
        return a.copy()
    return GaussianSet(
        mu=np.concatenate([a.mu, b.mu]),
        log_scale=np.concatenate([a.log_scale, b.log_scale]),
        theta=np.concatenate([a.theta, b.theta]),
        color=np.concatenate([a.color, b.color]),
        stage_id=np.concatenate([a.stage_id, b.stage_id]),
    )


def validate_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidParameterError(f"expected (H, W, 3) image, got shape {image.shape}")
    return image


def bilinear_sample(image: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Sample an (H, W, C) image at continuous points ``xy`` (N, 2), edge-clamped."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    x = np.clip(np.asarray(xy)[:, 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(np.asarray(xy)[:, 1] - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(int)
    y0 = np.floor(y).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy
