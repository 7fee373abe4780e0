"""Gyrovector operations on the Poincaré ball of curvature ``-c``.

Functions work on the last axis and broadcast over leading axes. They take
plain float64 arrays or :class:`hncr.autodiff.Tensor` values; in the latter
case the computation is recorded for differentiation.

``c = 0`` is accepted everywhere and gives the Euclidean limit of each
operation (for example ``distance`` becomes ``2 * |x - y|``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

EPS_BALL = 1e-5
# Floor for norms that appear only in denominators of zero-guarded branches.
MIN_NORM = 1e-15

__all__ = [
    "EPS_BALL",
    "BallPoint",
    "mobius_add",
    "mobius_scalar_mul",
    "mobius_matvec",
    "expmap",
    "logmap",
    "expmap0",
    "logmap0",
    "distance",
    "distance0",
    "conformal_factor",
    "project",
    "riemannian_rescale",
]


def _dim(x):
    return np.shape(ad.value_of(x))[-1] if np.ndim(ad.value_of(x)) else 0


def _check_dims(x, y):
    if _dim(x) != _dim(y):
        raise ValueError(f"dimension mismatch: {_dim(x)} vs {_dim(y)}")


def _is_zero(n):
    return ad.value_of(n) == 0


def _safe(n):
    return ad.clamp(n, MIN_NORM)


def _artanh(z):
    return ad.artanh(z, 1.0 - EPS_BALL)


def project(x, c=1.0):
    """Pull points back inside the ball so that ``sqrt(c)|x| <= 1 - EPS_BALL``."""
    if not isinstance(x, ad.Tensor):
        x = np.asarray(x, dtype=np.float64)
        if not np.all(np.isfinite(x)):
            raise ValueError("project: non-finite coordinates")
    if c == 0:
        return x
    maxnorm = (1.0 - EPS_BALL) / math.sqrt(c)
    n = ad.norm(x)
    # slack of a few ulps so a projected point is a fixed point of project
    outside = ad.value_of(n) > maxnorm * (1.0 + 1e-15)
    if not np.any(outside):
        return x
    return ad.where(outside, x / _safe(n) * maxnorm, x)


def conformal_factor(x, c=1.0):
    """``2 / (1 - c|x|^2)``, shape ``(..., 1)``."""
    x2 = ad.sum(ad.square(x), axis=-1, keepdims=True)
    return 2.0 / (1.0 - c * x2)


def mobius_add(x, y, c=1.0):
    _check_dims(x, y)
    xy = ad.sum(x * y, axis=-1, keepdims=True)
    x2 = ad.sum(ad.square(x), axis=-1, keepdims=True)
    y2 = ad.sum(ad.square(y), axis=-1, keepdims=True)
    num = (1.0 + 2.0 * c * xy + c * y2) * x + (1.0 - c * x2) * y
    den = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return project(num / ad.clamp(den, MIN_NORM), c)


def mobius_scalar_mul(r, x, c=1.0):
    if c == 0:
        return r * x
    sc = math.sqrt(c)
    n = ad.norm(x)
    scaled = ad.tanh(r * _artanh(sc * n)) * x / (_safe(n) * sc)
    return project(ad.where(_is_zero(n), 0.0 * x, scaled), c)


def mobius_matvec(m, x, c=1.0):
    """Möbius matrix-vector product ``M ⊗_c x`` for ``m`` of shape (out, in)."""
    if np.shape(ad.value_of(m))[-1] != _dim(x):
        raise ValueError(
            f"dimension mismatch: matrix takes {np.shape(ad.value_of(m))[-1]}, point has {_dim(x)}"
        )
    mx = ad.matvec(m, x)
    if c == 0:
        return mx
    sc = math.sqrt(c)
    xn = ad.norm(x)
    mxn = ad.norm(mx)
    ratio = mxn / _safe(xn)
    scaled = ad.tanh(ratio * _artanh(sc * xn)) * mx / (_safe(mxn) * sc)
    return project(ad.where(_is_zero(mxn) | _is_zero(xn), 0.0 * mx, scaled), c)


def expmap(x, v, c=1.0):
    """Exponential map at ``x`` applied to tangent vector ``v``."""
    _check_dims(x, v)
    if c == 0:
        return x + v
    sc = math.sqrt(c)
    vn = ad.norm(v)
    lam = conformal_factor(x, c)
    second = ad.tanh(sc * lam * vn / 2.0) * v / (_safe(vn) * sc)
    moved = mobius_add(x, second, c)
    return ad.where(_is_zero(vn), x + 0.0 * moved, moved)


def logmap(x, y, c=1.0):
    """Logarithmic map at ``x`` of point ``y``; ``logmap(x, x) = 0``."""
    _check_dims(x, y)
    if c == 0:
        return y - x
    sc = math.sqrt(c)
    sub = mobius_add(-x, y, c)
    n = ad.norm(sub)
    lam = conformal_factor(x, c)
    scaled = 2.0 / (sc * lam) * _artanh(sc * n) * sub / _safe(n)
    return ad.where(_is_zero(n), 0.0 * sub, scaled)


def expmap0(v, c=1.0):
    """Exponential map at the origin (conformal factor 2)."""
    if c == 0:
        return v
    sc = math.sqrt(c)
    vn = ad.norm(v)
    out = ad.tanh(sc * vn) * v / (_safe(vn) * sc)
    return project(ad.where(_is_zero(vn), 0.0 * v, out), c)


def logmap0(y, c=1.0):
    """Logarithmic map at the origin."""
    if c == 0:
        return y
    sc = math.sqrt(c)
    n = ad.norm(y)
    out = _artanh(sc * n) * y / (_safe(n) * sc)
    return ad.where(_is_zero(n), 0.0 * y, out)


def distance(x, y, c=1.0, keepdims=False):
    """Geodesic distance ``(2/sqrt(c)) artanh(sqrt(c) |-x ⊕ y|)``."""
    _check_dims(x, y)
    if c == 0:
        return 2.0 * ad.norm(y - x, keepdims=keepdims)
    sc = math.sqrt(c)
    n = ad.norm(mobius_add(-x, y, c), keepdims=keepdims)
    return 2.0 / sc * _artanh(sc * n)


def distance0(x, c=1.0, keepdims=False):
    """Distance from the origin."""
    n = ad.norm(x, keepdims=keepdims)
    if c == 0:
        return 2.0 * n
    sc = math.sqrt(c)
    return 2.0 / sc * _artanh(sc * n)


def riemannian_rescale(theta, grad, c=1.0):
    """Convert a Euclidean gradient at ``theta`` to the Riemannian one.

    Multiplies by the inverse metric ``(1 - c|theta|^2)^2 / 4``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    t2 = np.sum(theta * theta, axis=-1, keepdims=True)
    return ((1.0 - c * t2) ** 2 / 4.0) * np.asarray(grad, dtype=np.float64)


@dataclass(frozen=True)
class BallPoint:
    """A point of the ball tagged with its curvature.

    Thin checked wrapper around the functional API for callers that want
    dimension and curvature validation.
    """

    coords: np.ndarray
    c: float = 1.0

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if self.c < 0:
            raise ValueError("curvature must be non-negative")
        if not np.all(np.isfinite(coords)):
            raise ValueError("non-finite coordinates")
        if self.c > 0 and self.c * float(coords @ coords) >= 1.0:
            raise ValueError("point lies outside the ball")
        coords.setflags(write=False)
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return self.coords.shape[-1]

    def _same_space(self, other: "BallPoint"):
        if self.c != other.c:
            raise ValueError(f"curvature mismatch: {self.c} vs {other.c}")
        if self.dim != other.dim:
            raise ValueError(f"dimension mismatch: {self.dim} vs {other.dim}")

    def __add__(self, other: "BallPoint") -> "BallPoint":
        self._same_space(other)
        return BallPoint(mobius_add(self.coords, other.coords, self.c), self.c)

    def __neg__(self) -> "BallPoint":
        return BallPoint(-self.coords, self.c)

    def scale(self, r: float) -> "BallPoint":
        return BallPoint(mobius_scalar_mul(r, self.coords, self.c), self.c)

    def transform(self, m) -> "BallPoint":
        return BallPoint(mobius_matvec(np.asarray(m, dtype=np.float64), self.coords, self.c), self.c)

    def distance(self, other: "BallPoint") -> float:
        self._same_space(other)
        return float(distance(self.coords, other.coords, self.c))

    def exp(self, v) -> "BallPoint":
        return BallPoint(expmap(self.coords, np.asarray(v, dtype=np.float64), self.c), self.c)

    def log(self, other: "BallPoint") -> np.ndarray:
        self._same_space(other)
        return logmap(self.coords, other.coords, self.c)

    @property
    def conformal_factor(self) -> float:
        return float(conformal_factor(self.coords, self.c)[0])
