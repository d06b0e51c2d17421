"""Angular kernel: spectral angle, similarity, feature distance and its arcsin series.

For unit vectors with inner product ``t`` the similarity ``1 - theta/pi``
equals ``1/2 + arcsin(t)/pi``, which expands as

    1/2 + t/pi + (1/pi) * sum_{k>=1} alpha_k * t**(2k+1)
    alpha_k = (2k)! / (4**k * (k!)**2 * (2k+1))

The first two terms are what linear-angular attention keeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

TAIL_EXPLICIT_TERMS = 64
ENDPOINT_MARGIN = 1e-6
# covers float64 evaluation error of both similarity values (each is O(1))
ROUNDING_SLACK = 4 * np.finfo(np.float64).eps


class AngularDomainError(ValueError):
    pass


def _unit_pair(x, y):
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise AngularDomainError("spectral angle is undefined for a zero vector")
    return x / nx, y / ny


def spectral_angle(x, y) -> float:
    """Angle in [0, pi] between two nonzero vectors.

    Uses 2*atan2(|x^ - y^|, |x^ + y^|) rather than acos of the cosine, which
    loses half the digits near 0 and pi; identical directions give exactly 0.
    """
    u, v = _unit_pair(x, y)
    return 2.0 * math.atan2(float(np.linalg.norm(u - v)), float(np.linalg.norm(u + v)))


def angular_similarity(q, k) -> float:
    return 1.0 - spectral_angle(q, k) / math.pi


def feature_distance(x, y) -> float:
    """Squared distance between the implicit unit-sphere features; lies in [0, 2]."""
    return 2.0 / math.pi * spectral_angle(x, y)


@lru_cache(maxsize=None)
def _coefficients(n: int) -> tuple[float, ...]:
    # alpha_k = alpha_{k-1} * (2k-1)^2 / (2k (2k+1)), alpha_0 = 1
    out, a = [], 1.0
    for k in range(1, n + 1):
        a *= (2 * k - 1) ** 2 / (2 * k * (2 * k + 1))
        out.append(a)
    return tuple(out)


def arcsin_coefficient(k: int) -> float:
    if k < 1:
        raise AngularDomainError(f"series coefficients start at k=1, got {k}")
    return _coefficients(k)[k - 1]


@dataclass(frozen=True)
class SeriesTruncation:
    """Keep ``order`` residual terms beyond the linear one."""

    order: int
    coefficients: tuple[float, ...] = field(init=False)

    def __post_init__(self):
        if self.order < 0:
            raise AngularDomainError(f"truncation order must be >= 0, got {self.order}")
        object.__setattr__(self, "coefficients", _coefficients(self.order) if self.order else ())


def truncated_similarity(t, trunc: SeriesTruncation | int):
    """Linear-angular terms plus ``trunc.order`` residual terms, evaluated at ``t``."""
    if isinstance(trunc, int):
        trunc = SeriesTruncation(trunc)
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(np.abs(t_arr) > 1.0):
        raise AngularDomainError("truncated similarity needs |t| <= 1")
    acc = np.zeros_like(t_arr)
    power = t_arr.copy()
    t2 = t_arr * t_arr
    for a in trunc.coefficients:
        power = power * t2
        acc = acc + a * power
    out = 0.5 + t_arr / math.pi + acc / math.pi
    return float(out) if out.ndim == 0 else out


def residual_tail_bound(t, order: int):
    """Certified upper bound on |exact similarity - truncated_similarity(t, order)|.

    Sums the next 64 terms explicitly, then majorises the rest with a geometric
    series of ratio t**2 (coefficients are decreasing). A few ulps are added
    for t != 0 so the bound also holds for the float64 values actually computed.
    """
    t_arr = np.abs(np.asarray(t, dtype=np.float64))
    if np.any(t_arr > 1.0 - ENDPOINT_MARGIN):
        raise AngularDomainError("tail bound is only certified for |t| <= 1 - 1e-6")
    last = order + TAIL_EXPLICIT_TERMS
    coeffs = _coefficients(last + 1)
    t2 = t_arr * t_arr
    power = t_arr ** (2 * order + 1)
    acc = np.zeros_like(t_arr)
    for k in range(order + 1, last + 1):
        power = power * t2
        acc = acc + coeffs[k - 1] * power
    # remaining k > last: alpha_k <= alpha_{last+1}, powers form a geometric series
    acc = acc + coeffs[last] * power * t2 / (1.0 - t2)
    out = acc / math.pi + np.where(t_arr > 0, ROUNDING_SLACK, 0.0)
    return float(out) if out.ndim == 0 else out


def exact_similarity(t):
    """``1/2 + arcsin(t)/pi`` for cosine values t in [-1, 1]."""
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(np.abs(t_arr) > 1.0):
        raise AngularDomainError("exact similarity needs |t| <= 1")
    out = 0.5 + np.arcsin(t_arr) / math.pi
    return float(out) if out.ndim == 0 else out
