"""Central finite-difference gradient checks for tape-recorded functions."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T

FD_STEP = 1e-5
ABS_FLOOR = 1e-8


def _projected(fn, tensors, weights) -> float:
    return float((fn(*tensors).data * weights).sum())


def numerical_gradients(fn: Callable, arrays: Sequence[np.ndarray], weights: np.ndarray,
                        h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of ``sum(weights * fn(*arrays))`` w.r.t. every input entry."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = _projected(fn, [T.Tensor(x) for x in arrays], weights)
            flat[i] = orig - h
            fm = _projected(fn, [T.Tensor(x) for x in arrays], weights)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def analytic_gradients(fn: Callable, arrays: Sequence[np.ndarray],
                       weights: np.ndarray) -> list[np.ndarray]:
    params = [T.Parameter(np.array(a, dtype=np.float64)) for a in arrays]
    with T.Tape():
        out = fn(*params)
        loss = T.sum(T.mul(out, T.Tensor(weights)))
        T.backward(loss)
    return [p.grad for p in params]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ABS_FLOOR) -> float:
    """Max-abs discrepancy scaled by the larger gradient's max-abs (never below ``floor``)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check(fn: Callable, arrays: Sequence[np.ndarray], rng=None, h: float = FD_STEP) -> float:
    """Worst relative error over all inputs of ``fn`` under a random output projection."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    out_shape = fn(*[T.Tensor(a) for a in arrays]).shape
    if rng is None:
        weights = np.ones(out_shape)
    else:
        weights = rng.uniform(-1.0, 1.0, out_shape)
    ana = analytic_gradients(fn, arrays, weights)
    num = numerical_gradients(fn, arrays, weights, h=h)
    return max((relative_error(a, n) for a, n in zip(ana, num)), default=0.0)
