"""Measurement harness: wall-clock scaling, gradient checks, kernel comparison."""

from __future__ import annotations

import csv
import math
import statistics
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import gradcheck
from . import tensor as T
from .attention import (
    AttentionConfig,
    KernelKind,
    Mode,
    castling_attention,
    kernel_linear_attention,
    linear_angular_core,
    masked_softmax_attention,
    quadratic_angular_attention,
    softmax_attention,
)
from .flops import flop_count
from .rng import SplitMix64
from .tensor import ConfigError, Tensor

PER_OP_TOL = 1e-5
COMPOSED_TOL = 1e-4
MIN_RELIABLE_SECONDS = 1e-3


class TimerResolutionWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------- scaling


@dataclass
class ScalingRun:
    variant: str
    ns: list[int]
    d: int
    reps: int
    medians: list[float]
    slope: float
    intercept: float
    r2: float


def fit_loglog(ns: Sequence[float], times: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line through (log N, log t); returns (slope, intercept, R^2)."""
    x, y = np.log(np.asarray(ns, dtype=np.float64)), np.log(np.asarray(times, dtype=np.float64))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def median_time(fn: Callable[[], object], reps: int = 7, warmup: int = 1) -> float:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def _qkv(n: int, d: int, seed: int):
    rng = SplitMix64(seed)
    return (Tensor(rng.normal((n, d))) for _ in range(3))


def _softmax_case(n, d, seed):
    Q, K, V = _qkv(n, d, seed)
    return lambda: softmax_attention(Q, K, V)


def _linear_angular_case(n, d, seed):
    Q, K, V = _qkv(n, d, seed)
    return lambda: linear_angular_core(Q, K, V, mode=Mode.FAITHFUL)


def _constant_case(n, d, seed):
    work = SplitMix64(seed).normal((160, 160))
    return lambda: [work @ work for _ in range(8)]


BENCH_VARIANTS: dict[str, Callable] = {
    "exact_softmax": _softmax_case,
    "linear_angular": _linear_angular_case,
    "constant": _constant_case,
}


def _check_sweep(ns: Sequence[int]):
    if len(ns) < 4:
        raise ConfigError(f"need at least 4 token counts, got {len(ns)}")
    if min(ns) <= 0 or max(ns) < 16 * min(ns):
        raise ConfigError(f"token counts must span at least 16x, got {min(ns)}..{max(ns)}")


def scaling_benchmark(variants: Sequence[str], ns: Sequence[int], d: int = 32, reps: int = 7,
                      seed: int = 0, threads: int = 1) -> list[ScalingRun]:
    """Median wall time per (variant, N) with one warmup call, pinned to ``threads`` BLAS threads."""
    ns = sorted(int(n) for n in ns)
    _check_sweep(ns)
    unknown = [v for v in variants if v not in BENCH_VARIANTS]
    if unknown:
        raise ConfigError(f"unknown benchmark variants {unknown}; known {sorted(BENCH_VARIANTS)}")
    runs = []
    with threadpool_limits(limits=threads):
        for name in variants:
            medians = []
            for n in ns:
                fn = BENCH_VARIANTS[name](n, d, seed)
                medians.append(median_time(fn, reps))
                del fn
            fast = [n for n, t in zip(ns, medians) if t < MIN_RELIABLE_SECONDS]
            if fast:
                warnings.warn(f"{name}: medians below 1 ms at N={fast}; timer resolution may dominate",
                              TimerResolutionWarning, stacklevel=2)
            slope, intercept, r2 = fit_loglog(ns, medians)
            runs.append(ScalingRun(name, ns, d, reps, medians, slope, intercept, r2))
    return runs


def write_scaling_csv(runs: Sequence[ScalingRun], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "n", "d", "reps", "median_s", "slope", "r2"])
        for run in runs:
            for n, t in zip(run.ns, run.medians):
                w.writerow([run.variant, n, run.d, run.reps, f"{t:.6e}", f"{run.slope:.4f}", f"{run.r2:.4f}"])


# ---------------------------------------------------------- gradient suite


@dataclass
class GradCase:
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[SplitMix64], list[np.ndarray]]
    tol: float = PER_OP_TOL


@dataclass
class GradReport:
    worst: dict[str, float] = field(default_factory=dict)
    tolerances: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.worst.items() if not e < self.tolerances[n]]

    @property
    def passed(self) -> bool:
        return not self.failures

    def lines(self) -> list[str]:
        return [f"{'PASS' if self.worst[n] < self.tolerances[n] else 'FAIL'} {n} "
                f"max_rel_err={self.worst[n]:.3e} tol={self.tolerances[n]:.0e}" for n in self.worst]


def _normal(*shape):
    return lambda rng: rng.normal(shape)


def _inputs(*makers):
    return lambda rng: [m(rng) for m in makers]


def _away_from_zero(shape, low=0.5, high=2.0):
    def make(rng):
        mag = rng.uniform(low, high, shape)
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return mag * sign
    return make


def _positive(shape, low=0.5, high=2.0):
    return lambda rng: rng.uniform(low, high, shape)


def _labels_ce(logits):
    return T.cross_entropy(logits, np.array([0, 2, 1]))


def _composed(cfg: AttentionConfig):
    def fn(Q, K, V, dw):
        return castling_attention(cfg, Q, K, V, dw_kernel=dw)
    return fn


def default_cases() -> list[GradCase]:
    n, d = 5, 3
    block_cfg = AttentionConfig(n_q=n, n_k=n, d=d, d_v=d, kernel=KernelKind.LINEAR_ANGULAR,
                                mode=Mode.FAITHFUL, use_dwconv=True, use_aux=True, epsilon=0.15)
    literal_cfg = AttentionConfig(n_q=4, n_k=4, d=d, d_v=d, mode=Mode.LITERAL, use_dwconv=True,
                                  use_aux=True, epsilon=0.2, grid=(2, 2))
    ident = {
        "transpose": T.transpose,
        "exp": T.exp,
        "tanh": T.tanh,
        "gelu": T.gelu,
        "softmax_rows": T.softmax_rows,
        "log_softmax_rows": T.log_softmax_rows,
        "l2_normalize_rows": T.l2_normalize_rows,
    }
    cases = [GradCase(name, fn, _inputs(_normal(3, 4))) for name, fn in ident.items()]
    cases += [
        GradCase("add", T.add, _inputs(_normal(3, 4), _normal(4))),
        GradCase("sub", T.sub, _inputs(_normal(3, 4), _normal(3, 1))),
        GradCase("mul", T.mul, _inputs(_normal(3, 4), _normal(3, 4))),
        GradCase("div", T.div, _inputs(_normal(3, 4), _away_from_zero((3, 4)))),
        GradCase("log", T.log, _inputs(_positive((3, 4)))),
        GradCase("relu", T.relu, _inputs(_away_from_zero((3, 4), 0.1, 2.0))),
        GradCase("pairwise_angular_similarity", T.pairwise_angular_similarity,
                 _inputs(_normal(3, 4), _normal(2, 4))),
        GradCase("reshape", lambda x: T.reshape(x, (2, 6)), _inputs(_normal(3, 4))),
        GradCase("permute", lambda x: T.permute(x, (2, 0, 1)), _inputs(_normal(2, 3, 4))),
        GradCase("sum", lambda x: T.sum(x, axis=0), _inputs(_normal(3, 4))),
        GradCase("mean", lambda x: T.mean(x, axis=-1, keepdims=True), _inputs(_normal(3, 4))),
        GradCase("matmul", T.matmul, _inputs(_normal(2, 3, 4), _normal(4, 2))),
        GradCase("layer_norm", T.layer_norm, _inputs(_normal(3, 4), _normal(4), _normal(4))),
        GradCase("cross_entropy", _labels_ce, _inputs(_normal(3, 4))),
        GradCase("dwconv1d", T.dwconv1d, _inputs(_normal(6, 2), _normal(2, 3))),
        GradCase("dwconv2d", T.dwconv2d, _inputs(_normal(3, 4, 2), _normal(2, 3, 3))),
        GradCase("avg_pool_tokens", lambda x: T.avg_pool_tokens(x, 2), _inputs(_normal(5, 3))),
        GradCase("softmax_attention", softmax_attention, _inputs(_normal(n, d), _normal(n, d), _normal(n, d))),
        GradCase("quadratic_angular_attention", quadratic_angular_attention,
                 _inputs(_normal(n, d), _normal(n, d), _normal(n, d))),
        GradCase("linear_angular_core", linear_angular_core,
                 _inputs(_normal(n, d), _normal(6, d), _normal(6, d))),
        GradCase("kernel_linear_attention[relu_e]",
                 lambda q, k, v: kernel_linear_attention(KernelKind.RELU_E, q, k, v),
                 _inputs(_positive((n, d)), _positive((n, d)), _normal(n, d))),
        GradCase("kernel_linear_attention[cosine]",
                 lambda q, k, v: kernel_linear_attention(KernelKind.COSINE, q, k, v),
                 _inputs(_normal(n, d), _normal(n, d), _normal(n, d))),
        GradCase("masked_softmax_attention",
                 lambda q, k, v: masked_softmax_attention(q, k, v, 0.15)[0],
                 _inputs(_normal(n, d), _normal(n, d), _normal(n, d))),
        GradCase("castling_attention[faithful]", _composed(block_cfg),
                 _inputs(_normal(n, d), _normal(n, d), _normal(n, d), _normal(d, 3)), COMPOSED_TOL),
        GradCase("castling_attention[literal,grid]", _composed(literal_cfg),
                 _inputs(_normal(4, d), _normal(4, d), _normal(4, d), _normal(d, 3, 3)), COMPOSED_TOL),
    ]
    return cases


def grad_check_suite(seeds: int = 50, cases: Optional[Sequence[GradCase]] = None,
                     base_seed: int = 0) -> GradReport:
    """Finite-difference check of every case over ``seeds`` random draws.

    An empty case list passes vacuously.
    """
    cases = default_cases() if cases is None else list(cases)
    report = GradReport()
    for case in cases:
        worst = 0.0
        for s in range(seeds):
            rng = SplitMix64(base_seed * 1_000_003 + s)
            arrays = case.make_inputs(rng)
            err = gradcheck.check(case.fn, arrays, rng=rng)
            worst = max(worst, err) if math.isfinite(err) else math.inf
        report.worst[case.name] = worst
        report.tolerances[case.name] = case.tol
    return report


# -------------------------------------------------------- kernel compare


KERNEL_COLUMNS = ["kernel", "seed", "dataset_hash", "val_acc", "macs", "wall_time_s"]


def kernel_compare(base, kernels: Sequence[KernelKind]) -> list[dict]:
    """Train one toy model per kernel on a shared dataset and seed.

    ``base`` is a ``TrainConfig``; only its kernel field changes between rows.
    """
    from .data import generate_dataset
    from .flops import model_attention_macs
    from .train import train

    kernels = [KernelKind(k) for k in kernels]
    dataset = generate_dataset(base.num_samples, base.num_classes, base.image_size, seed=base.seed)
    rows = []
    for kind in kernels:
        cfg = base.replace(kernel=kind)
        t0 = time.perf_counter()
        result = train(cfg, dataset)
        elapsed = time.perf_counter() - t0
        acfg = cfg.attention_config()
        rows.append({
            "kernel": kind.value, "seed": cfg.seed, "dataset_hash": dataset.digest(),
            "val_acc": round(result.val_accuracy, 6),
            "macs": model_attention_macs(acfg, cfg.heads, castled=True) * cfg.depth,
            "wall_time_s": round(elapsed, 3),
        })
    return rows


def predicted_core_macs(cfg: AttentionConfig) -> int:
    return flop_count(cfg, castled=True).total
