"""Low-to-high frequency fitting of the angular similarity curve.

A two-layer tanh network is fit to ``1/2 + arcsin(t)/pi`` on a uniform grid
over [-1, 1]. The error spectrum is tracked per DFT bin (Hann window),
relative to the target's own magnitude in that bin.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .angular import AngularDomainError, exact_similarity
from .rng import SplitMix64
from .tensor import ConfigError

MAG_FLOOR = 1e-12


class DivergenceError(ArithmeticError):
    pass


def target_fn(t):
    """Exact angular similarity as a function of the cosine t."""
    return exact_similarity(t)


def linear_term_fn(t):
    t_arr = np.asarray(t, dtype=np.float64)
    if np.any(np.abs(t_arr) > 1.0):
        raise AngularDomainError("linear term needs |t| <= 1")
    out = 0.5 + t_arr / math.pi
    return float(out) if out.ndim == 0 else out


def uniform_grid(m: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, m)


WINDOWS = ("hann", "rect")


def window(name: str, m: int) -> np.ndarray:
    if name == "hann":
        return np.hanning(m)
    if name == "rect":
        return np.ones(m)
    raise ConfigError(f"unknown window {name!r}; expected one of {WINDOWS}")


def spectral_error(prediction: np.ndarray, target: np.ndarray, win: str = "hann") -> np.ndarray:
    """Per-bin |DFT(w*(pred-target))| / |DFT(w*target)| for window ``w``.

    Bins where the target magnitude is below 1e-12 report the absolute error.
    """
    w = window(win, len(target))
    err = np.abs(np.fft.rfft(w * (prediction - target)))
    ref = np.abs(np.fft.rfft(w * target))
    return np.where(ref >= MAG_FLOOR, err / np.maximum(ref, MAG_FLOOR), err)


@dataclass
class FrequencyTrajectory:
    steps: list[int] = field(default_factory=list)
    errors: list[np.ndarray] = field(default_factory=list)   # one row of bin errors per step

    def append(self, step: int, row: np.ndarray):
        self.steps.append(step)
        self.errors.append(np.asarray(row, dtype=np.float64))

    def as_array(self) -> np.ndarray:
        return np.vstack(self.errors) if self.errors else np.zeros((0, 0))

    @property
    def n_bins(self) -> int:
        return len(self.errors[0]) if self.errors else 0


@dataclass
class NetConfig:
    width: int = 64
    steps: int = 20000
    lr: float = 0.01
    grid_size: int = 256
    seed: int = 0
    log_every: int = 10
    window: str = "hann"
    input_scale: float = 3.0     # std of first-layer weights; inputs span [-1, 1]
    beta1: float = 0.9
    beta2: float = 0.999


@dataclass
class FitResult:
    losses: list[tuple[int, float]]
    trajectory: FrequencyTrajectory
    grid: np.ndarray
    prediction: np.ndarray

    @property
    def final_loss(self) -> float:
        return self.losses[-1][1]


class TwoLayerTanh:
    """x -> w2 . tanh(w1 x + b1) + b2 for scalar x.

    ``input_scale`` sets how sharp the hidden units are over [-1, 1]; at 1.0
    they are nearly linear there and the net starts almost free of
    high-frequency content.
    """

    def __init__(self, width: int, seed: int, input_scale: float = 3.0):
        rng = SplitMix64(seed)
        self.w1 = T.Parameter(rng.normal((1, width), scale=input_scale), name="w1")
        self.b1 = T.Parameter(rng.uniform(-1.0, 1.0, (width,)), name="b1")
        self.w2 = T.Parameter(rng.normal((width, 1), scale=1.0 / math.sqrt(width)), name="w2")
        self.b2 = T.Parameter(np.zeros(1), name="b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: T.Tensor) -> T.Tensor:
        h = T.tanh(T.add(T.matmul(x, self.w1), self.b1))
        return T.add(T.matmul(h, self.w2), self.b2)


def _adam(params, state, lr, b1, b2, step, eps=1e-8):
    for p, (m, v) in zip(params, state):
        g = p.grad
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**step)
        vhat = v / (1 - b2**step)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)
        p.zero_grad()


def fit_residual(cfg: NetConfig = NetConfig(), inject: Optional[np.ndarray] = None) -> FitResult:
    """Fit the network to the target curve with Adam, logging loss and error spectra.

    ``inject`` replaces the network prediction (used to test the estimator on
    a known curve); no training happens then.
    """
    m = cfg.grid_size
    if m < 64 or m & (m - 1):
        raise ConfigError(f"grid size must be a power of two >= 64, got {m}")
    grid = uniform_grid(m)
    target = target_fn(grid)
    x = T.Tensor(grid[:, None])
    y = T.Tensor(target[:, None])
    traj = FrequencyTrajectory()
    losses: list[tuple[int, float]] = []

    if inject is not None:
        pred = np.asarray(inject, dtype=np.float64)
        losses.append((0, float(np.mean((pred - target) ** 2))))
        traj.append(0, spectral_error(pred, target, cfg.window))
        return FitResult(losses, traj, grid, pred)

    net = TwoLayerTanh(cfg.width, cfg.seed, cfg.input_scale)
    params = net.parameters()
    state = [(np.zeros_like(p.data), np.zeros_like(p.data)) for p in params]
    pred = net(x).data[:, 0]
    for step in range(cfg.steps + 1):
        with T.Tape():
            out = net(x)
            diff = T.sub(out, y)
            loss = T.mean(T.mul(diff, diff))
            if step % cfg.log_every == 0 or step == cfg.steps:
                pred = out.data[:, 0].copy()
                losses.append((step, loss.item()))
                traj.append(step, spectral_error(pred, target, cfg.window))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"loss became {loss.item()} at step {step}")
            if step == cfg.steps:
                break
            T.backward(loss)
        _adam(params, state, cfg.lr, cfg.beta1, cfg.beta2, step + 1)
    return FitResult(losses, traj, grid, pred)


def convergence_steps(traj: FrequencyTrajectory, threshold: float) -> list[Optional[int]]:
    """First logged step at which each bin's error drops below ``threshold`` (None if never)."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    errs = traj.as_array()
    out: list[Optional[int]] = []
    for b in range(errs.shape[1] if errs.size else 0):
        hits = np.nonzero(errs[:, b] < threshold)[0]
        out.append(traj.steps[hits[0]] if hits.size else None)
    return out


def median_step(steps: Sequence[Optional[int]]) -> float:
    """Median with "never" ranked after every finite step."""
    vals = sorted(math.inf if s is None else float(s) for s in steps)
    n = len(vals)
    if n == 0:
        return math.nan
    mid = n // 2
    if n % 2:
        return vals[mid]
    lo, hi = vals[mid - 1], vals[mid]
    return hi if math.isinf(hi) else (lo + hi) / 2


def low_before_high(traj: FrequencyTrajectory, threshold: float = 0.1,
                    low: Sequence[int] = (1, 2), high: Sequence[int] = tuple(range(8, 13))) -> bool:
    steps = convergence_steps(traj, threshold)
    return median_step([steps[b] for b in low]) < median_step([steps[b] for b in high])


def truncated_spectral_error(order: int, grid_size: int = 256, win: str = "hann") -> np.ndarray:
    """Error spectrum of the K-term series truncation against the exact curve."""
    from .angular import truncated_similarity

    grid = uniform_grid(grid_size)
    return spectral_error(truncated_similarity(grid, order), target_fn(grid), win)


def write_loss_csv(result: FitResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for step, loss in result.losses:
            w.writerow([step, f"{loss:.10e}"])


def write_spectrum_csv(result: FitResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "bin", "rel_error"])
        for step, row in zip(result.trajectory.steps, result.trajectory.errors):
            for b, e in enumerate(row):
                w.writerow([step, b, f"{e:.10e}"])
