"""Analytic multiply-accumulate counts for the attention variants.

One MAC is one multiply-accumulate. Softmax exponentials and divisions are
tallied separately in ``elementwise`` and never folded into MACs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import AttentionConfig, KernelKind


@dataclass
class FlopReport:
    kernel: KernelKind
    core: int
    dwconv: int = 0
    aux: int = 0
    normalizer: int = 0
    elementwise: int = 0
    breakdown: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.core + self.dwconv + self.aux + self.normalizer

    def as_row(self) -> dict:
        return {
            "kernel": self.kernel.value, "core_macs": self.core, "dwconv_macs": self.dwconv,
            "aux_macs": self.aux, "normalizer_macs": self.normalizer,
            "total_macs": self.total, "elementwise_ops": self.elementwise,
        }


def quadratic_core_macs(n_q: int, n_k: int, d: int, d_v: int) -> int:
    """Scores Q K^T plus aggregation A V."""
    return n_q * n_k * d + n_q * n_k * d_v


def linear_core_macs(n_q: int, n_k: int, d: int, d_v: int) -> int:
    """K^T V followed by Q (K^T V)."""
    return n_k * d * d_v + n_q * d * d_v


def flop_count(cfg: AttentionConfig, castled: bool = False) -> FlopReport:
    """Exact integer MACs for one attention head.

    ``castled=False`` is the training-time view (aux branch counted as a
    quadratic path when enabled); ``castled=True`` drops the aux branch.
    """
    nq, nk, d, dv = cfg.n_q, cfg.n_k, cfg.d, cfg.d_v
    kind = cfg.kernel
    breakdown = {}
    elementwise = 0
    normalizer = 0
    if kind.is_quadratic:
        breakdown["scores"] = nq * nk * d
        breakdown["aggregate"] = nq * nk * dv
        core = quadratic_core_macs(nq, nk, d, dv)
        elementwise += 2 * nq * nk           # exp (or arccos) and normalisation per entry
    else:
        breakdown["kv"] = nk * d * dv
        breakdown["q_kv"] = nq * d * dv
        core = linear_core_macs(nq, nk, d, dv)
        if kind is KernelKind.RELU_E or cfg.row_normalize:
            normalizer = nq * d
            elementwise += nq * dv
    dw = 0
    if cfg.use_dwconv:
        k = cfg.dw_kernel_size
        dw = nk * dv * (k * k if cfg.grid is not None else k)
    aux = 0
    if cfg.use_aux and not castled:
        aux = quadratic_core_macs(nq, nk, d, dv)
        elementwise += 3 * nq * nk           # exp, normalise, threshold
    return FlopReport(kind, core, dw, aux, normalizer, elementwise, breakdown)


def model_attention_macs(cfg: AttentionConfig, heads: int, castled: bool = True) -> int:
    """Attention MACs for a multi-head layer whose per-head shape is ``cfg``."""
    rep = flop_count(cfg, castled=castled)
    return heads * rep.total


def linear_beats_quadratic(n: int, d: int) -> bool:
    """Closed form: 2 N d^2 < 2 N^2 d exactly when N > d (square attention, d_v = d)."""
    return n > d
