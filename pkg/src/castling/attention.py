"""Attention variants: exact softmax, kernel linear attention, angular attention.

All functions take ``Q [..., N_q, d]``, ``K [..., N_k, d]`` and
``V [..., N_k, d_v]`` tensors; leading axes (batch, heads) pass through.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .angular import AngularDomainError
from .tensor import ConfigError, Tensor

SCHEMA_VERSION = 1
INV_PI = 1.0 / math.pi


class KernelKind(str, enum.Enum):
    EXACT_SOFTMAX = "exact_softmax"
    ANGULAR = "angular"
    LINEAR_ANGULAR = "linear_angular"
    RELU_S = "relu_s"
    RELU_E = "relu_e"
    COSINE = "cosine"

    @property
    def is_quadratic(self) -> bool:
        return self in (KernelKind.EXACT_SOFTMAX, KernelKind.ANGULAR)


class Mode(str, enum.Enum):
    LITERAL = "literal"      # 1/2 * V + Q(K^T V)/pi, as printed
    FAITHFUL = "faithful"    # 1/2 * 1(1^T V) + Q(K^T V)/pi, exact product with V


class ModeError(ValueError):
    pass


class DegenerateNormalizationError(ArithmeticError):
    pass


@dataclass
class AttentionConfig:
    n_q: int
    n_k: int
    d: int
    d_v: int
    kernel: KernelKind = KernelKind.LINEAR_ANGULAR
    mode: Mode = Mode.LITERAL
    use_dwconv: bool = False
    dw_kernel_size: int = 3
    use_aux: bool = False
    epsilon: float = 0.02
    normalize_qk: bool = True
    row_normalize: bool = False
    aux_renormalize: bool = False
    grid: Optional[tuple[int, int]] = None

    def __post_init__(self):
        self.kernel = KernelKind(self.kernel)
        self.mode = Mode(self.mode)
        if self.grid is not None:
            self.grid = tuple(int(g) for g in self.grid)

    def validate(self) -> "AttentionConfig":
        for name in ("n_q", "n_k", "d", "d_v"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if (self.kernel is KernelKind.LINEAR_ANGULAR and self.mode is Mode.LITERAL
                and self.n_q != self.n_k):
            raise ModeError(f"literal mode needs square attention, got N_q={self.n_q}, N_k={self.n_k}")
        if self.use_dwconv and (self.dw_kernel_size < 1 or self.dw_kernel_size % 2 == 0):
            raise ConfigError(f"DWConv kernel size must be odd, got {self.dw_kernel_size}")
        if self.grid is not None and self.grid[0] * self.grid[1] != self.n_k:
            raise ConfigError(f"grid {self.grid} does not hold {self.n_k} tokens")
        return self

    def to_dict(self) -> dict:
        out = asdict(self)
        out["kernel"] = self.kernel.value
        out["mode"] = self.mode.value
        out["grid"] = list(self.grid) if self.grid is not None else None
        return {"schema_version": SCHEMA_VERSION, **out}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "AttentionConfig":
        doc = dict(doc)
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported AttentionConfig schema_version {version}")
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown AttentionConfig fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "AttentionConfig":
        return cls.from_dict(json.loads(text))


class Pooling(str, enum.Enum):
    NONE = "none"
    PRE_Q = "pre_q"
    POST_Q = "post_q"


@dataclass
class BlockVariant:
    pooling: Pooling = Pooling.NONE
    residual_q: bool = False
    stride: int = 1

    def __post_init__(self):
        self.pooling = Pooling(self.pooling)

    def validate(self) -> "BlockVariant":
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        if self.residual_q and self.pooling is not Pooling.POST_Q:
            raise ConfigError("residual Q connection is only defined for post-Q pooling")
        return self


# -- cores ---------------------------------------------------------------------

def _check_qkv(Q: Tensor, K: Tensor, V: Tensor):
    if Q.shape[-1] != K.shape[-1] or K.shape[-2] != V.shape[-2]:
        raise T.ShapeError(
            f"attention shape mismatch: Q {list(Q.shape)}, K {list(K.shape)}, V {list(V.shape)}"
        )


def softmax_attention(Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V."""
    _check_qkv(Q, K, V)
    scores = T.mul(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(Q.shape[-1]))
    return T.matmul(T.softmax_rows(scores), V)


def _feature_map(phi: KernelKind, x: Tensor) -> Tensor:
    if phi in (KernelKind.RELU_S, KernelKind.RELU_E):
        return T.relu(x)
    if phi is KernelKind.COSINE:
        return T.l2_normalize_rows(x)
    raise ConfigError(f"{phi.value} is not a feature-map kernel")


def kernel_linear_attention(phi: KernelKind, Q: Tensor, K: Tensor, V: Tensor,
                            eps: float = 1e-6, stabilize: bool = False) -> Tensor:
    """phi(Q) (phi(K)^T V), divided by phi(Q) sum_j phi(K_j)^T for ReLU-E.

    With ``stabilize`` the ReLU-E denominator gets ``eps`` added instead of
    raising on degenerate rows (used inside trainable models).
    """
    phi = KernelKind(phi)
    _check_qkv(Q, K, V)
    fq, fk = _feature_map(phi, Q), _feature_map(phi, K)
    num = T.matmul(fq, T.matmul(T.transpose(fk), V))
    if phi is not KernelKind.RELU_E:
        return num
    ksum = T.sum(fk, axis=-2, keepdims=True)                # [..., 1, d]
    den = T.matmul(fq, T.transpose(ksum))                   # [..., N_q, 1]
    if stabilize:
        return T.div(num, T.add(den, eps))
    if den.data.min() < eps:
        raise DegenerateNormalizationError(
            f"ReLU-E row normaliser {den.data.min():.3e} is below {eps:g}"
        )
    return T.div(num, den)


def quadratic_angular_attention(Q: Tensor, K: Tensor, V: Tensor, normalize: bool = True) -> Tensor:
    """Explicit N_q x N_k angular similarity matrix times V (the O(N^2) oracle)."""
    _check_qkv(Q, K, V)
    if normalize:
        for name, x in (("Q", Q), ("K", K)):
            if np.any(np.linalg.norm(x.data, axis=-1) == 0.0):
                raise AngularDomainError(f"{name} has a zero row; its angle is undefined")
        Q, K = T.l2_normalize_rows(Q), T.l2_normalize_rows(K)
    sim = T.pairwise_angular_similarity(Q, K)
    return T.matmul(sim, V)


def linear_angular_core(Q: Tensor, K: Tensor, V: Tensor, mode: Mode = Mode.FAITHFUL,
                        normalize_qk: bool = True, row_normalize: bool = False) -> Tensor:
    """Linear-angular terms of the arcsin expansion applied to V in O(N).

    Zero rows of Q or K stay zero under normalisation, which makes their
    similarity to everything exactly 1/2.
    """
    _check_qkv(Q, K, V)
    mode = Mode(mode)
    n_q, n_k = Q.shape[-2], K.shape[-2]
    if mode is Mode.LITERAL and n_q != n_k:
        raise ModeError(f"literal mode needs N_q == N_k, got {n_q} and {n_k}")
    if normalize_qk:
        Q, K = T.l2_normalize_rows(Q), T.l2_normalize_rows(K)
    lin = T.mul(T.matmul(Q, T.matmul(T.transpose(K), V)), INV_PI)
    if mode is Mode.FAITHFUL:
        const = T.mul(T.sum(V, axis=-2, keepdims=True), 0.5)
    else:
        const = T.mul(V, 0.5)
    out = T.add(const, lin)
    if row_normalize:
        ksum = T.sum(K, axis=-2, keepdims=True)
        den = T.add(T.mul(T.matmul(Q, T.transpose(ksum)), INV_PI), 0.5 * n_k)
        out = T.div(out, den)
    return out


def masked_softmax_attention(Q: Tensor, K: Tensor, V: Tensor, epsilon: float,
                             normalize: bool = True, renormalize: bool = False,
                             return_values: bool = False):
    """Auxiliary branch: softmax(Q^ K^T) thresholded at ``> epsilon``, times V.

    Returns ``(output, mask)`` where ``mask`` is the 0/1 indicator of surviving
    entries; with ``return_values`` the surviving attention values are returned
    third. Gradients reach only the surviving entries.
    """
    if epsilon < 0:
        raise ConfigError(f"epsilon must be >= 0, got {epsilon}")
    _check_qkv(Q, K, V)
    if normalize:
        Q, K = T.l2_normalize_rows(Q), T.l2_normalize_rows(K)
    attn = T.softmax_rows(T.matmul(Q, T.transpose(K)))
    keep = (attn.data > epsilon).astype(np.float64)
    surviving = T.mul(attn, Tensor(keep))
    if renormalize:
        rowsum = surviving.data.sum(axis=-1, keepdims=True)
        surviving = T.div(surviving, Tensor(np.where(rowsum > 0, rowsum, 1.0)))
    out = T.matmul(surviving, V)
    mask = Tensor(keep)
    if return_values:
        return out, mask, surviving
    return out, mask


@dataclass
class AuxTrace:
    """Surviving auxiliary attention from one forward pass."""

    mask: Tensor
    values: Tensor

    @property
    def nonzeros(self) -> int:
        return int(self.mask.data.sum())

    @property
    def size(self) -> int:
        return int(self.mask.data.size)


def attention_core(cfg: AttentionConfig, Q: Tensor, K: Tensor, V: Tensor) -> Tensor:
    kind = cfg.kernel
    if kind is KernelKind.LINEAR_ANGULAR:
        return linear_angular_core(Q, K, V, cfg.mode, cfg.normalize_qk, cfg.row_normalize)
    if kind is KernelKind.EXACT_SOFTMAX:
        return softmax_attention(Q, K, V)
    if kind is KernelKind.ANGULAR:
        return quadratic_angular_attention(Q, K, V, normalize=cfg.normalize_qk)
    return kernel_linear_attention(kind, Q, K, V, stabilize=True)


def dwconv_tokens(V: Tensor, kernel: Tensor, grid: Optional[tuple[int, int]] = None) -> Tensor:
    """Depthwise conv over the token axis, or over the token grid when ``grid`` is set."""
    if grid is None:
        return T.dwconv1d(V, kernel)
    h, w = grid
    lead = V.shape[:-2]
    x = T.reshape(V, lead + (h, w, V.shape[-1]))
    return T.reshape(T.dwconv2d(x, kernel), V.shape)


def castling_attention(cfg: AttentionConfig, Q: Tensor, K: Tensor, V: Tensor,
                       dw_kernel: Optional[Tensor] = None, return_aux: bool = False):
    """Core attention plus the optional DWConv and masked-softmax branches.

    With ``return_aux`` returns ``(output, AuxTrace | None)``.
    """
    cfg.validate()
    out = attention_core(cfg, Q, K, V)
    if cfg.use_dwconv:
        if dw_kernel is None:
            raise ConfigError("use_dwconv is set but no DWConv kernel was given")
        out = T.add(out, dwconv_tokens(V, dw_kernel, cfg.grid))
    trace = None
    if cfg.use_aux:
        aux_out, mask, values = masked_softmax_attention(
            Q, K, V, cfg.epsilon, normalize=True, renormalize=cfg.aux_renormalize,
            return_values=True,
        )
        out = T.add(out, aux_out)
        trace = AuxTrace(mask, values)
    if return_aux:
        return out, trace
    return out


def init_dw_kernel(channels: int, k: int = 3, grid: bool = False, name: str = "dw") -> T.Parameter:
    """All-zero DWConv kernel, so the branch starts as a no-op."""
    shape = (channels, k, k) if grid else (channels, k)
    return T.Parameter(np.zeros(shape), name=name)


def delta_kernel(channels: int, k: int = 3, grid: bool = False) -> np.ndarray:
    """Kernel whose depthwise convolution is the identity."""
    c = (k - 1) // 2
    if grid:
        w = np.zeros((channels, k, k))
        w[:, c, c] = 1.0
    else:
        w = np.zeros((channels, k))
        w[:, c] = 1.0
    return w


# -- blocks ---------------------------------------------------------------------

def attention_block(variant: BlockVariant, X: Tensor, weights: dict,
                    cfg: Optional[AttentionConfig] = None) -> Tensor:
    """Single-head attention block with optional query downsampling.

    ``weights`` holds ``wq``, ``wk``, ``wv`` and optionally ``wo`` and ``dw``.
    PreQ pools X before the Q projection, PostQ pools the projected queries;
    ``residual_q`` adds the pooled queries to the output.
    """
    variant.validate()
    n = X.shape[-2]
    if variant.pooling is Pooling.PRE_Q:
        Q = T.matmul(T.avg_pool_tokens(X, variant.stride), weights["wq"])
    else:
        Q = T.matmul(X, weights["wq"])
        if variant.pooling is Pooling.POST_Q:
            Q = T.avg_pool_tokens(Q, variant.stride)
    K = T.matmul(X, weights["wk"])
    V = T.matmul(X, weights["wv"])
    if cfg is None:
        cfg = AttentionConfig(n_q=Q.shape[-2], n_k=n, d=Q.shape[-1], d_v=V.shape[-1],
                              mode=Mode.FAITHFUL)
    out = castling_attention(cfg, Q, K, V, weights.get("dw"))
    if "wo" in weights:
        out = T.matmul(out, weights["wo"])
    if variant.residual_q:
        out = T.add(out, Q)
    return out


@dataclass
class MLPParams:
    w1: T.Parameter
    b1: T.Parameter
    dw: T.Parameter
    w2: T.Parameter
    b2: T.Parameter

    def parameters(self) -> list[T.Parameter]:
        return [self.w1, self.b1, self.dw, self.w2, self.b2]


def init_mlp_params(dim: int, hidden_ratio: float, k: int, rng, grid: bool = False,
                    prefix: str = "mlp") -> MLPParams:
    hidden = max(1, int(round(dim * hidden_ratio)))
    return MLPParams(
        w1=T.Parameter(rng.normal((dim, hidden), scale=1.0 / math.sqrt(dim)), name=f"{prefix}.w1"),
        b1=T.Parameter(np.zeros(hidden), name=f"{prefix}.b1"),
        dw=T.Parameter(delta_kernel(hidden, k, grid), name=f"{prefix}.dw"),
        w2=T.Parameter(rng.normal((hidden, dim), scale=1.0 / math.sqrt(hidden)), name=f"{prefix}.w2"),
        b2=T.Parameter(np.zeros(dim), name=f"{prefix}.b2"),
    )


def mlp_branch(X: Tensor, params: MLPParams, grid: Optional[tuple[int, int]] = None,
               dwconv: bool = True) -> Tensor:
    """Linear -> (DWConv) -> GELU -> Linear, without the residual."""
    h = T.add(T.matmul(X, params.w1), params.b1)
    if dwconv:
        k = params.dw.shape[-1]
        if k % 2 == 0:
            raise ConfigError(f"DWConv kernel size must be odd, got {k}")
        h = dwconv_tokens(h, params.dw, grid)
    return T.add(T.matmul(T.gelu(h), params.w2), params.b2)


def mlp_dwconv_block(X: Tensor, params: MLPParams, grid: Optional[tuple[int, int]] = None) -> Tensor:
    """X + Linear(GELU(DWConv(Linear(X)))); the DWConv runs on the grid when one is given."""
    return T.add(X, mlp_branch(X, params, grid, dwconv=True))


def mlp_block(X: Tensor, params: MLPParams) -> Tensor:
    """Same block without the depthwise convolution."""
    return T.add(X, mlp_branch(X, params, dwconv=False))
