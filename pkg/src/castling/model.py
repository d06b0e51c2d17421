"""Tiny patch-token classifier built from the attention variants."""

from __future__ import annotations

import copy
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import (
    AttentionConfig,
    KernelKind,
    Mode,
    castling_attention,
    dwconv_tokens,
    init_dw_kernel,
    init_mlp_params,
    mlp_branch,
)
from .data import patchify
from .rng import SplitMix64
from .tensor import ConfigError, Parameter, Tensor


@dataclass
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 32
    depth: int = 2
    heads: int = 4
    num_classes: int = 4
    mlp_ratio: float = 2.0
    kernel: KernelKind = KernelKind.LINEAR_ANGULAR
    mode: Mode = Mode.LITERAL
    use_dwconv: bool = False
    dw_kernel_size: int = 3
    mlp_dwconv: bool = False
    use_aux: bool = False
    aux_renormalize: bool = False

    def __post_init__(self):
        self.kernel = KernelKind(self.kernel)
        self.mode = Mode(self.mode)
        if self.image_size % self.patch:
            raise ConfigError(f"patch {self.patch} does not divide image size {self.image_size}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch
        return (n, n)

    @property
    def tokens(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def attention_config(self, epsilon: float = 0.0) -> AttentionConfig:
        n = self.tokens
        return AttentionConfig(
            n_q=n, n_k=n, d=self.head_dim, d_v=self.head_dim, kernel=self.kernel,
            mode=self.mode, use_dwconv=False, dw_kernel_size=self.dw_kernel_size,
            use_aux=self.use_aux, epsilon=epsilon, aux_renormalize=self.aux_renormalize,
        )


@dataclass
class Layer:
    ln1_g: Parameter
    ln1_b: Parameter
    wq: Parameter
    wk: Parameter
    wv: Parameter
    wo: Parameter
    dw: Optional[Parameter]
    ln2_g: Parameter
    ln2_b: Parameter
    mlp: object

    def parameters(self) -> list[Parameter]:
        ps = [self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo]
        if self.dw is not None:
            ps.append(self.dw)
        return ps + [self.ln2_g, self.ln2_b] + self.mlp.parameters()


@dataclass
class ForwardResult:
    logits: Tensor
    traces: list = field(default_factory=list)   # one AuxTrace (or None) per layer


class TinyViT:
    """Patch embedding, ``depth`` pre-norm attention/MLP blocks, mean-pool head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = SplitMix64(seed)
        d, p2 = cfg.dim, cfg.patch * cfg.patch

        def lin(n_in, n_out, name):
            return Parameter(rng.normal((n_in, n_out), scale=1.0 / math.sqrt(n_in)), name=name)

        self.patch_w = lin(p2, d, "patch.w")
        self.patch_b = Parameter(np.zeros(d), name="patch.b")
        self.pos = Parameter(rng.normal((cfg.tokens, d), scale=0.1), name="pos")
        self.layers: list[Layer] = []
        for i in range(cfg.depth):
            self.layers.append(Layer(
                ln1_g=Parameter(np.ones(d), name=f"l{i}.ln1.g"),
                ln1_b=Parameter(np.zeros(d), name=f"l{i}.ln1.b"),
                wq=lin(d, d, f"l{i}.wq"), wk=lin(d, d, f"l{i}.wk"),
                wv=lin(d, d, f"l{i}.wv"), wo=lin(d, d, f"l{i}.wo"),
                dw=init_dw_kernel(d, cfg.dw_kernel_size, grid=True, name=f"l{i}.dw") if cfg.use_dwconv else None,
                ln2_g=Parameter(np.ones(d), name=f"l{i}.ln2.g"),
                ln2_b=Parameter(np.zeros(d), name=f"l{i}.ln2.b"),
                mlp=init_mlp_params(d, cfg.mlp_ratio, cfg.dw_kernel_size, rng, grid=True, prefix=f"l{i}.mlp"),
            ))
        self.head_g = Parameter(np.ones(d), name="head.ln.g")
        self.head_b = Parameter(np.zeros(d), name="head.ln.b")
        self.head_w = lin(d, cfg.num_classes, "head.w")
        self.head_bias = Parameter(np.zeros(cfg.num_classes), name="head.bias")

    def parameters(self) -> list[Parameter]:
        ps = [self.patch_w, self.patch_b, self.pos]
        for layer in self.layers:
            ps += layer.parameters()
        return ps + [self.head_g, self.head_b, self.head_w, self.head_bias]

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return T.permute(T.reshape(x, (b, n, self.cfg.heads, self.cfg.head_dim)), (0, 2, 1, 3))

    def _merge(self, x: Tensor) -> Tensor:
        b, h, n, dh = x.shape
        return T.reshape(T.permute(x, (0, 2, 1, 3)), (b, n, h * dh))

    def attention(self, layer: Layer, x: Tensor, epsilon: float):
        acfg = self.cfg.attention_config(epsilon)
        V = T.matmul(x, layer.wv)
        Q, K, Vh = self._split(T.matmul(x, layer.wq)), self._split(T.matmul(x, layer.wk)), self._split(V)
        out, trace = castling_attention(acfg, Q, K, Vh, return_aux=True)
        out = self._merge(out)
        if layer.dw is not None:
            out = T.add(out, dwconv_tokens(V, layer.dw, self.cfg.grid))
        return T.matmul(out, layer.wo), trace

    def forward(self, images: np.ndarray, epsilon: float = 0.0) -> ForwardResult:
        x = Tensor(patchify(np.asarray(images, dtype=np.float64), self.cfg.patch))
        x = T.add(T.add(T.matmul(x, self.patch_w), self.patch_b), self.pos)
        traces = []
        for layer in self.layers:
            a, trace = self.attention(layer, T.layer_norm(x, layer.ln1_g, layer.ln1_b), epsilon)
            x = T.add(x, a)
            h = T.layer_norm(x, layer.ln2_g, layer.ln2_b)
            x = T.add(x, mlp_branch(h, layer.mlp, self.cfg.grid, dwconv=self.cfg.mlp_dwconv))
            traces.append(trace)
        pooled = T.mean(T.layer_norm(x, self.head_g, self.head_b), axis=1)
        logits = T.add(T.matmul(pooled, self.head_w), self.head_bias)
        return ForwardResult(logits, traces)

    def __call__(self, images, epsilon: float = 0.0) -> ForwardResult:
        return self.forward(images, epsilon)

    def castled(self) -> "TinyViT":
        """Copy sharing no state, with the auxiliary branch switched off."""
        twin = copy.deepcopy(self)
        twin.cfg = dataclasses.replace(self.cfg, use_aux=False)
        return twin
