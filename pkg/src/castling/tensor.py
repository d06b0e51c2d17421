"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one input requires a gradient. Outside a tape everything runs as plain
numpy with no bookkeeping, which is what inference and benchmarks use.

Shapes follow the "tokens on axis -2, channels on axis -1" convention.
Leading axes (batch, heads) broadcast through ``matmul`` and are carried
unchanged by the row-wise ops.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class ConfigError(ValueError):
    """An operation was configured with invalid hyper-parameters."""


class ContractError(RuntimeError):
    """A calling contract (e.g. scalar loss for backward) was violated."""


_TAPES: list["Tape"] = []


def current_tape() -> "Tape | None":
    return _TAPES[-1] if _TAPES else None


class Node:
    __slots__ = ("name", "inputs", "output", "backward_fn", "index")

    def __init__(self, name, inputs, output, backward_fn, index):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.index = index


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; :meth:`backward` walks the record in exact
    reverse execution order and accumulates into leaf gradients.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.backward_order: list[int] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, name, inputs, output, backward_fn):
        node = Node(name, inputs, output, backward_fn, len(self.nodes))
        self.nodes.append(node)
        output._node = node
        output._tape = self

    def backward(self, loss: "Tensor"):
        if loss.data.size != 1 or loss.ndim > 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not recorded on this tape")
        pending = {id(loss): np.ones_like(loss.data)}
        self.backward_order = []
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            self.backward_order.append(node.index)
            grads = node.backward_fn(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if inp._node is None:
                    inp._accumulate(gi)
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi


class Tensor:
    """Row-major float64 array plus autodiff bookkeeping."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g):
        g = np.asarray(g, dtype=np.float64).reshape(self.shape)
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={list(self.shape)}, data={np.array2string(self.data, precision=6)})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)


class Parameter(Tensor):
    """Trainable leaf tensor whose gradient is always materialised."""

    def __init__(self, data, requires_grad: bool = True, name: str = ""):
        super().__init__(data, requires_grad=requires_grad)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g):
        self.grad += np.asarray(g).reshape(self.shape)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={list(self.shape)})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def backward(loss: Tensor):
    """Populate ``grad`` on every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not recorded on a tape (no input requires grad)")
    loss._tape.backward(loss)


def _result(name, data, inputs, backward_fn) -> Tensor:
    out = Tensor(data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(name, inputs, out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result("mul", a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * out / b.data, b.shape)
        return ga, gb

    return _result("div", out, (a, b), bw)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _result("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _result("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v**3)
    th = np.tanh(inner)
    out = 0.5 * v * (1.0 + th)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * d_inner),)

    return _result("gelu", out, (x,), bw)


def pairwise_angular_similarity(u: Tensor, w: Tensor) -> Tensor:
    """``S[i, j] = 1 - angle(u_i, w_j)/pi`` over the last two axes.

    The angle is ``2*atan2(|u - w|, |u + w|)``, which for unit rows is exact
    at 0 and pi where ``arccos`` of a rounded cosine is not. The gradient is
    set to zero where either norm vanishes (identical or opposite rows).
    """
    diff = u.data[..., :, None, :] - w.data[..., None, :, :]
    summ = u.data[..., :, None, :] + w.data[..., None, :, :]
    a = np.sqrt((diff * diff).sum(axis=-1))
    b = np.sqrt((summ * summ).sum(axis=-1))
    out = 1.0 - 2.0 * np.arctan2(a, b) / math.pi

    def bw(g):
        ok = (a > 0) & (b > 0)
        a_s, b_s = np.where(ok, a, 1.0), np.where(ok, b, 1.0)
        scale = np.where(ok, -2.0 / math.pi * g / (a_s * a_s + b_s * b_s), 0.0)[..., None]
        da = diff / a_s[..., None]          # d|u-w|/du
        db = summ / b_s[..., None]          # d|u+w|/du
        gu = scale * (b_s[..., None] * da - a_s[..., None] * db)
        gw = scale * (-b_s[..., None] * da - a_s[..., None] * db)
        return (gu.sum(axis=-2), gw.sum(axis=-3))

    return _result("pairwise_angular_similarity", out, (u, w), bw)


# -- shape ------------------------------------------------------------------

def transpose(x: Tensor) -> Tensor:
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got shape {list(x.shape)}")
    return _result("transpose", np.ascontiguousarray(_swap(x.data)), (x,), lambda g: (_swap(g),))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def permute(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _result(
        "permute", np.ascontiguousarray(np.transpose(x.data, axes)), (x,),
        lambda g: (np.transpose(g, inv),),
    )


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra -----------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``a @ b`` over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul dimension mismatch: {list(a.shape)} x {list(b.shape)}"
        )

    def bw(g):
        ga = _unbroadcast(g @ _swap(b.data), a.shape)
        gb = _unbroadcast(_swap(a.data) @ g, b.shape)
        return ga, gb

    return _result("matmul", a.data @ b.data, (a, b), bw)


# -- row-wise normalisations ------------------------------------------------------

def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, max-subtracted."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    out = z

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _result("softmax_rows", out, (x,), bw)


def log_softmax_rows(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _result("log_softmax_rows", out, (x,), bw)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm; rows with norm < eps become zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    live = norm >= eps
    safe = np.where(live, norm, 1.0)
    out = np.where(live, x.data / safe, 0.0)

    def bw(g):
        proj = (g * out).sum(axis=-1, keepdims=True)
        return (np.where(live, (g - out * proj) / safe, 0.0),)

    return _result("l2_normalize_rows", out, (x,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def bw(g):
        gx_hat = g * gamma.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _result("layer_norm", out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits[B, C]``."""
    labels = np.asarray(labels, dtype=np.int64)
    lsm = log_softmax_rows(logits)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = -1.0 / len(labels)
    return sum(mul(lsm, Tensor(onehot)))


# -- token-axis operators ---------------------------------------------------------

def _check_odd(k: int):
    if k < 1 or k % 2 == 0:
        raise ConfigError(f"depthwise kernel size must be odd and positive, got {k}")


def dwconv1d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise 1-D cross-correlation along the token axis.

    ``x`` is ``[..., N, c]``, ``kernel`` is ``[c, k]``; zero padding keeps N.
    """
    c, k = kernel.shape
    _check_odd(k)
    if x.shape[-1] != c:
        raise ShapeError(f"dwconv1d channel mismatch: {list(x.shape)} vs kernel {list(kernel.shape)}")
    n = x.shape[-2]
    p = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    out = np.zeros(x.shape)
    for j in range(k):
        out += xp[..., j:j + n, :] * w[:, j]

    def bw(g):
        gp = np.zeros(xp.shape)
        gk = np.empty_like(w)
        for j in range(k):
            gp[..., j:j + n, :] += g * w[:, j]
            gk[:, j] = (g * xp[..., j:j + n, :]).reshape(-1, c).sum(axis=0)
        return gp[..., p:p + n, :], gk

    return _result("dwconv1d", out, (x, kernel), bw)


def dwconv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Depthwise 2-D cross-correlation over a ``[..., H, W, c]`` token grid."""
    c, k, k2 = kernel.shape
    if k != k2:
        raise ConfigError(f"dwconv2d needs a square kernel, got {list(kernel.shape)}")
    _check_odd(k)
    if x.ndim < 3 or x.shape[-1] != c:
        raise ShapeError(f"dwconv2d channel mismatch: {list(x.shape)} vs kernel {list(kernel.shape)}")
    h, wd = x.shape[-3], x.shape[-2]
    p = (k - 1) // 2
    pad = [(0, 0)] * (x.ndim - 3) + [(p, p), (p, p), (0, 0)]
    xp = np.pad(x.data, pad)
    w = kernel.data
    out = np.zeros(x.shape)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + h, j:j + wd, :] * w[:, i, j]

    def bw(g):
        gp = np.zeros(xp.shape)
        gk = np.empty_like(w)
        for i in range(k):
            for j in range(k):
                gp[..., i:i + h, j:j + wd, :] += g * w[:, i, j]
                gk[:, i, j] = (g * xp[..., i:i + h, j:j + wd, :]).reshape(-1, c).sum(axis=0)
        return gp[..., p:p + h, p:p + wd, :], gk

    return _result("dwconv2d", out, (x, kernel), bw)


def avg_pool_tokens(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping means along the token axis.

    A trailing partial window is averaged over the tokens it actually holds.
    """
    if stride < 1:
        raise ConfigError(f"pooling stride must be >= 1, got {stride}")
    n = x.shape[-2]
    starts = np.arange(0, n, stride)
    counts = np.minimum(stride, n - starts).astype(np.float64)
    sums = np.add.reduceat(x.data, starts, axis=-2)
    out = sums / counts[:, None]

    def bw(g):
        return (np.repeat(g / counts[:, None], counts.astype(np.int64), axis=-2),)

    return _result("avg_pool_tokens", out, (x,), bw)


# -- fixture I/O -------------------------------------------------------------------

def _sibling(path, suffix: str) -> Path:
    # appended rather than swapped, so dotted names like "l0.ln1.g" stay distinct
    path = Path(path)
    return path.parent / (path.name + suffix)


def save_tensor(t: Tensor | np.ndarray, path) -> None:
    """Write ``<path>.bin`` (little-endian float64) and ``<path>.json`` ({"shape": [...]})."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    _sibling(path, ".bin").write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    _sibling(path, ".json").write_text(json.dumps({"shape": list(arr.shape)}))


def load_tensor(path) -> Tensor:
    shape = json.loads(_sibling(path, ".json").read_text())["shape"]
    data = np.frombuffer(_sibling(path, ".bin").read_bytes(), dtype="<f8")
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeError(f"{path}: sidecar shape {shape} does not match {data.size} stored values")
    return Tensor(data.reshape(shape).astype(np.float64))
