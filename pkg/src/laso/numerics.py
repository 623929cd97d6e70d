"""Dense float64 tensors and the differentiable primitives every layer is built from.

Gradients are reverse-mode: while a :class:`Tape` is active, each primitive
whose inputs require gradients appends one record holding a closure that maps
the output cotangent to input cotangents. ``Tape.backward`` replays the
records in reverse execution order.

Outside a tape nothing is recorded, which is the inference fast path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


class TooShortError(ValueError):
    def __init__(self, length: int, minimum: int):
        super().__init__(f"input has {length} frames, at least {minimum} required")
        self.length = length
        self.minimum = minimum


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_produced")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._produced = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A trainable leaf. ``grad`` always has the shape of ``data``."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=DTYPE), requires_grad=True)
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the ``with`` block
    are recorded on the innermost active tape.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> list[str]:
        """Accumulate d(loss)/d(leaf) into every leaf's ``grad``.

        Returns the op names in the order they were visited.
        """
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward from non-scalar of shape {loss.shape} needs a seed")
            seed = np.ones_like(loss.data)
        cotangents: dict[int, np.ndarray] = {id(loss): np.asarray(seed, dtype=DTYPE)}
        visited = []
        for rec in reversed(self.records):
            g = cotangents.pop(id(rec.output), None)
            visited.append(rec.op)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.vjp(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._produced:
                    key = id(t)
                    prev = cotangents.get(key)
                    cotangents[key] = gi if prev is None else prev + gi
                elif t.grad is None:
                    t.grad = np.array(gi, dtype=DTYPE)
                else:
                    t.grad += gi
        return visited


def emit(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    res = Tensor(out)
    if _TAPES and any(t.requires_grad for t in inputs):
        res.requires_grad = True
        res._produced = True
        _TAPES[-1].records.append(Record(op, inputs, res, vjp))
    return res


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Linear algebra and elementwise arithmetic
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    if bd.ndim == 2:
        # activations times a weight matrix: one GEMM over all leading rows
        k, n = bd.shape
        a2 = ad.reshape(-1, k)
        out = (a2 @ bd).reshape(ad.shape[:-1] + (n,))

        def vjp(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return emit("matmul", out, (a, b), vjp)

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return emit("matmul", ad @ bd, (a, b), vjp)


def head_projection(x: Tensor, w: Tensor) -> Tensor:
    """Per-head projections: [..., T, D] with [H, D, Dk] -> [..., H, T, Dk].

    Head i is ``x @ w[i]``; all heads are computed in one GEMM.
    """
    h, d, dk = w.shape
    if x.shape[-1] != d:
        raise DimensionError(f"head_projection shape mismatch: {x.shape} with {w.shape}")
    lead, t = x.shape[:-2], x.shape[-2]
    x2 = x.data.reshape(-1, d)
    wcat = np.swapaxes(w.data, 0, 1).reshape(d, h * dk)
    out = np.swapaxes((x2 @ wcat).reshape(lead + (t, h, dk)), -2, -3)

    def vjp(g):
        g2 = np.swapaxes(g, -2, -3).reshape(-1, h * dk)
        gx = (g2 @ wcat.T).reshape(x.shape) if x.requires_grad else None
        gw = np.swapaxes((x2.T @ g2).reshape(d, h, dk), 0, 1) if w.requires_grad else None
        return gx, gw

    return emit("head_projection", out, (x, w), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return emit("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def vjp(g):
        return unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)

    return emit("mul", ad * bd, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    return emit("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return emit("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half of the last axis times sigmoid of the second half."""
    d2 = x.shape[-1]
    if d2 % 2:
        raise DimensionError(f"glu needs an even last extent, got {d2}")
    a, b = x.data[..., : d2 // 2], x.data[..., d2 // 2 :]
    s = _sigmoid(b)

    def vjp(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return emit("glu", a * s, (x,), vjp)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return emit("softmax", s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm over last extent {d} got gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dxhat = g * gd
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return emit("layer_norm", xhat * gd + bias.data, (x, gain, bias), vjp)


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value`` (no gradient there)."""
    keep = np.asarray(keep, dtype=bool)
    return emit(
        "masked_fill",
        np.where(keep, x.data, value),
        (x,),
        lambda g: (unbroadcast(np.where(keep, g, 0.0), x.shape),),
    )


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: Bernoulli keep-mask scaled by 1/(1-p)."""
    if p <= 0.0:
        return x
    m = (rng.random(x.shape) >= p) / (1.0 - p)
    return emit("dropout", x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose_2d(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    return emit("transpose", np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def concat_last_dim(xs: Sequence[Tensor]) -> Tensor:
    sizes = np.cumsum([t.shape[-1] for t in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=-1))

    return emit("concat", np.concatenate([t.data for t in xs], axis=-1), tuple(xs), vjp)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, D] -> [..., H, T, D/H]; head i holds columns i*D/H .. (i+1)*D/H - 1."""
    *lead, t, d = x.shape
    if d % n_heads:
        raise ConfigurationError(f"d_model {d} not divisible by n_heads {n_heads}")
    dk = d // n_heads
    out = np.swapaxes(x.data.reshape(*lead, t, n_heads, dk), -2, -3)

    def vjp(g):
        return (np.swapaxes(g, -2, -3).reshape(*lead, t, d),)

    return emit("split_heads", out, (x,), vjp)


def merge_heads(x: Tensor) -> Tensor:
    """[..., H, T, Dk] -> [..., T, H*Dk]; exact inverse of :func:`split_heads`."""
    *lead, h, t, dk = x.shape
    out = np.swapaxes(x.data, -2, -3).reshape(*lead, t, h * dk)

    def vjp(g):
        return (np.swapaxes(g.reshape(*lead, t, h, dk), -2, -3),)

    return emit("merge_heads", out, (x,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    v, d = table.shape

    def vjp(g):
        gt = np.zeros((v, d), dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return emit("embedding", table.data[ids], (table,), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


# ---------------------------------------------------------------------------
# Convolutional frontend
# ---------------------------------------------------------------------------


def conv_out_len(n: int, kernel: int = 3, stride: int = 2, pad: int = 1) -> int:
    return (n + 2 * pad - kernel) // stride + 1


def conv2d_s2(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 2 on both spatial axes, zero padding 1.

    Channels-last: ``x`` is [B, T, F, C_in], ``w`` is [3, 3, C_in, C_out],
    ``b`` is [C_out]; output is [B, T', F', C_out].
    """
    bsz, t, f, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if (kh, kw) != (3, 3) or wcin != cin:
        raise DimensionError(f"conv2d_s2 kernel {w.shape} does not fit input {x.shape}")
    to, fo = conv_out_len(t), conv_out_len(f)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    taps = [(slice(None), slice(i, i + 2 * to, 2), slice(j, j + 2 * fo, 2), slice(None)) for i in range(3) for j in range(3)]
    cols = np.concatenate([xp[sl] for sl in taps], axis=-1).reshape(-1, 9 * cin)
    w2 = w.data.reshape(9 * cin, cout)
    out = (cols @ w2 + b.data).reshape(bsz, to, fo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gcols = (g2 @ w2.T).reshape(bsz, to, fo, 9 * cin)
        gxp = np.zeros_like(xp)
        for k, sl in enumerate(taps):
            gxp[sl] += gcols[..., k * cin : (k + 1) * cin]
        gw = (cols.T @ g2).reshape(3, 3, cin, cout)
        return gxp[:, 1:-1, 1:-1, :], gw, g2.sum(axis=0)

    return emit("conv2d", out, (x, w, b), vjp)


# ---------------------------------------------------------------------------
# Positional encodings
# ---------------------------------------------------------------------------


def sinusoidal_pe(length: int, d_model: int) -> np.ndarray:
    """Row ``i - 1`` holds position ``i``: sin at even columns, cos at odd ones."""
    if d_model % 2:
        raise ConfigurationError(f"sinusoidal encodings need an even dimension, got {d_model}")
    pos = np.arange(1, length + 1, dtype=DTYPE)[:, None]
    freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=DTYPE) / d_model)
    pe = np.empty((length, d_model), dtype=DTYPE)
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


def pe_rotation(k: int, j: int, d_model: int) -> np.ndarray:
    """2x2 matrix mapping (pe[i, 2j], pe[i, 2j+1]) to (pe[i+k, 2j], pe[i+k, 2j+1])."""
    w = k * 10000.0 ** (-2 * j / d_model)
    c, s = math.cos(w), math.sin(w)
    return np.array([[c, s], [-s, c]])


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def xavier_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
