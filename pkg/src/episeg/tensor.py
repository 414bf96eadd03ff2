"""Dense float64 tensors with a reverse-mode gradient tape.

Ops record onto the tape that is active on the calling thread (see :class:`Tape`).
With no active tape, ops run forward only, which is what inference paths use.
"""

from __future__ import annotations

import math
import threading
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # a float sum is finite only if every term is
    if not math.isfinite(arr.sum()):
        raise NonFiniteError(f"{op}: non-finite value in output")
    return arr


class Tensor:
    """n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @classmethod
    def _from_op(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = np.zeros_like(arr) if requires_grad else None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0.0)

    def detach(self) -> "Tensor":
        return Tensor._from_op(self.data, False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, Tensor(-1.0))

    def __getitem__(self, index):
        return getitem(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


@dataclass
class Tape:
    """Ordered record of differentiable ops.

    Use as a context manager; nodes are appended in execution order, so
    inputs always precede the ops that consume them.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, node: Node) -> None:
        self.nodes.append(node)

    def __len__(self) -> int:
        return len(self.nodes)


class no_tape:
    """Temporarily suspend recording on this thread."""

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.saved = list(_local.stack)
        _local.stack.clear()
        return self

    def __exit__(self, *exc):
        _local.stack[:] = _local.saved


def _make(op: str, arr: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(arr, op)
    tape = _active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._from_op(arr, track)
    if track:
        tape.record(Node(inputs, out, backward, op))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every tracked tensor that ``loss`` depends on.

    Gradients add into existing buffers; callers zero them explicitly.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise TapeError("backward: loss does not require grad")
    ids = {id(n.out): i for i, n in enumerate(tape.nodes)}
    if id(loss) not in ids:
        raise TapeError("backward: loss was not recorded on this tape")
    loss.grad += 1.0
    live = {id(loss)}
    for node in reversed(tape.nodes[: ids[id(loss)] + 1]):
        if id(node.out) not in live:
            continue
        grads = node.backward(node.out.grad)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp.grad += g
            live.add(id(inp))


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from exc


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "add")
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "sub")
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check(a, b, "mul")
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def relu(x: Tensor) -> Tensor:
    return _make("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tensor_sum(x: Tensor) -> Tensor:
    return _make("sum", np.array(x.data.sum()), (x,),
                 lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make("mean", np.array(x.data.mean()), (x,),
                 lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        arr = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from exc
    return _make("reshape", arr, (x,), lambda g: (g.reshape(x.shape),))


def getitem(x: Tensor, index) -> Tensor:
    arr = np.array(x.data[index])

    def bw(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", arr, (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    arrs = [t.data for t in tensors]
    try:
        out = np.concatenate(arrs, axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    cuts = np.cumsum([a.shape[axis] for a in arrs])[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", out, tuple(tensors), bw)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    if x.ndim != 1 or W.ndim != 2 or W.shape[1] != x.shape[0] or b.shape != (W.shape[0],):
        raise ShapeError(f"linear: x{x.shape} W{W.shape} b{b.shape}")
    return _make("linear", W.data @ x.data + b.data, (x, W, b),
                 lambda g: (W.data.T @ g, np.outer(g, x.data), g))


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """[C, Hp, Wp] -> [C*kh*kw, Ho*Wo] with rows ordered (c, i, j) like the kernel."""
    C = xp.shape[0]
    cols = np.empty((C, kh, kw, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride]
    return cols.reshape(C * kh * kw, Ho * Wo)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    C, H, W = x.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    return xp


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Single-image 2-D cross-correlation: [C_in,H,W] -> [C_out,H',W']."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise ShapeError(f"conv2d: input {x.shape} vs kernel {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} for {cout} output channels")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d: stride must be >= 1 and pad >= 0")
    _, H, W = x.shape
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H}x{W}+{pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    xp = _pad(x.data, pad)
    cols = _im2col(xp, kh, kw, stride, Ho, Wo)
    K = kernel.data.reshape(cout, -1)
    out = (K @ cols).reshape(cout, Ho, Wo) + bias.data[:, None, None]

    def bw(g):
        g2 = g.reshape(cout, -1)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gb = g2.sum(axis=1)
        gx = None
        if x.requires_grad:
            gcols = (K.T @ g2).reshape(cin, kh, kw, Ho, Wo)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            gx = gxp[:, pad : pad + H, pad : pad + W] if pad else gxp
        return gx, gk, gb

    return _make("conv2d", out, (x, kernel, bias), bw)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; odd trailing rows/columns are dropped.

    Ties send the gradient to the first maximal element in row-major order.
    """
    if x.ndim != 3:
        raise ShapeError(f"maxpool2: expected [C,H,W], got {x.shape}")
    C, H, W = x.shape
    h, w = H // 2, W // 2
    if h == 0 or w == 0:
        raise ShapeError(f"maxpool2: input {x.shape} too small")
    quads = [x.data[:, di : 2 * h : 2, dj : 2 * w : 2] for di in (0, 1) for dj in (0, 1)]
    out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))

    def bw(g):
        gx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        for (di, dj), q in zip(((0, 0), (0, 1), (1, 0), (1, 1)), quads):
            hit = (q == out) & ~taken
            taken |= hit
            gx[:, di : 2 * h : 2, dj : 2 * w : 2] = g * hit
        return (gx,)

    return _make("maxpool2", out, (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"global_avg_pool: expected [C,H,W], got {x.shape}")
    C, H, W = x.shape
    return _make("global_avg_pool", x.data.mean(axis=(1, 2)), (x,),
                 lambda g: (np.broadcast_to(g[:, None, None] / (H * W), x.shape).copy(),))


@lru_cache(maxsize=64)
def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape [n_out, n_in]."""
    R = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        R[:, 0] = 1.0
    else:
        for i in range(n_out):
            src = i * (n_in - 1) / (n_out - 1)
            i0 = min(int(np.floor(src)), n_in - 1)
            frac = src - i0
            R[i, i0] += 1.0 - frac
            if frac > 0:
                R[i, i0 + 1] += frac
    R.setflags(write=False)
    return R


def bilinear_upsample(x: Tensor, H: int, W: int) -> Tensor:
    if x.ndim != 3:
        raise ShapeError(f"bilinear_upsample: expected [C,h,w], got {x.shape}")
    _, h, w = x.shape
    if H < h or W < w:
        raise ShapeError(f"bilinear_upsample: cannot downsample {h}x{w} to {H}x{W}")
    Ry, Rx = interp_matrix(h, H), interp_matrix(w, W)
    out = Ry @ x.data @ Rx.T
    return _make("bilinear_upsample", out, (x,), lambda g: (Ry.T @ g @ Rx,))


def signed_gather(x: Tensor, index: np.ndarray, sign: np.ndarray) -> Tensor:
    """out[i] = x[index[i]] * sign[i]; the backward pass scatters through ``index``."""
    if x.ndim != 1:
        raise ShapeError(f"signed_gather: expected vector, got {x.shape}")
    if index.shape != sign.shape:
        raise ShapeError("signed_gather: index/sign length mismatch")
    if index.size and (index.min() < 0 or index.max() >= x.shape[0]):
        raise ShapeError("signed_gather: index out of range")
    m = x.shape[0]
    return _make("signed_gather", x.data[index] * sign, (x,),
                 lambda g: (np.bincount(index, weights=g * sign, minlength=m),))


def pixel_logits(F: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1x1 convolution of a [D,h,w] volume with a single filter: w.F[:,m,n] + b."""
    if F.ndim != 3 or w.shape != (F.shape[0],) or b.data.size != 1:
        raise ShapeError(f"pixel_logits: F{F.shape} w{w.shape} b{b.shape}")
    out = np.tensordot(w.data, F.data, axes=1) + b.data.reshape(())

    def bw(g):
        return (w.data[:, None, None] * g[None], np.tensordot(F.data, g, axes=([1, 2], [0, 1])),
                np.full(b.shape, g.sum()))

    return _make("pixel_logits", out, (F, w, b), bw)


def pixels(F: Tensor, index: np.ndarray) -> Tensor:
    """Gather feature vectors of a [C,h,w] volume at flat positions -> [len(index), C]."""
    if F.ndim != 3:
        raise ShapeError(f"pixels: expected [C,h,w], got {F.shape}")
    C = F.shape[0]
    flat = F.data.reshape(C, -1)

    def bw(g):
        gf = np.zeros_like(flat)
        np.add.at(gf.T, index, g)
        return (gf.reshape(F.shape),)

    return _make("pixels", flat[:, index].T.copy(), (F,), bw)


def normalize_channels(F: Tensor, mu: np.ndarray, sd: np.ndarray) -> Tensor:
    """(F - mu) / sd per channel with constant statistics."""
    return _make("normalize_channels", (F.data - mu[:, None, None]) / sd[:, None, None], (F,),
                 lambda g: (g / sd[:, None, None],))


# ---------------------------------------------------------------------------
# losses


def bce_sum(p: Tensor, target: np.ndarray, eps: float = 1e-12) -> Tensor:
    """-sum(t log p + (1-t) log(1-p)) with p clamped to [eps, 1-eps]."""
    if p.shape != target.shape:
        raise ShapeError(f"bce_sum: prediction {p.shape} vs target {target.shape}")
    t = target.astype(np.float64)
    pc = np.clip(p.data, eps, 1.0 - eps)
    loss = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).sum()
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)

    def bw(g):
        return (g * np.where(inside, -(t / pc) + (1.0 - t) / (1.0 - pc), 0.0),)

    return _make("bce_sum", np.array(loss), (p,), bw)


def bce_with_logits_sum(z: Tensor, target: np.ndarray, weight: np.ndarray | None = None) -> Tensor:
    if z.shape != target.shape:
        raise ShapeError(f"bce_with_logits_sum: logits {z.shape} vs target {target.shape}")
    t = target.astype(np.float64)
    wt = np.ones_like(t) if weight is None else weight
    # log(1+exp(-|z|)) + max(z,0) - z t
    per = np.logaddexp(0.0, z.data) - z.data * t
    return _make("bce_with_logits_sum", np.array((wt * per).sum()), (z,),
                 lambda g: (g * wt * (_sigmoid(z.data) - t),))


def softmax_cross_entropy_sum(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Pixelwise softmax cross-entropy for [C,h,w] logits and integer [h,w] labels."""
    if logits.ndim != 3 or logits.shape[1:] != labels.shape:
        raise ShapeError(f"softmax_cross_entropy_sum: logits {logits.shape} vs labels {labels.shape}")
    C = logits.shape[0]
    if labels.min() < 0 or labels.max() >= C:
        raise ShapeError("softmax_cross_entropy_sum: label out of range")
    z = logits.data - logits.data.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    onehot = np.eye(C)[labels].transpose(2, 0, 1)
    loss = (lse - (z * onehot).sum(axis=0)).sum()
    prob = np.exp(z - lse)
    return _make("softmax_cross_entropy_sum", np.array(loss), (logits,),
                 lambda g: (g * (prob - onehot),))


def weighted_l1_logits(a: Tensor, b: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Pairwise logits sum_c weight_c |a[n,c] - b[m,c]| + bias, shape [N, M]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1] or weight.shape != (a.shape[1],):
        raise ShapeError(f"weighted_l1_logits: a{a.shape} b{b.shape} weight{weight.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    absd = np.abs(diff)
    out = absd @ weight.data + bias.data.reshape(())

    def bw(g):
        sg = np.sign(diff) * weight.data
        ga = np.einsum("nm,nmc->nc", g, sg)
        gb = -np.einsum("nm,nmc->mc", g, sg)
        gweight = np.einsum("nm,nmc->c", g, absd)
        return ga, gb, gweight, np.full(bias.shape, g.sum())

    return _make("weighted_l1_logits", out, (a, b, weight, bias), bw)
