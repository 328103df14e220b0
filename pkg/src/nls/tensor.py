"""Reverse-mode automatic differentiation over numpy arrays.

The engine is define-by-run: every differentiable op appends a node to an
implicit tape (tensors carry a creation counter), and `backward` walks the
nodes reachable from the loss in exact reverse creation order. Graphs are
rebuilt per step; calling `backward` twice on the same loss tensor is an
error rather than a silent accumulation.

Conventions:
  * all data is float64; arrays handed to `Tensor` are treated as frozen
    (never mutated in place, not by the engine and not by callers),
  * parameter updates replace `tensor.data` with a fresh array instead of
    writing through it, so saved views inside live graphs stay valid,
  * gradients accumulate into `tensor.grad`; `zero_grad()` clears the slot.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand dimensions do not compose."""


class GraphError(RuntimeError):
    """Backward called on a non-scalar, or on an already-consumed graph."""


_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation / feature dumps)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Node:
    """Operation record: op kind, parent tensors, and the backward closure."""

    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op, parents, backward_fn):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "_gid", "_backward_ran")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._node: Node | None = None
        self._gid = next(_ids)
        self._backward_ran = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {list(self.shape)}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, requires_grad={self.requires_grad})"


def _tracks(t: Tensor) -> bool:
    return t.requires_grad or t._node is not None


def _result(op: str, parents: tuple[Tensor, ...], data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(_tracks(p) for p in parents):
        out.requires_grad = True
        out._node = Node(op, parents, backward_fn)
    return out


def collect_graph(root: Tensor) -> list[Node]:
    """All nodes reachable from `root`, in creation (topological) order."""
    seen: set[int] = set()
    nodes: list[tuple[int, Node]] = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        if t._node is not None:
            nodes.append((t._gid, t._node))
            stack.extend(t._node.parents)
    nodes.sort(key=lambda pair: pair[0])
    return [n for _, n in nodes]


def backward(loss: Tensor) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`.

    `loss` must be scalar. Visits tensors in exact reverse creation order,
    which is a valid reverse-topological order because inputs always precede
    the ops that consume them.
    """
    if loss.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {list(loss.shape)}")
    if loss._backward_ran:
        raise GraphError("backward already ran on this graph; build a fresh graph per step")
    loss._backward_ran = True

    reachable: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in reachable:
            continue
        reachable[id(t)] = t
        if t._node is not None:
            stack.extend(t._node.parents)

    order = sorted(reachable.values(), key=lambda t: t._gid, reverse=True)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.requires_grad:
            t.grad = g if t.grad is None else t.grad + g
        if t._node is None:
            continue
        parent_grads = t._node.backward_fn(g)
        for p, pg in zip(t._node.parents, parent_grads):
            if pg is None or not _tracks(p):
                continue
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {list(a.shape)} vs {list(b.shape)}")
    return _result("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product (same shape; no broadcasting)."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {list(a.shape)} vs {list(b.shape)}")
    ad, bd = a.data, b.data
    return _result("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _result("scale", (x,), x.data * c, lambda g: (g * c,))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy's module-level sum
    shape = x.shape
    return _result("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def flatten(x: Tensor) -> Tensor:
    """[N, ...] -> [N, prod(...)]."""
    n = x.shape[0]
    shape = x.shape
    return _result("flatten", (x,), x.data.reshape(n, -1), lambda g: (g.reshape(shape),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Bias broadcast: b[K] onto x[N,K], or b[C] onto x[N,C,H,W]."""
    if b.ndim != 1:
        raise ShapeError(f"bias must be 1-d, got shape {list(b.shape)}")
    if x.ndim == 2:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} does not match features {x.shape[1]}")
        return _result("add_bias", (x, b), x.data + b.data, lambda g: (g, g.sum(axis=0)))
    if x.ndim == 4:
        if x.shape[1] != b.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} does not match channels {x.shape[1]}")
        return _result(
            "add_bias",
            (x, b),
            x.data + b.data.reshape(1, -1, 1, 1),
            lambda g: (g, g.sum(axis=(0, 2, 3))),
        )
    raise ShapeError(f"add_bias expects a 2-d or 4-d input, got shape {list(x.shape)}")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at 0 is 0
    return _result("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes do not compose: {list(a.shape)} x {list(b.shape)}")
    ad, bd = a.data, b.data
    need_a, need_b = _tracks(a), _tracks(b)
    return _result("matmul", (a, b), ad @ bd,
                   lambda g: (g @ bd.T if need_a else None,
                              ad.T @ g if need_b else None))


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    """[N,C,H,W] -> ([N*H'*W', C*kh*kw] patch matrix, H', W')."""
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw), ho, wo


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid (no padding) cross-correlation of x[N,C,H,W] with w[F,C,kh,kw]."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and kernel, got {list(x.shape)} and {list(w.shape)}")
    n, c, h, wd = x.shape
    f, ck, kh, kw = w.shape
    if ck != c:
        raise ShapeError(f"conv2d channel mismatch: input {list(x.shape)} vs kernel {list(w.shape)}")
    if kh > h or kw > wd:
        raise ShapeError(f"kernel {list(w.shape)} larger than input {list(x.shape)}")
    if stride < 1:
        raise ShapeError(f"stride must be a positive int, got {stride}")

    cols, ho, wo = _im2col(x.data, kh, kw, stride)
    wmat = w.data.reshape(f, c * kh * kw)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    # the input grad is expensive; skip it when x is a plain data tensor
    need_x, need_w = _tracks(x), _tracks(w)
    xshape = x.shape

    def backward_fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        grad_w = (gmat.T @ cols).reshape(f, c, kh, kw) if need_w else None
        grad_x = None
        if need_x:
            # patch grads via one GEMM, then fold overlapping windows back
            gc = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            grad_x = np.zeros(xshape)
            for i in range(kh):
                for j in range(kw):
                    grad_x[:, :, i:i + stride * ho:stride,
                           j:j + stride * wo:stride] += gc[:, :, :, :, i, j]
        return grad_x, grad_w

    return _result("conv2d", (x, w), out, backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties route the gradient to the first
    element of the window in row-major order."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2 expects a 4-d input, got shape {list(x.shape)}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    h2, w2 = h // 2, w // 2
    win = x.data.reshape(n, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    idx = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward_fn(g):
        gw = np.zeros((n, c, h2, w2, 4))
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        return (gw.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w),)

    return _result("maxpool2", (x,), out, backward_fn)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows of x[N,D]; backward scatter-adds into the source rows."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-d input, got shape {list(x.shape)}")
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != 1:
        raise ShapeError("gather_rows indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {x.shape[0]} rows")
    shape = x.shape

    def backward_fn(g):
        gx = np.zeros(shape)
        np.add.at(gx, idx, g)
        return (gx,)

    return _result("gather_rows", (x,), x.data[idx], backward_fn)


def grl(x: Tensor, alpha: float) -> Tensor:
    """Gradient reversal: identity forward, -alpha * upstream on backward."""
    alpha = float(alpha)
    if alpha < 0:
        raise ValueError(f"grl alpha must be nonnegative, got {alpha}")
    return _result("grl", (x,), x.data, lambda g: (-alpha * g,))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label] over the batch.

    Stabilized by max subtraction; backward is (softmax - onehot) / N.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [N,K], got shape {list(logits.shape)}")
    y = np.asarray(labels)
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError(f"labels must be integer class indices, got dtype {y.dtype}")
    n, k = logits.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {list(y.shape)} does not match batch size {n}")
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = float((lse[:, 0] - z[np.arange(n), y]).mean())
    softmax = np.exp(z - lse)

    def backward_fn(g):
        delta = softmax.copy()
        delta[np.arange(n), y] -= 1.0
        return (g * delta / n,)

    return _result("softmax_cross_entropy", (logits,), np.asarray(loss), backward_fn)
