"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation in creation order; since parents are
always created before children, the tape order is already a topological order
and the backward pass is a single reverse sweep with gradient accumulation.

The primitive set is exactly what the forecasting architectures need:
elementwise arithmetic, 2-D convolution (stride 1, same zero padding), 1x1
convolution, the usual activations, reductions, 2x2 max pooling, nearest
upsampling, channel concat/slice, and clipping for numerically safe
cross-entropy. Everything is float64; speed is a non-goal, verifiability is.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Inputs to a primitive have incompatible shapes."""

    def __init__(self, op: str, *shapes) -> None:
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class Node:
    """One value in the computation graph.

    ``vjp`` maps the gradient at this node to a tuple of gradient
    contributions, one per parent, already in each parent's shape.
    """

    __slots__ = ("tape", "value", "op", "parents", "vjp", "grad")

    def __init__(
        self,
        tape: "Tape",
        value: np.ndarray,
        op: str,
        parents: tuple["Node", ...] = (),
        vjp: Callable[[np.ndarray], tuple[np.ndarray, ...]] | None = None,
    ) -> None:
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node({self.op}, shape={self.value.shape})"


class Tape:
    """Append-only record of nodes; owns the backward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._swept = False

    def _record(self, value, op, parents=(), vjp=None) -> Node:
        arr = np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(float)  # ints/bools promote; f32 stays f32
        node = Node(self, arr, op, parents, vjp)
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray) -> Node:
        """Register an input (parameter or constant). Gradients accumulate here."""
        return self._record(value, "leaf")

    def constant(self, value) -> Node:
        return self._record(value, "const")

    def reset_grads(self) -> None:
        for n in self.nodes:
            n.grad = None
        self._swept = False

    def release(self) -> None:
        """Drop all node references so large arrays free without waiting on
        the cycle collector (nodes and tape refer to each other)."""
        for n in self.nodes:
            n.parents = ()
            n.vjp = None
            n.grad = None
        self.nodes.clear()

    def backward(self, loss: Node) -> None:
        """Populate ``grad`` on every node reachable from ``loss``.

        Gradients accumulate across shared subexpressions. Calling backward a
        second time without ``reset_grads`` would silently double-count, so it
        is an error instead.
        """
        if loss.tape is not self:
            raise ValueError("backward: loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        if self._swept:
            raise RuntimeError("backward called twice on one tape; reset_grads() first")
        self._swept = True
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            for parent, contrib in zip(node.parents, node.vjp(node.grad)):
                if contrib is None:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.value)
                parent.grad += contrib


def _same_tape(op: str, *nodes: Node) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ValueError(f"{op}: nodes from different tapes")
    return tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Node, b: Node) -> Node:
    tape = _same_tape("add", a, b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return tape._record(
        value, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Node, b: Node) -> Node:
    tape = _same_tape("sub", a, b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ShapeError("sub", a.shape, b.shape) from None
    return tape._record(
        value, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Node, b: Node) -> Node:
    tape = _same_tape("mul", a, b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ShapeError("mul", a.shape, b.shape) from None
    return tape._record(
        value, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return a.tape._record(a.value * c, "scale", (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a: Node, b: Node) -> Node:
    tape = _same_tape("matmul", a, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    return tape._record(
        a.value @ b.value, "matmul", (a, b),
        lambda g: (g @ b.value.T, a.value.T @ g),
    )


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(B,C,H,W) -> (B*H*W, C*kh*kw) patches under same zero padding."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kh * kw)


def _conv_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, _, h, wid = x.shape
    cout = w.shape[0]
    cols = _im2col(x, w.shape[2], w.shape[3])
    out = cols @ w.reshape(cout, -1).T
    return out.reshape(b, h, wid, cout).transpose(0, 3, 1, 2)


def conv2d(x: Node, w: Node, b: Node | None = None) -> Node:
    """Stride-1, same-zero-padding convolution; odd square kernels only.

    x: (B, Cin, H, W); w: (Cout, Cin, kh, kw); b: (Cout,) or None.
    """
    tape = _same_tape("conv2d", x, w) if b is None else _same_tape("conv2d", x, w, b)
    if x.value.ndim != 4 or w.value.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    kh, kw = w.shape[2], w.shape[3]
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError("conv2d (even kernel)", w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv2d bias", b.shape, w.shape)

    out = _conv_forward(x.value, w.value)
    if b is not None:
        out = out + b.value[None, :, None, None]

    def vjp(g: np.ndarray):
        bsz, _, h, wid = x.shape
        cout = w.shape[0]
        # dx: convolve the output gradient with the spatially flipped kernel,
        # swapping its in/out channel axes (exact for stride 1 + same padding)
        w_flip = w.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = _conv_forward(g, w_flip)
        g2d = g.transpose(0, 2, 3, 1).reshape(bsz * h * wid, cout)
        cols = _im2col(x.value, kh, kw)  # recomputed: cheaper than caching
        dw = (g2d.T @ cols).reshape(w.shape)
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return tape._record(out, "conv2d", parents, vjp)


def conv1x1(x: Node, w: Node, b: Node | None = None) -> Node:
    """Pointwise channel mixing. x: (B,C,H,W); w: (Cout, Cin); b: (Cout,)."""
    tape = _same_tape("conv1x1", x, w) if b is None else _same_tape("conv1x1", x, w, b)
    if x.value.ndim != 4 or w.value.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv1x1", x.shape, w.shape)
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError("conv1x1 bias", b.shape, w.shape)

    out = np.tensordot(w.value, x.value, axes=([1], [1])).transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.value[None, :, None, None]

    def vjp(g: np.ndarray):
        dx = np.tensordot(w.value.T, g, axes=([1], [1])).transpose(1, 0, 2, 3)
        dw = np.tensordot(g, x.value, axes=([0, 2, 3], [0, 2, 3]))
        if b is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    parents = (x, w) if b is None else (x, w, b)
    return tape._record(out, "conv1x1", parents, vjp)


# ---------------------------------------------------------------------------
# activations and pointwise maps


def sigmoid(x: Node) -> Node:
    v = x.value
    s = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return x.tape._record(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Node) -> Node:
    t = np.tanh(x.value)
    return x.tape._record(t, "tanh", (x,), lambda g: (g * (1.0 - t * t),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.tape._record(x.value * mask, "relu", (x,),
                          lambda g: (g * mask,))


def exp(x: Node) -> Node:
    e = np.exp(x.value)
    return x.tape._record(e, "exp", (x,), lambda g: (g * e,))


def log(x: Node) -> Node:
    if np.any(x.value <= 0):
        raise ValueError("log: non-positive input")
    return x.tape._record(np.log(x.value), "log", (x,), lambda g: (g / x.value,))


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient passes wherever lo <= x <= hi."""
    inside = (x.value >= lo) & (x.value <= hi)
    return x.tape._record(np.clip(x.value, lo, hi), "clip", (x,),
                          lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# reductions


def reduce_sum(x: Node) -> Node:
    return x.tape._record(x.value.sum(), "sum", (x,),
                          lambda g: (np.broadcast_to(g, x.shape).copy(),))


def reduce_mean(x: Node) -> Node:
    n = x.value.size
    return x.tape._record(x.value.mean(), "mean", (x,),
                          lambda g: (np.broadcast_to(g / n, x.shape).copy(),))


# ---------------------------------------------------------------------------
# spatial resampling and channel plumbing


def max_pool(x: Node, k: int = 2) -> Node:
    """Non-overlapping k x k max pooling; H and W must divide by k.

    Ties route the gradient to the first maximum in block scan order (the
    subgradient convention); random continuous inputs never tie.
    """
    if x.value.ndim != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"max_pool k={k}", x.shape)
    b, c, h, w = x.shape
    hb, wb = h // k, w // k
    blocks = (
        x.value.reshape(b, c, hb, k, wb, k).transpose(0, 1, 2, 4, 3, 5)
        .reshape(b, c, hb, wb, k * k)
    )
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g: np.ndarray):
        gb = np.zeros((b, c, hb, wb, k * k), dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        return (gb.reshape(b, c, hb, wb, k, k).transpose(0, 1, 2, 4, 3, 5)
                .reshape(b, c, h, w),)

    return x.tape._record(out, "max_pool", (x,), vjp)


def upsample_nearest(x: Node, k: int = 2) -> Node:
    if x.value.ndim != 4:
        raise ShapeError("upsample_nearest", x.shape)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, k, axis=2), k, axis=3)

    def vjp(g: np.ndarray):
        return (g.reshape(b, c, h, k, w, k).sum(axis=(3, 5)),)

    return x.tape._record(out, "upsample_nearest", (x,), vjp)


def concat_channels(parts: Sequence[Node]) -> Node:
    tape = _same_tape("concat_channels", *parts)
    for p in parts:
        if p.value.ndim != 4:
            raise ShapeError("concat_channels", p.shape)
    value = np.concatenate([p.value for p in parts], axis=1)
    sizes = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: np.ndarray):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return tape._record(value, "concat_channels", tuple(parts), vjp)


def slice_channels(x: Node, c0: int, c1: int) -> Node:
    if x.value.ndim != 4 or not (0 <= c0 < c1 <= x.shape[1]):
        raise ShapeError(f"slice_channels [{c0}:{c1}]", x.shape)

    def vjp(g: np.ndarray):
        full = np.zeros_like(x.value)
        full[:, c0:c1] = g
        return (full,)

    return x.tape._record(x.value[:, c0:c1].copy(), "slice_channels", (x,), vjp)


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    build: Callable[[Tape, dict[str, Node]], Node],
    leaves: dict[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error between backprop and central finite differences.

    ``build`` must construct a scalar loss from fresh leaf nodes; it is called
    once per perturbed evaluation, so it has to be deterministic.
    """

    def run(values: dict[str, np.ndarray]) -> tuple[Tape, dict[str, Node], Node]:
        tape = Tape()
        nodes = {k: tape.leaf(v.copy()) for k, v in values.items()}
        loss = build(tape, nodes)
        if loss.value.size != 1:
            raise ValueError("grad_check: build must return a scalar node")
        if not np.isfinite(loss.value):
            raise FloatingPointError("grad_check: non-finite loss")
        return tape, nodes, loss

    tape, nodes, loss = run(leaves)
    tape.backward(loss)
    analytic = {
        k: (nodes[k].grad.copy() if nodes[k].grad is not None
            else np.zeros_like(leaves[k]))
        for k in leaves
    }

    worst = 0.0
    for key, base in leaves.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            perturbed = {k: v for k, v in leaves.items()}
            plus = base.copy()
            plus.reshape(-1)[i] = orig + step
            perturbed[key] = plus
            f_plus = float(run(perturbed)[2].value)
            minus = base.copy()
            minus.reshape(-1)[i] = orig - step
            perturbed[key] = minus
            f_minus = float(run(perturbed)[2].value)
            fd = (f_plus - f_minus) / (2.0 * step)
            if not np.isfinite(fd):
                raise FloatingPointError(f"grad_check: non-finite difference at {key}[{i}]")
            ad = analytic[key].reshape(-1)[i]
            worst = max(worst, abs(ad - fd) / (abs(fd) + 1e-8))
    return worst
