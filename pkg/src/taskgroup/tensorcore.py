"""Small dense-tensor library with reverse-mode gradients.

Covers exactly the layers the sequence network needs: valid 1-D convolution,
1-D max pooling, fully connected layers, per-head output units, relu, sigmoid
and binary cross-entropy. Values are numpy arrays; every op records a closure
that pushes the output gradient back to its inputs.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

EPS = 1e-7
_grad_enabled = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for an op."""

    def __init__(self, op: str, *shapes: Sequence[int], detail: str = ""):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.op = op
        self.shapes = [tuple(s) for s in shapes]


class GraphStateError(RuntimeError):
    """backward() called on a graph that has already been consumed."""


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


class Tensor:
    """A numpy array with an optional gradient buffer and graph links."""

    __slots__ = ("values", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.values.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) into every leaf's ``grad``.

        ``self`` must be a scalar. The recorded graph is released afterwards,
        so a second call without a fresh forward pass raises GraphStateError.
        """
        if self._consumed:
            raise GraphStateError("backward() already ran on this graph; run a new forward pass")
        if self.values.size != 1:
            raise ShapeError("backward", self.shape, detail="loss must be a scalar")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._backward is None:
                if node.requires_grad and g is not None:
                    node._accumulate(g)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not (parent.requires_grad or parent._parents):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a graph."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


def _result(values: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(values)
    if _grad_enabled and any(p.requires_grad or p._parents for p in parents):
        out._parents = parents
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ----------------------------------------------------------------------------
# layers
# ----------------------------------------------------------------------------

def conv1d(x: Tensor, filters: Tensor, bias: Tensor) -> Tensor:
    """Valid cross-correlation, stride 1.

    x: [batch, in_ch, length]; filters: [out_ch, in_ch, width]; bias: [out_ch].
    Output: [batch, out_ch, length - width + 1].
    """
    if x.values.ndim != 3 or filters.values.ndim != 3:
        raise ShapeError("conv1d", x.shape, filters.shape, detail="expected 3-D input and filters")
    n, cin, length = x.shape
    cout, fin, width = filters.shape
    if fin != cin:
        raise ShapeError("conv1d", x.shape, filters.shape, detail="input channels differ")
    if width > length:
        raise ShapeError("conv1d", x.shape, filters.shape, detail="filter wider than input")
    if bias.shape != (cout,):
        raise ShapeError("conv1d", filters.shape, bias.shape, detail="bias length != out channels")

    # cols[n, l, c, k] = x[n, c, l + k]
    cols = sliding_window_view(x.values, width, axis=2).transpose(0, 2, 1, 3)
    lout = length - width + 1
    cols2d = cols.reshape(n * lout, cin * width)
    w2d = filters.values.reshape(cout, cin * width)
    out = (cols2d @ w2d.T).reshape(n, lout, cout).transpose(0, 2, 1) + bias.values[None, :, None]

    def backward(g: np.ndarray):
        g2d = g.transpose(0, 2, 1).reshape(n * lout, cout)
        dw = (g2d.T @ cols2d).reshape(cout, cin, width)
        db = g.sum(axis=(0, 2))
        dx = None
        if x.requires_grad or x._parents:
            dcols = (g2d @ w2d).reshape(n, lout, cin, width)
            dxt = np.zeros((n, length, cin), dtype=x.values.dtype)
            for k in range(width):
                dxt[:, k:k + lout, :] += dcols[:, :, :, k]
            dx = dxt.transpose(0, 2, 1)
        return dx, dw, db

    return _result(np.ascontiguousarray(out), (x, filters, bias), backward)


def pool_output_length(length: int, window: int, stride: int) -> int:
    if length < window:
        return 0
    return (length - window) // stride + 1


def maxpool1d_with_indices(x: Tensor, window: int, stride: int) -> tuple[Tensor, np.ndarray]:
    """Max pooling along the last axis; trailing positions short of a window are dropped.

    Returns the pooled tensor and the argmax input position of every output.
    """
    if window < 1 or stride < 1:
        raise ValueError(f"maxpool1d: window and stride must be >= 1, got {window}, {stride}")
    n, c, length = x.shape
    lout = pool_output_length(length, window, stride)
    if lout == 0:
        raise ShapeError("maxpool1d", x.shape, (window,), detail="window exceeds length; output would be empty")
    if window == stride:
        blocks = x.values[:, :, :lout * window].reshape(n, c, lout, window)
    else:
        blocks = sliding_window_view(x.values, window, axis=2)[:, :, ::stride][:, :, :lout]
    local = blocks.argmax(axis=3)
    out = np.take_along_axis(blocks, local[..., None], axis=3)[..., 0]
    indices = local + (np.arange(lout) * stride)[None, None, :]

    def backward(g: np.ndarray):
        dx = np.zeros_like(x.values)
        if window == stride:
            # windows are disjoint, each input position receives at most one gradient
            np.put_along_axis(dx, indices, g, axis=2)
        else:
            flat = dx.reshape(n * c, length)
            rows = np.repeat(np.arange(n * c), lout)
            np.add.at(flat, (rows, indices.reshape(-1)), g.reshape(-1))
        return (dx,)

    return _result(np.ascontiguousarray(out), (x,), backward), indices


def maxpool1d(x: Tensor, window: int, stride: int) -> Tensor:
    return maxpool1d_with_indices(x, window, stride)[0]


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight.T + bias for x [batch, n], weight [m, n], bias [m]."""
    if x.values.ndim != 2 or weight.values.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("fully_connected", x.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError("fully_connected", weight.shape, bias.shape, detail="bias length != output size")
    out = x.values @ weight.values.T + bias.values

    def backward(g: np.ndarray):
        dx = g @ weight.values if (x.requires_grad or x._parents) else None
        return dx, g.T @ x.values, g.sum(axis=0)

    return _result(out, (x, weight, bias), backward)


def head_output(h: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """One scalar output per head: out[b, t] = h[b, t, :] . weight[t] + bias[t]."""
    if h.values.ndim != 3 or weight.values.ndim != 2 or h.shape[1:] != weight.shape:
        raise ShapeError("head_output", h.shape, weight.shape)
    if bias.shape != (weight.shape[0],):
        raise ShapeError("head_output", weight.shape, bias.shape)
    out = np.einsum("bth,th->bt", h.values, weight.values) + bias.values

    def backward(g: np.ndarray):
        dh = g[:, :, None] * weight.values[None, :, :]
        dw = (g[:, :, None] * h.values).sum(axis=0)
        return dh, dw, g.sum(axis=0)

    return _result(out, (h, weight, bias), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    original = x.shape
    return _result(x.values.reshape(shape), (x,), lambda g: (g.reshape(original),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return _result(x.values * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.values)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(pred: Tensor, labels: np.ndarray, eps: float = EPS) -> Tensor:
    """Binary cross-entropy on probabilities, mean over batch, summed over columns.

    ``pred`` is [batch] or [batch, tasks]; probabilities are clamped to
    [eps, 1 - eps] before the log and the clamp passes no gradient where active.
    """
    y = np.asarray(labels, dtype=pred.dtype)
    if y.shape != pred.shape:
        raise ShapeError("bce_loss", pred.shape, y.shape)
    p = np.clip(pred.values, eps, 1.0 - eps)
    batch = pred.shape[0]
    loss = -(y * np.log(p) + (1.0 - y) * np.log1p(-p)).sum() / batch
    inside = (pred.values >= eps) & (pred.values <= 1.0 - eps)

    def backward(g: np.ndarray):
        d = (-(y / p) + (1.0 - y) / (1.0 - p)) / batch
        return (g * d * inside,)

    return _result(np.asarray(loss, dtype=pred.dtype), (pred,), backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """sigmoid followed by binary cross-entropy, fused.

    Exact in logit space (never evaluates log(0)), so unlike ``bce_loss`` no
    probability clamp is applied and saturated outputs keep their gradient.
    Mean over batch, summed over columns.
    """
    y = np.asarray(labels, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise ShapeError("bce_with_logits", logits.shape, y.shape)
    z = logits.values
    batch = z.shape[0]
    per = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = per.sum() / batch
    p = _stable_sigmoid(z)

    def backward(g: np.ndarray):
        return (g * (p - y) / batch,)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


def sum_all(x: Tensor) -> Tensor:
    return _result(np.asarray(x.values.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, x.shape).copy(),))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.values - b.values, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _result(a.values * b.values, (a, b), lambda g: (g * b.values, g * a.values))


def square(x: Tensor) -> Tensor:
    return _result(x.values ** 2, (x,), lambda g: (2.0 * x.values * g,))


# ----------------------------------------------------------------------------
# optimisation
# ----------------------------------------------------------------------------

def sgd_step(params: Iterable[Tensor], learning_rate: float) -> None:
    """In-place p <- p - lr * p.grad. Parameters without a gradient are skipped."""
    if not learning_rate >= 0:
        raise ValueError(f"learning rate must be non-negative, got {learning_rate}")
    params = list(params)
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name or repr(p))
    for p in params:
        if p.grad is not None:
            p.values -= np.asarray(learning_rate, dtype=p.dtype) * p.grad


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------------
# initialisation
# ----------------------------------------------------------------------------

def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
               dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
