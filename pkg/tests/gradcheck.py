"""Central finite-difference oracle shared by the gradient tests."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from taskgroup import tensorcore as tc


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    g = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_op(op: Callable[..., tc.Tensor], inputs: Sequence[np.ndarray], rng: np.random.Generator,
             h: float = 1e-3) -> list[float]:
    """Relative error of every input gradient of sum(op(*inputs) * R) for a random R."""
    tensors = [tc.Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    out = op(*tensors)
    weights = rng.standard_normal(out.shape)

    def scalar() -> float:
        with tc.no_grad():
            return float((op(*tensors).values * weights).sum())

    loss = tc.sum_all(tc.mul(out, tc.Tensor(weights)))
    loss.backward()
    errors = []
    for t in tensors:
        numeric = numerical_grad(scalar, t.values, h)
        errors.append(relative_error(t.grad, numeric))
    return errors


LAYERS = ("conv1d", "maxpool1d", "fully_connected", "head_output", "relu", "sigmoid", "bce_loss",
          "bce_with_logits")


def random_case(kind: str, rng: np.random.Generator):
    """(op, inputs) for a small random instance of ``kind``, kept clear of kinks by more than the FD step."""
    r = lambda lo, hi: int(rng.integers(lo, hi + 1))  # noqa: E731
    if kind == "conv1d":
        n, cin, cout, width = r(1, 2), r(1, 3), r(1, 3), r(1, 4)
        length = width + r(0, 5)
        return tc.conv1d, [rng.standard_normal((n, cin, length)), rng.standard_normal((cout, cin, width)),
                           rng.standard_normal(cout)]
    if kind == "maxpool1d":
        n, c, window, stride = r(1, 2), r(1, 3), r(1, 4), r(1, 4)
        length = window + r(0, 7)
        # distinct values 0.01 apart so no window max flips under a 1e-3 perturbation
        x = rng.permutation(n * c * length).reshape(n, c, length) * 0.01
        return (lambda t: tc.maxpool1d(t, window, stride)), [x]
    if kind == "fully_connected":
        b, n, m = r(1, 3), r(1, 5), r(1, 4)
        return tc.fully_connected, [rng.standard_normal((b, n)), rng.standard_normal((m, n)), rng.standard_normal(m)]
    if kind == "head_output":
        b, t, h = r(1, 3), r(1, 4), r(1, 4)
        return tc.head_output, [rng.standard_normal((b, t, h)), rng.standard_normal((t, h)), rng.standard_normal(t)]
    if kind == "relu":
        x = rng.uniform(0.05, 2.0, (r(1, 3), r(1, 5)))
        x *= rng.choice([-1.0, 1.0], size=x.shape)
        return tc.relu, [x]
    if kind == "sigmoid":
        return tc.sigmoid, [rng.standard_normal((r(1, 3), r(1, 4))) * 2]
    if kind == "bce_loss":
        shape = (r(1, 4), r(1, 3))
        y = rng.integers(0, 2, shape)
        return (lambda p: tc.bce_loss(p, y)), [rng.uniform(0.1, 0.9, shape)]
    if kind == "bce_with_logits":
        shape = (r(1, 4), r(1, 3))
        y = rng.integers(0, 2, shape)
        return (lambda z: tc.bce_with_logits(z, y)), [rng.standard_normal(shape) * 2]
    raise ValueError(kind)
