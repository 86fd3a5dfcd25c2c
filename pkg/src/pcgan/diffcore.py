"""Tape-based reverse-mode differentiation over float64 numpy arrays.

Only the handful of primitives needed by the point-cloud networks are
provided: affine maps on the trailing axis, elementwise nonlinearities,
pooling over the set axis (axis -2), concatenation and scalar reductions.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

CHECKPOINT_MAGIC = "pcgan-params"
CHECKPOINT_VERSION = 1
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeConsumedError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")


class Param:
    """A trainable tensor with a gradient accumulator of the same shape."""

    def __init__(self, value, name: str = ""):
        value = np.array(value, dtype=np.float64)
        _check_finite(value, f"parameter {name!r}")
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.has_grad = False

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def assign(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.value.shape:
            raise ShapeError(f"{self.name}: expected shape {self.value.shape}, got {value.shape}")
        _check_finite(value, f"parameter {self.name!r}")
        self.value[...] = value

    def zero_grad(self) -> None:
        self.grad.fill(0.0)
        self.has_grad = False

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class Node:
    __slots__ = ("value", "grad", "parents", "backward_fn", "param")

    def __init__(self, value, parents=(), backward_fn=None, param=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(shape={self.value.shape})"


class Tape:
    """Ordered record of primitive applications.

    With ``record=False`` the ops still compute values but nothing is kept,
    which is what inference uses.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Node] = []
        self.consumed = False

    def _push(self, value, parents=(), backward_fn=None, param=None) -> Node:
        node = Node(value, parents, backward_fn, param)
        if self.record:
            if self.consumed:
                raise TapeConsumedError("cannot record on a tape that was already replayed")
            self.nodes.append(node)
        return node

    def clear(self) -> None:
        self.nodes.clear()
        self.consumed = False

    # leaves

    def input(self, value) -> Node:
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, "input")
        return self._push(value)

    def param(self, p: Param) -> Node:
        return self._push(p.value, param=p)

    # elementwise / affine

    def linear(self, x: Node, w: Node, b: Node | None = None) -> Node:
        wv = w.value
        if wv.ndim != 2 or x.value.shape[-1] != wv.shape[0]:
            raise ShapeError(f"linear: input {x.shape} does not match weight {wv.shape}")
        out = x.value @ wv
        if b is not None:
            if b.value.shape != (wv.shape[1],):
                raise ShapeError(f"linear: bias {b.shape} does not match weight {wv.shape}")
            out = out + b.value
        xv = x.value

        def back(g):
            gx = g @ wv.T
            gw = xv.reshape(-1, wv.shape[0]).T @ g.reshape(-1, wv.shape[1])
            if b is None:
                return gx, gw
            return gx, gw, g.reshape(-1, wv.shape[1]).sum(axis=0)

        parents = (x, w) if b is None else (x, w, b)
        return self._push(out, parents, back)

    def add(self, x: Node, y: Node) -> Node:
        _same_shape("add", x, y)
        return self._push(x.value + y.value, (x, y), lambda g: (g, g))

    def sub(self, x: Node, y: Node) -> Node:
        _same_shape("sub", x, y)
        return self._push(x.value - y.value, (x, y), lambda g: (g, -g))

    def mul(self, x: Node, y: Node) -> Node:
        _same_shape("mul", x, y)
        xv, yv = x.value, y.value
        return self._push(xv * yv, (x, y), lambda g: (g * yv, g * xv))

    def scale(self, x: Node, c: float) -> Node:
        return self._push(x.value * c, (x,), lambda g: (g * c,))

    def shift(self, x: Node, c: float) -> Node:
        return self._push(x.value + c, (x,), lambda g: (g,))

    def square(self, x: Node) -> Node:
        xv = x.value
        return self._push(xv * xv, (x,), lambda g: (2.0 * g * xv,))

    def abs(self, x: Node) -> Node:
        # subgradient 0 at the kink
        xv = x.value
        return self._push(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))

    def softplus(self, x: Node) -> Node:
        xv = x.value
        e = np.exp(-np.abs(xv))
        out = np.maximum(xv, 0.0) + np.log1p(e)
        if not self.record:
            return self._push(out)

        def back(g):
            # sigmoid(x) from the cached exp(-|x|)
            return (g * np.where(xv >= 0, 1.0, e) / (1.0 + e),)

        return self._push(out, (x,), back)

    def leaky_relu(self, x: Node, slope: float = LEAKY_SLOPE) -> Node:
        xv = x.value
        dydx = np.where(xv > 0, 1.0, slope)
        return self._push(xv * dydx, (x,), lambda g: (g * dydx,))

    def activate(self, x: Node, kind: str | None) -> Node:
        if kind is None or kind == "identity":
            return x
        if kind == "softplus":
            return self.softplus(x)
        if kind == "leaky_relu":
            return self.leaky_relu(x)
        raise ValueError(f"unknown activation {kind!r}")

    def scale_features(self, x: Node, gamma: Node) -> Node:
        """Multiply the trailing axis of ``x`` by the vector ``gamma``."""
        gv, xv = gamma.value, x.value
        if gv.shape != (xv.shape[-1],):
            raise ShapeError(f"scale_features: gamma {gv.shape} vs input {xv.shape}")

        def back(g):
            return g * gv, (g * xv).reshape(-1, gv.shape[0]).sum(axis=0)

        return self._push(xv * gv, (x, gamma), back)

    # set axis

    def set_max(self, x: Node) -> Node:
        xv = _need_set(x, "set_max")
        # argmax returns the first maximal index, i.e. ties go to the lowest set index
        idx = np.argmax(xv, axis=-2)
        out = np.take_along_axis(xv, idx[..., None, :], axis=-2)[..., 0, :]

        def back(g):
            gx = np.zeros_like(xv)
            np.put_along_axis(gx, idx[..., None, :], g[..., None, :], axis=-2)
            return (gx,)

        return self._push(out, (x,), back)

    def set_mean(self, x: Node) -> Node:
        xv = _need_set(x, "set_mean")
        n = xv.shape[-2]
        # summing in sorted order makes the result independent of point order
        out = np.sort(xv, axis=-2).sum(axis=-2) / n
        shape = xv.shape
        return self._push(out, (x,), lambda g: (np.broadcast_to(g[..., None, :] / n, shape).copy(),))

    def set_pool(self, x: Node, kind: str) -> Node:
        if kind == "max":
            return self.set_max(x)
        if kind == "mean":
            return self.set_mean(x)
        raise ValueError(f"unknown pooling {kind!r}")

    def broadcast_set(self, x: Node, n: int) -> Node:
        """Repeat ``x`` of shape (..., h) into (..., n, h)."""
        xv = x.value
        out = np.broadcast_to(xv[..., None, :], xv.shape[:-1] + (n, xv.shape[-1])).copy()
        return self._push(out, (x,), lambda g: (g.sum(axis=-2),))

    def concat(self, xs: Sequence[Node]) -> Node:
        vals = [x.value for x in xs]
        lead = vals[0].shape[:-1]
        for v in vals:
            if v.shape[:-1] != lead:
                raise ShapeError(f"concat: leading shapes differ {[v.shape for v in vals]}")
        splits = np.cumsum([v.shape[-1] for v in vals])[:-1]
        return self._push(np.concatenate(vals, axis=-1), tuple(xs),
                          lambda g: tuple(np.split(g, splits, axis=-1)))

    # reductions

    def sum(self, x: Node) -> Node:
        shape = x.value.shape
        return self._push(np.asarray(x.value.sum()), (x,), lambda g: (np.full(shape, float(g)),))

    def mean(self, x: Node) -> Node:
        shape, size = x.value.shape, x.value.size
        return self._push(np.asarray(x.value.mean()), (x,), lambda g: (np.full(shape, float(g) / size),))


def _same_shape(op: str, x: Node, y: Node) -> None:
    if x.value.shape != y.value.shape:
        raise ShapeError(f"{op}: shapes {x.value.shape} and {y.value.shape} differ")


def _need_set(x: Node, op: str) -> np.ndarray:
    if x.value.ndim < 2 or x.value.shape[-2] == 0:
        raise ShapeError(f"{op}: need a non-empty set axis, got shape {x.value.shape}")
    return x.value


def forward(graph: Callable[..., Node], *inputs, record: bool = True) -> tuple[Node, Tape]:
    """Run ``graph(tape, *input_nodes)`` on a fresh tape.

    ``graph`` is any callable taking the tape followed by input nodes, e.g.
    a network's ``forward`` method.
    """
    tape = Tape(record=record)
    nodes = [tape.input(x) for x in inputs]
    return graph(tape, *nodes), tape


def backward(tape: Tape, output: Node, grad=None) -> None:
    """Replay ``tape`` in reverse, accumulating into ``Param.grad`` and ``Node.grad``."""
    if tape.consumed:
        raise TapeConsumedError("tape already consumed by a previous backward pass")
    if not tape.record:
        raise TapeConsumedError("tape was created with record=False")
    if grad is None:
        if output.value.size != 1:
            raise ShapeError("output gradient required for non-scalar outputs")
        grad = np.ones_like(output.value)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != output.value.shape:
        raise ShapeError(f"output gradient {grad.shape} does not match output {output.value.shape}")
    tape.consumed = True
    output.grad = grad.copy()
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None:
            continue
        if node.param is not None:
            node.param.grad += g
            node.param.has_grad = True
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.grad is None:
                parent.grad = np.array(pg, dtype=np.float64)
            else:
                parent.grad = parent.grad + pg


class Adam:
    """Adam with bias correction. Gradients are zeroed after every step."""

    def __init__(self, params: Iterable[Param], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.9, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        if not any(p.has_grad for p in self.params):
            raise RuntimeError("adam step without populated gradients; run backward first")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.value -= update
            _check_finite(p.value, f"parameter {p.name!r} after adam step")
            p.zero_grad()


def save_params(path, params: Sequence[Param]) -> None:
    """Write parameters as text; values are float hex so loading is bit-exact."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"count {len(params)}"]
    for p in params:
        if not p.name or any(ch.isspace() for ch in p.name):
            raise ValueError(f"parameter names must be non-empty without whitespace: {p.name!r}")
        lines.append(f"param {p.name} {p.value.ndim} " + " ".join(str(s) for s in p.shape))
        flat = p.value.reshape(-1) if p.value.ndim else p.value.reshape(1)
        row = p.shape[-1] if p.value.ndim else 1
        for start in range(0, flat.size, max(row, 1)):
            lines.append(" ".join(float(v).hex() for v in flat[start:start + row]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text().split("\n")
    header = text[0].split()
    if len(header) != 2 or header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    if int(header[1]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {header[1]}")
    count = int(text[1].split()[1])
    out: dict[str, np.ndarray] = {}
    pos = 2
    for _ in range(count):
        parts = text[pos].split()
        if parts[0] != "param":
            raise ValueError(f"{path}:{pos + 1}: expected 'param' record")
        name, ndim = parts[1], int(parts[2])
        shape = tuple(int(s) for s in parts[3:3 + ndim])
        size = math.prod(shape)
        pos += 1
        vals: list[float] = []
        while len(vals) < size:
            vals.extend(float.fromhex(tok) for tok in text[pos].split())
            pos += 1
        if len(vals) != size:
            raise ValueError(f"{path}: parameter {name} has {len(vals)} values, expected {size}")
        out[name] = np.array(vals, dtype=np.float64).reshape(shape)
    return out


def restore_params(params: Sequence[Param], values: dict[str, np.ndarray]) -> None:
    for p in params:
        if p.name not in values:
            raise KeyError(f"checkpoint lacks parameter {p.name!r}")
        p.assign(values[p.name])
