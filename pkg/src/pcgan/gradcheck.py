"""Central finite-difference checks for tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .diffcore import Node, Param, Tape, backward


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_gradients(build: Callable[[Tape, list[Node]], Node], inputs: Sequence[np.ndarray],
                    params: Sequence[Param] = (), h: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Compare analytic and central-difference gradients of a random projection of ``build``.

    ``build(tape, input_nodes)`` returns any output node; it is reduced to a scalar
    with fixed random weights. Returns the relative error per input and parameter.
    """
    inputs = [np.array(x, dtype=np.float64) for x in inputs]
    rng = np.random.default_rng(seed)
    proj = None

    def scalar(record: bool):
        nonlocal proj
        tape = Tape(record=record)
        nodes = [tape.input(x) for x in inputs]
        out = build(tape, nodes)
        if proj is None:
            proj = rng.uniform(-1, 1, size=out.value.shape)
        loss = tape.sum(tape.mul(out, tape.input(proj)))
        return tape, nodes, loss

    for p in params:
        p.zero_grad()
    tape, nodes, loss = scalar(True)
    backward(tape, loss)
    analytic = {f"input{i}": (n.grad if n.grad is not None else np.zeros_like(x))
                for i, (n, x) in enumerate(zip(nodes, inputs))}
    for p in params:
        analytic[p.name] = p.grad.copy()
        p.zero_grad()

    def numeric(arr: np.ndarray) -> np.ndarray:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            up = float(scalar(False)[2].value)
            flat[k] = orig - h
            down = float(scalar(False)[2].value)
            flat[k] = orig
            gflat[k] = (up - down) / (2 * h)
        return g

    errors = {}
    for i, x in enumerate(inputs):
        errors[f"input{i}"] = relative_error(analytic[f"input{i}"], numeric(x))
    for p in params:
        errors[p.name] = relative_error(analytic[p.name], numeric(p.value))
    return errors
