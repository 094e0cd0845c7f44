"""Independent reference computations shared by the test modules."""

from __future__ import annotations

import numpy as np

from dpflow.comm import CommWorld
from dpflow.engine import Graph, Op, Session, gradients

FD_STEP = 1e-6


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(session: Session, loss, var, feeds, h=FD_STEP) -> np.ndarray:
    """d loss / d var by central differences, one element at a time."""
    base = session.value(var).copy()
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        for sign in (1, -1):
            w = base.copy()
            w[idx] += sign * h
            session.assign(var, w)
            grad[idx] += sign * float(session.run(loss, feeds))
        grad[idx] /= 2 * h
    session.assign(var, base)
    return grad


def _away_from_zero(rng, shape, margin=1e-3):
    x = rng.uniform(-1, 1, shape)
    while np.any(np.abs(x) < margin):
        bad = np.abs(x) < margin
        x[bad] = rng.uniform(-1, 1, bad.sum())
    return x


def _head(g: Graph, rng, out, feeds, rows=None):
    """Scalar loss on top of a rank-2 node: sum of squares or cross-entropy."""
    if rng.random() < 0.5:
        return g.sum_squares(out)
    m, c = g[out].shape
    y = g.placeholder((m, c))
    feeds[y] = np.eye(c)[rng.integers(0, c, m or rows)]
    return g.softmax_cross_entropy(out, y)


def op_instance(kind: str, rng):
    """A small random graph exercising ``kind``; returns (session, loss, wrt, feeds)."""
    g = Graph("float64")
    m, k, n = (int(v) for v in rng.integers(1, 5, 3))
    feeds: dict = {}
    values: dict = {}

    def var(shape, value=None):
        v = g.variable(shape)
        values[v] = rng.uniform(-1, 1, shape) if value is None else value
        return v

    if kind == "MatMul":
        ta, tb = bool(rng.integers(2)), bool(rng.integers(2))
        a = var((k, m) if ta else (m, k))
        b = var((n, k) if tb else (k, n))
        out = g.add(Op.MATMUL, (a, b), transpose_a=ta, transpose_b=tb)
        loss = _head(g, rng, out, feeds)
    elif kind == "AddBias":
        x, b = var((m, n)), var((n,))
        loss = _head(g, rng, g.add_bias(x, b), feeds)
    elif kind == "ReLU":
        x = var((m, n), _away_from_zero(rng, (m, n)))
        loss = _head(g, rng, g.relu(x), feeds)
    elif kind == "SoftmaxCrossEntropy":
        lg = var((m, n + 1), rng.uniform(-3, 3, (m, n + 1)))
        y = g.placeholder((m, n + 1))
        feeds[y] = np.eye(n + 1)[rng.integers(0, n + 1, m)]
        loss = g.softmax_cross_entropy(lg, y)
    elif kind == "SumSquares":
        x = var((m, n))
        loss = g.sum_squares(x)
    elif kind == "Scale":
        x = var((m, n))
        loss = _head(g, rng, g.scale(x, float(rng.uniform(-2, 2))), feeds)
    elif kind == "Variable":
        x = var((m, n))
        loss = _head(g, rng, x, feeds)
    elif kind == "Placeholder":
        x = g.placeholder((None, k))
        feeds[x] = rng.uniform(-1, 1, (m, k))
        w = var((k, n))
        loss = _head(g, rng, g.matmul(x, w), feeds, rows=m)
    else:
        raise ValueError(kind)

    wrt = g.variables()
    grads = gradients(g, loss, wrt)
    s = Session(g)
    s.initialize(0)
    for v, val in values.items():
        s.assign(v, val)
    return s, loss, wrt, grads, feeds


OP_KINDS = ("Placeholder", "Variable", "MatMul", "AddBias", "ReLU",
            "SoftmaxCrossEntropy", "SumSquares", "Scale")


def max_fd_error(kind: str, rng) -> float:
    s, loss, wrt, grads, feeds = op_instance(kind, rng)
    analytic = s.run(grads, feeds)
    worst = 0.0
    for v, a in zip(wrt, analytic):
        worst = max(worst, float(rel_err(a, central_difference(s, loss, v, feeds)).max()))
    return worst


def serial_sum(inputs) -> np.ndarray:
    """Single accumulator, rank order."""
    acc = np.zeros_like(inputs[0])
    for x in inputs:
        acc = acc + x
    return acc


def message_log_world(world: CommWorld):
    """Wrap ``world.send`` so every point-to-point message is logged as (src, dest, tag)."""
    log = []
    inner = world.send

    def send(dest, tag, payload, dtype_code=2):
        log.append((world.rank, dest, tag))
        inner(dest, tag, payload, dtype_code)

    world.send = send
    return log


ACCEPTANCE_LINES: list[str] = []


def report(number: int, title: str, ok: bool, detail: str) -> bool:
    """Record and print one pass/fail line for an acceptance criterion."""
    line = f"[{'PASS' if ok else 'FAIL'}] AC{number} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok
