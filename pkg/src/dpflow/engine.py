"""Dataflow graph runtime: tensors, variables, placeholders, a scheduler, sessions
and reverse-mode automatic differentiation.

Tensors are plain numpy arrays. Node ids are dense integers assigned in creation
order; since every node's inputs already exist when it is created, the graph is
a DAG by construction and creation order is the canonical variable order.
"""

from __future__ import annotations

import enum
import hashlib
import heapq
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

NodeId = int
Shape = tuple  # entries are positive ints; None marks a batch dim fixed at feed time

DTYPES = {"float32": np.float32, "float64": np.float64}


class GraphError(ValueError):
    """Invalid graph construction (shape mismatch, dangling input, bad kind)."""


class SessionError(RuntimeError):
    pass


class NumericFault(ArithmeticError):
    """An operation produced NaN or Inf."""


class Op(enum.Enum):
    PLACEHOLDER = "Placeholder"
    VARIABLE = "Variable"
    MATMUL = "MatMul"
    ADD_BIAS = "AddBias"
    RELU = "ReLU"
    SOFTMAX_XENT = "SoftmaxCrossEntropy"
    SUM_SQUARES = "SumSquares"
    SCALE = "Scale"
    # emitted by gradients() only
    ZEROS = "Zeros"
    FILL = "Fill"
    ADD = "Add"
    COL_SUM = "ColumnSum"
    RELU_GRAD = "ReluGrad"
    SOFTMAX_XENT_GRAD = "SoftmaxCrossEntropyGrad"
    MUL_SCALAR = "MulScalar"


@dataclass(frozen=True)
class Initializer:
    kind: str  # "zeros" | "uniform" | "constant"
    low: float = 0.0
    high: float = 0.0

    @classmethod
    def zeros(cls) -> "Initializer":
        return cls("zeros")

    @classmethod
    def constant(cls, value: float) -> "Initializer":
        return cls("constant", value, value)

    @classmethod
    def uniform(cls, low: float, high: float) -> "Initializer":
        if not low < high:
            raise GraphError(f"uniform({low}, {high}): need low < high")
        return cls("uniform", low, high)

    @classmethod
    def glorot_uniform(cls, fan_in: int, fan_out: int) -> "Initializer":
        r = float(np.sqrt(6.0 / (fan_in + fan_out)))
        return cls.uniform(-r, r)


@dataclass(frozen=True)
class Node:
    id: NodeId
    op: Op
    inputs: tuple[NodeId, ...]
    shape: Shape
    attrs: Mapping = field(default_factory=dict)
    name: str = ""

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"<{self.op.value}#{self.id}{label} shape={list(self.shape)}>"


def _same_dim(a, b) -> bool:
    return a is None or b is None or a == b


def _fmt(shape) -> str:
    return "[" + ",".join("?" if d is None else str(d) for d in shape) + "]"


def _check_shape(shape, allow_none: bool) -> tuple:
    shape = tuple(shape)
    for d in shape:
        if d is None and allow_none:
            continue
        if not isinstance(d, (int, np.integer)) or d < 1:
            raise GraphError(f"invalid shape {_fmt(shape)}: dims must be positive integers")
    return tuple(None if d is None else int(d) for d in shape)


class Graph:
    """Append-only computational graph of a single dtype."""

    def __init__(self, dtype: str = "float64"):
        if dtype not in DTYPES:
            raise GraphError(f"unsupported dtype {dtype!r}")
        self.dtype = dtype
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, nid: NodeId) -> Node:
        return self.nodes[nid]

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def variables(self) -> list[NodeId]:
        return [n.id for n in self.nodes if n.op is Op.VARIABLE]

    def placeholders(self) -> list[NodeId]:
        return [n.id for n in self.nodes if n.op is Op.PLACEHOLDER]

    def add(self, op: Op, inputs: Sequence[NodeId] = (), name: str = "", **attrs) -> NodeId:
        """Append a node, inferring its output shape. Returns the new id."""
        inputs = tuple(int(i) for i in inputs)
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op.value}: dangling input id {i}")
        shape = _infer_shape(op, [self.nodes[i].shape for i in inputs], attrs)
        nid = len(self.nodes)
        self.nodes.append(Node(nid, op, inputs, shape, dict(attrs), name))
        return nid

    # convenience constructors, one per user-facing op kind

    def placeholder(self, shape, name: str = "") -> NodeId:
        return self.add(Op.PLACEHOLDER, (), name, shape=_check_shape(shape, True))

    def variable(self, shape, init: Initializer | None = None, name: str = "") -> NodeId:
        init = init or Initializer.zeros()
        return self.add(Op.VARIABLE, (), name, shape=_check_shape(shape, False), init=init)

    def matmul(self, a: NodeId, b: NodeId, name: str = "") -> NodeId:
        return self.add(Op.MATMUL, (a, b), name)

    def add_bias(self, x: NodeId, b: NodeId, name: str = "") -> NodeId:
        return self.add(Op.ADD_BIAS, (x, b), name)

    def relu(self, x: NodeId, name: str = "") -> NodeId:
        return self.add(Op.RELU, (x,), name)

    def softmax_cross_entropy(self, logits: NodeId, onehot: NodeId, name: str = "") -> NodeId:
        return self.add(Op.SOFTMAX_XENT, (logits, onehot), name)

    def sum_squares(self, x: NodeId, name: str = "") -> NodeId:
        return self.add(Op.SUM_SQUARES, (x,), name)

    def scale(self, x: NodeId, c: float, name: str = "") -> NodeId:
        return self.add(Op.SCALE, (x,), name, c=float(c))


def _infer_shape(op: Op, shapes: list, attrs: dict) -> tuple:
    def arity(k):
        if len(shapes) != k:
            raise GraphError(f"{op.value} takes {k} inputs, got {len(shapes)}")

    def rank(s, r, what):
        if len(s) != r:
            raise GraphError(f"{op.value}: {what} must have rank {r}, got {_fmt(s)}")

    if op in (Op.PLACEHOLDER, Op.VARIABLE, Op.ZEROS):
        arity(0)
        return tuple(attrs["shape"])
    if op is Op.FILL:
        arity(0)
        return ()
    if op is Op.MATMUL:
        arity(2)
        a, b = shapes
        rank(a, 2, "A")
        rank(b, 2, "B")
        if attrs.get("transpose_a"):
            a = a[::-1]
        if attrs.get("transpose_b"):
            b = b[::-1]
        if not _same_dim(a[1], b[0]):
            raise GraphError(f"MatMul shape mismatch: {_fmt(a)} x {_fmt(b)}")
        return (a[0], b[1])
    if op is Op.ADD_BIAS:
        arity(2)
        x, b = shapes
        rank(x, 2, "X")
        rank(b, 1, "bias")
        if not _same_dim(x[1], b[0]):
            raise GraphError(f"AddBias shape mismatch: {_fmt(x)} + {_fmt(b)}")
        return x
    if op in (Op.RELU, Op.SCALE):
        arity(1)
        return shapes[0]
    if op is Op.SUM_SQUARES:
        arity(1)
        return ()
    if op is Op.SOFTMAX_XENT:
        arity(2)
        lg, oh = shapes
        rank(lg, 2, "logits")
        if len(oh) != 2 or not all(_same_dim(x, y) for x, y in zip(lg, oh)):
            raise GraphError(f"SoftmaxCrossEntropy shape mismatch: {_fmt(lg)} vs {_fmt(oh)}")
        return ()
    if op in (Op.ADD, Op.RELU_GRAD):
        arity(2)
        a, b = shapes
        if len(a) != len(b) or not all(_same_dim(x, y) for x, y in zip(a, b)):
            raise GraphError(f"{op.value} shape mismatch: {_fmt(a)} vs {_fmt(b)}")
        return a
    if op is Op.COL_SUM:
        arity(1)
        rank(shapes[0], 2, "X")
        return (shapes[0][1],)
    if op is Op.SOFTMAX_XENT_GRAD:
        arity(3)
        rank(shapes[2], 0, "upstream gradient")
        return shapes[0]
    if op is Op.MUL_SCALAR:
        arity(2)
        rank(shapes[1], 0, "scalar")
        return shapes[0]
    raise GraphError(f"unknown op {op}")


# ---------------------------------------------------------------- scheduling


def topo_schedule(graph: Graph, fetches: Iterable[NodeId]) -> list[NodeId]:
    """Ancestors of ``fetches`` in dependency order, ties broken by ascending id."""
    needed: set[NodeId] = set()
    stack = [int(f) for f in fetches]
    for f in stack:
        if not 0 <= f < len(graph):
            raise GraphError(f"fetch id {f} not in graph")
    while stack:
        nid = stack.pop()
        if nid in needed:
            continue
        needed.add(nid)
        stack.extend(graph[nid].inputs)

    pending = {nid: len(set(graph[nid].inputs)) for nid in needed}
    consumers: dict[NodeId, list[NodeId]] = {}
    for nid in needed:
        for i in set(graph[nid].inputs):
            consumers.setdefault(i, []).append(nid)
    ready = [nid for nid, k in pending.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for c in consumers.get(nid, ()):
            pending[c] -= 1
            if pending[c] == 0:
                heapq.heappush(ready, c)
    return order


# ---------------------------------------------------------------- kernels


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_xent(logits, onehot):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -(onehot * logp).sum() / logits.shape[0]


def _matmul(node, a, b):
    if node.attrs.get("transpose_a"):
        a = a.T
    if node.attrs.get("transpose_b"):
        b = b.T
    return a @ b


_KERNELS = {
    Op.MATMUL: _matmul,
    Op.ADD_BIAS: lambda n, x, b: x + b,
    Op.RELU: lambda n, x: np.maximum(x, 0),
    Op.SOFTMAX_XENT: lambda n, lg, oh: _softmax_xent(lg, oh),
    Op.SUM_SQUARES: lambda n, x: np.sum(x * x),
    Op.SCALE: lambda n, x: x * n.attrs["c"],
    Op.ADD: lambda n, a, b: a + b,
    Op.COL_SUM: lambda n, x: x.sum(axis=0),
    Op.RELU_GRAD: lambda n, dy, x: dy * (x > 0),
    Op.SOFTMAX_XENT_GRAD: lambda n, lg, oh, g: ((_softmax(lg) - oh) / lg.shape[0]) * g,
    Op.MUL_SCALAR: lambda n, x, s: x * s,
}


# ---------------------------------------------------------------- session


def _philox(master_seed: int, index: int) -> np.random.Generator:
    if not 0 <= master_seed < 2**64:
        raise SessionError(f"master_seed must be in [0, 2**64), got {master_seed}")
    return np.random.Generator(np.random.Philox(key=(int(master_seed) << 64) | int(index)))


def initial_value(node: Node, master_seed: int, dtype) -> np.ndarray:
    """Value of a variable under its initializer; a pure function of (seed, node id)."""
    init: Initializer = node.attrs["init"]
    shape = node.shape
    if init.kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    if init.kind == "constant":
        return np.full(shape, init.low, dtype=dtype)
    if init.kind == "uniform":
        u = _philox(master_seed, node.id).random(shape, dtype=np.float64)
        v = (init.low + (init.high - init.low) * u).astype(dtype)
        # rounding can land exactly on the open upper bound
        top = np.nextafter(dtype(init.high), dtype(init.low))
        return np.minimum(v, top)
    raise SessionError(f"unknown initializer {init.kind!r}")


class Session:
    """Owns variable values for one graph and executes fetches."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.store: dict[NodeId, np.ndarray] = {}
        self.runs = 0

    @property
    def initialized(self) -> bool:
        return bool(self.store) or not self.graph.variables()

    def initialize(self, master_seed: int = 0) -> None:
        dtype = self.graph.np_dtype
        for vid in self.graph.variables():
            self.store[vid] = initial_value(self.graph[vid], master_seed, dtype)

    def value(self, var: NodeId) -> np.ndarray:
        self._require_var(var)
        return self.store[var]

    def assign(self, var: NodeId, value) -> None:
        self._require_var(var)
        value = np.asarray(value, dtype=self.graph.np_dtype)
        if value.shape != self.store[var].shape:
            raise SessionError(f"assign to {self.graph[var]}: got shape {list(value.shape)}")
        self.store[var][...] = value

    def assign_delta(self, var: NodeId, delta, scale: float) -> None:
        """In place ``value <- value + scale * delta``."""
        self._require_var(var)
        cur = self.store[var]
        delta = np.asarray(delta, dtype=cur.dtype)
        if delta.shape != cur.shape:
            raise SessionError(
                f"assign_delta on {self.graph[var]}: delta shape {list(delta.shape)} "
                f"!= {list(cur.shape)}"
            )
        cur += cur.dtype.type(scale) * delta

    def _require_var(self, var: NodeId):
        if not 0 <= var < len(self.graph) or self.graph[var].op is not Op.VARIABLE:
            raise SessionError(f"node {var} is not a variable")
        if var not in self.store:
            raise SessionError("variables are not initialized; call initialize() first")

    def run(self, fetches, feeds: Mapping[NodeId, object] | None = None):
        """Evaluate ``fetches`` (an id or list of ids). Variables are read, never written."""
        single = isinstance(fetches, (int, np.integer))
        fetch_list = [int(fetches)] if single else [int(f) for f in fetches]
        if not self.initialized:
            raise SessionError("variables are not initialized; call initialize() first")
        feeds = feeds or {}
        g = self.graph
        dtype = g.np_dtype
        values: dict[NodeId, np.ndarray] = {}
        for nid in topo_schedule(g, fetch_list):
            node = g[nid]
            if node.op is Op.PLACEHOLDER:
                if nid not in feeds:
                    raise SessionError(f"placeholder {node} was not fed")
                out = np.asarray(feeds[nid], dtype=dtype)
                if len(out.shape) != len(node.shape) or not all(
                    _same_dim(a, b) for a, b in zip(node.shape, out.shape)
                ):
                    raise SessionError(f"feed for {node} has shape {list(out.shape)}")
            elif node.op is Op.VARIABLE:
                out = self.store[nid]
            elif node.op is Op.ZEROS:
                out = np.zeros(node.shape, dtype=dtype)
            elif node.op is Op.FILL:
                out = np.asarray(node.attrs["value"], dtype=dtype)
            else:
                with np.errstate(all="ignore"):
                    out = _KERNELS[node.op](node, *(values[i] for i in node.inputs))
                out = np.asarray(out, dtype=dtype)
            if not np.all(np.isfinite(out)):
                raise NumericFault(f"non-finite value produced by {node}")
            values[nid] = out
        self.runs += 1
        outs = [values[f].copy() for f in fetch_list]
        return outs[0] if single else outs

    def digest(self, variables: Sequence[NodeId] | None = None) -> str:
        """64-bit hex checksum of variable bytes in canonical order."""
        h = hashlib.blake2b(digest_size=8)
        for vid in sorted(variables if variables is not None else self.store):
            h.update(np.ascontiguousarray(self.value(vid)).tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------- autodiff


def gradients(graph: Graph, loss: NodeId, wrt: Sequence[NodeId]) -> list[NodeId]:
    """Append the reverse-mode gradient subgraph of scalar ``loss`` w.r.t. ``wrt``.

    Contributions reaching a node from several consumers are summed with Add
    nodes in reverse schedule order, so the emitted subgraph is deterministic.
    """
    if graph[loss].shape != ():
        raise GraphError(f"loss must be scalar, got {graph[loss]}")
    for w in wrt:
        if graph[w].op is not Op.VARIABLE:
            raise GraphError(f"gradient target {graph[w]} is not a variable")

    order = topo_schedule(graph, [loss])
    targets = set(wrt)
    needs = set()
    for nid in order:
        if nid in targets or any(i in needs for i in graph[nid].inputs):
            needs.add(nid)

    pending: dict[NodeId, list[NodeId]] = {}
    total: dict[NodeId, NodeId] = {}
    if loss in needs:
        pending[loss] = [graph.add(Op.FILL, (), value=1.0)]
    for nid in reversed(order):
        if nid not in pending:
            continue
        parts = pending.pop(nid)
        g = parts[0]
        for p in parts[1:]:
            g = graph.add(Op.ADD, (g, p))
        total[nid] = g
        for inp, contrib in _backprop(graph, graph[nid], g, needs):
            pending.setdefault(inp, []).append(contrib)

    out = []
    for w in wrt:
        if w in total:
            out.append(total[w])
        else:
            out.append(graph.add(Op.ZEROS, (), shape=graph[w].shape))
    return out


def _backprop(graph: Graph, node: Node, g: NodeId, needs: set):
    """Yield (input id, gradient contribution id) for inputs on a path to a target."""
    op, ins = node.op, node.inputs
    want = [i in needs for i in ins]
    if op is Op.MATMUL:
        a, b = ins
        ta, tb = node.attrs.get("transpose_a", False), node.attrs.get("transpose_b", False)
        # C = op(A) op(B);  d op(A) = dC op(B)^T,  d op(B) = op(A)^T dC
        if want[0]:
            if ta:
                yield a, graph.add(Op.MATMUL, (b, g), transpose_a=tb, transpose_b=True)
            else:
                yield a, graph.add(Op.MATMUL, (g, b), transpose_b=not tb)
        if want[1]:
            if tb:
                yield b, graph.add(Op.MATMUL, (g, a), transpose_a=True, transpose_b=ta)
            else:
                yield b, graph.add(Op.MATMUL, (a, g), transpose_a=not ta)
    elif op is Op.ADD_BIAS:
        if want[0]:
            yield ins[0], g
        if want[1]:
            yield ins[1], graph.add(Op.COL_SUM, (g,))
    elif op is Op.RELU:
        if want[0]:
            yield ins[0], graph.add(Op.RELU_GRAD, (g, ins[0]))
    elif op is Op.SOFTMAX_XENT:
        # labels are treated as constants
        if want[0]:
            yield ins[0], graph.add(Op.SOFTMAX_XENT_GRAD, (ins[0], ins[1], g))
    elif op is Op.SUM_SQUARES:
        if want[0]:
            yield ins[0], graph.add(Op.MUL_SCALAR, (graph.add(Op.SCALE, (ins[0],), c=2.0), g))
    elif op is Op.SCALE:
        if want[0]:
            yield ins[0], graph.add(Op.SCALE, (g,), c=node.attrs["c"])
    elif op is Op.ADD:
        for i, w in zip(ins, want):
            if w:
                yield i, g
    elif op is Op.MUL_SCALAR:
        if want[0]:
            yield ins[0], graph.add(Op.MUL_SCALAR, (g, ins[1]))
        if want[1]:
            raise GraphError("gradient through a MulScalar scalar operand is not supported")
    elif op in (Op.VARIABLE, Op.PLACEHOLDER, Op.ZEROS, Op.FILL):
        return
    else:
        raise GraphError(f"no gradient rule for {op.value}")
