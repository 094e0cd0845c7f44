"""Model builders on top of the graph engine."""

from __future__ import annotations

from dataclasses import dataclass

from .engine import Graph, Initializer, NodeId


@dataclass
class MLP:
    graph: Graph
    inputs: NodeId
    labels: NodeId  # one-hot placeholder
    logits: NodeId
    loss: NodeId
    variables: list[NodeId]
    sizes: tuple[int, ...]

    @property
    def classes(self) -> int:
        return self.sizes[-1]


def mlp(sizes, dtype: str = "float64") -> MLP:
    """Fully connected ReLU network ``sizes[0] -> ... -> sizes[-1]`` with mean
    softmax cross-entropy loss. Weights are Glorot-uniform, biases zero."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"mlp needs at least input and output sizes, got {sizes}")
    g = Graph(dtype)
    x = g.placeholder((None, sizes[0]), name="inputs")
    y = g.placeholder((None, sizes[-1]), name="labels")
    variables = []
    h = x
    last = len(sizes) - 2
    for i, (fan_in, fan_out) in enumerate(zip(sizes, sizes[1:])):
        w = g.variable((fan_in, fan_out), Initializer.glorot_uniform(fan_in, fan_out), name=f"w{i}")
        b = g.variable((fan_out,), Initializer.zeros(), name=f"b{i}")
        variables += [w, b]
        h = g.add_bias(g.matmul(h, w), b)
        if i != last:
            h = g.relu(h)
    loss = g.softmax_cross_entropy(h, y, name="loss")
    return MLP(g, x, y, h, loss, variables, sizes)


def parse_mlp(text: str) -> tuple[int, ...]:
    """``"mlp:784-128-10"`` -> ``(784, 128, 10)``."""
    kind, _, dims = text.partition(":")
    if kind != "mlp" or not dims:
        raise ValueError(f"model must look like mlp:<d>-<h1>-...-<classes>, got {text!r}")
    try:
        sizes = tuple(int(v) for v in dims.split("-"))
    except ValueError:
        raise ValueError(f"bad layer sizes in {text!r}") from None
    if len(sizes) < 2 or min(sizes) < 1:
        raise ValueError(f"bad layer sizes in {text!r}")
    return sizes
