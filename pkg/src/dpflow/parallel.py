"""Synchronous data-parallel SGD over a CommWorld.

Each rank holds a full replica. Rank 0's initial variables are broadcast in
canonical (ascending node id) order; every step each rank computes gradient
sums over its slice of the global batch, the sums are allreduced one variable
at a time in the same order, divided by the global batch size and applied
identically everywhere. With p = 1 this is plain minibatch SGD.
"""

from __future__ import annotations

import csv
import hashlib
import io
import time
from dataclasses import dataclass

import numpy as np

from .comm import CommWorld, allreduce_sum, broadcast
from .datasets import Dataset, batch_slice, one_hot
from .engine import NodeId, Session, gradients

LAYOUT_TAG = 0xFFFF0001


class ReplicaMismatch(RuntimeError):
    """Ranks built different variable lists."""


@dataclass(frozen=True)
class StepRecord:
    step: int
    loss: float
    wall_ms: float
    msgs: int
    bytes: int


class ReplicaTrainer:
    """One rank's replica: session, world, optimizer state, sync schedule.

    ``inputs``/``labels`` are the placeholders for a batch of features and its
    one-hot labels; ``loss`` must be the batch-mean loss.
    """

    def __init__(self, session: Session, world: CommWorld, loss: NodeId, inputs: NodeId,
                 labels: NodeId, learning_rate: float, global_batch: int, momentum: float = 0.0):
        if learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if global_batch < 1:
            raise ValueError("global_batch must be >= 1")
        self.session = session
        self.world = world
        self.graph = session.graph
        self.loss = loss
        self.inputs = inputs
        self.labels = labels
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.global_batch = global_batch
        self.variables = sorted(self.graph.variables())
        self.grad_nodes = gradients(self.graph, loss, self.variables)
        self.velocity = [np.zeros(self.graph[v].shape, self.graph.np_dtype) for v in self.variables]
        self.timeline: list[tuple[int, str, float]] = []
        self._check_layout()

    @property
    def dtype(self):
        return self.graph.np_dtype

    def layout_digest(self) -> bytes:
        h = hashlib.blake2b(digest_size=8)
        h.update(self.graph.dtype.encode())
        for v in self.variables:
            h.update(repr((v, self.graph[v].shape)).encode())
        return h.digest()

    def _check_layout(self):
        mine = np.frombuffer(self.layout_digest(), dtype=np.uint8).copy()
        root = mine.copy()
        broadcast(self.world, root, root=0, tag=LAYOUT_TAG)
        if not np.array_equal(mine, root):
            raise ReplicaMismatch(
                f"rank {self.world.rank}: variable list differs from rank 0 "
                f"({mine.tobytes().hex()} != {root.tobytes().hex()})"
            )

    def broadcast_model(self) -> None:
        """Overwrite every variable with rank 0's value, one broadcast per variable."""
        for v in self.variables:
            broadcast(self.world, self.session.value(v), root=0, tag=v)

    def local_gradient_sums(self, local_inputs, local_labels) -> tuple[list[np.ndarray], float]:
        """Per-variable gradient sums and the loss sum over this rank's samples."""
        m = len(local_labels)
        if m == 0:
            return [np.zeros_like(v) for v in self.velocity], 0.0
        feeds = {
            self.inputs: local_inputs,
            self.labels: one_hot(np.asarray(local_labels), self.graph[self.labels].shape[1], self.dtype),
        }
        loss, *grads = self.session.run([self.loss, *self.grad_nodes], feeds)
        return [g * m for g in grads], float(loss) * m

    def sync_gradients(self, gradient_sums, local_loss_sum: float) -> tuple[list[np.ndarray], float]:
        """Allreduce each gradient sum in canonical order and divide by the global batch.

        The loss sum rides as one extra element on the last variable's buffer, so a
        step costs exactly one collective per variable.
        """
        out = []
        last = len(self.variables) - 1
        global_loss = 0.0
        for i, (v, g) in enumerate(zip(self.variables, gradient_sums)):
            buf = np.asarray(g, dtype=self.dtype).ravel()
            if i == last:
                buf = np.append(buf, self.dtype(local_loss_sum))
            else:
                buf = buf.copy()
            allreduce_sum(self.world, buf, tag=v)
            if i == last:
                global_loss = float(buf[-1]) / self.global_batch
                buf = buf[:-1]
            out.append((buf / self.global_batch).reshape(self.graph[v].shape))
        return out, global_loss

    def apply_update(self, averaged_gradients) -> None:
        """Momentum SGD: v <- mu*v + g; w <- w - lr*v."""
        if len(averaged_gradients) != len(self.variables):
            raise ValueError("gradient list does not match variable list")
        for k, (v, g) in enumerate(zip(self.variables, averaged_gradients)):
            g = np.asarray(g, dtype=self.dtype)
            if g.shape != self.velocity[k].shape:
                raise ValueError(f"gradient for {self.graph[v]} has shape {list(g.shape)}")
            self.velocity[k] = self.dtype(self.momentum) * self.velocity[k] + g
            self.session.assign_delta(v, self.velocity[k], -self.learning_rate)

    def step(self, dataset: Dataset, step: int, shuffle_seed: int | None = None) -> StepRecord:
        t0 = time.perf_counter()
        self.timeline.append((step, "start", time.monotonic()))
        before = self.world.stats()
        sl = batch_slice(dataset.n, self.global_batch, step, self.world.rank, self.world.size, shuffle_seed)
        sums, loss_sum = self.local_gradient_sums(dataset.inputs[sl.indices], dataset.labels[sl.indices])
        self.timeline.append((step, "computed", time.monotonic()))
        averaged, loss = self.sync_gradients(sums, loss_sum)
        self.apply_update(averaged)
        self.timeline.append((step, "end", time.monotonic()))
        delta = self.world.stats() - before
        return StepRecord(step, loss, (time.perf_counter() - t0) * 1e3, delta.messages_sent, delta.bytes_sent)

    def train(self, dataset: Dataset, steps: int, shuffle_seed: int | None = None) -> list[StepRecord]:
        self.broadcast_model()
        return [self.step(dataset, s, shuffle_seed) for s in range(steps)]

    def digest(self) -> str:
        return self.session.digest(self.variables)


def records_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "loss", "wall_ms", "msgs", "bytes"])
    for r in records:
        w.writerow([r.step, f"{r.loss:.17g}", f"{r.wall_ms:.3f}", r.msgs, r.bytes])
    return buf.getvalue()
