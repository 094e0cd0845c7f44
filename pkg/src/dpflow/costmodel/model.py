"""Strong-scaling cost model for synchronous data-parallel SGD.

    T(p) = C / (gamma * p) + ceil(log2 p) * sum_t (alpha + beta * bytes_t)

where ``C = batch * flops_per_sample`` and the sum runs over the tensors reduced
once per step (one allreduce each, recursive doubling).
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BUILTIN_DIR = Path(__file__).parent / "networks"
BUILTIN_NAMES = ("alexnet", "googlenet", "inceptionv3", "resnet50")


class CostModelError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    name: str
    flops_per_sample: float
    params: int

    def __post_init__(self):
        if self.flops_per_sample < 0 or self.params < 0:
            raise CostModelError(f"layer {self.name!r}: flops and params must be >= 0")


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    default_batch: int = 1

    def __init__(self, name: str, layers: Iterable[LayerSpec], default_batch: int = 1):
        layers = tuple(layers)
        if not layers:
            raise CostModelError(f"network {name!r} has no layers")
        if default_batch < 1:
            raise CostModelError(f"network {name!r}: default_batch must be >= 1")
        object.__setattr__(self, "name", name)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "default_batch", default_batch)

    def scaled(self, flops_factor: float = 1.0, params_factor: int = 1) -> "NetworkSpec":
        layers = [
            LayerSpec(l.name, l.flops_per_sample * flops_factor, l.params * params_factor)
            for l in self.layers
        ]
        return NetworkSpec(self.name, layers, self.default_batch)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "default_batch": self.default_batch,
            "layers": [asdict(l) for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            layers = [
                LayerSpec(str(l["name"]), float(l["flops_per_sample"]), int(l["params"]))
                for l in d["layers"]
            ]
            return cls(str(d["name"]), layers, int(d.get("default_batch", 1)))
        except (KeyError, TypeError) as exc:
            raise CostModelError(f"malformed network descriptor: {exc}") from exc


@dataclass(frozen=True)
class MachineParams:
    """alpha: s/message, beta: s/byte, gamma: FLOP/s."""

    alpha: float
    beta: float
    gamma: float
    bytes_per_param: int = 4
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0 and self.gamma > 0):
            raise CostModelError("alpha, beta and gamma must be strictly positive")
        if self.bytes_per_param not in (4, 8):
            raise CostModelError("bytes_per_param must be 4 or 8")


@dataclass(frozen=True)
class ScalingPrediction:
    p: int
    t_compute: float
    t_comm: float
    t_total: float
    speedup: float


def load_spec(path: str | Path) -> NetworkSpec:
    with open(path) as f:
        return NetworkSpec.from_dict(json.load(f))


def builtin(name: str) -> NetworkSpec:
    key = name.lower().replace("-", "").replace("_", "")
    if key not in BUILTIN_NAMES:
        raise CostModelError(f"unknown built-in network {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    return load_spec(BUILTIN_DIR / f"{key}.json")


def totals(spec: NetworkSpec) -> tuple[float, int]:
    flops = math.fsum(l.flops_per_sample for l in spec.layers)
    params = sum(l.params for l in spec.layers)
    return flops, params


def ratio_relative_to(spec: NetworkSpec, base: NetworkSpec) -> tuple[float, float, float]:
    """(compute_ratio, param_ratio, comp_per_param_ratio) of ``spec`` against ``base``."""
    f, n = totals(spec)
    bf, bn = totals(base)
    if bf == 0 or bn == 0:
        raise CostModelError(f"base network {base.name!r} has zero flops or params")
    if n == 0:
        raise CostModelError(f"network {spec.name!r} has zero params")
    return f / bf, n / bn, (f / n) / (bf / bn)


def comm_rounds(p: int) -> int:
    return math.ceil(math.log2(p)) if p > 1 else 0


def _tensor_sizes(spec: NetworkSpec, num_reduced_tensors: int | None) -> list[float]:
    if num_reduced_tensors is None:
        return [float(l.params) for l in spec.layers]
    if num_reduced_tensors < 1:
        raise CostModelError("num_reduced_tensors must be >= 1")
    _, params = totals(spec)
    return [params / num_reduced_tensors] * num_reduced_tensors


def step_comm_time(spec: NetworkSpec, machine: MachineParams, p: int,
                   num_reduced_tensors: int | None = None) -> float:
    rounds = comm_rounds(p)
    if rounds == 0:
        return 0.0
    sizes = _tensor_sizes(spec, num_reduced_tensors)
    per_round = math.fsum(machine.alpha + machine.beta * n * machine.bytes_per_param for n in sizes)
    return rounds * per_round


def predict(spec: NetworkSpec, machine: MachineParams, p: int, batch: int | None = None,
            num_reduced_tensors: int | None = None) -> ScalingPrediction:
    """Predict one training step on ``p`` ranks.

    ``num_reduced_tensors=None`` reduces each layer as its own tensor; an integer
    splits the total parameter count evenly over that many tensors.
    """
    if p < 1:
        raise CostModelError("p must be >= 1")
    batch = spec.default_batch if batch is None else batch
    flops, _ = totals(spec)
    work = batch * flops
    t1 = work / machine.gamma
    t_compute = t1 / p
    t_comm = step_comm_time(spec, machine, p, num_reduced_tensors)
    t_total = t_compute + t_comm
    return ScalingPrediction(p, t_compute, t_comm, t_total, t1 / t_total)


def speedup_curve(spec: NetworkSpec, machine: MachineParams, p_list: Sequence[int],
                  num_reduced_tensors: int | None = None) -> list[ScalingPrediction]:
    if not p_list:
        raise CostModelError("p_list is empty")
    if any(b <= a for a, b in zip(p_list, p_list[1:])):
        raise CostModelError("p_list must be strictly ascending")
    return [predict(spec, machine, p, spec.default_batch, num_reduced_tensors) for p in p_list]


def curve_csv(rows: Sequence[ScalingPrediction]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["p", "t_compute", "t_comm", "t_total", "speedup"])
    for r in rows:
        w.writerow([r.p, *(f"{v:.17g}" for v in (r.t_compute, r.t_comm, r.t_total, r.speedup))])
    return buf.getvalue()


def calibrate(targets: dict[str, float], p: int = 4, gamma: float = 1.5e12,
              bytes_per_param: int = 4, specs: dict[str, NetworkSpec] | None = None) -> MachineParams:
    """Solve (alpha, beta) so two networks hit target speedups at ``p`` ranks.

    Each target gives one linear equation
    ``rounds * (n_t * alpha + beta * bytes * P) = C / gamma * (1/S - 1/p)``.
    """
    if len(targets) != 2:
        raise CostModelError("calibration needs exactly two target networks")
    rows, rhs = [], []
    for name, s in targets.items():
        spec = (specs or {}).get(name) or builtin(name)
        flops, params = totals(spec)
        work = spec.default_batch * flops / gamma
        rounds = comm_rounds(p)
        rows.append([rounds * len(spec.layers), rounds * bytes_per_param * params])
        rhs.append(work * (1 / s - 1 / p))
    alpha, beta = np.linalg.solve(np.array(rows), np.array(rhs))
    return MachineParams(float(alpha), float(beta), gamma, bytes_per_param,
                         label=f"calibrated to {targets} at p={p}")


# Calibration, not measurement: alpha/beta solved with calibrate() so that
# AlexNet reaches 1.9x and GoogLeNet 3.21x at p=4 with gamma = 1.5 TFLOP/s
# (roughly a K40), then rounded to two significant digits.
DEFAULT_MACHINE = MachineParams(
    alpha=6.7e-4,
    beta=4.0e-10,
    gamma=1.5e12,
    bytes_per_param=4,
    label="calibrated to reported 4-GPU speedups (AlexNet <2x, GoogLeNet ~3.21x); not a measurement",
)
