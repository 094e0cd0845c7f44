from .model import (
    BUILTIN_NAMES,
    DEFAULT_MACHINE,
    CostModelError,
    LayerSpec,
    MachineParams,
    NetworkSpec,
    ScalingPrediction,
    builtin,
    calibrate,
    comm_rounds,
    curve_csv,
    load_spec,
    predict,
    ratio_relative_to,
    speedup_curve,
    step_comm_time,
    totals,
)

__all__ = [
    "BUILTIN_NAMES",
    "DEFAULT_MACHINE",
    "CostModelError",
    "LayerSpec",
    "MachineParams",
    "NetworkSpec",
    "ScalingPrediction",
    "builtin",
    "calibrate",
    "comm_rounds",
    "curve_csv",
    "load_spec",
    "predict",
    "ratio_relative_to",
    "speedup_curve",
    "step_comm_time",
    "totals",
]
