"""relulab: train ReLU networks under emulated IEEE precisions and measure
how the choice of ReLU'(0) changes backpropagation and training."""

__version__ = "0.1.0"

from .bifurcation import (
    BifurcationReport,
    MembershipResult,
    PlaneScan,
    estimate_volume,
    hoeffding_margin,
    plane_scan,
    s01_membership,
    sweep,
)
from .data import Dataset, SyntheticSpec, load_idx, make_synthetic
from .engine import (
    BackpropResult,
    GradientVector,
    SubgradientPolicy,
    Tape,
    backprop,
    derived_primitive,
    emulated_subgradient_relu,
    relu_reverse,
)
from .kernels import dot_accumulate, matmul_rounded
from .network import (
    BatchNormState,
    ForwardTrace,
    NetworkSpec,
    WeightVector,
    forward,
    init_kaiming_uniform,
    load_checkpoint,
    save_checkpoint,
)
from .precision import (
    Precision,
    RoundedTensor,
    round_array,
    round_to,
    rounded_add,
    rounded_div,
    rounded_exp,
    rounded_log,
    rounded_mul,
    rounded_sub,
)
from .training import (
    AdamState,
    GradientExplosionError,
    TrainConfig,
    TrajectoryRecord,
    adam_step,
    evaluate,
    run_paired,
    sgd_step,
)

__all__ = [name for name in dir() if not name.startswith("_")]
