"""stalepipe: block-pipelined neural-net training with layer-wise stale parameters.

The package splits a dense network into K blocks that train concurrently,
exchanging activations and error gradients through bounded FIFO queues whose
depths set each block's parameter staleness. Alongside the runtime it ships
a serial reference emulation (bitwise-equal to the parallel runtime), a
standalone stale-gradient operator, a discrete-event schedule simulator for
throughput and straggler studies, learning-rate bound calculators, and an
HTTP service plus CLI wrapping it all.
"""

__version__ = "0.1.0"

from .blocks import Block, LayerSpec, Model, build_model, dense, init_params, relu, tanh
from .data import Dataset, TeacherSpec, batch_iter, gen_teacher_dataset, load_idx, save_idx
from .optim import LrSchedule, OptimizerState, lr_at, sgd_step, sum_step
from .pipeline import (
    ActivationPacket,
    ConfigError,
    GradPacket,
    PipelineConfig,
    StalenessProfile,
    TrainEngine,
    TrainLog,
    bp_gradient,
    grad_deviation,
    stale_gradient,
    staleness_of,
    validate_config,
)
from .rng import SeededRng, derive_seed
from .simulate import CostModel, RunStats, StragglerModel, simulate, straggler_comparison
from .tensor import activation_forward, activation_vjp, finite_diff_grad, matmul, softmax_xent
from .theory import (
    estimate_constants,
    lemma1_report,
    lemma_bound_rhs,
    momentum_lr_bound,
    momentum_loss_bound,
    sgd_loss_bound,
    sgd_lr_bound,
)

__all__ = [
    "ActivationPacket",
    "Block",
    "ConfigError",
    "CostModel",
    "Dataset",
    "GradPacket",
    "LayerSpec",
    "LrSchedule",
    "Model",
    "OptimizerState",
    "PipelineConfig",
    "RunStats",
    "SeededRng",
    "StalenessProfile",
    "StragglerModel",
    "TeacherSpec",
    "TrainEngine",
    "TrainLog",
    "activation_forward",
    "activation_vjp",
    "batch_iter",
    "bp_gradient",
    "build_model",
    "dense",
    "derive_seed",
    "estimate_constants",
    "finite_diff_grad",
    "gen_teacher_dataset",
    "grad_deviation",
    "init_params",
    "lemma1_report",
    "lemma_bound_rhs",
    "load_idx",
    "lr_at",
    "matmul",
    "momentum_lr_bound",
    "momentum_loss_bound",
    "relu",
    "save_idx",
    "sgd_loss_bound",
    "sgd_lr_bound",
    "sgd_step",
    "simulate",
    "softmax_xent",
    "stale_gradient",
    "staleness_of",
    "straggler_comparison",
    "sum_step",
    "tanh",
    "validate_config",
]
