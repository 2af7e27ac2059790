"""Two-branch cross-modal 3D body-mesh regression at desk scale."""

from .config import (AugmentConfig, BlockConfig, DataSpec, LossWeights, ModelConfig,
                     RunConfig, TrainConfig, load_config, paper_shape, small_toy)
from .tensor import (ContractViolation, DimensionError, Tape, Tensor, backward,
                     no_grad, tape_scope)
from .model import TwoBranchModel
from .trainer import benchmark, evaluate_model, flop_estimate, train

__all__ = [
    "AugmentConfig", "BlockConfig", "ContractViolation", "DataSpec", "DimensionError",
    "LossWeights", "ModelConfig", "RunConfig", "Tape", "Tensor", "TrainConfig",
    "TwoBranchModel", "backward", "benchmark", "evaluate_model", "flop_estimate",
    "load_config", "no_grad", "paper_shape", "small_toy", "tape_scope", "train",
]

__version__ = "0.1.0"
