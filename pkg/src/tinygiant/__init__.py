"""A desk-scale region-aware vision-language model with Laplace-gated experts.

Everything runs on numpy: a small tape autodiff, toy patch encoders, region
fusion, a mixture-of-experts router and a pre-norm encoder-decoder, plus a
synthetic warehouse-scene benchmark to train and score it on.
"""

from .config import RunConfig, TrainConfig
from .data import DataConfig, generate_dataset, normalize_answer, score
from .model import ModelConfig, TinyGiantVLM, full_forward, make_batch
from .moe import GateDecision, MoeConfig, moe_forward, route
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "DataConfig",
    "GateDecision",
    "ModelConfig",
    "MoeConfig",
    "RunConfig",
    "Tape",
    "Tensor",
    "TinyGiantVLM",
    "TrainConfig",
    "full_forward",
    "generate_dataset",
    "make_batch",
    "moe_forward",
    "normalize_answer",
    "route",
    "score",
]
