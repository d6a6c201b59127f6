"""Zero-initialised low-rank residual adapters for frozen transformer encoders."""

from .adapter import (
    ZERO_INIT,
    AdapterParams,
    InitScheme,
    adapter_forward,
    adapter_param_count,
    init_adapter,
    residual_apply,
    total_trainable_count,
)
from .backbone import (
    EncoderState,
    ModelConfig,
    attach_downstream,
    classify,
    encode,
    init_encoder,
    pretrain_frozen_backbone,
)
from .estimator import AdapterTuneClassifier
from .training import TrainConfig, evaluate, loss_and_grads, train

__version__ = "0.1.0"

__all__ = [
    "AdapterParams",
    "InitScheme",
    "ZERO_INIT",
    "adapter_forward",
    "residual_apply",
    "init_adapter",
    "adapter_param_count",
    "total_trainable_count",
    "ModelConfig",
    "EncoderState",
    "init_encoder",
    "attach_downstream",
    "encode",
    "classify",
    "pretrain_frozen_backbone",
    "TrainConfig",
    "train",
    "evaluate",
    "loss_and_grads",
    "AdapterTuneClassifier",
]
