"""Dense float64 autodiff, parameter storage and the two model families."""
from .grad import GRANULARITIES, batch_loss, finite_difference_check, loss_and_grad, subset
from .lora import LoRAAdapterConfig, adapter_names, attach_lora, merge_lora
from .models import Bound, ModelConfig, build_model, make_forward
from .store import (CheckpointError, GradientRecord, ParameterStore, checkpoint_bytes,
                    checkpoint_from_bytes, load_checkpoint, save_checkpoint)
from .tensor import NonFiniteError, Tensor

__all__ = [
    "Bound", "CheckpointError", "GRANULARITIES", "GradientRecord", "LoRAAdapterConfig",
    "ModelConfig", "NonFiniteError", "ParameterStore", "Tensor", "adapter_names",
    "attach_lora", "batch_loss", "build_model", "checkpoint_bytes", "checkpoint_from_bytes",
    "finite_difference_check", "load_checkpoint", "loss_and_grad", "make_forward",
    "merge_lora", "save_checkpoint", "subset",
]
