"""Knowledge adapters plugged outside a frozen transformer backbone.

Submodules:

``ndgrad``      float64 tensors with reverse-mode autodiff
``backbone``    small post-norm transformer encoder
``adapter``     adapter layers, fusion and parameter counting
``tasks``       task heads, losses and metrics
``trainer``     AdamW loop, adapter pre-training, fine-tuning, forgetting runs
``checkpoint``  binary named-tensor archive
``corpus``      vocabulary, synthetic generators, file formats, task encoders
``probe``       masked-token output layer and P@1
``cli``         the ``kadapter`` command
"""
from .adapter import AdapterConfig, adapter_forward, fuse, init_adapter, param_count
from .backbone import BackboneConfig, encode, init_backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, finetune, forgetting_experiment, pretrain_adapter

__all__ = [
    "AdapterConfig", "BackboneConfig", "Checkpoint", "TrainConfig",
    "adapter_forward", "encode", "finetune", "forgetting_experiment", "fuse",
    "init_adapter", "init_backbone", "load_checkpoint", "param_count",
    "pretrain_adapter", "save_checkpoint",
]

__version__ = "0.1.0"
