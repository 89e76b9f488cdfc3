from .adam import AdamConfig, adam_update
from .node import OptimizerNode, Stage
from .store import LayerSpec, ModelStateStore, StoreError, TokenBucket, layout

__all__ = [
    "AdamConfig",
    "LayerSpec",
    "ModelStateStore",
    "OptimizerNode",
    "Stage",
    "StoreError",
    "TokenBucket",
    "adam_update",
    "layout",
]
