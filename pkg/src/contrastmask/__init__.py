"""Query-sharing pixel-level contrastive learning for partially-supervised
instance segmentation, on a synthetic-shapes benchmark."""

from .config import TrainConfig, desk_config, load_config

__all__ = ["TrainConfig", "desk_config", "load_config"]
__version__ = "0.1.0"
