"""Contrastive image-text models with pluggable spatial pooling, plus dense and bottom-up grouping inference."""
from .aggregation import ImagePool, pool_image, pool_text
from .model import JointModel
from .objective import LossConfig, contrastive_loss
from .training import TrainConfig, train_run

__version__ = "0.1.0"

__all__ = ["ImagePool", "JointModel", "LossConfig", "TrainConfig", "contrastive_loss", "pool_image", "pool_text",
           "train_run"]
