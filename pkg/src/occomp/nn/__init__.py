from .layers import (
    Conv2d,
    Dense,
    MaxPool,
    ModelGraph,
    ReLU,
    SoftmaxCrossEntropy,
    build_model,
    im2col,
    im2col_batch,
)
from .optim import Adam, LrSchedule, Sgd
from .train import evaluate, load_checkpoint, save_checkpoint, train_steps

__all__ = [
    "Adam",
    "Conv2d",
    "Dense",
    "LrSchedule",
    "MaxPool",
    "ModelGraph",
    "ReLU",
    "Sgd",
    "SoftmaxCrossEntropy",
    "build_model",
    "evaluate",
    "im2col",
    "im2col_batch",
    "load_checkpoint",
    "save_checkpoint",
    "train_steps",
]
