from .layers import (
    Conv2d,
    Layer,
    MaxPool2x2,
    Param,
    ReLU,
    Sigmoid,
    UpsampleBilinear,
    bce_loss,
    bce_with_logits,
    bilinear_matrix,
    glorot_uniform,
    sigmoid,
)
from .optim import Nadam, NonFiniteGradient
from .gradcheck import GradReport, grad_check
from .checkpoint import CheckpointError, read_checkpoint, save_checkpoint, load_into
