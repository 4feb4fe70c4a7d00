"""Reverse-mode autodiff with the 3D layers used by the GAN and the segmenter."""

from . import kernels, ops
from .nn import Conv3d, ConvTranspose3d, InstanceNorm3d, Module
from .ops import (
    activation,
    conv3d,
    conv_transpose3d,
    instance_norm3d,
    trilinear_upsample,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, active_tape


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``.grad`` for every tensor on ``tape`` that contributes to ``loss``."""
    tape.backward(loss)


__all__ = [
    "Adam", "AdamState", "Conv3d", "ConvTranspose3d", "InstanceNorm3d", "Module", "Tape",
    "Tensor", "activation", "active_tape", "adam_step", "backward", "conv3d",
    "conv_transpose3d", "instance_norm3d", "kernels", "ops", "trilinear_upsample",
]
