"""Minimal deterministic CNN inference engine and loss library."""

from .blob import load_blob, save_blob
from .losses import LossConfig, cross_entropy, detection_loss, focal_loss, l1_loss
from .ops import (BN_EPS, ConvParams, InceptionModuleParams, batchnorm_relu,
                  concat_depth, conv2d, deconv2d, inception_block,
                  inception_module, maxpool2, softmax_channels)

__all__ = [
    "BN_EPS", "ConvParams", "InceptionModuleParams", "LossConfig",
    "batchnorm_relu", "concat_depth", "conv2d", "cross_entropy", "deconv2d",
    "detection_loss", "focal_loss", "inception_block", "inception_module",
    "l1_loss", "load_blob", "maxpool2", "save_blob", "softmax_channels",
]
