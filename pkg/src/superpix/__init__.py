"""Superpixel segmentation with deep features and a trainable bottom-up clustering."""

from superpix.imgio import FeatureTensor, MultiChannelImage, RawImage, SuperpixelMap

__version__ = "0.1.0"

__all__ = ["FeatureTensor", "MultiChannelImage", "RawImage", "SuperpixelMap"]
