"""Desk-scale template models, synthetic data and control-signal extractors."""

from .scenes import KINDS, Sample, SyntheticScene, load_dataset, make_dataset, save_dataset
from .signals import (EmpiricalCDF, brightness_signal, channel_means, contrast, edge_fraction,
                      edge_image, edge_map, sharpness_signal)
from .templates import (ImageConditionTemplate, ImageToLoRATemplate, InpaintTemplate,
                        PreferenceLoRATemplate, ScalarControlTemplate)

__all__ = [
    "KINDS", "Sample", "SyntheticScene", "load_dataset", "make_dataset", "save_dataset",
    "EmpiricalCDF", "brightness_signal", "channel_means", "contrast", "edge_fraction",
    "edge_image", "edge_map", "sharpness_signal",
    "ImageConditionTemplate", "ImageToLoRATemplate", "InpaintTemplate",
    "PreferenceLoRATemplate", "ScalarControlTemplate",
]
