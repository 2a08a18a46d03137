"""Encoder-decoder skin-lesion segmentation in plain numpy."""
from .checkpoint import Checkpoint
from .data import Sample, synth_lesion
from .netbuilder import GraphSpec, backward, build_fcn, build_preset, build_sgn, build_vgg_unet, forward
from .tensor import make_rng
from .trainer import RunConfig, evaluate, predict, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint", "GraphSpec", "RunConfig", "Sample",
    "backward", "build_fcn", "build_preset", "build_sgn", "build_vgg_unet",
    "evaluate", "forward", "make_rng", "predict", "synth_lesion", "train",
]
