"""Binarized low-light raw video enhancement in numpy."""
from .model import BrveModel, FlopsReport, ModelConfig, load_checkpoint, save_checkpoint
from .rawpipe import NoiseParams, RawSequence, synth_sequence

__version__ = "0.1.0"
