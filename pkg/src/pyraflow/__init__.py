"""Learned spatial-pyramid optical flow at desk scale, in numpy."""

from .errors import ConfigError, FormatError, NumericError, PyraflowError
from .model import PyramidConfig, PyramidNet, count_params, checkpoint_size_bytes, forward, init_net
from .synth import GenConfig, Sample, generate_dataset, load_dataset, make_sample
from .train import TrainConfig, epe_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .evalbench import bench_inference, evaluate, zero_flow_baseline

__version__ = "0.1.0"
