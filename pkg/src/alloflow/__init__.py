"""One-step restoration flows on a shared velocity field, at toy scale."""

from .config import ConfigError, ExperimentConfig, derive_seed
from .data import DataSpec, DegradeSpec, PairedDataset, SampleSet, build_dataset, sample_clean
from .flow import Trajectory, euler_sample, interpolate, one_step_restore, rescaled_sr_state
from .metrics import MetricReport, energy_distance, gradcheck, mse, psnr_toy, trajectory_curvature
from .net import NetConfig, VelocityNet, load, save
from .snr import SnrSearchConfig, TStarResult, find_t_star
from .trainer import TrainConfig, pretrain, train_sr

__version__ = "0.1.0"
