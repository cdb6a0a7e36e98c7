"""Experiment stages shared by the command line and the acceptance checks.

Each stage takes a resolved :class:`ExperimentConfig` and returns in-memory
objects; writing files is left to the caller.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import ExperimentConfig, derive_seed
from .data import PairedDataset, build_dataset, sample_clean
from .flow import Trajectory, euler_sample
from .metrics import MetricReport, energy_distance, mse, psnr_toy, trajectory_curvature
from .net import VelocityNet
from .snr import TStarResult, find_t_star
from .trainer import RunReport, pretrain, train_sr


def make_dataset(cfg: ExperimentConfig, split: str = "train") -> PairedDataset:
    data, degrade, n = cfg.split_specs(split)
    ds = build_dataset(data, degrade, n)
    ds.provenance["split"] = split
    ds.provenance["config"] = cfg.to_dict()
    return ds


def fresh_clean(cfg: ExperimentConfig, n: int, component: str = "reference") -> np.ndarray:
    """Clean points from the data distribution, independent of every split."""
    spec = dataclasses.replace(cfg.data, seed=derive_seed(cfg.data.seed, component))
    return sample_clean(spec, n)


def run_pretrain(cfg: ExperimentConfig, checkpoint_path=None, progress=None) -> tuple[VelocityNet, RunReport]:
    net = VelocityNet(cfg.net_config)
    meta = {"stage": "pretrain", "config": cfg.to_dict()}
    net.meta = meta
    report = pretrain(net, cfg.data, cfg.pretrain, checkpoint_path, meta, progress)
    return net, report


def run_find_tstar(cfg: ExperimentConfig, ds: PairedDataset) -> TStarResult:
    return find_t_star(ds, cfg.snr)


def run_train_sr(
    cfg: ExperimentConfig,
    pretrained: VelocityNet,
    ds: PairedDataset,
    t_star: float,
    checkpoint_path=None,
    progress=None,
    **overrides,
) -> tuple[VelocityNet, RunReport]:
    """Fine-tune a copy of ``pretrained``; ``overrides`` replace train_sr fields."""
    tc = dataclasses.replace(cfg.train_sr, t_star=float(t_star), **overrides)
    net = pretrained.copy()
    meta = {"stage": "train_sr", "t_star": float(t_star), "config": cfg.to_dict(),
            "train": dataclasses.asdict(tc)}
    net.meta = meta
    report = train_sr(net, ds, tc, checkpoint_path, meta, progress)
    return net, report


def generate(net: VelocityNet, n: int, steps: int, seed: int) -> Trajectory:
    """Euler generation from standard normal noise at t=1 down to t=0."""
    noise = np.random.default_rng(seed).standard_normal((n, net.config.in_dim))
    return euler_sample(net.forward, noise, 1.0, 0.0, steps)


def restore(net: VelocityNet, z_l, t_star: float) -> np.ndarray:
    z_l = np.asarray(z_l, dtype=np.float64)
    return z_l - t_star * net.forward(z_l, t_star)


def restoration_path(net: VelocityNet, z_l, t_star: float, steps: int) -> Trajectory:
    return euler_sample(net.forward, np.asarray(z_l, dtype=np.float64), t_star, 0.0, steps)


def evaluate(points, reference, paired: bool, trajectory: Trajectory | None = None,
             seeds: dict | None = None) -> MetricReport:
    """Metrics of ``points`` against ``reference``; MSE/PSNR only when ``paired``."""
    points = np.asarray(points, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    return MetricReport(
        mse=mse(points, reference) if paired else None,
        psnr_toy=psnr_toy(points, reference) if paired else None,
        energy_distance=energy_distance(points, reference),
        curvature=trajectory_curvature(trajectory) if trajectory is not None else None,
        n_samples=len(points),
        n_reference=len(reference),
        seeds=dict(seeds or {}),
    )
