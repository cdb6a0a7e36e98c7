"""Flow-matching pretraining and one-step SR fine-tuning.

Loss functions take a single pair (vectors) or a batch (``(n, d)`` arrays with
per-row times). Squared errors are averaged over components and then over
the batch; the parameter gradient of the returned loss, times ``scale``, is
accumulated into ``buf``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import DataSpec, PairedDataset, sample_clean
from .flow import NonFiniteError, interpolate, rescaled_sr_state
from .net import AdamState, GradBuffer, VelocityNet, adam_step, save

log = logging.getLogger(__name__)

ATM_VARIANTS = ("literal", "generated")


class TrainingAbort(RuntimeError):
    def __init__(self, iteration: int, component: str, detail: str = ""):
        self.iteration, self.component = iteration, component
        super().__init__(f"non-finite {component} at iteration {iteration} {detail}".rstrip())


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 16
    lr: float = 5e-5
    weight_decay: float = 0.0
    lambda_rec: float = 1.0
    w_rec: float = 1.0
    w_fatc: float = 1.0
    w_atm: float = 1.0
    t_star: float | None = None
    atm_variant: str = "literal"
    feature_dim: int = 8
    feature_seed: int = 7
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda_rec, self.w_rec, self.w_fatc, self.w_atm) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.iterations < 0 or self.batch_size < 1:
            raise ValueError("iterations must be >= 0 and batch_size >= 1")
        if self.t_star is not None and not (0.0 < self.t_star <= 1.0):
            raise ValueError("t_star must lie in (0, 1]")
        if self.atm_variant not in ATM_VARIANTS:
            raise ValueError(f"atm_variant must be one of {ATM_VARIANTS}")


SR_COLUMNS = ("iteration", "l_rec", "l_fatc", "atm_grad_norm", "update_norm")
CFM_COLUMNS = ("iteration", "l_cfm", "update_norm")


@dataclass
class RunReport:
    """One record per iteration; ``columns`` fixes the CSV layout."""

    records: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str | None = None
    columns: tuple[str, ...] = SR_COLUMNS

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.records])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for r in self.records:
            w.writerow([r["iteration"]] + [repr(float(r[c])) for c in self.columns[1:]])
        return buf.getvalue()

    def summary(self, config: dict | None = None) -> dict:
        # wall_time stays out: summaries must be byte-stable across reruns.
        last = self.records[-1] if self.records else {}
        return {
            "iterations": len(self.records),
            "final": {k: last.get(k) for k in self.columns[1:]},
            "checkpoint_path": self.checkpoint_path,
            "config": config,
        }


def feature_map(dim: int, feature_dim: int, seed: int) -> np.ndarray:
    """Fixed random projection standing in for a perceptual feature extractor."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((feature_dim, dim)) / np.sqrt(dim)


def _rows(z):
    z = np.asarray(z, dtype=np.float64)
    return np.atleast_2d(z)


def _times(t, n):
    return np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()


def _sq_loss_grad(pred, target):
    """Component-then-batch mean squared error and its gradient wrt ``pred``."""
    r = pred - target
    n, d = r.shape
    return float(np.mean(r * r)), 2.0 * r / (n * d)


def cfm_loss_and_grad(net: VelocityNet, x, eps, t, buf: GradBuffer | None, scale: float = 1.0) -> float:
    x, eps = _rows(x), _rows(eps)
    t = _times(t, len(x))
    x_t = interpolate(x, eps, t)
    loss, g = _sq_loss_grad(net.forward(x_t, t), eps - x)
    if buf is not None and scale:
        net.backward(x_t, t, scale * g, buf)
    return loss


def rec_loss_and_grad(
    net: VelocityNet,
    z_h,
    z_l,
    t_star: float,
    lambda_rec: float,
    feats: np.ndarray | None,
    buf: GradBuffer | None,
    scale: float = 1.0,
) -> float:
    """MSE of the one-step restoration plus ``lambda_rec`` x feature-space MSE."""
    z_h, z_l = _rows(z_h), _rows(z_l)
    n, d = z_h.shape
    z_hat = z_l - t_star * net.forward(z_l, t_star)
    e = z_hat - z_h
    loss = float(np.mean(e * e))
    g_hat = 2.0 * e / (n * d)
    if lambda_rec and feats is not None:
        fe = e @ feats.T
        loss += lambda_rec * float(np.mean(fe * fe))
        g_hat = g_hat + lambda_rec * 2.0 * (fe @ feats) / (n * feats.shape[0])
    if buf is not None and scale:
        net.backward(z_l, t_star, -t_star * scale * g_hat, buf)
    return loss


def fatc_loss_and_grad(net: VelocityNet, z_h, z_l, t, t_star: float, buf: GradBuffer | None, scale: float = 1.0) -> float:
    """Velocity regression on the straight clean-to-degraded path."""
    z_h, z_l = _rows(z_h), _rows(z_l)
    t = _times(t, len(z_h))
    z_sr = rescaled_sr_state(z_h, z_l, t, t_star)
    loss, g = _sq_loss_grad(net.forward(z_sr, t), (z_l - z_h) / t_star)
    if buf is not None and scale:
        net.backward(z_sr, t, scale * g, buf)
    return loss


def atm_weight(z_hat, z_h, floor: float = 1e-12) -> float:
    """Inverse of the batch-mean Euclidean restoration error."""
    dist = np.linalg.norm(_rows(z_hat) - _rows(z_h), axis=1)
    return 1.0 / max(float(np.mean(dist)), floor)


def atm_direction(
    net: VelocityNet,
    z_hat,
    z_h,
    z_l,
    t,
    t_star: float,
    eps,
    w: float,
    variant: str = "literal",
) -> np.ndarray:
    """Position-minus-direction bracket comparing the SR and generative states.

    Returns ``w * [(z_sr - z_gen) - t * (v(z_sr, t) - v(z_gen, t))]``. The
    velocity evaluations are plain forwards; nothing here is differentiated.
    """
    z_h, z_l, eps = _rows(z_h), _rows(z_l), _rows(eps)
    t = _times(t, len(z_h))
    if np.any(t <= 0) or np.any(t > t_star):
        raise ValueError("atm time must lie in (0, t_star]")
    if variant == "literal":
        z_sr = rescaled_sr_state(z_h, z_l, t, t_star)
    elif variant == "generated":
        z_sr = rescaled_sr_state(_rows(z_hat), z_l, t, t_star)
    else:
        raise ValueError(f"unknown atm variant {variant!r}")
    z_gen = interpolate(z_h, eps, t)
    tc = t[:, None]
    return w * ((z_sr - z_gen) - tc * (net.forward(z_sr, t) - net.forward(z_gen, t)))


def atm_apply(net: VelocityNet, z_l, t_star: float, d, buf: GradBuffer, scale: float = 1.0) -> None:
    """Accumulate the gradient of ``mean_i <d_i, z_hat_i(theta)>`` with ``d`` held fixed."""
    z_l, d = _rows(z_l), _rows(d)
    if d.shape != z_l.shape:
        raise ValueError(f"direction shape {d.shape} != {z_l.shape}")
    if scale and np.any(d):
        net.backward(z_l, t_star, -t_star * scale * d / len(d), buf)


def _check(value, it, name):
    if not np.all(np.isfinite(value)):
        raise TrainingAbort(it, name)


def _save_ckpt(net, path, meta):
    if path is None:
        return None
    with open(path, "wb") as f:
        f.write(save(net, meta))
    return str(path)


def pretrain(
    net: VelocityNet,
    data_spec: DataSpec,
    cfg: TrainConfig,
    checkpoint_path=None,
    metadata: dict | None = None,
    progress: Callable[[int, float], None] | None = None,
) -> RunReport:
    """Conditional flow matching on fresh clean batches each iteration."""
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    buf = net.new_grad_buffer()
    report = RunReport(columns=CFM_COLUMNS)
    start = time.perf_counter()
    for it in range(cfg.iterations):
        x = sample_clean(data_spec, cfg.batch_size, rng)
        eps = rng.standard_normal(x.shape)
        t = rng.uniform(0.0, 1.0, size=len(x))
        loss = cfm_loss_and_grad(net, x, eps, t, buf)
        _check(loss, it, "l_cfm")
        try:
            delta = adam_step(net, buf, opt)
        except NonFiniteError as e:
            raise TrainingAbort(it, "gradient", str(e)) from None
        report.records.append(
            {"iteration": it, "l_cfm": loss, "update_norm": float(np.linalg.norm(delta))}
        )
        if progress is not None:
            progress(it, loss)
    report.wall_time = time.perf_counter() - start
    report.checkpoint_path = _save_ckpt(net, checkpoint_path, metadata)
    return report


def train_sr(
    net: VelocityNet,
    ds: PairedDataset,
    cfg: TrainConfig,
    checkpoint_path=None,
    metadata: dict | None = None,
    progress: Callable[[int, dict], None] | None = None,
) -> RunReport:
    """One-step SR fine-tuning with reconstruction, FATC and ATM terms."""
    if cfg.t_star is None:
        raise ValueError("train_sr needs cfg.t_star")
    t_star = float(cfg.t_star)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    feats = feature_map(ds.dim, cfg.feature_dim, cfg.feature_seed) if cfg.lambda_rec else None
    buf = net.new_grad_buffer()
    atm_buf = net.new_grad_buffer()
    n = len(ds)
    report = RunReport()
    start = time.perf_counter()
    for it in range(cfg.iterations):
        idx = rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        z_h, z_l = ds.z_h[idx], ds.z_l[idx]
        # t in (0, t_star]: shared by the FATC and ATM terms.
        t = t_star * (1.0 - rng.uniform(0.0, 1.0, size=len(idx)))
        eps = rng.standard_normal(z_h.shape)

        z_hat = z_l - t_star * net.forward(z_l, t_star)
        _check(z_hat, it, "z_hat")
        l_rec = rec_loss_and_grad(net, z_h, z_l, t_star, cfg.lambda_rec, feats, buf, cfg.w_rec)
        _check(l_rec, it, "l_rec")
        l_fatc = fatc_loss_and_grad(net, z_h, z_l, t, t_star, buf, cfg.w_fatc)
        _check(l_fatc, it, "l_fatc")

        atm_norm = 0.0
        if cfg.w_atm:
            w = atm_weight(z_hat, z_h)
            d = atm_direction(net, z_hat, z_h, z_l, t, t_star, eps, w, cfg.atm_variant)
            _check(d, it, "atm_direction")
            atm_apply(net, z_l, t_star, d, atm_buf, cfg.w_atm)
            atm_norm = float(np.linalg.norm(atm_buf.grads))
            buf.add(atm_buf.grads, atm_buf.accumulation_count)
            atm_buf.zero()
        _check(atm_norm, it, "atm_grad_norm")

        try:
            delta = adam_step(net, buf, opt)
        except NonFiniteError as e:
            raise TrainingAbort(it, "gradient", str(e)) from None
        rec = {"iteration": it, "l_rec": l_rec, "l_fatc": l_fatc, "atm_grad_norm": atm_norm,
               "update_norm": float(np.linalg.norm(delta))}
        report.records.append(rec)
        if progress is not None:
            progress(it, rec)
    report.wall_time = time.perf_counter() - start
    report.checkpoint_path = _save_ckpt(net, checkpoint_path, metadata)
    return report

