"""Fidelity, distributional and straightness metrics, plus a gradient checker."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .flow import Trajectory
from .net import NetConfig, VelocityNet
from .trainer import (
    atm_apply,
    atm_direction,
    cfm_loss_and_grad,
    fatc_loss_and_grad,
    feature_map,
    rec_loss_and_grad,
)

log = logging.getLogger(__name__)

PSNR_CEILING = 300.0


def _sets(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError(f"set shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _sets(a, b)
    return float(np.mean((a - b) ** 2))


def psnr_toy(restored, clean) -> float:
    """``10 log10(range^2 / mse)``, range = max |component| of ``clean``; capped."""
    err = mse(restored, clean)
    peak = float(np.max(np.abs(clean)))
    if err == 0.0:
        return PSNR_CEILING
    if peak == 0.0:
        return -PSNR_CEILING
    return min(PSNR_CEILING, 10.0 * math.log10(peak**2 / err))


def _mean_pairwise(A: np.ndarray, B: np.ndarray, chunk: int = 256) -> float:
    total = 0.0
    for i in range(0, len(A), chunk):
        diff = A[i:i + chunk, None, :] - B[None, :, :]
        total += float(np.sqrt(np.sum(diff * diff, axis=-1)).sum())
    return total / (len(A) * len(B))


def energy_distance(A, B) -> float:
    """Plug-in (V-statistic) energy distance ``2E|a-b| - E|a-a'| - E|b-b'|``.

    Identical sets give exactly 0, and the value does not depend on argument
    order (the pair is put in a canonical order before summation).
    """
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    B = np.atleast_2d(np.asarray(B, dtype=np.float64))
    if len(A) < 2 or len(B) < 2:
        raise ValueError("energy distance needs at least 2 samples per set")
    if A.shape[1] != B.shape[1]:
        raise ValueError("sets live in different dimensions")
    if (B.shape, B.tobytes()) < (A.shape, A.tobytes()):
        A, B = B, A
    ab = _mean_pairwise(A, B)
    return 2.0 * ab - (_mean_pairwise(A, A) + _mean_pairwise(B, B))


def trajectory_curvature(traj: Trajectory) -> float:
    """Mean change of step velocity between consecutive steps, over mean speed.

    States may be ``(n_states, d)`` or a batch ``(n_states, n, d)``; for a batch
    the per-path values are averaged. Straight uniform-speed paths give 0.
    """
    if len(traj) < 3:
        raise ValueError("curvature needs at least 3 states")
    X = traj.states
    if X.ndim == 2:
        X = X[:, None, :]
    dt = -np.diff(traj.times)
    vel = np.diff(X, axis=0) / dt[:, None, None]  # (steps, n, d)
    speed = np.linalg.norm(vel, axis=-1)  # (steps, n)
    out = []
    skipped = 0
    for j in range(X.shape[1]):
        keep = speed[:, j] > 0
        skipped += int(np.sum(~keep))
        v = vel[keep, j]
        if len(v) < 2:
            out.append(0.0)
            continue
        dev = np.linalg.norm(np.diff(v, axis=0), axis=-1).mean()
        out.append(float(dev / speed[keep, j].mean()))
    if skipped:
        warnings.warn(f"skipped {skipped} zero-length steps", RuntimeWarning, stacklevel=2)
    return float(np.mean(out))


@dataclass
class MetricReport:
    mse: float | None
    psnr_toy: float | None
    energy_distance: float
    curvature: float | None = None
    n_samples: int = 0
    n_reference: int = 0
    seeds: dict = field(default_factory=dict)
    config: dict | None = None

    def __post_init__(self):
        if self.mse is not None and self.mse < 0:
            raise ValueError("mse must be >= 0")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    def append_to_index(self, path, run_name: str) -> None:
        path = Path(path)
        new = not path.exists()
        with path.open("a", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            if new:
                w.writerow(["run", "mse", "psnr_toy", "energy_distance", "curvature", "n_samples"])
            w.writerow([run_name, self.mse, self.psnr_toy, self.energy_distance, self.curvature, self.n_samples])


# -- finite-difference gradient oracle ---------------------------------------


@dataclass
class GradCase:
    """One gradient-check instance.

    ``loss`` maps a parameter vector to a scalar. With ``vectorized`` it must
    also map a stack ``(k, P)`` to ``(k,)``, which lets all perturbations of
    a trial be evaluated in a few array operations.
    """

    theta: np.ndarray
    loss: Callable[[np.ndarray], np.ndarray]
    grad: np.ndarray
    vectorized: bool = False


@dataclass
class GradcheckReport:
    name: str
    passed: bool
    max_rel_err: float
    worst_trial: int
    worst_index: int
    trials: int
    h: float
    tol: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] gradcheck {self.name}: max rel err {self.max_rel_err:.3e} "
                f"(trial {self.worst_trial}, param {self.worst_index}; tol {self.tol:g})")


def central_difference(loss, theta: np.ndarray, h: float, vectorized: bool = False, chunk: int = 1024) -> np.ndarray:
    P = len(theta)
    out = np.empty(P)
    if not vectorized:
        for i in range(P):
            e = np.zeros(P)
            e[i] = h
            out[i] = (float(loss(theta + e)) - float(loss(theta - e))) / (2.0 * h)
    else:
        for s in range(0, P, chunk):
            idx = np.arange(s, min(P, s + chunk))
            E = np.zeros((len(idx), P))
            E[np.arange(len(idx)), idx] = h
            out[idx] = (np.asarray(loss(theta + E)) - np.asarray(loss(theta - E))) / (2.0 * h)
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite loss during finite differencing")
    return out


def relative_error(analytic, numeric, floor: float = 1e-5) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries absolute."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(
    factory: Callable[[np.random.Generator], GradCase],
    trials: int = 100,
    h: float = 1e-5,
    tol: float = 1e-4,
    seed: int = 0,
    name: str = "",
    floor: float = 1e-5,
) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    worst = (-1.0, -1, -1)
    for k in range(trials):
        case = factory(rng)
        if not np.isfinite(case.loss(case.theta)):
            raise FloatingPointError(f"non-finite loss in trial {k}")
        num = central_difference(case.loss, case.theta, h, case.vectorized)
        err = relative_error(case.grad, num, floor)
        i = int(np.argmax(err))
        if err[i] > worst[0]:
            worst = (float(err[i]), k, i)
    return GradcheckReport(name, worst[0] < tol, worst[0], worst[1], worst[2], trials, h, tol)


def _random_net(rng, in_dim, hidden, time_embed_dim, activation) -> VelocityNet:
    cfg = NetConfig(in_dim, list(hidden), time_embed_dim, activation, int(rng.integers(2**31)))
    net = VelocityNet(cfg)
    # Non-zero biases so every parameter sees a generic gradient.
    net.params += 0.1 * rng.standard_normal(net.param_count)
    return net


def _batch_mean_sq(r):
    return np.mean(r * r, axis=(-2, -1))


def training_loss_cases(
    in_dim: int = 2,
    hidden=(32, 32),
    time_embed_dim: int = 16,
    activation: str = "silu",
    batch: int = 4,
    lambda_rec: float = 0.5,
) -> dict[str, Callable[[np.random.Generator], GradCase]]:
    """Gradient-check factories for the four training gradient paths.

    Each finite-difference closure recomputes its loss from forward passes
    only, so it shares no code with the analytic backward path.
    """

    def setup(rng):
        net = _random_net(rng, in_dim, hidden, time_embed_dim, activation)
        z_h = rng.standard_normal((batch, in_dim))
        z_l = rng.standard_normal((batch, in_dim))
        t_star = float(rng.uniform(0.1, 1.0))
        return net, z_h, z_l, t_star

    def cfm(rng):
        net, x, eps, _ = setup(rng)
        t = rng.uniform(0.0, 1.0, size=batch)
        buf = net.new_grad_buffer()
        cfm_loss_and_grad(net, x, eps, t, buf)
        x_t = (1.0 - t)[:, None] * x + t[:, None] * eps

        def loss(th):
            return _batch_mean_sq(net.forward_params(th, x_t, t) - (eps - x))

        return GradCase(net.params.copy(), loss, buf.grads.copy(), True)

    def rec(rng):
        net, z_h, z_l, t_star = setup(rng)
        F = feature_map(in_dim, 3, int(rng.integers(2**31)))
        buf = net.new_grad_buffer()
        rec_loss_and_grad(net, z_h, z_l, t_star, lambda_rec, F, buf)

        def loss(th):
            e = z_l - t_star * net.forward_params(th, z_l, t_star) - z_h
            return _batch_mean_sq(e) + lambda_rec * _batch_mean_sq(e @ F.T)

        return GradCase(net.params.copy(), loss, buf.grads.copy(), True)

    def fatc(rng):
        net, z_h, z_l, t_star = setup(rng)
        t = rng.uniform(0.0, t_star, size=batch)
        buf = net.new_grad_buffer()
        fatc_loss_and_grad(net, z_h, z_l, t, t_star, buf)
        s = (t / t_star)[:, None]
        z_sr = (1.0 - s) * z_h + s * z_l

        def loss(th):
            return _batch_mean_sq(net.forward_params(th, z_sr, t) - (z_l - z_h) / t_star)

        return GradCase(net.params.copy(), loss, buf.grads.copy(), True)

    def atm(rng):
        net, z_h, z_l, t_star = setup(rng)
        t = t_star * (1.0 - rng.uniform(0.0, 1.0, size=batch))
        eps = rng.standard_normal((batch, in_dim))
        z_hat = z_l - t_star * net.forward(z_l, t_star)
        d = atm_direction(net, z_hat, z_h, z_l, t, t_star, eps, 1.0 / 0.7, "literal")
        buf = net.new_grad_buffer()
        atm_apply(net, z_l, t_star, d, buf)

        def loss(th):
            z = z_l - t_star * net.forward_params(th, z_l, t_star)
            return np.mean(np.sum(d * z, axis=-1), axis=-1)

        return GradCase(net.params.copy(), loss, buf.grads.copy(), True)

    return {"cfm": cfm, "rec": rec, "fatc": fatc, "atm": atm}
