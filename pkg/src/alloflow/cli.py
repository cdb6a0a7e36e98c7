"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime abort.
Outputs default to standard names inside the config's ``out_dir``.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline
from .config import ConfigError, ExperimentConfig, apply_override
from .data import DataError, PairedDataset, SampleSet, load_points
from .flow import FlowError
from .metrics import gradcheck, training_loss_cases
from .net import CheckpointError, NonFiniteError, VelocityNet, load
from .trainer import TrainingAbort

log = logging.getLogger("alloflow")

DEFAULT_NAMES = {
    "train": "data_train.afds",
    "eval": "data_eval.afds",
    "pretrained": "pretrained.aflw",
    "tstar": "tstar.json",
    "sr": "sr.aflw",
    "samples": "samples.afsm",
    "restored": "restored.afsm",
    "metrics": "metrics.json",
    "gradcheck": "gradcheck.json",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _resolve_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config: file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config: invalid JSON in {args.config}: {e}") from None
    for assignment in args.set or []:
        apply_override(raw, assignment)
    if args.seed is not None:
        raw["seed"] = args.seed
    return ExperimentConfig.from_dict(raw)


class _Paths:
    def __init__(self, cfg: ExperimentConfig):
        self.root = Path(cfg.out_dir)
        self.inputs: list[Path] = []

    def default(self, key: str) -> Path:
        return self.root / DEFAULT_NAMES[key]

    def input(self, given, key: str) -> Path:
        p = Path(given) if given else self.default(key)
        if not p.exists():
            raise UsageError(f"input file not found: {p}")
        self.inputs.append(p.resolve())
        return p

    def output(self, given, key: str) -> Path:
        p = Path(given) if given else self.default(key)
        if p.resolve() in self.inputs:
            raise UsageError(f"refusing to overwrite input file {p}")
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(path.name + suffix)


def _write_config(path: Path, cfg: ExperimentConfig) -> None:
    _write_text(_sidecar(path, ".config.json"), cfg.to_json())


def _load_net(path: Path, in_dim: int) -> VelocityNet:
    return load(path.read_bytes(), expect_in_dim=in_dim)


def _progress(every: int, name: str):
    def report(it, value):
        if (it + 1) % every == 0:
            log.info("%s iteration %d: %s", name, it + 1, value)

    return report


# -- subcommands -------------------------------------------------------------


def cmd_gen_data(args, cfg, paths):
    out = paths.output(args.out, args.split)
    ds = pipeline.make_dataset(cfg, args.split)
    ds.save(out)
    _write_config(out, cfg)
    log.info("wrote %d pairs to %s", len(ds), out)


def _write_report(out: Path, report, cfg: ExperimentConfig, extra: dict | None = None) -> None:
    _write_text(_sidecar(out, ".log.csv"), report.to_csv())
    summary = report.summary(cfg.to_dict())
    summary.update(extra or {})
    _write_text(_sidecar(out, ".summary.json"), _dump(summary))
    _write_config(out, cfg)
    log.info("wall time %.2f s", report.wall_time)


def cmd_pretrain(args, cfg, paths):
    out = paths.output(args.out, "pretrained")
    _, report = pipeline.run_pretrain(cfg, out, _progress(max(1, cfg.pretrain.iterations // 10), "pretrain"))
    _write_report(out, report, cfg)


def _tstar_payload(result, cfg) -> dict:
    return {**result.to_dict(), "config": cfg.to_dict()}


def cmd_find_tstar(args, cfg, paths):
    ds = PairedDataset.load(paths.input(args.dataset, "train"))
    out = paths.output(args.out, "tstar")
    result = pipeline.run_find_tstar(cfg, ds)
    _write_text(out, _dump(_tstar_payload(result, cfg)))
    _write_text(_sidecar(out, ".curve.csv"), result.curve_csv())
    _write_config(out, cfg)
    print(f"t_star={result.t_star}")


def cmd_train_sr(args, cfg, paths):
    ds = PairedDataset.load(paths.input(args.dataset, "train"))
    net0 = _load_net(paths.input(args.pretrained, "pretrained"), ds.dim)
    out = paths.output(args.out, "sr")
    if args.tstar is not None:
        t_star = float(args.tstar)
    elif cfg.train_sr.t_star is not None:
        t_star = float(cfg.train_sr.t_star)
    else:
        t_star = pipeline.run_find_tstar(cfg, ds).t_star
        log.info("t_star found inline: %s", t_star)
    if not 0.0 < t_star <= 1.0:
        raise ConfigError(f"tstar: must lie in (0, 1], got {t_star}")
    _, report = pipeline.run_train_sr(cfg, net0, ds, t_star, out,
                                      _progress(max(1, cfg.train_sr.iterations // 10), "train-sr"))
    _write_report(out, report, cfg, {"t_star": t_star})


def cmd_sample(args, cfg, paths):
    net = _load_net(paths.input(args.checkpoint, "pretrained"), cfg.data.dim)
    out = paths.output(args.out, "samples")
    steps = args.steps if args.steps is not None else cfg.eval.sample_steps
    n = args.n if args.n is not None else cfg.eval.n_samples
    if steps < 1 or n < 1:
        raise ConfigError("steps/n: must be >= 1")
    traj = pipeline.generate(net, n, steps, cfg.eval.seed)
    prov = {"kind": "samples", "steps": steps, "n": n, "seed": cfg.eval.seed, "config": cfg.to_dict()}
    _write_bytes(out, SampleSet(traj.final, prov).to_bytes())
    _write_config(out, cfg)


def _checkpoint_tstar(net: VelocityNet, override) -> float:
    if override is not None:
        return float(override)
    t_star = net.meta.get("t_star")
    if t_star is None:
        raise ConfigError("tstar: checkpoint carries no t_star; pass --tstar")
    return float(t_star)


def cmd_restore(args, cfg, paths):
    ds = PairedDataset.load(paths.input(args.dataset, "eval"))
    net = _load_net(paths.input(args.checkpoint, "sr"), ds.dim)
    out = paths.output(args.out, "restored")
    t_star = _checkpoint_tstar(net, args.tstar)
    z_hat = pipeline.restore(net, ds.z_l, t_star)
    prov = {"kind": "restored", "t_star": t_star, "config": cfg.to_dict()}
    _write_bytes(out, SampleSet(z_hat, prov).to_bytes())
    _write_config(out, cfg)


def cmd_eval(args, cfg, paths):
    if args.restored and args.samples:
        raise UsageError("eval takes only one of --restored or --samples")
    points_path = paths.input(args.restored or args.samples, "restored")
    ref_path = paths.input(args.reference, "eval")
    out = paths.output(args.out, "metrics")
    points, reference = load_points(points_path), load_points(ref_path)
    paired = not args.samples
    if paired and points.shape != reference.shape:
        raise UsageError(f"restored set {points.shape} and reference {reference.shape} are not paired")
    traj = None
    if args.checkpoint:
        ds = PairedDataset.load(ref_path)
        net = _load_net(paths.input(args.checkpoint, "sr"), ds.dim)
        traj = pipeline.restoration_path(net, ds.z_l, _checkpoint_tstar(net, args.tstar), cfg.eval.curvature_steps)
    report = pipeline.evaluate(points, reference, paired, traj, {"seed": cfg.seed, "eval": cfg.eval.seed})
    report.config = cfg.to_dict()
    _write_text(out, report.to_json())
    if args.index:
        report.append_to_index(args.index, args.run_name or str(out))
    _write_config(out, cfg)
    print(f"mse={report.mse} psnr_toy={report.psnr_toy} energy_distance={report.energy_distance!r} "
          f"curvature={report.curvature}")


def cmd_gradcheck(args, cfg, paths):
    out = paths.output(args.out, "gradcheck")
    hidden = cfg.net.hidden_dims if args.hidden is None else args.hidden
    cases = training_loss_cases(in_dim=cfg.data.dim, hidden=hidden, time_embed_dim=cfg.net.time_embed_dim,
                                activation=cfg.net.activation)
    results = []
    for k, (name, factory) in enumerate(cases.items()):
        rep = gradcheck(factory, trials=args.trials, h=args.h, tol=args.tol, seed=cfg.seed + k, name=name)
        print(rep.line())
        results.append(rep.__dict__)
    _write_text(out, _dump({"results": results, "config": cfg.to_dict()}))
    _write_config(out, cfg)
    if not all(r["passed"] for r in results):
        return 2
    return 0


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field by dotted path (repeatable)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="alloflow", description="One-step restoration flows on toy data.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-data", parents=[common], help="build a paired dataset")
    s.add_argument("--split", choices=["train", "eval"], default="train")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("pretrain", parents=[common], help="flow-matching pretraining")
    s.add_argument("--out")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("find-tstar", parents=[common], help="SNR-matched anchoring time")
    s.add_argument("--dataset")
    s.add_argument("--out")
    s.set_defaults(func=cmd_find_tstar)

    s = sub.add_parser("train-sr", parents=[common], help="one-step restoration fine-tuning")
    s.add_argument("--dataset")
    s.add_argument("--pretrained")
    s.add_argument("--tstar", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_sr)

    s = sub.add_parser("sample", parents=[common], help="multi-step generation from noise")
    s.add_argument("--checkpoint")
    s.add_argument("--steps", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("restore", parents=[common], help="one-step restoration of a dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--dataset")
    s.add_argument("--tstar", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_restore)

    s = sub.add_parser("eval", parents=[common], help="metrics against a reference set")
    s.add_argument("--restored")
    s.add_argument("--samples")
    s.add_argument("--reference")
    s.add_argument("--checkpoint", help="SR checkpoint; adds path curvature from the reference z_L")
    s.add_argument("--tstar", type=float)
    s.add_argument("--index", help="run-index CSV to append to")
    s.add_argument("--run-name")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--hidden", type=int, nargs="+", help="hidden widths (default: config net)")
    s.add_argument("--out")
    s.set_defaults(func=cmd_gradcheck)
    return p


def _thread_limit():
    raw = os.environ.get("ALLOFLOW_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ALLOFLOW_THREADS: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("ALLOFLOW_THREADS: must be >= 1")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        cfg = _resolve_config(args)
        with _thread_limit():
            code = args.func(args, cfg, _Paths(cfg)) or 0
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError) as e:
        print(f"error: bad input file: {e}", file=sys.stderr)
        return 1
    except (TrainingAbort, NonFiniteError, FloatingPointError) as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 2
    except FlowError as e:
        print(f"aborted: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    log.info("%s finished in %.2f s", args.command, time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
