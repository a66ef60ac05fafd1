"""Command-line entry points: demo, train-icl, train-lcbf, eval, sweep, export-grid."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import evaluation
from .config import MODES, RunConfig, load_config, parse_config, serialize_config
from .dynamics import read_trajectory_csv, write_trajectory_csv
from .icl import IclConfig, TrainingError, filter_alpha, train_icl_cbf, train_lcbf, write_history_csv
from .neural import Mlp
from .safety_filter import CbfQpPolicy
from .scenarios import (
    SCENARIOS,
    ConfigurationError,
    ExpertGenerationError,
    Scenario,
    generate_expert_demos,
    make_scenario,
)

logger = logging.getLogger("iclcbf")

EXIT_USAGE = 2
EXIT_FAILURE = 1


def build_scenario(cfg: RunConfig) -> Scenario:
    kwargs = {}
    if cfg.scenario == "quadrotor":
        kwargs["params"] = cfg.quadrotor
    sc = make_scenario(cfg.scenario, **kwargs)
    if cfg.delta is not None:
        sc = replace(sc, delta=cfg.delta)
    return sc


def train_config(cfg: RunConfig) -> IclConfig:
    return replace(cfg.icl, seed=cfg.stage_seed("train"))


def eval_seeds(cfg: RunConfig) -> list[int]:
    return [cfg.stage_seed("eval", s) for s in cfg.seeds]


def run_demo(cfg: RunConfig) -> Path:
    sc = build_scenario(cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.stage_seed("demo"))
    batch = generate_expert_demos(sc, cfg.demo_count, rng)
    path = out / "demos.csv"
    write_trajectory_csv(path, batch)
    (out / "demos_manifest.txt").write_text(
        f"scenario = {sc.name}\nseed = {cfg.seed}\ncount = {len(batch)}\n"
    )
    logger.info("wrote %d demonstrations to %s", len(batch), path)
    return path


def _demo_path(cfg: RunConfig) -> Path:
    path = Path(cfg.demo_path) if cfg.demo_path else cfg.output_dir() / "demos.csv"
    if not path.exists():
        raise ConfigurationError(f"demonstration file {path} does not exist; run `demo` first")
    return path


def _load_demos(cfg: RunConfig, sc: Scenario):
    batch = read_trajectory_csv(_demo_path(cfg))
    if batch[0].states.shape[1] != sc.system.state_dim:
        raise ConfigurationError("demonstration state dimension does not match the scenario")
    return batch


def run_train(cfg: RunConfig) -> Path:
    sc = build_scenario(cfg)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mode == "train-lcbf":
        barrier, _, res = train_lcbf(sc, train_config(cfg), cfg.loss)
        path = out / "barrier_lcbf.ckpt"
        barrier.save(path)
        logger.info("labeled baseline trained (loss %.4g); saved %s", res.final_loss, path)
        return path
    expert = _load_demos(cfg, sc)
    barrier, constraint, history = train_icl_cbf(sc, expert, train_config(cfg), cfg.loss)
    barrier.save(out / "barrier.ckpt")
    constraint.save(out / "constraint.ckpt")
    write_history_csv(out / "history.csv", history)
    logger.info("trained in %.1fs; checkpoints in %s", history.train_seconds, out)
    return out / "barrier.ckpt"


def _load_barrier(cfg: RunConfig, sc: Scenario) -> Mlp:
    if not cfg.checkpoint:
        raise ConfigurationError("--checkpoint is required")
    path = Path(cfg.checkpoint)
    if not path.exists():
        raise ConfigurationError(f"checkpoint {path} does not exist")
    net = Mlp.load(path)
    if net.input_dim != sc.system.state_dim:
        raise ConfigurationError(
            f"checkpoint input dimension {net.input_dim} does not match {sc.name} state dimension {sc.system.state_dim}"
        )
    return net


def run_eval(cfg: RunConfig) -> Path:
    sc = build_scenario(cfg)
    if cfg.no_filter:
        factory, name = sc.reference_policy, "reference"
    else:
        barrier = _load_barrier(cfg, sc)
        factory = lambda: CbfQpPolicy(sc.system, barrier, filter_alpha(sc, cfg.icl), sc.reference)  # noqa: E731
        name = Path(cfg.checkpoint).stem
    report = evaluation.evaluate(sc, factory, cfg.episodes, eval_seeds(cfg), name, cfg.workers)
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    evaluation.write_metrics_csv(path, [report])
    print(report.summary())
    return path


def run_sweep(cfg: RunConfig) -> Path:
    sc = build_scenario(cfg)
    expert = _load_demos(cfg, sc)
    tcfg = train_config(cfg)

    def train(scenario, demos, delta):
        barrier, _, _ = train_icl_cbf(scenario, demos, tcfg, cfg.loss, delta=delta)
        return lambda: CbfQpPolicy(scenario.system, barrier, filter_alpha(scenario, cfg.icl), scenario.reference)

    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    points = evaluation.delta_sweep(sc, expert, cfg.deltas, train, cfg.episodes, eval_seeds(cfg), csv_path=path)
    for p in points:
        print(f"delta={p.delta}: " + (p.report.summary() if p.report else f"degenerate ({p.error})"))
    return path


DEFAULT_BOUNDS = {
    "single_integrator": ((-6.0, 6.0), (-6.0, 6.0)),
    "inverted_pendulum": ((-0.3, 0.3), (-0.5, 0.5)),
    "dubins_car": ((-4.0, 4.0), (-4.0, 4.0)),
    "quadrotor": ((-1.0, 8.0), (-1.0, 10.0)),
}
DEFAULT_AXES = {"quadrotor": (0, 2)}


def run_export_grid(cfg: RunConfig, bounds=None, slice_spec=None) -> Path:
    sc = build_scenario(cfg)
    fn = _load_barrier(cfg, sc) if cfg.checkpoint else sc.gt_cbf
    if fn is None:
        raise ConfigurationError(f"{sc.name} has no closed-form barrier; pass --checkpoint")
    out = cfg.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    path = out / "grid.csv"
    evaluation.export_level_grid(
        path, fn, bounds or DEFAULT_BOUNDS[sc.name], cfg.resolution, slice_spec,
        DEFAULT_AXES.get(sc.name, (0, 1)), sc.system.state_dim,
    )
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="iclcbf", description=__doc__)
    p.add_argument("command", choices=MODES)
    p.add_argument("--scenario", help=f"one of: {', '.join(sorted(SCENARIOS))}")
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--demos", help="demonstration CSV (train/sweep) or count (demo)")
    p.add_argument("--checkpoint")
    p.add_argument("--episodes", type=int)
    p.add_argument("--seeds", help="comma-separated evaluation seeds")
    p.add_argument("--delta", type=float)
    p.add_argument("--delta-list", help="comma-separated thresholds for sweep")
    p.add_argument("--no-filter", action="store_true", help="evaluate the bare reference controller")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--heuristic", dest="heuristic", action="store_true", default=None)
    mode.add_argument("--full", dest="heuristic", action="store_false")
    p.add_argument("--workers", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--bounds", help="x_lo,x_hi,y_lo,y_hi for export-grid")
    p.add_argument("--slice", action="append", default=[], help="index=value fixing a non-plotted coordinate")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = [f"mode = {args.command}"]
    if args.scenario:
        if args.scenario not in SCENARIOS:
            raise ConfigurationError(
                f"unknown scenario {args.scenario!r}; valid names: {', '.join(sorted(SCENARIOS))}"
            )
        overrides.append(f"scenario = {args.scenario}")
    for key, val in (("seed", args.seed), ("out", args.out), ("checkpoint", args.checkpoint),
                     ("episodes", args.episodes), ("seeds", args.seeds), ("delta", args.delta),
                     ("deltas", args.delta_list), ("workers", args.workers), ("resolution", args.resolution)):
        if val is not None:
            overrides.append(f"{key} = {val}")
    if args.demos is not None:
        if args.command == "demo":
            overrides.append(f"demos = {int(args.demos)}")
        else:
            overrides.append(f"demo_path = {args.demos}")
    if args.no_filter:
        overrides.append("no_filter = true")
    if args.heuristic is not None:
        overrides.append(f"icl.heuristic = {args.heuristic}")
    overrides.extend(args.set)
    return parse_config("\n".join(overrides), cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        cfg = config_from_args(args)
        out = cfg.output_dir()
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{cfg.mode}.config").write_text(serialize_config(cfg))
        if cfg.mode == "demo":
            run_demo(cfg)
        elif cfg.mode in ("train-icl", "train-lcbf"):
            run_train(cfg)
        elif cfg.mode == "eval":
            run_eval(cfg)
        elif cfg.mode == "sweep":
            run_sweep(cfg)
        else:
            bounds = None
            if args.bounds:
                b = [float(x) for x in args.bounds.split(",")]
                bounds = ((b[0], b[1]), (b[2], b[3]))
            slices = {int(k): float(v) for k, v in (s.split("=", 1) for s in args.slice)}
            run_export_grid(cfg, bounds, slices)
    except ConfigurationError as exc:
        print(f"iclcbf: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, ExpertGenerationError) as exc:
        print(f"iclcbf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
