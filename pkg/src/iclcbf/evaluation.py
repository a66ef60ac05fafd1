"""Closed-loop collision/success metrics, delta sweeps and level-set grids."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import TrajectoryBatch
from .scenarios import Scenario

logger = logging.getLogger(__name__)


@dataclass
class SeedResult:
    seed: int
    episodes: int
    collision_rate: float
    success_rate: float
    infeasible_solves: int
    fallbacks: int
    mean_steps: float


@dataclass
class EvalReport:
    scenario: str
    policy: str
    episodes: int
    per_seed: list[SeedResult] = field(default_factory=list)

    @property
    def cr_mean(self) -> float:
        return float(np.mean([r.collision_rate for r in self.per_seed]))

    @property
    def cr_std(self) -> float:
        return float(np.std([r.collision_rate for r in self.per_seed]))

    @property
    def sr_mean(self) -> float:
        return float(np.mean([r.success_rate for r in self.per_seed]))

    @property
    def sr_std(self) -> float:
        return float(np.std([r.success_rate for r in self.per_seed]))

    @property
    def infeasible_solves(self) -> int:
        return sum(r.infeasible_solves for r in self.per_seed)

    @property
    def mean_episode_steps(self) -> float:
        return float(np.mean([r.mean_steps for r in self.per_seed]))

    def summary(self) -> str:
        return (f"{self.scenario}/{self.policy}: CR {self.cr_mean:.2f}±{self.cr_std:.2f}  "
                f"SR {self.sr_mean:.2f}±{self.sr_std:.2f}  ({len(self.per_seed)}x{self.episodes} episodes)")


def outcome_rates(batch: TrajectoryBatch) -> tuple[float, float]:
    term = batch.terminations()
    n = len(term)
    return 100.0 * term.count("failure") / n, 100.0 * term.count("goal") / n


def evaluate(scenario: Scenario, policy_factory: Callable[[], object], episodes: int = 100,
             seeds: Sequence[int] = (0, 1, 2, 3, 4), policy_name: str = "policy",
             workers: int = 1) -> EvalReport:
    """Collision and success rates of a policy, per seed and aggregated.

    ``policy_factory`` builds a fresh policy per seed so diagnostics counters
    stay per-seed. Episodes terminate at goal, failure or the step limit.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")

    def run(seed):
        policy = policy_factory()
        rng = np.random.default_rng(seed)
        x0, goals = scenario.sample_initial(rng, episodes)
        batch = scenario.rollout(policy, x0, goals)
        cr, sr = outcome_rates(batch)
        diag = getattr(policy, "diagnostics", None)
        return SeedResult(
            seed=int(seed), episodes=episodes, collision_rate=cr, success_rate=sr,
            infeasible_solves=getattr(diag, "infeasible", 0), fallbacks=getattr(diag, "fallbacks", 0),
            mean_steps=float(np.mean([len(t.controls) for t in batch])),
        )

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, seeds))
    else:
        results = [run(s) for s in seeds]
    report = EvalReport(scenario.name, policy_name, episodes, results)
    logger.info(report.summary())
    return report


METRICS_HEADER = ["scenario", "policy", "seed", "episodes", "cr", "sr", "infeasible_solves", "fallbacks", "mean_steps"]


def metrics_rows(report: EvalReport, delta: Optional[float] = None) -> list[list]:
    rows = []
    for r in report.per_seed:
        row = [report.scenario, report.policy, r.seed, r.episodes, f"{r.collision_rate:.4f}",
               f"{r.success_rate:.4f}", r.infeasible_solves, r.fallbacks, f"{r.mean_steps:.4f}"]
        rows.append(row if delta is None else [repr(float(delta))] + row)
    return rows


def write_metrics_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for rep in reports:
            w.writerows(metrics_rows(rep))


@dataclass
class SweepPoint:
    delta: float
    report: Optional[EvalReport]
    degenerate: bool = False
    error: str = ""


def delta_sweep(scenario: Scenario, expert: TrajectoryBatch, deltas: Sequence[float],
                train: Callable, episodes: int = 100, seeds: Sequence[int] = (0, 1, 2, 3, 4),
                csv_path=None) -> list[SweepPoint]:
    """Train and evaluate once per threshold.

    ``train(scenario, expert, delta)`` returns a policy factory. Failures at
    one threshold are recorded on that point and the sweep continues.
    """
    from .icl import TrainingError

    points = []
    for d in deltas:
        if not 0.0 <= d <= 1.0:
            raise ValueError(f"delta {d} outside [0, 1]")
        sc = replace(scenario, delta=float(d))
        try:
            factory = train(sc, expert, float(d))
            rep = evaluate(sc, factory, episodes, seeds, policy_name=f"icl_cbf(delta={d})")
            points.append(SweepPoint(float(d), rep))
        except (TrainingError, ValueError, FloatingPointError) as exc:
            logger.warning("delta=%s: %s", d, exc)
            points.append(SweepPoint(float(d), None, degenerate=True, error=str(exc)))
    if csv_path is not None:
        write_sweep_csv(csv_path, scenario.name, points)
    return points


def write_sweep_csv(path, scenario_name: str, points: Sequence[SweepPoint]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["delta", "scenario", "episodes", "cr_mean", "cr_std", "sr_mean", "sr_std",
                    "infeasible_solves", "degenerate", "error"])
        for p in points:
            if p.report is None:
                w.writerow([repr(p.delta), scenario_name, "", "", "", "", "", "", 1, p.error])
            else:
                r = p.report
                w.writerow([repr(p.delta), scenario_name, r.episodes, f"{r.cr_mean:.4f}", f"{r.cr_std:.4f}",
                            f"{r.sr_mean:.4f}", f"{r.sr_std:.4f}", r.infeasible_solves, 0, ""])


def level_grid(fn, bounds: Sequence[Sequence[float]], resolution: int,
               slice_spec: Optional[dict[int, float]] = None, axes: tuple[int, int] = (0, 1),
               state_dim: Optional[int] = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate ``fn`` on a 2-D slice; returns meshgrids ``(X, Y, V)``.

    ``bounds`` is ``((x_lo, x_hi), (y_lo, y_hi))`` for the plotted ``axes``;
    other coordinates take their values from ``slice_spec`` (default 0).
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    if not (x_hi > x_lo and y_hi > y_lo):
        raise ValueError("degenerate bounds")
    n = state_dim or getattr(fn, "input_dim", 2)
    xs = np.linspace(x_lo, x_hi, resolution)
    ys = np.linspace(y_lo, y_hi, resolution)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    pts = np.zeros((X.size, n))
    for k, v in (slice_spec or {}).items():
        pts[:, int(k)] = v
    pts[:, axes[0]] = X.ravel()
    pts[:, axes[1]] = Y.ravel()
    V = np.asarray(fn.forward(pts), dtype=float).reshape(X.shape)
    return X, Y, V


def export_level_grid(path, fn, bounds, resolution: int, slice_spec=None, axes=(0, 1), state_dim=None):
    """Write ``x,y,value`` rows for contour plotting and return the grids."""
    X, Y, V = level_grid(fn, bounds, resolution, slice_spec, axes, state_dim)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value"])
        for x, y, v in zip(X.ravel(), Y.ravel(), V.ravel()):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(v))])
    return X, Y, V
