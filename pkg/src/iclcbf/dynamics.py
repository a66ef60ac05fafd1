"""Control-affine systems, RK4 integration and closed-loop rollouts.

All maps are vectorized over a leading batch axis: ``drift`` takes ``(B, n)``
states and returns ``(B, n)``; ``actuation`` returns ``(B, n, m)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

TERMINATIONS = ("goal", "timeout", "failure")


class IntegrationDivergence(FloatingPointError):
    """Raised when a step produces a non-finite state."""


@dataclass(frozen=True)
class SystemModel:
    name: str
    state_dim: int
    control_dim: int
    control_lower: np.ndarray
    control_upper: np.ndarray
    drift: Callable[[np.ndarray], np.ndarray]
    actuation: Callable[[np.ndarray], np.ndarray]

    def __post_init__(self):
        lo = np.asarray(self.control_lower, dtype=float).reshape(self.control_dim)
        hi = np.asarray(self.control_upper, dtype=float).reshape(self.control_dim)
        if np.any(lo > hi):
            raise ValueError(f"{self.name}: control_lower must not exceed control_upper")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "control_lower", lo)
        object.__setattr__(self, "control_upper", hi)

    def xdot(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """f(x) + g(x) u for batched ``x`` (B, n) and ``u`` (B, m)."""
        return self.drift(x) + np.einsum("bij,bj->bi", self.actuation(x), u)

    def clamp(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.control_lower, self.control_upper)

    def in_box(self, u: np.ndarray, tol: float = 0.0) -> np.ndarray:
        return np.all((u >= self.control_lower - tol) & (u <= self.control_upper + tol), axis=-1)


def step_batch(system: SystemModel, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Classic RK4 with ``u`` held constant over ``dt``; batched."""
    k1 = system.xdot(x, u)
    k2 = system.xdot(x + 0.5 * dt * k1, u)
    k3 = system.xdot(x + 0.5 * dt * k2, u)
    k4 = system.xdot(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        bad = np.flatnonzero(~np.all(np.isfinite(out), axis=1))[0]
        raise IntegrationDivergence(
            f"{system.name}: non-finite state after step from x={x[bad].tolist()} u={u[bad].tolist()}"
        )
    return out


def step(system: SystemModel, x, u, dt: float) -> np.ndarray:
    """Single-state RK4 step under a zero-order-hold control."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float).reshape(1, system.state_dim)
    u = np.asarray(u, dtype=float).reshape(1, system.control_dim)
    return step_batch(system, x, u, dt)[0]


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    controls: np.ndarray  # (T, m)
    dt: float
    termination: str
    goal: Optional[np.ndarray] = None

    def __post_init__(self):
        if len(self.controls) != len(self.states) - 1:
            raise ValueError("controls must have exactly one fewer entry than states")
        if self.termination not in TERMINATIONS:
            raise ValueError(f"unknown termination {self.termination!r}")

    def __len__(self) -> int:
        return len(self.states)


@dataclass
class TrajectoryBatch:
    trajectories: list[Trajectory] = field(default_factory=list)
    clamp_warnings: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self.trajectories)

    def __getitem__(self, i) -> Trajectory:
        return self.trajectories[i]

    def states(self) -> np.ndarray:
        """All visited states stacked into one (N, n) array."""
        return np.concatenate([t.states for t in self.trajectories], axis=0)

    def transitions(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(x, u, x_next) for every step inside every trajectory."""
        xs, us, xn = [], [], []
        for t in self.trajectories:
            xs.append(t.states[:-1])
            us.append(t.controls)
            xn.append(t.states[1:])
        return np.concatenate(xs), np.concatenate(us), np.concatenate(xn)

    def terminations(self) -> list[str]:
        return [t.termination for t in self.trajectories]

    def extend(self, other: "TrajectoryBatch") -> None:
        self.trajectories.extend(other.trajectories)
        self.clamp_warnings += other.clamp_warnings


# Batched policy: (states (B, n), goals (B, k)) -> controls (B, m)
BatchPolicy = Callable[[np.ndarray, np.ndarray], np.ndarray]
GoalTest = Callable[[np.ndarray, np.ndarray], np.ndarray]
FailureTest = Callable[[np.ndarray], np.ndarray]


def rollout_batch(
    system: SystemModel,
    policy: BatchPolicy,
    x0: np.ndarray,
    goals: np.ndarray,
    dt: float,
    max_steps: int,
    goal: Optional[GoalTest] = None,
    failure: Optional[FailureTest] = None,
) -> TrajectoryBatch:
    """Roll out ``len(x0)`` episodes in lockstep.

    An episode ends at the first sampled state where ``goal`` holds, else where
    ``failure`` holds, else after ``max_steps`` controls. Passing ``failure=None``
    lets trajectories run through the failure set.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    count = len(x0)
    states = [[x0[i]] for i in range(count)]
    controls: list[list[np.ndarray]] = [[] for _ in range(count)]
    term = [None] * count
    clamps = 0

    def check(idx, xs):
        done = np.zeros(len(idx), dtype=bool)
        if goal is not None:
            hit = goal(xs, goals[idx])
            for j in np.flatnonzero(hit):
                term[idx[j]] = "goal"
            done |= hit
        if failure is not None:
            hit = failure(xs) & ~done
            for j in np.flatnonzero(hit):
                term[idx[j]] = "failure"
            done |= hit
        return done

    active = np.arange(count)
    x = x0.copy()
    done = check(active, x)
    active, x = active[~done], x[~done]
    for _ in range(max_steps):
        if len(active) == 0:
            break
        u = np.asarray(policy(x, goals[active]), dtype=float).reshape(len(active), system.control_dim)
        outside = ~system.in_box(u)
        if outside.any():
            clamps += int(outside.sum())
            u = system.clamp(u)
        x = step_batch(system, x, u, dt)
        for j, i in enumerate(active):
            states[i].append(x[j])
            controls[i].append(u[j])
        done = check(active, x)
        active, x = active[~done], x[~done]
    for i in active:
        term[i] = "timeout"
    if clamps:
        logger.debug("%s: clamped %d out-of-box controls", system.name, clamps)
    trajs = [
        Trajectory(
            states=np.array(states[i]),
            controls=np.array(controls[i]).reshape(-1, system.control_dim),
            dt=dt,
            termination=term[i],
            goal=goals[i].copy(),
        )
        for i in range(count)
    ]
    return TrajectoryBatch(trajs, clamp_warnings=clamps)


def rollout(
    system: SystemModel,
    policy: Callable[[np.ndarray], np.ndarray],
    x0,
    dt: float,
    max_steps: int,
    goal: Optional[Callable[[np.ndarray], bool]] = None,
    failure: Optional[Callable[[np.ndarray], bool]] = None,
) -> tuple[Trajectory, int]:
    """Single-episode rollout with per-state callables.

    Returns the trajectory and the number of clamped controls.
    """
    def batch_policy(xs, _goals):
        return np.asarray(policy(xs[0]), dtype=float).reshape(1, -1)

    def wrap(pred):
        if pred is None:
            return None
        return lambda xs, *_: np.array([bool(pred(xs[0]))])

    batch = rollout_batch(
        system, batch_policy, np.asarray(x0, dtype=float)[None], np.zeros((1, 0)), dt, max_steps,
        goal=wrap(goal), failure=wrap(failure),
    )
    return batch[0], batch.clamp_warnings


def write_trajectory_csv(path, batch: TrajectoryBatch) -> None:
    """One row per step; the final row of each trajectory has empty controls.

    Termination and, when present, the goal columns ``g_i`` are filled on the
    first row of each trajectory only.
    """
    trajs = batch.trajectories
    if not trajs:
        raise ValueError("empty batch")
    n = trajs[0].states.shape[1]
    m = trajs[0].controls.shape[1] if trajs[0].controls.size else _infer_m(trajs)
    goals = [None if t.goal is None else np.atleast_1d(np.asarray(t.goal, dtype=float)) for t in trajs]
    k_goal = max((len(g) for g in goals if g is not None), default=0)
    header = ["trajectory_id", "step", "t"] + [f"x_{i}" for i in range(n)] + [f"u_{j}" for j in range(m)]
    header += ["termination"] + [f"g_{i}" for i in range(k_goal)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for tid, tr in enumerate(trajs):
            for k, x in enumerate(tr.states):
                u = [repr(float(v)) for v in tr.controls[k]] if k < len(tr.controls) else [""] * m
                row = [tid, k, repr(k * tr.dt)] + [repr(float(v)) for v in x] + u
                row.append(tr.termination if k == 0 else "")
                if k_goal:
                    g = goals[tid]
                    row += [repr(float(v)) for v in g] if k == 0 and g is not None else [""] * k_goal
                w.writerow(row)


def _infer_m(trajs: Sequence[Trajectory]) -> int:
    for t in trajs:
        if t.controls.size:
            return t.controls.shape[1]
    return trajs[0].controls.shape[1]


def read_trajectory_csv(path) -> TrajectoryBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    n = sum(h.startswith("x_") for h in header)
    m = sum(h.startswith("u_") for h in header)
    k_goal = sum(h.startswith("g_") for h in header)
    term_col = header.index("termination")
    grouped: dict[int, list[list[str]]] = {}
    for r in rows:
        grouped.setdefault(int(r[0]), []).append(r)
    trajs = []
    for tid in sorted(grouped):
        rs = grouped[tid]
        states = np.array([[float(v) for v in r[3:3 + n]] for r in rs])
        controls = np.array([[float(v) for v in r[3 + n:3 + n + m]] for r in rs[:-1]]).reshape(-1, m)
        dt = float(rs[1][2]) if len(rs) > 1 else 0.0
        goal_cells = rs[0][term_col + 1:term_col + 1 + k_goal]
        goal = np.array([float(v) for v in goal_cells]) if k_goal and goal_cells[0] != "" else None
        trajs.append(Trajectory(states, controls, dt, rs[0][term_col], goal))
    return TrajectoryBatch(trajs)
