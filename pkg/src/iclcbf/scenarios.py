"""Benchmark environments and expert demonstration generation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg

from .dynamics import SystemModel, TrajectoryBatch, rollout_batch, step_batch
from .safety_filter import AnalyticFunction, CbfQpPolicy, GridPolicySpec


class ConfigurationError(ValueError):
    pass


class ExpertGenerationError(RuntimeError):
    pass


def _batched(fn):
    """Let a batched (states, goals) map also accept a single state."""
    def wrapper(states, goals=None):
        states = np.asarray(states, dtype=float)
        single = states.ndim == 1
        states = np.atleast_2d(states)
        if goals is not None:
            goals = np.atleast_2d(np.asarray(goals, dtype=float))
            if len(goals) == 1 and len(states) > 1:
                goals = np.repeat(goals, len(states), axis=0)
        out = fn(states, goals)
        return out[0] if single else out
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@dataclass(frozen=True)
class Scenario:
    name: str
    system: SystemModel
    reference: Callable
    sample_initial: Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]
    failure: Callable[[np.ndarray], np.ndarray]
    goal_pred: Callable[[np.ndarray, np.ndarray], np.ndarray]
    dt: float
    max_steps: int
    delta: float
    control_grid: GridPolicySpec
    gt_cbf: Optional[AnalyticFunction] = None
    expert_alpha: float = 1.0
    lookahead: Optional["LookaheadExpert"] = None
    safety_oracle: Optional[Callable[[np.ndarray], np.ndarray]] = None
    # per-coordinate input scaling for learned networks (~1 / extent of the region of interest)
    state_scale: Optional[tuple[float, ...]] = None
    # class-K gain in the ascent hinge while training; ~1/dt lets the hinge hold
    # on reference states that are one or two steps from the boundary
    train_alpha: float = 10.0
    # gain of the deployed filter; alpha*dt must stay well below 1 under zero-order hold
    filter_alpha: float = 1.0
    # scenario-specific defaults for IclConfig fields left unset
    icl_defaults: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.dt <= 0 or self.max_steps <= 0:
            raise ConfigurationError(f"{self.name}: dt and max_steps must be positive")
        if self.train_alpha <= 0 or self.filter_alpha <= 0:
            raise ConfigurationError(f"{self.name}: alpha gains must be positive")

    def with_overrides(self, **kw) -> "Scenario":
        return replace(self, **kw)

    def expert_policy(self):
        if self.gt_cbf is not None:
            return CbfQpPolicy(self.system, self.gt_cbf, self.expert_alpha, self.reference)
        if self.lookahead is not None:
            return self.lookahead
        raise ConfigurationError(f"{self.name}: no expert available")

    def reference_policy(self):
        return lambda states, goals: self.reference(states, goals)

    def rollout(self, policy, x0, goals, *, stop_on_failure: bool = True, max_steps: Optional[int] = None) -> TrajectoryBatch:
        return rollout_batch(
            self.system, policy, x0, goals, self.dt, max_steps or self.max_steps,
            goal=self.goal_pred, failure=self.failure if stop_on_failure else None,
        )

    def safe_labels(self, states: np.ndarray) -> np.ndarray:
        """Ground-truth safety oracle used by the labeled baseline."""
        if self.safety_oracle is None:
            raise ConfigurationError(f"{self.name}: no ground-truth safety oracle configured")
        return np.asarray(self.safety_oracle(np.atleast_2d(states)), dtype=bool)


def _wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def _reject_sample(rng, count, draw, reject, max_rounds=1000):
    out = []
    have = 0
    for _ in range(max_rounds):
        cand = draw(max(count - have, 1) * 2)
        cand = cand[~reject(cand)]
        out.append(cand)
        have += len(cand)
        if have >= count:
            return np.concatenate(out)[:count]
    raise ConfigurationError("initial-state rejection sampling did not converge")


# -- lookahead expert ------------------------------------------------------


class LookaheadExpert:
    """Grid-search expert that only accepts controls with a failure-free future.

    For each candidate (scanned nearest-to-reference first) the system is held
    at that control for ``horizon`` steps, then handed to each evasive
    continuation in turn for ``continuation_steps`` more; the candidate passes
    if any continuation keeps every sampled state out of the failure set.
    """

    def __init__(self, system, reference, failure, centers, dt, continuations, horizon=10,
                 continuation_steps=40, first_chunk=8):
        self.system = system
        self.reference = reference
        self.failure = failure
        self.centers = np.asarray(centers, dtype=float)
        self.dt = dt
        self.continuations = list(continuations)
        self.horizon = horizon
        self.continuation_steps = continuation_steps
        self.first_chunk = first_chunk
        self.fallbacks = 0

    def viable(self, states: np.ndarray) -> np.ndarray:
        """True where some evasive continuation from the state avoids failure."""
        states = np.atleast_2d(states)
        ok = np.zeros(len(states), dtype=bool)
        base_fail = self.failure(states)
        for cont in self.continuations:
            todo = np.flatnonzero(~ok & ~base_fail)
            if len(todo) == 0:
                break
            ok[todo] = self._continuation_safe(states[todo], cont)
        return ok & ~base_fail

    def _continuation_safe(self, x, cont) -> np.ndarray:
        anchor = x.copy()
        safe = np.ones(len(x), dtype=bool)
        for _ in range(self.continuation_steps):
            u = self.system.clamp(cont(x, anchor))
            x = step_batch(self.system, x, u, self.dt)
            safe &= ~self.failure(x)
        return safe

    def _candidate_safe(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        safe = np.ones(len(x), dtype=bool)
        for _ in range(self.horizon):
            x = step_batch(self.system, x, u, self.dt)
            safe &= ~self.failure(x)
        result = np.zeros(len(x), dtype=bool)
        for cont in self.continuations:
            todo = np.flatnonzero(safe & ~result)
            if len(todo) == 0:
                break
            result[todo] = self._continuation_safe(x[todo], cont)
        return result

    def __call__(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        u_ref = self.reference(states, goals)
        C = len(self.centers)
        d2 = ((self.centers[None] - u_ref[:, None]) ** 2).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")
        chosen = np.full(len(states), -1)
        pending = np.arange(len(states))
        start, chunk = 0, self.first_chunk
        while start < C and len(pending):
            stop = min(C, start + chunk)
            idx = order[pending, start:stop]
            k = idx.shape[1]
            xs = np.repeat(states[pending], k, axis=0)
            ok = self._candidate_safe(xs, self.centers[idx].reshape(-1, self.centers.shape[1])).reshape(-1, k)
            has = ok.any(axis=1)
            first = np.argmax(ok, axis=1)
            chosen[pending[has]] = idx[has, first[has]]
            pending = pending[~has]
            start, chunk = stop, chunk * 4
        if len(pending):
            # nothing certifiably safe: follow the nearest cell
            chosen[pending] = order[pending, 0]
            self.fallbacks += len(pending)
        return self.centers[chosen].copy()


# -- single integrator -----------------------------------------------------


def single_integrator_scenario(delta: float = 0.6, radius: float = 1.0) -> Scenario:
    system = SystemModel(
        "single_integrator", 2, 2, np.array([-1.0, -1.0]), np.array([1.0, 1.0]),
        drift=lambda x: np.zeros_like(x),
        actuation=lambda x: np.broadcast_to(np.eye(2), (len(x), 2, 2)),
    )

    @_batched
    def reference(states, goals):
        """Unit vector pointing at the goal."""
        d = goals - states
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        return np.divide(d, norm, out=np.zeros_like(d), where=norm > 0)

    def sample_initial(rng, count):
        x0 = _reject_sample(
            rng, count, lambda k: rng.uniform(-6.0, 6.0, size=(k, 2)),
            lambda c: np.linalg.norm(c, axis=1) < 3.0,
        )
        goals = -x0 + rng.uniform(-1.0, 1.0, size=(count, 2))
        return x0, goals

    def gt_value(x):
        return np.linalg.norm(x, axis=1) - radius

    def gt_grad(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    gt = AnalyticFunction(gt_value, gt_grad, 2)
    return Scenario(
        name="single_integrator",
        system=system,
        reference=reference,
        sample_initial=sample_initial,
        failure=lambda x: np.linalg.norm(np.atleast_2d(x), axis=1) < radius,
        goal_pred=lambda x, g: np.linalg.norm(x - g, axis=1) <= 0.1,
        dt=0.1,
        max_steps=300,
        delta=delta,
        control_grid=GridPolicySpec((50, 50), (-1.0, -1.0), (1.0, 1.0), 0.1),
        gt_cbf=gt,
        safety_oracle=lambda x: gt_value(x) >= 0.0,
        filter_alpha=0.2,
    )


# -- inverted pendulum -----------------------------------------------------

PENDULUM_P = np.array([[1.25, 0.25], [0.25, 0.25]])
PENDULUM_K = np.array([3.0, 3.0])


def inverted_pendulum_scenario(delta: float = 0.3, level: float = 0.01) -> Scenario:
    A = np.array([[0.0, 1.0], [1.0, 0.0]])
    Bcol = np.array([[0.0], [1.0]])
    system = SystemModel(
        "inverted_pendulum", 2, 1, np.array([-5.0]), np.array([5.0]),
        drift=lambda x: x @ A.T,
        actuation=lambda x: np.broadcast_to(Bcol, (len(x), 2, 1)),
    )
    safe_lo = np.array([-0.1, -0.3])
    safe_hi = np.array([0.15, 0.25])

    @_batched
    def reference(states, goals=None):
        """Linear state feedback -Kx."""
        return np.clip(-(states @ PENDULUM_K)[:, None], -5.0, 5.0)

    def failure(x):
        x = np.atleast_2d(x)
        return ~np.all((x >= safe_lo) & (x <= safe_hi), axis=1)

    def sample_initial(rng, count):
        lo, hi = np.array([-0.103, -0.3]), np.array([0.148, 0.25])
        x0 = _reject_sample(rng, count, lambda k: rng.uniform(lo, hi, size=(k, 2)), failure)
        return x0, np.zeros((count, 2))

    gt = AnalyticFunction(
        lambda x: level - np.einsum("bi,ij,bj->b", x, PENDULUM_P, x),
        lambda x: -2.0 * x @ PENDULUM_P,
        2,
    )
    return Scenario(
        name="inverted_pendulum",
        system=system,
        reference=reference,
        sample_initial=sample_initial,
        failure=failure,
        goal_pred=lambda x, g: np.linalg.norm(x - g, axis=1) <= 0.1,
        dt=0.1,
        max_steps=300,
        delta=delta,
        control_grid=GridPolicySpec((2500,), (-5.0,), (5.0,), 0.1),
        gt_cbf=gt,
        safety_oracle=lambda x: gt.forward(x) >= 0.0,
        state_scale=(8.0, 4.0),
        train_alpha=3.0,
        filter_alpha=5.0,
        # demonstrations last a few steps and match the reference, so branching off them
        # finds no difference; the signal is the learner's failures from fresh starts,
        # which needs many samples weighed against the demonstrations as a set
        icl_defaults={
            "constraint_starts": "random",
            "constraint_weighting": "balanced",
            "constraint_data": "aggregate",
            "rollouts_constraint": 1000,
            "rollouts_barrier": 600,
        },
    )


# -- Dubins car ------------------------------------------------------------

DUBINS_GOAL = np.array([3.0, 3.5])


def dubins_car_scenario(delta: float = 0.4, speed: float = 1.0, half_side: float = 1.0,
                        horizon: int = 10, continuation_steps: int = 63, margin: float = 0.3) -> Scenario:
    def drift(x):
        out = np.zeros_like(x)
        out[:, 0] = speed * np.cos(x[:, 2])
        out[:, 1] = speed * np.sin(x[:, 2])
        return out

    act = np.array([[0.0], [0.0], [1.0]])
    system = SystemModel("dubins_car", 3, 1, np.array([-1.0]), np.array([1.0]), drift,
                         lambda x: np.broadcast_to(act, (len(x), 3, 1)))

    @_batched
    def reference(states, goals=None):
        """Heading error toward the goal, saturated to the turn-rate limit."""
        g = DUBINS_GOAL[None] if goals is None else goals[:, :2]
        psi = np.arctan2(g[:, 1] - states[:, 1], g[:, 0] - states[:, 0])
        return np.clip(_wrap_angle(psi - states[:, 2]), -1.0, 1.0)[:, None]

    def failure(x, side=half_side):
        x = np.atleast_2d(x)
        return (np.abs(x[:, 0]) <= side) & (np.abs(x[:, 1]) <= side)

    def sample_initial(rng, count):
        lo = np.array([-3.2, -3.2, -0.4 * np.pi])
        hi = np.array([-2.8, -2.8, 0.4 * np.pi])
        x0 = _reject_sample(rng, count, lambda k: rng.uniform(lo, hi, size=(k, 3)), failure)
        return x0, np.repeat(DUBINS_GOAL[None], count, axis=0)

    grid = GridPolicySpec((50,), (-1.0,), (1.0,), 0.1)
    # the expert keeps a clearance around the obstacle rather than grazing it
    expert = LookaheadExpert(
        system, reference, lambda x: failure(x, half_side + margin), grid.centers(), 0.1,
        continuations=[lambda x, a: np.ones((len(x), 1)), lambda x, a: -np.ones((len(x), 1))],
        horizon=horizon, continuation_steps=continuation_steps,
    )
    return Scenario(
        name="dubins_car",
        system=system,
        reference=reference,
        sample_initial=sample_initial,
        failure=failure,
        goal_pred=lambda x, g: np.linalg.norm(x[:, :2] - g[:, :2], axis=1) <= 0.1,
        dt=0.1,
        max_steps=200,
        delta=delta,
        control_grid=grid,
        lookahead=expert,
        safety_oracle=expert.viable,
    )


# -- planar quadrotor ------------------------------------------------------


@dataclass(frozen=True)
class QuadrotorParams:
    m: float = 1.0
    g: float = 9.81
    C_D_v: float = 0.25
    C_D_phi: float = 0.02255
    I_yy: float = 0.01
    l: float = 0.3

    def __post_init__(self):
        for k, v in vars(self).items():
            if not v > 0:
                raise ConfigurationError(f"quadrotor parameter {k} must be positive, got {v}")


QUAD_GOAL = np.array([6.0, 9.0])


def quadrotor_dynamics(p: QuadrotorParams) -> SystemModel:
    def drift(x):
        out = np.empty_like(x)
        out[:, 0] = x[:, 1]
        out[:, 1] = -p.C_D_v * x[:, 1] / p.m
        out[:, 2] = x[:, 3]
        out[:, 3] = -p.C_D_v * x[:, 3] / p.m - p.g
        out[:, 4] = x[:, 5]
        out[:, 5] = -p.C_D_phi * x[:, 5] / p.I_yy
        return out

    def actuation(x):
        G = np.zeros((len(x), 6, 2))
        s = -np.sin(x[:, 4]) / p.m
        c = np.cos(x[:, 4]) / p.m
        G[:, 1, 0] = G[:, 1, 1] = s
        G[:, 3, 0] = G[:, 3, 1] = c
        # rotors sit on opposite arms, so their torques have opposite signs
        G[:, 5, 0] = -p.l / p.I_yy
        G[:, 5, 1] = p.l / p.I_yy
        return G

    return SystemModel("quadrotor", 6, 2, np.array([0.0, 0.0]), np.array([20.0, 20.0]), drift, actuation)


def hover_lqr_gain(system: SystemModel, p: QuadrotorParams, dt: float,
                   Q: Optional[np.ndarray] = None, R: Optional[np.ndarray] = None) -> np.ndarray:
    """Discrete-time LQR gain for the ZOH discretization of the hover linearization."""
    Q = np.eye(6) if Q is None else np.asarray(Q, dtype=float)
    R = np.eye(2) if R is None else np.asarray(R, dtype=float)
    u0 = np.full(2, p.m * p.g / 2.0)
    x0 = np.zeros(6)
    A = _jacobian(lambda x: system.xdot(x[None], u0[None])[0], x0)
    B = system.actuation(x0[None])[0]
    M = np.zeros((8, 8))
    M[:6, :6] = A * dt
    M[:6, 6:] = B * dt
    E = scipy.linalg.expm(M)
    Ad, Bd = E[:6, :6], E[:6, 6:]
    try:
        P = scipy.linalg.solve_discrete_are(Ad, Bd, Q, R)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise ConfigurationError(f"LQR synthesis failed: {exc}") from exc
    K = np.linalg.solve(R + Bd.T @ P @ Bd, Bd.T @ P @ Ad)
    if np.max(np.abs(np.linalg.eigvals(Ad - Bd @ K))) >= 1.0:
        raise ConfigurationError("LQR closed loop is not stable; linearization not stabilizable")
    return K


def _jacobian(fn, x, h=1e-6):
    cols = []
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((fn(x + e) - fn(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def quadrotor_scenario(params: Optional[QuadrotorParams] = None, delta: float = 0.6,
                       lqr_q: Optional[Sequence[float]] = None, lqr_r: Optional[Sequence[float]] = None,
                       horizon: int = 10, continuation_steps: int = 40) -> Scenario:
    p = params or QuadrotorParams()
    system = quadrotor_dynamics(p)
    dt = 0.05
    Q = None if lqr_q is None else np.diag(lqr_q)
    R = None if lqr_r is None else np.diag(lqr_r)
    K = hover_lqr_gain(system, p, dt, Q, R)
    u_hover = np.full(2, p.m * p.g / 2.0)
    lo, hi = system.control_lower, system.control_upper

    def lqr_to(states, setpoints_xy):
        target = np.zeros_like(states)
        target[:, 0] = setpoints_xy[:, 0]
        target[:, 2] = setpoints_xy[:, 1]
        err = states - target
        err[:, 4] = _wrap_angle(err[:, 4])
        return np.clip(u_hover - err @ K.T, lo, hi)

    @_batched
    def reference(states, goals=None):
        """Hover LQR regulating toward the goal position."""
        g = QUAD_GOAL[None].repeat(len(states), 0) if goals is None else goals[:, :2]
        return lqr_to(states, g)

    def failure(x):
        return np.atleast_2d(x)[:, 2] <= 0.0

    def sample_initial(rng, count):
        by = rng.uniform(-0.1, 0.1, count)
        bphi = rng.uniform(-0.05, 0.05, count)
        x0 = np.zeros((count, 6))
        x0[:, 1] = 1.0
        x0[:, 2] = 2.0 + by
        x0[:, 4] = -np.pi / 2.5 + bphi
        return x0, np.repeat(QUAD_GOAL[None], count, axis=0)

    grid = GridPolicySpec((100, 100), (0.0, 0.0), (20.0, 20.0), dt)

    def brake(x, anchor):
        # come to rest above the anchor position, never commanding a descent target below it
        return lqr_to(x, anchor[:, [0, 2]])

    expert = LookaheadExpert(system, reference, failure, grid.centers(), dt, [brake],
                             horizon=horizon, continuation_steps=continuation_steps)
    return Scenario(
        name="quadrotor",
        system=system,
        reference=reference,
        sample_initial=sample_initial,
        failure=failure,
        goal_pred=lambda x, g: np.linalg.norm(x[:, [0, 2]] - g[:, :2], axis=1) <= 0.1,
        dt=dt,
        max_steps=300,
        delta=delta,
        control_grid=grid,
        lookahead=expert,
        safety_oracle=expert.viable,
    )


SCENARIOS: dict[str, Callable[..., Scenario]] = {
    "single_integrator": single_integrator_scenario,
    "inverted_pendulum": inverted_pendulum_scenario,
    "dubins_car": dubins_car_scenario,
    "quadrotor": quadrotor_scenario,
}


def make_scenario(name: str, **kwargs) -> Scenario:
    try:
        factory = SCENARIOS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown scenario {name!r}; valid names: {', '.join(sorted(SCENARIOS))}"
        ) from None
    return factory(**kwargs)


def generate_expert_demos(scenario: Scenario, count: int, rng: np.random.Generator,
                          max_attempts_factor: int = 10) -> TrajectoryBatch:
    """Collect ``count`` failure-free expert trajectories, resampling rejects."""
    if count < 1:
        raise ValueError("count must be >= 1")
    policy = scenario.expert_policy()
    kept = TrajectoryBatch()
    attempts = 0
    cap = max_attempts_factor * count
    while len(kept) < count:
        need = count - len(kept)
        batch = min(need, cap - attempts)
        if batch <= 0:
            raise ExpertGenerationError(
                f"{scenario.name}: only {len(kept)}/{count} failure-free demonstrations after {attempts} attempts"
            )
        x0, goals = scenario.sample_initial(rng, batch)
        attempts += batch
        out = scenario.rollout(policy, x0, goals)
        for tr in out:
            if tr.termination != "failure":
                kept.trajectories.append(tr)
        kept.clamp_warnings += out.clamp_warnings
    return kept
