"""Inverse constraint learning of a state constraint, and neural CBF training.

``train_icl_cbf`` alternates between fitting a constraint classifier that
separates learner-visited states from expert states and fitting a barrier on
reference-controller rollouts labeled by that classifier.
"""

from __future__ import annotations

import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .dynamics import SystemModel, TrajectoryBatch
from .neural import Adam, Mlp
from .safety_filter import CbfQpPolicy, GridHeuristicPolicy
from .scenarios import ConfigurationError, Scenario

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class LabeledDataset:
    x_safe: np.ndarray
    x_unsafe: np.ndarray
    d_safe_x: np.ndarray
    d_safe_u: np.ndarray

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.x_safe), len(self.x_unsafe), len(self.d_safe_x)


@dataclass(frozen=True)
class CbfLossWeights:
    w_safe: float = 1.0
    w_unsafe: float = 1.0
    w_ascent: float = 1.0
    eps_safe: float = 0.05
    eps_unsafe: float = 0.05
    eps_ascent: float = 0.01
    # None defers to the scenario's training gain
    alpha: Optional[float] = None

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v is not None and v < 0:
                raise ValueError(f"{k} must be nonnegative")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    def resolved(self, scenario: Scenario) -> "CbfLossWeights":
        return self if self.alpha is not None else replace(self, alpha=scenario.train_alpha)


def _require_alpha(w: CbfLossWeights) -> float:
    if w.alpha is None:
        raise ValueError("loss alpha is unset; call CbfLossWeights.resolved(scenario) first")
    return w.alpha


# fallbacks for the scenario-dependent IclConfig fields left as None
ICL_DEFAULTS = {
    "rollouts_barrier": 150,
    "rollouts_constraint": 300,
    "constraint_data": "aggregate",
    "constraint_starts": "branch",
    "constraint_weighting": "sum",
    "branch_horizon": 20,
}
_CHOICES = {
    "barrier_source": ("reference", "union"),
    "constraint_data": ("latest", "aggregate"),
    "constraint_starts": ("expert", "random", "branch"),
    "constraint_weighting": ("sum", "balanced"),
}


@dataclass
class IclConfig:
    """Training hyperparameters.

    Fields left as None take the scenario's value (``Scenario.icl_defaults``)
    or else ``ICL_DEFAULTS``; see :meth:`resolved`.
    """

    iterations: int = 5
    rollouts_barrier: Optional[int] = None
    rollouts_constraint: Optional[int] = None
    constraint_epochs: int = 200
    constraint_batch: int = 256
    barrier_epochs: int = 200
    barrier_batch: int = 256
    learning_rate: float = 1e-3
    hidden: tuple[int, ...] = (64, 64)
    heuristic: bool = True
    seed: int = 0
    # where the barrier's training states come from: "reference" or "union"
    barrier_source: str = "reference"
    # "latest" trains the constraint on this iteration's samples, "aggregate" on all so far
    constraint_data: Optional[str] = None
    # learner rollouts for the constraint start from the demonstrations' initial
    # states and goals ("expert"), from fresh random draws ("random"), or branch
    # off states along the demonstrations for branch_horizon steps and are
    # compared against the matching demonstration segments ("branch")
    constraint_starts: Optional[str] = None
    branch_horizon: Optional[int] = None
    # "sum" weighs every state equally; "balanced" gives learner and expert sets equal total weight
    constraint_weighting: Optional[str] = None
    # gain of the barrier filter used as the learner in full mode
    filter_alpha: Optional[float] = None
    stop_on_failure_when_sampling: bool = False

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        for k, allowed in _CHOICES.items():
            v = getattr(self, k)
            if v is not None and v not in allowed:
                raise ValueError(f"{k} must be one of {', '.join(allowed)}; got {v!r}")
        for k in ("rollouts_barrier", "rollouts_constraint", "branch_horizon"):
            v = getattr(self, k)
            if v is not None and v < 1:
                raise ValueError(f"{k} must be >= 1")
        if self.filter_alpha is not None and self.filter_alpha <= 0:
            raise ValueError("filter_alpha must be positive")
        self.hidden = tuple(int(h) for h in self.hidden)

    def resolved(self, scenario: Optional[Scenario] = None) -> "IclConfig":
        overrides = scenario.icl_defaults if scenario is not None else {}
        fill = {k: overrides.get(k, d) for k, d in ICL_DEFAULTS.items() if getattr(self, k) is None}
        return replace(self, **fill) if fill else self


@dataclass
class IterationRecord:
    iteration: int
    constraint_loss: Optional[float]
    cbf_loss: Optional[float]
    n_safe: int
    n_unsafe: int
    n_dsafe: int
    wall_seconds: float


@dataclass
class IclHistory:
    records: list[IterationRecord] = field(default_factory=list)
    constraint_losses: list[float] = field(default_factory=list)
    barrier_curves: list[list[float]] = field(default_factory=list)
    train_seconds: float = 0.0


def _states(data) -> np.ndarray:
    if isinstance(data, TrajectoryBatch):
        return data.states()
    return np.atleast_2d(np.asarray(data, dtype=float))


def hash_name(name) -> int:
    """Stable 32-bit hash for naming RNG streams (``hash()`` is salted per process)."""
    return zlib.crc32(str(name).encode())


def _stream(seed: int, *names) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(hash_name(n) for n in names)]))


# -- labeling ---------------------------------------------------------------


def label_states(constraint, batch: TrajectoryBatch, delta: float) -> LabeledDataset:
    """Split visited states at ``c(x) >= delta`` and collect safe-to-safe transitions."""
    if not math.isfinite(delta):
        raise ValueError("delta must be finite")
    safe_parts, unsafe_parts, dx, du = [], [], [], []
    for tr in batch:
        c = np.atleast_1d(constraint.forward(tr.states))
        safe = c < delta
        safe_parts.append(tr.states[safe])
        unsafe_parts.append(tr.states[~safe])
        pair = safe[:-1] & safe[1:]
        dx.append(tr.states[:-1][pair])
        du.append(tr.controls[pair])
    n = batch[0].states.shape[1]
    m = batch[0].controls.shape[1]

    def cat(parts, width):
        parts = [p for p in parts if len(p)]
        return np.concatenate(parts) if parts else np.zeros((0, width))

    return LabeledDataset(cat(safe_parts, n), cat(unsafe_parts, n), cat(dx, n), cat(du, m))


def label_with_oracle(is_safe, batch: TrajectoryBatch) -> LabeledDataset:
    """Same partition as :func:`label_states`, driven by a boolean safety oracle."""

    class _Oracle:
        def forward(self, x):
            return np.where(is_safe(np.atleast_2d(x)), 0.0, 1.0)

    return label_states(_Oracle(), batch, 0.5)


# -- constraint -------------------------------------------------------------


def constraint_loss(constraint, sampled_states, expert_states, balanced: bool = False) -> float:
    """Sum of (1 - c)^2 over learner states plus (1 + c)^2 over expert states.

    ``balanced`` replaces each sum by its mean so unequal set sizes do not
    shift the decision boundary.
    """
    xs, xe = _states(sampled_states), _states(expert_states)
    if len(xs) == 0 or len(xe) == 0:
        raise ValueError("both state sets must be nonempty")
    cs = np.atleast_1d(constraint.forward(xs))
    ce = np.atleast_1d(constraint.forward(xe))
    reduce = np.mean if balanced else np.sum
    return float(reduce((1.0 - cs) ** 2) + reduce((1.0 + ce) ** 2))


@dataclass
class TrainResult:
    net: Mlp
    epoch_losses: list[float]
    initial_loss: float
    final_loss: float


def train_constraint(constraint: Mlp, sampled, expert, config: IclConfig,
                     rng: Optional[np.random.Generator] = None) -> TrainResult:
    """Minibatch Adam on the mean squared error to targets +1 (learner) / -1 (expert)."""
    rng = rng or np.random.default_rng(config.seed)
    xs, xe = _states(sampled), _states(expert)
    if len(xs) == 0 or len(xe) == 0:
        raise ValueError("both state sets must be nonempty")
    balanced = config.resolved().constraint_weighting == "balanced"
    X = np.concatenate([xs, xe])
    T = np.concatenate([np.ones(len(xs)), -np.ones(len(xe))])
    if balanced:
        # each set carries half the total weight
        W = np.concatenate([np.full(len(xs), len(X) / (2 * len(xs))), np.full(len(xe), len(X) / (2 * len(xe)))])
    else:
        W = np.ones(len(X))
    initial = constraint_loss(constraint, xs, xe, balanced)
    opt = Adam(constraint.num_params, lr=config.learning_rate)
    bs = config.constraint_batch
    curve = []
    for epoch in range(config.constraint_epochs):
        perm = rng.permutation(len(X))
        total = 0.0
        for s in range(0, len(X), bs):
            idx = perm[s:s + bs]
            y, _, cache = constraint.tangent_forward(X[idx])
            r = y - T[idx]
            total += float(W[idx] @ r ** 2)
            grad = constraint.backward(cache, 2.0 * W[idx] * r / len(idx))
            opt.step(constraint.params, grad)
        curve.append(total / len(X))
        if not np.isfinite(curve[-1]) or not np.all(np.isfinite(constraint.params)):
            raise TrainingError(f"constraint training diverged at epoch {epoch}: loss={curve[-1]}")
    final = constraint_loss(constraint, xs, xe, balanced)
    return TrainResult(constraint, curve, initial, final)


# -- barrier ----------------------------------------------------------------


def _ascent_directions(system: SystemModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    return system.xdot(x, u) if len(x) else np.zeros_like(x)


def cbf_loss(barrier, system: SystemModel, data: LabeledDataset, w: CbfLossWeights) -> float:
    """Weighted sum of the three hinge penalties (safe, unsafe, ascent)."""
    if sum(data.sizes) == 0:
        raise ValueError("dataset is empty")
    alpha = _require_alpha(w)
    total = 0.0
    if len(data.x_safe):
        total += w.w_safe * float(np.maximum(w.eps_safe - np.atleast_1d(barrier.forward(data.x_safe)), 0.0).sum())
    if len(data.x_unsafe):
        total += w.w_unsafe * float(np.maximum(w.eps_unsafe + np.atleast_1d(barrier.forward(data.x_unsafe)), 0.0).sum())
    if len(data.d_safe_x):
        val, grad = barrier.value_and_input_gradient(data.d_safe_x)
        val = np.atleast_1d(val)
        grad = np.atleast_2d(grad)
        bdot = np.einsum("bi,bi->b", grad, _ascent_directions(system, data.d_safe_x, data.d_safe_u))
        total += w.w_ascent * float(np.maximum(w.eps_ascent - bdot - alpha * val, 0.0).sum())
    return total


def _cycle(rng, n, bs):
    """Endless stream of size-``bs`` index batches over ``range(n)``; needs ``bs <= n``."""
    perm, pos = rng.permutation(n), 0
    while True:
        if pos + bs <= n:
            yield perm[pos:pos + bs]
            pos += bs
        else:
            head = perm[pos:]
            perm, pos = rng.permutation(n), bs - len(head)
            yield np.concatenate([head, perm[:pos]])


def train_cbf(barrier: Mlp, system: SystemModel, data: LabeledDataset, w: CbfLossWeights,
              config: IclConfig, rng: Optional[np.random.Generator] = None) -> TrainResult:
    """Minibatch Adam on per-set means of the three hinge terms."""
    rng = rng or np.random.default_rng(config.seed)
    alpha = _require_alpha(w)
    ns, nu, nd = data.sizes
    if ns == 0 and nd == 0:
        raise ValueError("x_safe and d_safe must not both be empty")
    directions = _ascent_directions(system, data.d_safe_x, data.d_safe_u)
    bs = config.barrier_batch
    n_batches = max(1, math.ceil(max(ns, nu, nd) / bs))
    streams = {k: _cycle(rng, size, min(bs, size)) for k, size in (("s", ns), ("u", nu), ("d", nd)) if size}
    initial = cbf_loss(barrier, system, data, w)
    opt = Adam(barrier.num_params, lr=config.learning_rate)
    n = system.state_dim
    curve = []
    for epoch in range(config.barrier_epochs):
        total = 0.0
        for _ in range(n_batches):
            xs_parts, v_parts, kinds = [], [], []
            if "s" in streams:
                i = next(streams["s"])
                xs_parts.append(data.x_safe[i]); v_parts.append(np.zeros((len(i), n))); kinds.append(("s", len(i)))
            if "u" in streams:
                i = next(streams["u"])
                xs_parts.append(data.x_unsafe[i]); v_parts.append(np.zeros((len(i), n))); kinds.append(("u", len(i)))
            if "d" in streams:
                i = next(streams["d"])
                xs_parts.append(data.d_safe_x[i]); v_parts.append(directions[i]); kinds.append(("d", len(i)))
            X = np.concatenate(xs_parts)
            V = np.concatenate(v_parts)
            y, yd, cache = barrier.tangent_forward(X, V)
            gy = np.zeros(len(X))
            gyd = np.zeros(len(X))
            pos = 0
            loss = 0.0
            for kind, k in kinds:
                sl = slice(pos, pos + k)
                if kind == "s":
                    r = w.eps_safe - y[sl]
                    act = r > 0
                    loss += w.w_safe * float(r[act].sum()) / k
                    gy[sl] = np.where(act, -w.w_safe / k, 0.0)
                elif kind == "u":
                    r = w.eps_unsafe + y[sl]
                    act = r > 0
                    loss += w.w_unsafe * float(r[act].sum()) / k
                    gy[sl] = np.where(act, w.w_unsafe / k, 0.0)
                else:
                    r = w.eps_ascent - yd[sl] - alpha * y[sl]
                    act = r > 0
                    loss += w.w_ascent * float(r[act].sum()) / k
                    gy[sl] = np.where(act, -alpha * w.w_ascent / k, 0.0)
                    gyd[sl] = np.where(act, -w.w_ascent / k, 0.0)
                pos += k
            total += loss
            opt.step(barrier.params, barrier.backward(cache, gy, gyd))
        curve.append(total / n_batches)
        if not np.isfinite(curve[-1]) or not np.all(np.isfinite(barrier.params)):
            raise TrainingError(f"barrier training diverged at epoch {epoch}: loss={curve[-1]}")
    final = cbf_loss(barrier, system, data, w)
    return TrainResult(barrier, curve, initial, final)


# -- Algorithm --------------------------------------------------------------


def filter_alpha(scenario: Scenario, config: Optional[IclConfig] = None) -> float:
    """Gain for deploying a learned barrier in the CBF-QP filter."""
    if config is not None and config.filter_alpha is not None:
        return config.filter_alpha
    return scenario.filter_alpha


def new_constraint(n: int, config: IclConfig, input_scale=None) -> Mlp:
    return Mlp([n, *config.hidden, 1], "tanh", seed=hash_name(f"{config.seed}/constraint") % 2**31,
               input_scale=input_scale)


def new_barrier(n: int, config: IclConfig, input_scale=None) -> Mlp:
    return Mlp([n, *config.hidden, 1], "identity", seed=hash_name(f"{config.seed}/barrier") % 2**31,
               input_scale=input_scale)


def sample_rollouts(scenario: Scenario, policy, count: int, rng: np.random.Generator,
                    stop_on_failure: bool) -> TrajectoryBatch:
    x0, goals = scenario.sample_initial(rng, count)
    return scenario.rollout(policy, x0, goals, stop_on_failure=stop_on_failure)


def expert_starts(expert: TrajectoryBatch, count: int) -> Optional[tuple[np.ndarray, np.ndarray]]:
    """Initial states and goals of the demonstrations, cycled to ``count``.

    Returns None when some demonstration carries no goal.
    """
    trajs = expert.trajectories
    if any(t.goal is None for t in trajs):
        return None
    idx = np.arange(count) % len(trajs)
    x0 = np.array([trajs[i].states[0] for i in idx])
    goals = np.array([np.atleast_1d(trajs[i].goal) for i in idx])
    return x0, goals


def expert_branches(expert: TrajectoryBatch, count: int, horizon: int, rng: np.random.Generator):
    """Branch points drawn uniformly over demonstration states.

    Returns ``(x0, goals, segments)`` where ``segments`` stacks the ``horizon``
    demonstration steps following each branch point, or None when some
    demonstration carries no goal.
    """
    trajs = expert.trajectories
    if any(t.goal is None for t in trajs):
        return None
    lens = np.array([len(t.states) for t in trajs])
    j = rng.choice(len(trajs), size=count, p=lens / lens.sum())
    k = (rng.random(count) * lens[j]).astype(int)
    x0 = np.array([trajs[a].states[b] for a, b in zip(j, k)])
    goals = np.array([np.atleast_1d(trajs[a].goal) for a in j])
    segments = np.concatenate([trajs[a].states[b:b + horizon + 1] for a, b in zip(j, k)])
    return x0, goals, segments


def train_icl_cbf(scenario: Scenario, expert: TrajectoryBatch, config: IclConfig,
                  w: Optional[CbfLossWeights] = None, delta: Optional[float] = None):
    """Run the alternating constraint/barrier procedure.

    Returns ``(barrier, constraint, history)``. In heuristic mode the barrier
    is trained once, at the last iteration; earlier iterations use the
    grid-search policy over the current constraint as the learner.
    """
    if len(expert) == 0:
        raise ValueError("expert batch is empty")
    w = (w or CbfLossWeights()).resolved(scenario)
    config = config.resolved(scenario)
    delta = scenario.delta if delta is None else float(delta)
    system = scenario.system
    n = system.state_dim
    constraint = new_constraint(n, config, scenario.state_scale)
    barrier = new_barrier(n, config, scenario.state_scale)
    history = IclHistory()
    x_expert = expert.states()
    learner_batches: list[TrajectoryBatch] = []
    expert_sets: list[np.ndarray] = []
    stop = config.stop_on_failure_when_sampling
    t_start = time.perf_counter()

    def update_constraint(i, policy):
        rng = _stream(config.seed, "constraint-samples", i)
        starts = branches = None
        if config.constraint_starts == "expert":
            starts = expert_starts(expert, config.rollouts_constraint)
        elif config.constraint_starts == "branch":
            branches = expert_branches(expert, config.rollouts_constraint, config.branch_horizon, rng)
        if branches is not None:
            xsc = scenario.rollout(policy, branches[0], branches[1], stop_on_failure=stop,
                                   max_steps=config.branch_horizon)
            expert_sets.append(branches[2])
        elif starts is not None:
            xsc = scenario.rollout(policy, *starts, stop_on_failure=stop)
            expert_sets.append(x_expert)
        else:
            xsc = sample_rollouts(scenario, policy, config.rollouts_constraint, rng, stop)
            expert_sets.append(x_expert)
        learner_batches.append(xsc)
        if config.constraint_data == "aggregate":
            sampled = np.concatenate([b.states() for b in learner_batches])
            matched = expert_sets[-1] if branches is None else np.concatenate(expert_sets)
        else:
            sampled, matched = xsc.states(), expert_sets[-1]
        res = train_constraint(constraint, sampled, matched, config, _stream(config.seed, "constraint-train", i))
        loss = res.final_loss
        history.constraint_losses.append(loss)
        logger.info("iteration %d: constraint loss %.4g -> %.4g", i, res.initial_loss, loss)
        return loss

    def fit_barrier(i, source: TrajectoryBatch):
        nonlocal barrier
        # each fit starts fresh; a barrier warm-started on earlier labels keeps their imprint
        barrier = new_barrier(n, config, scenario.state_scale)
        data = label_states(constraint, source, delta)
        ns, nu, nd = data.sizes
        if ns == 0 and nd == 0:
            raise TrainingError(f"iteration {i}: every sampled state was labeled unsafe (delta={delta})")
        res = train_cbf(barrier, system, data, w, config, _stream(config.seed, "barrier-train", i))
        history.barrier_curves.append(res.epoch_losses)
        logger.info("iteration %d: |safe|=%d |unsafe|=%d |dsafe|=%d cbf loss %.4g", i, ns, nu, nd, res.final_loss)
        return data, res.final_loss

    for i in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        c_loss = b_loss = None
        sizes = (0, 0, 0)
        last = i == config.iterations
        if config.heuristic:
            if last:
                if config.barrier_source == "union" and learner_batches:
                    source = TrajectoryBatch()
                    for b in learner_batches:
                        source.extend(b)
                else:
                    source = sample_rollouts(scenario, scenario.reference_policy(), config.rollouts_barrier,
                                             _stream(config.seed, "barrier-samples", i), stop)
                data, b_loss = fit_barrier(i, source)
                sizes = data.sizes
            else:
                policy = GridHeuristicPolicy(system, constraint, delta, scenario.control_grid, scenario.reference)
                c_loss = update_constraint(i, policy)
        else:
            source = sample_rollouts(scenario, scenario.reference_policy(), config.rollouts_barrier,
                                     _stream(config.seed, "barrier-samples", i), stop)
            data, b_loss = fit_barrier(i, source)
            sizes = data.sizes
            if not last:
                policy = CbfQpPolicy(system, barrier, filter_alpha(scenario, config), scenario.reference)
                c_loss = update_constraint(i, policy)
        history.records.append(IterationRecord(i, c_loss, b_loss, *sizes, time.perf_counter() - t0))
    history.train_seconds = time.perf_counter() - t_start
    return barrier, constraint, history


def train_lcbf(scenario: Scenario, config: IclConfig, w: Optional[CbfLossWeights] = None):
    """Barrier trained on reference rollouts labeled by the ground-truth oracle.

    Returns ``(barrier, dataset, train_result)``.
    """
    if scenario.safety_oracle is None:
        raise ConfigurationError(f"{scenario.name}: labeled baseline needs a ground-truth safety oracle")
    w = (w or CbfLossWeights()).resolved(scenario)
    config = config.resolved(scenario)
    source = sample_rollouts(scenario, scenario.reference_policy(), config.rollouts_barrier,
                             _stream(config.seed, "lcbf-samples"), config.stop_on_failure_when_sampling)
    data = label_with_oracle(scenario.safe_labels, source)
    barrier = new_barrier(scenario.system.state_dim, config, scenario.state_scale)
    res = train_cbf(barrier, scenario.system, data, w, config, _stream(config.seed, "lcbf-train"))
    return barrier, data, res


def write_history_csv(path, history: IclHistory) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "constraint_loss", "cbf_loss", "n_safe", "n_unsafe", "n_dsafe", "wall_seconds"])
        for r in history.records:
            wr.writerow([
                r.iteration,
                "" if r.constraint_loss is None else repr(r.constraint_loss),
                "" if r.cbf_loss is None else repr(r.cbf_loss),
                r.n_safe, r.n_unsafe, r.n_dsafe, f"{r.wall_seconds:.3f}",
            ])
