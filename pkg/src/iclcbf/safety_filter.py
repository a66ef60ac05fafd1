"""CBF-QP safety filter and the grid-search approximation of the expert.

The QP ``min ||u - u_ref||  s.t.  a.u + b >= 0,  lo <= u <= hi`` has a single
linear constraint, so its KKT solution is ``u(mu) = clip(u_ref + mu a)`` for the
multiplier ``mu >= 0`` that makes the constraint tight. ``a.u(mu)`` is
piecewise linear and nondecreasing in ``mu`` with breakpoints where a
coordinate hits a box face, so the exact multiplier comes from one pass over
at most ``2m`` breakpoints. Everything here is batched over states.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .dynamics import SystemModel, step_batch


@dataclass(frozen=True)
class HalfspaceBoxQp:
    a: np.ndarray
    b: float
    u_ref: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("empty control box")


def solve_qp_batch(a, b, u_ref, lower, upper) -> tuple[np.ndarray, np.ndarray]:
    """Solve a batch of halfspace/box QPs.

    ``a`` and ``u_ref`` are ``(B, m)``, ``b`` is ``(B,)``; the box bounds are
    ``(m,)`` (shared) or ``(B, m)``.
    Returns ``(u, feasible)``. Infeasible rows get the box point maximizing
    ``a.u`` (the least-violating vertex, u_ref clamped along ``a_i = 0``).
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    u_ref = np.atleast_2d(np.asarray(u_ref, dtype=float))
    b = np.asarray(b, dtype=float).reshape(len(a))
    lo = np.broadcast_to(np.asarray(lower, dtype=float), a.shape)
    hi = np.broadcast_to(np.asarray(upper, dtype=float), a.shape)

    u0 = np.clip(u_ref, lo, hi)
    u = u0.copy()
    feasible = np.ones(len(a), dtype=bool)
    h0 = np.einsum("bi,bi->b", a, u0)
    active = h0 + b < 0.0
    if not active.any():
        return u, feasible

    ia = np.flatnonzero(active)
    aa, ba, ra, la, ua = a[ia], b[ia], u_ref[ia], lo[ia], hi[ia]
    best = np.where(aa > 0, ua, np.where(aa < 0, la, np.clip(ra, la, ua)))
    hmax = np.einsum("bi,bi->b", aa, best)
    infeasible = hmax + ba < 0.0
    u[ia[infeasible]] = best[infeasible]
    feasible[ia[infeasible]] = False

    keep = ~infeasible
    if keep.any():
        ik = ia[keep]
        aa, ba, ra, la, ua = aa[keep], ba[keep], ra[keep], la[keep], ua[keep]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t_lo = (la - ra) / aa
            t_hi = (ua - ra) / aa
        bp = np.concatenate([t_lo, t_hi], axis=1)
        bp = np.where(np.isfinite(bp) & (bp > 0.0), bp, 0.0)
        lam = np.sort(np.concatenate([np.zeros((len(aa), 1)), bp], axis=1), axis=1)
        pts = np.clip(ra[:, None, :] + lam[:, :, None] * aa[:, None, :], la[:, None, :], ua[:, None, :])
        hv = np.einsum("bki,bi->bk", pts, aa)
        target = -ba
        k = np.argmax(hv >= target[:, None], axis=1)
        rows = np.arange(len(aa))
        h_lo, h_hi = hv[rows, k - 1], hv[rows, k]
        l_lo, l_hi = lam[rows, k - 1], lam[rows, k]
        span = h_hi - h_lo
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            mu = np.where(span > 0, l_lo + (target - h_lo) * (l_hi - l_lo) / span, l_hi)
            sol = np.clip(ra + mu[:, None] * aa, la, ua)
        # underflowing normals can defeat the breakpoint search; the maximizing vertex is feasible
        slack = np.einsum("bi,bi->b", aa, sol) - target
        bad = ~np.all(np.isfinite(sol), axis=1) | ~(slack >= -1e-10 * (1.0 + np.abs(target)))
        sol[bad] = best[keep][bad]
        u[ik] = sol
    return u, feasible


def solve_halfspace_box_qp(qp: HalfspaceBoxQp) -> tuple[np.ndarray, bool]:
    """Exact minimizer of ``||u - u_ref||`` over the box intersected with ``a.u + b >= 0``."""
    a = np.asarray(qp.a, dtype=float).ravel()
    if a.size > 3:
        raise ValueError("control dimension above 3 is not supported")
    u, ok = solve_qp_batch(a[None], np.array([qp.b]), np.asarray(qp.u_ref, dtype=float)[None], qp.lower, qp.upper)
    return u[0], bool(ok[0])


class AnalyticFunction:
    """Closed-form barrier with the same evaluation surface as :class:`Mlp`."""

    def __init__(self, value: Callable[[np.ndarray], np.ndarray], gradient: Callable[[np.ndarray], np.ndarray], input_dim: int):
        self._value = value
        self._gradient = gradient
        self.input_dim = input_dim

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(self._value(x[None])[0])
        return self._value(x)

    __call__ = forward

    def input_gradient(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return self._gradient(x[None])[0]
        return self._gradient(x)

    def value_and_input_gradient(self, x):
        return self.forward(x), self.input_gradient(x)


def constant_function(value: float, input_dim: int) -> AnalyticFunction:
    return AnalyticFunction(
        lambda x: np.full(len(x), float(value)),
        lambda x: np.zeros_like(x),
        input_dim,
    )


Reference = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class FilterDiagnostics:
    calls: int = 0
    infeasible: int = 0
    fallbacks: int = 0

    def reset(self) -> None:
        self.calls = self.infeasible = self.fallbacks = 0


class CbfQpPolicy:
    """Batched CBF-QP policy with a linear class-K term ``alpha * B``."""

    def __init__(self, system: SystemModel, barrier, alpha: float, reference: Reference):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.system = system
        self.barrier = barrier
        self.alpha = float(alpha)
        self.reference = reference
        self.diagnostics = FilterDiagnostics()

    def qp_terms(self, states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        val, grad = self.barrier.value_and_input_gradient(states)
        val = np.asarray(val, dtype=float).reshape(len(states))
        grad = np.asarray(grad, dtype=float).reshape(states.shape)
        a = np.einsum("bi,bij->bj", grad, self.system.actuation(states))
        b = np.einsum("bi,bi->b", grad, self.system.drift(states)) + self.alpha * val
        return a, b

    def __call__(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        u_ref = self.reference(states, goals)
        a, b = self.qp_terms(states)
        u, ok = solve_qp_batch(a, b, u_ref, self.system.control_lower, self.system.control_upper)
        self.diagnostics.calls += len(states)
        self.diagnostics.infeasible += int((~ok).sum())
        return u


def cbf_qp_policy(system: SystemModel, barrier, alpha: float, reference: Reference) -> CbfQpPolicy:
    return CbfQpPolicy(system, barrier, alpha, reference)


@dataclass(frozen=True)
class GridPolicySpec:
    """Uniform cells over a control box; optional centered ball restriction."""

    cells: Sequence[int]
    lower: Sequence[float]
    upper: Sequence[float]
    sampling_time: float
    ball_radius: Optional[float] = None

    def __post_init__(self):
        if any(int(c) < 1 for c in self.cells):
            raise ValueError("cell counts must be positive")
        if not (len(self.cells) == len(self.lower) == len(self.upper)):
            raise ValueError("grid spec dimensions disagree")
        if self.sampling_time <= 0:
            raise ValueError("sampling time must be positive")

    def centers(self) -> np.ndarray:
        axes = []
        for k, lo, hi in zip(self.cells, self.lower, self.upper):
            width = (hi - lo) / k
            axes.append(lo + (np.arange(k) + 0.5) * width)
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        if self.ball_radius is not None:
            pts = pts[np.linalg.norm(pts, axis=1) <= self.ball_radius]
        return pts


class GridHeuristicPolicy:
    """Nearest-to-reference grid control whose one-step successor satisfies ``c(x') < delta``.

    Candidates are scanned in order of distance to ``u_ref`` (ties broken by
    lowest flat cell index) in growing chunks, so typically only a handful of
    successors are ever evaluated. If no cell qualifies, the cell with the
    smallest ``c(x')`` is returned and counted as a fallback.
    """

    def __init__(self, system: SystemModel, constraint, delta: float, spec: GridPolicySpec,
                 reference: Reference, first_chunk: int = 16, max_eval: int = 400_000):
        if len(spec.cells) != system.control_dim:
            raise ValueError("grid dimension does not match control dimension")
        self.system = system
        self.constraint = constraint
        self.delta = float(delta)
        self.spec = spec
        self.reference = reference
        self.centers = spec.centers()
        self.first_chunk = first_chunk
        self.max_eval = max_eval
        self.diagnostics = FilterDiagnostics()

    def _successor_values(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        # states, controls: (P, k, n) / (P, k, m)
        p, k, n = states.shape
        flat_x = states.reshape(p * k, n)
        flat_u = controls.reshape(p * k, -1)
        out = np.empty(p * k)
        for s in range(0, p * k, self.max_eval):
            e = min(s + self.max_eval, p * k)
            nxt = step_batch(self.system, flat_x[s:e], flat_u[s:e], self.spec.sampling_time)
            out[s:e] = self.constraint.forward(nxt)
        return out.reshape(p, k)

    def __call__(self, states: np.ndarray, goals: np.ndarray) -> np.ndarray:
        states = np.atleast_2d(states)
        u_ref = self.reference(states, goals)
        C = len(self.centers)
        d2 = ((self.centers[None, :, :] - u_ref[:, None, :]) ** 2).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")
        chosen = np.full(len(states), -1)
        pending = np.arange(len(states))
        start, chunk = 0, self.first_chunk
        while start < C and len(pending):
            stop = min(C, start + chunk)
            idx = order[pending, start:stop]
            xs = np.broadcast_to(states[pending][:, None, :], idx.shape + (states.shape[1],))
            vals = self._successor_values(xs, self.centers[idx])
            ok = vals < self.delta
            has = ok.any(axis=1)
            first = np.argmax(ok, axis=1)
            chosen[pending[has]] = idx[has, first[has]]
            pending = pending[~has]
            start, chunk = stop, chunk * 4
        if len(pending):
            xs = np.broadcast_to(states[pending][:, None, :], (len(pending), C, states.shape[1]))
            us = np.broadcast_to(self.centers[None], (len(pending), C, self.centers.shape[1]))
            vals = self._successor_values(xs, us)
            chosen[pending] = np.argmin(vals, axis=1)
            self.diagnostics.fallbacks += len(pending)
        self.diagnostics.calls += len(states)
        return self.centers[chosen].copy()


def grid_heuristic_policy(system: SystemModel, constraint, delta: float, spec: GridPolicySpec,
                          reference: Reference) -> GridHeuristicPolicy:
    return GridHeuristicPolicy(system, constraint, delta, spec, reference)
