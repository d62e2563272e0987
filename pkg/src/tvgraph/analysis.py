"""Extinction-time bounds and functional diagnostics.

The flow settles on the mean of its datum in finite time T_ex, sandwiched by

    primitive_sup_norm(u0 - mean)  <=  T_ex  <=  ||u0 - mean||_L2 / lambda

where lambda is the optimal ratio total_variation(u) / ||u||_L2 over
mean-zero u.  No closed form for lambda is claimed: the upper estimate comes
from an explicit two-level witness family and the lower estimate from
driving the discrete Rayleigh quotient to stationarity on the mesh
(mesh-certified only, not continuum-certified).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import MetricGraph, total_length
from .pwfunc import PiecewiseConstant, total_variation
from .discrete import (
    DiscreteState,
    DualState,
    Mesh,
    ProxOptions,
    Trajectory,
    discrete_total_variation,
    prox_tv,
    sample_cell_means,
    state_l2,
    state_mass,
    to_piecewise_constant,
    _Workspace,
)


class NotExtinguishedError(ValueError):
    """An extinction report was requested for a trajectory that never settled."""


def mean_value(g: MetricGraph, u: PiecewiseConstant) -> float:
    """Integral of ``u`` divided by the total length."""
    total = math.fsum(
        math.fsum(v * w for v, w in zip(prof.values, np.diff(prof.breaks)))
        for prof in u.profiles
    )
    return total / total_length(g)


def l2_norm(g: MetricGraph, u: PiecewiseConstant) -> float:
    sq = math.fsum(
        math.fsum(v * v * w for v, w in zip(prof.values, np.diff(prof.breaks)))
        for prof in u.profiles
    )
    return math.sqrt(sq)


def rayleigh_quotient(g: MetricGraph, u: PiecewiseConstant) -> float:
    """total_variation(u) / ||u||_L2 for nonconstant mean-zero ``u``."""
    nrm = l2_norm(g, u)
    vals = u.all_values()
    if nrm == 0.0 or float(np.max(vals)) == float(np.min(vals)):
        raise ValueError("Rayleigh quotient needs a nonconstant function")
    m = mean_value(g, u)
    if abs(m) > 1e-9 * (1.0 + nrm):
        raise ValueError(f"Rayleigh quotient needs a mean-zero function (mean {m})")
    return total_variation(g, u) / nrm


# -- the minimal-sup-norm primitive (dual norm) --------------------------------


def primitive_sup_norm(g: MetricGraph, v: PiecewiseConstant) -> float:
    """Minimal sup norm of a balanced antiderivative of ``-v``.

    Minimizes ||z||_inf over fields with z' = -v on every edge and zero
    signed-trace sum at every vertex.  On each edge z is the edge-start value
    minus the running integral of v, so the problem is a small linear program
    in the per-edge start values; it is solvable exactly when v has zero
    mean, and errors with "not in G_m" otherwise.
    """
    from scipy.optimize import linprog

    E = g.n_edges
    cums = []
    for prof in v.profiles:
        widths = np.diff(prof.breaks)
        cums.append(np.concatenate(([0.0], np.cumsum(prof.values * widths))))
    total = math.fsum(float(c[-1]) for c in cums)
    scale = 1.0 + math.fsum(
        math.fsum(abs(x) * w for x, w in zip(prof.values, np.diff(prof.breaks)))
        for prof in v.profiles
    )
    if abs(total) > 1e-9 * scale:
        raise ValueError(f"not in G_m: the integral of v is {total}, not zero")

    # variables: s_0..s_{E-1} (edge-start values of z), then the bound M
    A_ub, b_ub = [], []
    for eid, c in enumerate(cums):
        for cj in c:
            row = np.zeros(E + 1)
            row[eid], row[E] = 1.0, -1.0
            A_ub.append(row.copy())          # s_e - M <= c_j
            b_ub.append(float(cj))
            row[eid] = -1.0
            A_ub.append(row)                 # -s_e - M <= -c_j
            b_ub.append(-float(cj))
    A_eq, b_eq = [], []
    for vert in range(g.n_vertices):
        row = np.zeros(E + 1)
        rhs = 0.0
        for eid, sign in g.incident_edges(vert):
            if sign > 0:                     # trace = z(l) = s_e - c_end
                row[eid] += 1.0
                rhs += float(cums[eid][-1])
            else:                            # trace = -z(0) = -s_e
                row[eid] -= 1.0
        A_eq.append(row)
        b_eq.append(rhs)

    res = linprog(
        np.concatenate((np.zeros(E), [1.0])),
        A_ub=np.array(A_ub),
        b_ub=np.array(b_ub),
        A_eq=np.array(A_eq),
        b_eq=np.array(b_eq),
        bounds=[(None, None)] * E + [(0.0, None)],
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"primitive sup-norm LP failed: {res.message}")
    return float(res.x[E])


# -- lambda estimation ----------------------------------------------------------


@dataclass(frozen=True)
class LambdaOptions:
    cut_grid: int = 33
    refine: bool = True
    power_iters: int = 60
    power_tol: float = 1e-7
    prox: ProxOptions = field(default_factory=lambda: ProxOptions(tol=1e-9))


@dataclass(frozen=True)
class LambdaEstimate:
    """Two-sided estimate of the optimal variation/norm ratio.

    ``lower`` is the stationary value of the discrete Rayleigh quotient on
    the mesh (mesh-certified: a bound for that mesh's quotients, not for the
    continuum); ``upper`` is the best member of the two-level witness family,
    so lower <= upper always.  ``witness`` is the mean-zero, unit-norm
    discrete state realizing ``lower``.
    """

    lower: float
    upper: float
    witness: DiscreteState


def _component_edges(g: MetricGraph, cut_edge: int) -> Optional[set[int]]:
    """Edge set of the terminal-side component when cut_edge is removed; None on a cycle."""
    e0 = g.edges[cut_edge]
    seen = {e0.term}
    stack = [e0.term]
    while stack:
        v = stack.pop()
        for eid, sign in g.incident_edges(v):
            if eid == cut_edge:
                continue
            e = g.edges[eid]
            w = e.init if v == e.term else e.term
            if w not in seen:
                seen.add(w)
                stack.append(w)
    if e0.init in seen:
        return None
    return {e.id for e in g.edges if e.init in seen and e.term in seen and e.id != cut_edge}


def _cut_candidate(g: MetricGraph, eid: int, x: float, comp: Optional[set[int]]) -> Optional[PiecewiseConstant]:
    """Two-level mean-zero function jumping at coordinate x of edge eid."""
    e = g.edges[eid]
    if not (0.0 < x < e.length):
        return None
    if comp is None:
        lS = e.length - x
        side = {eid}
    else:
        lS = (e.length - x) + math.fsum(g.edges[j].length for j in comp)
        side = comp
    lC = total_length(g) - lS
    if lS <= 0.0 or lC <= 0.0:
        return None
    alpha, beta = lC, -lS
    pieces = []
    for ee in g.edges:
        if ee.id == eid:
            pieces.append((np.array([0.0, x, ee.length]), np.array([beta, alpha])))
        elif comp is not None and ee.id in comp:
            pieces.append((np.array([0.0, ee.length]), np.array([alpha])))
        else:
            pieces.append((np.array([0.0, ee.length]), np.array([beta])))
    return PiecewiseConstant(g, pieces)


def _edge_set_candidate(g: MetricGraph, side: set[int]) -> Optional[PiecewiseConstant]:
    lS = math.fsum(g.edges[j].length for j in side)
    lC = total_length(g) - lS
    if lS <= 0.0 or lC <= 0.0:
        return None
    alpha, beta = lC, -lS
    pieces = [
        (np.array([0.0, e.length]), np.array([alpha if e.id in side else beta]))
        for e in g.edges
    ]
    return PiecewiseConstant(g, pieces)


def estimate_lambda(g: MetricGraph, mesh: Mesh, opts: LambdaOptions = LambdaOptions()) -> LambdaEstimate:
    """Witness-family upper estimate plus a stationary discrete lower estimate."""
    candidates: list[tuple[float, PiecewiseConstant]] = []

    comps = {eid: _component_edges(g, eid) for eid in range(g.n_edges)}

    def try_add(u: Optional[PiecewiseConstant]):
        if u is None:
            return
        try:
            q = rayleigh_quotient(g, u)
        except ValueError:
            return
        candidates.append((q, u))

    for e in g.edges:
        for k in range(1, opts.cut_grid + 1):
            x = e.length * k / (opts.cut_grid + 1)
            try_add(_cut_candidate(g, e.id, x, comps[e.id]))
        comp = comps[e.id]
        if comp is not None:
            try_add(_edge_set_candidate(g, comp | {e.id}))
            try_add(_edge_set_candidate(g, comp))

    if not candidates:
        raise RuntimeError("no admissible witness found")
    candidates.sort(key=lambda qu: qu[0])
    best_q, best_u = candidates[0]

    if opts.refine:
        # local descent on the cut coordinate of the best in-edge candidate
        from scipy.optimize import minimize_scalar

        for e in g.edges:
            def quotient_at(x, eid=e.id):
                u = _cut_candidate(g, eid, float(x), comps[eid])
                if u is None:
                    return np.inf
                try:
                    return rayleigh_quotient(g, u)
                except ValueError:
                    return np.inf

            res = minimize_scalar(
                quotient_at,
                bounds=(e.length * 1e-6, e.length * (1.0 - 1e-6)),
                method="bounded",
                options={"xatol": 1e-10 * e.length},
            )
            if res.fun < best_q:
                best_q = float(res.fun)
                best_u = _cut_candidate(g, e.id, float(res.x), comps[e.id])

    upper = float(best_q)

    # stationary discrete quotient via normalized proximal iterations: each
    # prox both lowers the quotient and keeps the mean, so the sequence is a
    # descent on the mesh's Rayleigh quotient
    ws = _Workspace(mesh, coupled=True)
    h = mesh.widths
    ell = float(np.sum(h))
    v = sample_cell_means(mesh, best_u).values.copy()
    v -= float(np.dot(h, v)) / ell
    nrm = math.sqrt(float(np.dot(h, v * v)))
    if nrm == 0.0:
        raise RuntimeError("witness collapsed on the mesh")
    v /= nrm
    q = discrete_total_variation(mesh, v)
    dual: Optional[DualState] = None
    for _ in range(opts.power_iters):
        tau = 0.5 / q
        state, dual, _rep = prox_tv(mesh, DiscreteState(mesh, v), tau, opts.prox, dual=dual, _ws=ws)
        w = state.values - float(np.dot(h, state.values)) / ell
        nrm = math.sqrt(float(np.dot(h, w * w)))
        if nrm <= 1e-12:
            break
        v = w / nrm
        q_new = discrete_total_variation(mesh, v)
        if q_new >= q - opts.power_tol * max(1.0, q):
            q = min(q, q_new)
            break
        q = q_new

    lower = float(min(q, upper))
    witness = DiscreteState(mesh, v)
    return LambdaEstimate(lower=lower, upper=upper, witness=witness)


# -- extinction report -----------------------------------------------------------


@dataclass(frozen=True)
class SnapshotCheck:
    t: float
    norm: float
    big_lambda: float
    lower_margin: float
    upper_margin: float
    decay_margin: float


@dataclass(frozen=True)
class ExtinctionReport:
    """Measured extinction time with its two-sided bounds and per-snapshot margins.

    Margins are signed slacks of

        lower_margin:  ||u(t) - mean|| - lambda_lower (T_ex - t)  >= 0
        upper_margin:  Lambda(t) (T_ex - t) - ||u(t) - mean||     >= 0
        decay_margin:  ||u0 - mean|| - lambda_lower t - ||u(t) - mean|| >= 0
    """

    measured_t_ex: float
    upper_bound: float
    lower_bound: float
    lambda_lower: float
    lambda_upper: float
    initial_norm: float
    mean: float
    snapshots: tuple[SnapshotCheck, ...]

    def min_margins(self) -> tuple[float, float, float]:
        if not self.snapshots:
            return (0.0, 0.0, 0.0)
        return (
            min(s.lower_margin for s in self.snapshots),
            min(s.upper_margin for s in self.snapshots),
            min(s.decay_margin for s in self.snapshots),
        )

    def as_dict(self) -> dict:
        lo, up, dec = self.min_margins()
        return {
            "measured_t_ex": self.measured_t_ex,
            "lower_bound": self.lower_bound,
            "upper_bound": self.upper_bound,
            "lambda_lower": self.lambda_lower,
            "lambda_upper": self.lambda_upper,
            "initial_norm": self.initial_norm,
            "mean": self.mean,
            "min_lower_margin": lo,
            "min_upper_margin": up,
            "min_decay_margin": dec,
            "snapshots": [
                {
                    "t": s.t,
                    "norm": s.norm,
                    "big_lambda": s.big_lambda,
                    "lower_margin": s.lower_margin,
                    "upper_margin": s.upper_margin,
                    "decay_margin": s.decay_margin,
                }
                for s in self.snapshots
            ],
        }


def extinction_report(
    g: MetricGraph,
    mesh: Mesh,
    u0: DiscreteState,
    traj: Trajectory,
    lam: LambdaEstimate,
) -> ExtinctionReport:
    """Assemble the extinction sandwich for an extinguished trajectory."""
    if traj.extinction_time is None:
        raise NotExtinguishedError("trajectory did not extinguish")
    t_ex = traj.extinction_time
    ell = total_length(g)
    mean = state_mass(u0) / ell
    centered0 = DiscreteState(mesh, u0.values - mean)
    norm0 = state_l2(centered0)
    upper = norm0 / lam.lower if lam.lower > 0 else math.inf
    lower = primitive_sup_norm(g, to_piecewise_constant(centered0))

    checks = []
    for t, state in zip(traj.snapshot_times, traj.snapshots):
        if t > t_ex:
            continue
        centered = state.values - mean
        nrm = math.sqrt(float(np.dot(mesh.widths, centered * centered)))
        tv = discrete_total_variation(mesh, state)
        big = tv / nrm if nrm > 0 else 0.0
        remaining = t_ex - t
        checks.append(
            SnapshotCheck(
                t=t,
                norm=nrm,
                big_lambda=big,
                lower_margin=nrm - lam.lower * remaining,
                upper_margin=big * remaining - nrm,
                decay_margin=(norm0 - lam.lower * t) - nrm,
            )
        )
    return ExtinctionReport(
        measured_t_ex=t_ex,
        upper_bound=upper,
        lower_bound=lower,
        lambda_lower=lam.lower,
        lambda_upper=lam.upper,
        initial_norm=norm0,
        mean=mean,
        snapshots=tuple(checks),
    )
