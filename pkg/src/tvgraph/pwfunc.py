"""Piecewise-constant functions and piecewise-linear dual fields on a metric graph.

The total variation of a piecewise-constant function splits into the classical
per-edge variation (sum of interior jump heights) plus, at every interior
vertex, the median variation of the endpoint traces:

    total_variation(u) = edge_variation(u)
                         + sum over interior v of min_mu sum_e |trace_e(v) - mu|.

The vertex term is the value of the small linear program

    max { sum_e t_e c_e  :  sum_e t_e = 0,  |t_e| <= 1 },

i.e. the tightest contribution a sup-norm-bounded dual field satisfying the
Kirchhoff balance can extract from the traces c_e.  This reduction is not
taken on trust: ``total_variation_lp`` solves the full dual linear program
directly and the test suite enforces agreement.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .graph import Edge, GraphError, MetricGraph, boundary_interior, trace_sign

_REL_TOL = 1e-12


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=float))
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class EdgeProfile:
    """One edge of a piecewise function: breakpoints plus per-piece data."""

    breaks: np.ndarray
    values: np.ndarray


def _check_breaks(breaks: np.ndarray, length: float, where: str) -> None:
    if breaks.ndim != 1 or breaks.size < 2:
        raise ValueError(f"{where}: need at least two breakpoints")
    if not np.all(np.diff(breaks) > 0.0):
        raise ValueError(f"{where}: breakpoints must be strictly increasing")
    if abs(breaks[0]) > _REL_TOL * length or abs(breaks[-1] - length) > _REL_TOL * max(1.0, length):
        raise ValueError(f"{where}: breakpoints must run from 0 to the edge length {length}")


class PiecewiseConstant:
    """Per-edge step function; the bounded-variation representative.

    Values are plateau values between consecutive breakpoints.  Endpoint
    traces are the adjacent plateau values (the one-sided limits of the good
    representative); no pointwise values are stored at breakpoints.
    Instances are immutable.
    """

    __slots__ = ("profiles",)

    def __init__(self, g: MetricGraph, pieces: Sequence[tuple[Sequence[float], Sequence[float]]]):
        if len(pieces) != g.n_edges:
            raise ValueError(f"expected data for {g.n_edges} edges, got {len(pieces)}")
        profs = []
        for e, (breaks, values) in zip(g.edges, pieces):
            breaks = np.asarray(breaks, dtype=float).copy()
            values = np.asarray(values, dtype=float)
            _check_breaks(breaks, e.length, f"edge {e.id}")
            if values.ndim != 1 or values.size != breaks.size - 1:
                raise ValueError(f"edge {e.id}: need one value per piece")
            breaks[0] = 0.0
            breaks[-1] = e.length
            profs.append(EdgeProfile(_freeze(breaks), _freeze(values)))
        self.profiles: tuple[EdgeProfile, ...] = tuple(profs)

    # -- constructors -------------------------------------------------

    @staticmethod
    def constant(g: MetricGraph, c: float) -> "PiecewiseConstant":
        return PiecewiseConstant(g, [((0.0, e.length), (c,)) for e in g.edges])

    @staticmethod
    def indicator(g: MetricGraph, intervals: Mapping[int, Sequence[tuple[float, float]]]) -> "PiecewiseConstant":
        """Indicator of a union of per-edge subintervals ``{edge_id: [(a, b), ...]}``."""
        pieces = []
        for e in g.edges:
            cuts = {0.0, e.length}
            for a, b in intervals.get(e.id, ()):
                if not (0.0 <= a < b <= e.length):
                    raise ValueError(f"edge {e.id}: bad interval ({a}, {b})")
                cuts.update((float(a), float(b)))
            breaks = np.array(sorted(cuts))
            mids = 0.5 * (breaks[:-1] + breaks[1:])
            vals = np.zeros(mids.size)
            for a, b in intervals.get(e.id, ()):
                vals[(mids > a) & (mids < b)] = 1.0
            pieces.append((breaks, vals))
        return PiecewiseConstant(g, pieces)

    # -- basic queries -------------------------------------------------

    def edge(self, eid: int) -> EdgeProfile:
        return self.profiles[eid]

    def value_at(self, eid: int, x: float) -> float:
        """Plateau value at an interior point (breakpoints resolve rightward)."""
        prof = self.profiles[eid]
        k = int(np.searchsorted(prof.breaks, x, side="right")) - 1
        k = min(max(k, 0), prof.values.size - 1)
        return float(prof.values[k])

    def with_profiles(self, g: MetricGraph, new_values: Sequence[np.ndarray]) -> "PiecewiseConstant":
        return PiecewiseConstant(g, [(p.breaks, v) for p, v in zip(self.profiles, new_values)])

    def normalize(self, g: MetricGraph) -> "PiecewiseConstant":
        """Merge equal-value neighbouring plateaus; idempotent."""
        pieces = []
        for prof in self.profiles:
            keep = np.ones(prof.values.size, dtype=bool)
            keep[1:] = prof.values[1:] != prof.values[:-1]
            vals = prof.values[keep]
            idx = np.flatnonzero(keep)
            breaks = np.concatenate((prof.breaks[idx], prof.breaks[-1:]))
            pieces.append((breaks, vals))
        return PiecewiseConstant(g, pieces)

    def scaled(self, g: MetricGraph, s: float) -> "PiecewiseConstant":
        return self.with_profiles(g, [s * p.values for p in self.profiles])

    def shifted(self, g: MetricGraph, c: float) -> "PiecewiseConstant":
        return self.with_profiles(g, [p.values + c for p in self.profiles])

    def all_values(self) -> np.ndarray:
        return np.concatenate([p.values for p in self.profiles])

    def __eq__(self, other) -> bool:
        if not isinstance(other, PiecewiseConstant):
            return NotImplemented
        return len(self.profiles) == len(other.profiles) and all(
            np.array_equal(a.breaks, b.breaks) and np.array_equal(a.values, b.values)
            for a, b in zip(self.profiles, other.profiles)
        )

    def __hash__(self):
        return id(self)


class PiecewiseLinear:
    """Per-edge continuous piecewise-linear field; the dual-field representative.

    The sup norm is attained at the nodes, so feasibility of a dual candidate
    reduces to nodal bounds.
    """

    __slots__ = ("profiles",)

    def __init__(self, g: MetricGraph, pieces: Sequence[tuple[Sequence[float], Sequence[float]]]):
        if len(pieces) != g.n_edges:
            raise ValueError(f"expected data for {g.n_edges} edges, got {len(pieces)}")
        profs = []
        for e, (nodes, values) in zip(g.edges, pieces):
            nodes = np.asarray(nodes, dtype=float).copy()
            values = np.asarray(values, dtype=float)
            _check_breaks(nodes, e.length, f"edge {e.id}")
            if values.shape != nodes.shape:
                raise ValueError(f"edge {e.id}: need one value per node")
            nodes[0] = 0.0
            nodes[-1] = e.length
            profs.append(EdgeProfile(_freeze(nodes), _freeze(values)))
        self.profiles: tuple[EdgeProfile, ...] = tuple(profs)

    @staticmethod
    def zero(g: MetricGraph) -> "PiecewiseLinear":
        return PiecewiseLinear(g, [((0.0, e.length), (0.0, 0.0)) for e in g.edges])

    def sup_norm(self) -> float:
        return max(float(np.max(np.abs(p.values))) for p in self.profiles)

    def value_at(self, eid: int, x: float) -> float:
        prof = self.profiles[eid]
        return float(np.interp(x, prof.breaks, prof.values))

    def endpoint_trace(self, g: MetricGraph, e: Edge, v: int) -> float:
        """Signed endpoint trace: field value at the terminal end, minus the
        value at the initial end."""
        s = trace_sign(g, e, v)
        prof = self.profiles[e.id]
        return float(prof.values[-1]) if s > 0 else -float(prof.values[0])


# -- traces ------------------------------------------------------------


@dataclass(frozen=True)
class VertexTraceVector:
    """Traces of a piecewise-constant function at one vertex, one per incident edge."""

    vertex: int
    edge_ids: tuple[int, ...]
    values: np.ndarray


def trace(u: PiecewiseConstant, e: Edge, v: int) -> float:
    """One-sided limit of ``u`` along ``e`` at ``v`` (adjacent plateau value)."""
    prof = u.profiles[e.id]
    if v == e.init:
        return float(prof.values[0])
    if v == e.term:
        return float(prof.values[-1])
    raise GraphError("not-incident", f"vertex {v} is not an endpoint of edge {e.id}")


def vertex_traces(g: MetricGraph, u: PiecewiseConstant, v: int) -> VertexTraceVector:
    inc = g.incident_edges(v)
    vals = np.array([trace(u, g.edges[eid], v) for eid, _ in inc])
    return VertexTraceVector(v, tuple(eid for eid, _ in inc), _freeze(vals))


# -- variation functionals ----------------------------------------------


def edge_variation(u: PiecewiseConstant) -> float:
    """Sum over edges of the classical 1D variation; blind to vertex jumps."""
    return math.fsum(
        math.fsum(abs(d) for d in np.diff(prof.values)) for prof in u.profiles
    )


def median_level(traces: VertexTraceVector) -> float:
    """Lower median of the trace multiset (a minimizer of the vertex term)."""
    vals = np.sort(traces.values)
    if vals.size == 0:
        raise ValueError("empty trace vector")
    return float(vals[(vals.size - 1) // 2])


def vertex_variation(traces: VertexTraceVector) -> float:
    """min_mu sum_e |c_e - mu|; any median attains the minimum."""
    m = median_level(traces)
    return math.fsum(abs(c - m) for c in traces.values)


def vertex_jump_variation(g: MetricGraph, u: PiecewiseConstant) -> float:
    """Degree-weighted pairwise trace differences over interior vertices.

    The double sum runs over ordered pairs, so each unordered pair counts
    twice; this is an upper envelope for the vertex part of the total
    variation, not the total variation itself.
    """
    _, interior = boundary_interior(g)
    total = []
    for v in interior:
        c = vertex_traces(g, u, v).values
        d = len(c)
        total.append(math.fsum(abs(a - b) for a in c for b in c) / d)
    return math.fsum(total)


def total_variation(g: MetricGraph, u: PiecewiseConstant) -> float:
    """Total variation: per-edge variation plus interior-vertex median variation."""
    _, interior = boundary_interior(g)
    vertex_part = math.fsum(vertex_variation(vertex_traces(g, u, v)) for v in interior)
    return edge_variation(u) + vertex_part


def _interior_jumps(u: PiecewiseConstant):
    """Yield (edge_id, coordinate, jump) over interior breakpoints with nonzero jump."""
    for eid, prof in enumerate(u.profiles):
        jumps = np.diff(prof.values)
        for k, d in enumerate(jumps):
            if d != 0.0:
                yield eid, float(prof.breaks[k + 1]), float(d)


def _dual_lp(g: MetricGraph, u: PiecewiseConstant, with_vertex_duals: bool) -> float:
    """Value of the dual linear program defining the total variation.

    Maximizes  sum_j (-jump_j) z_j + sum_v sum_e t_{v,e} c_{v,e}  over
    |z_j| <= 1 and per-vertex trace vectors with zero sum and box bounds.
    Kept deliberately independent of the median reduction: this is the
    reference implementation the fast path is tested against.
    """
    from scipy.optimize import linprog

    u = u.normalize(g)
    jumps = list(_interior_jumps(u))
    n_z = len(jumps)
    cost = [jump for _, _, jump in jumps]  # minimize jump*z == maximize -jump*z

    t_index: dict[tuple[int, int], int] = {}
    if with_vertex_duals:
        for v in range(g.n_vertices):
            for eid, _ in g.incident_edges(v):
                t_index[(v, eid)] = n_z + len(t_index)
    n = n_z + len(t_index)
    c = np.zeros(n)
    c[:n_z] = cost
    for (v, eid), col in t_index.items():
        c[col] = -trace(u, g.edges[eid], v)

    A_eq = []
    b_eq = []
    if with_vertex_duals:
        for v in range(g.n_vertices):
            row = np.zeros(n)
            for eid, _ in g.incident_edges(v):
                row[t_index[(v, eid)]] = 1.0
            A_eq.append(row)
            b_eq.append(0.0)

    if n == 0:
        return 0.0
    res = linprog(
        c,
        A_eq=np.array(A_eq) if A_eq else None,
        b_eq=np.array(b_eq) if b_eq else None,
        bounds=[(-1.0, 1.0)] * n,
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"dual LP failed: {res.message}")
    return -float(res.fun)


def total_variation_lp(g: MetricGraph, u: PiecewiseConstant) -> float:
    """Brute-force LP evaluation of the total variation (test oracle)."""
    return _dual_lp(g, u, with_vertex_duals=True)


def edge_variation_lp(g: MetricGraph, u: PiecewiseConstant) -> float:
    """Same LP with all vertex duals pinned to zero; equals edge_variation."""
    return _dual_lp(g, u, with_vertex_duals=False)


# -- perimeter and coarea -------------------------------------------------


def perimeter(g: MetricGraph, indicator: PiecewiseConstant) -> float:
    """Total variation of a {0,1}-valued function."""
    vals = indicator.all_values()
    if not np.all((vals == 0.0) | (vals == 1.0)):
        raise ValueError("perimeter needs a {0,1}-valued indicator function")
    return total_variation(g, indicator)


def superlevel(g: MetricGraph, u: PiecewiseConstant, t: float) -> PiecewiseConstant:
    """Indicator of {u > t} on the same breakpoint skeleton."""
    return u.with_profiles(g, [(prof.values > t).astype(float) for prof in u.profiles])


def coarea_sum(g: MetricGraph, u: PiecewiseConstant) -> float:
    """Level-set integral of the perimeter of superlevel sets.

    The perimeter is constant between consecutive distinct plateau values,
    so the integral is a finite sum; it equals the total variation exactly.
    """
    levels = np.unique(u.all_values())
    if levels.size < 2:
        return 0.0
    terms = []
    for lo, hi in zip(levels[:-1], levels[1:]):
        s = 0.5 * (lo + hi)
        terms.append((hi - lo) * perimeter(g, superlevel(g, u, s)))
    return math.fsum(terms)


# -- dual-field diagnostics ----------------------------------------------


def kirchhoff_defect(g: MetricGraph, z: PiecewiseLinear, v: int) -> float:
    """Sum of signed endpoint traces of ``z`` at ``v``; zero iff balanced."""
    return math.fsum(
        z.endpoint_trace(g, g.edges[eid], v) for eid, _ in g.incident_edges(v)
    )


def _green_terms(g: MetricGraph, z: PiecewiseLinear, u: PiecewiseConstant):
    """The three integration-by-parts terms, each as a list of addends."""
    u = u.normalize(g)
    jump_terms = [z.value_at(eid, x) * jump for eid, x, jump in _interior_jumps(u)]
    # integral of u z' over a plateau telescopes to value * (z at right - z at left)
    int_terms = []
    for eid, prof in enumerate(u.profiles):
        for k, c in enumerate(prof.values):
            za = z.value_at(eid, float(prof.breaks[k]))
            zb = z.value_at(eid, float(prof.breaks[k + 1]))
            int_terms.append(c * (zb - za))
    boundary_terms = []
    for v in range(g.n_vertices):
        for eid, _ in g.incident_edges(v):
            e = g.edges[eid]
            boundary_terms.append(z.endpoint_trace(g, e, v) * trace(u, e, v))
    return jump_terms, int_terms, boundary_terms


def green_residual(g: MetricGraph, z: PiecewiseLinear, u: PiecewiseConstant) -> float:
    """Integration-by-parts defect; identically zero in exact arithmetic.

    residual = sum_jumps z * jump + integral(u z') - sum_vertices trace(z) trace(u).
    """
    jump_terms, int_terms, boundary_terms = _green_terms(g, z, u)
    return math.fsum(jump_terms + int_terms + [-t for t in boundary_terms])


def green_scale(g: MetricGraph, z: PiecewiseLinear, u: PiecewiseConstant) -> float:
    """Natural magnitude of the identity's terms, for relative residual checks."""
    jump_terms, int_terms, boundary_terms = _green_terms(g, z, u)
    return 1.0 + math.fsum(abs(t) for t in jump_terms + int_terms + boundary_terms)


# -- file format ----------------------------------------------------------


def function_to_dict(g: MetricGraph, u: PiecewiseConstant) -> dict:
    out = []
    for e, prof in zip(g.edges, u.profiles):
        pieces = [
            {"from": float(a), "to": float(b), "value": float(c)}
            for a, b, c in zip(prof.breaks[:-1], prof.breaks[1:], prof.values)
        ]
        out.append({"edge": e.id, "pieces": pieces})
    return {"edges": out}


def parse_function(g: MetricGraph, data: Mapping) -> PiecewiseConstant:
    """Parse the piecewise-constant file format; pieces must tile each edge exactly."""
    try:
        entries = {int(item["edge"]): item["pieces"] for item in data["edges"]}
    except (KeyError, TypeError) as exc:
        raise ValueError(f"function spec missing key: {exc}") from None
    pieces = []
    for e in g.edges:
        if e.id not in entries:
            raise ValueError(f"no pieces given for edge {e.id}")
        items = entries[e.id]
        if not items:
            raise ValueError(f"edge {e.id}: empty piece list")
        items = sorted(items, key=lambda p: float(p["from"]))
        breaks = [float(items[0]["from"])]
        values = []
        for p in items:
            a, b, val = float(p["from"]), float(p["to"]), float(p["value"])
            if a != breaks[-1]:
                kind = "gap" if a > breaks[-1] else "overlap"
                raise ValueError(f"edge {e.id}: {kind} at coordinate {breaks[-1]}")
            if b <= a:
                raise ValueError(f"edge {e.id}: empty piece at {a}")
            breaks.append(b)
            values.append(val)
        if breaks[0] != 0.0 or breaks[-1] != e.length:
            raise ValueError(
                f"edge {e.id}: pieces cover [{breaks[0]}, {breaks[-1]}], expected [0, {e.length}]"
            )
        pieces.append((np.array(breaks), np.array(values)))
    return PiecewiseConstant(g, pieces)


def load_function(g: MetricGraph, path) -> PiecewiseConstant:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"function file {path}: {exc}") from None
    return parse_function(g, data)


def save_function(g: MetricGraph, u: PiecewiseConstant, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(function_to_dict(g, u), fh, indent=2)
        fh.write("\n")
