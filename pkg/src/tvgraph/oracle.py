"""Closed-form flow trajectories for piecewise-constant initial data.

The flow of a piecewise-constant function keeps every breakpoint fixed and
moves the plateau values at constant speeds until two adjacent values meet;
the speeds are read off the dual field's endpoint values:

* at an interior jump the field sits at +/-1 with the sign of the jump,
* at a vertex the trace vector is the sign pattern of the traces around
  their median, ties sharing the residual balance,

so each maximal constant region moves with speed (net boundary flux) /
(region length).  Phases are chained until a single constant remains; the
machinery re-derives every published closed form from these slope systems
instead of hard-coding final expressions, and cross-checks mass conservation
and a bounded consistent dual field for every phase.

Inputs given as ints/Fractions are processed in exact rational arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .graph import MetricGraph, boundary_interior, build_graph
from .pwfunc import PiecewiseConstant


class OracleError(RuntimeError):
    """The configuration left the supported closed-form families."""


def _sign(x) -> int:
    return (x > 0) - (x < 0)


def _is_exact(*vals) -> bool:
    return all(isinstance(v, (int, Fraction)) for v in vals)


def _num(x, exact: bool):
    return Fraction(x) if exact else float(x)


def _close(a, b, exact: bool) -> bool:
    if exact:
        return a == b
    return math.isclose(float(a), float(b), rel_tol=1e-9, abs_tol=1e-12)


# -- solution container ------------------------------------------------------


@dataclass(frozen=True)
class Region:
    edge: int
    x0: object
    x1: object

    @property
    def length(self):
        return self.x1 - self.x0


@dataclass(frozen=True)
class ExplicitSolution:
    """Exact multi-phase trajectory: fixed regions, per-phase affine values.

    ``phase_starts`` has one more entry than there are phases; the last entry
    is the extinction time.  Within phase k, region r carries the value
    start_values[k][r] + slopes[k][r] * (t - phase_starts[k]).
    """

    graph: MetricGraph
    regions: tuple[Region, ...]
    phase_starts: tuple
    start_values: tuple
    slopes: tuple
    final_value: object
    exact: bool

    @property
    def t_ex(self):
        return self.phase_starts[-1]

    @property
    def n_phases(self) -> int:
        return len(self.slopes)

    def phase_durations(self) -> tuple:
        return tuple(b - a for a, b in zip(self.phase_starts[:-1], self.phase_starts[1:]))

    def region_value(self, r: int, t):
        """Value of region ``r`` at absolute time ``t`` (clamped past extinction)."""
        if t < 0:
            raise ValueError("t must be nonnegative")
        for k in range(self.n_phases):
            if t < self.phase_starts[k + 1]:
                return self.start_values[k][r] + self.slopes[k][r] * (t - self.phase_starts[k])
        return self.final_value

    def eval(self, t: float) -> PiecewiseConstant:
        """State at absolute time ``t`` as a float piecewise-constant function."""
        g = self.graph
        per_edge: list[tuple[list, list]] = [([0.0], []) for _ in g.edges]
        for r, reg in enumerate(self.regions):
            breaks, vals = per_edge[reg.edge]
            breaks.append(float(reg.x1))
            vals.append(float(self.region_value(r, t)))
        return PiecewiseConstant(g, [(np.array(b), np.array(v)) for b, v in per_edge])

    def initial(self) -> PiecewiseConstant:
        return self.eval(0.0)


# -- plateau evolution machinery ---------------------------------------------


class _DSU:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, i):
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[rb] = ra


def _vertex_entries(g: MetricGraph, breaks, values, v: int):
    """(plateau id, trace value) per incident edge end at vertex v."""
    out = []
    for eid, sign in g.incident_edges(v):
        k = len(values[eid]) - 1 if sign > 0 else 0
        out.append(((eid, k), values[eid][k]))
    return out


def _median(vals):
    s = sorted(vals)
    return s[(len(s) - 1) // 2]


def _compute_groups(g: MetricGraph, breaks, values):
    """Union plateaus sharing a value across a vertex into constant regions."""
    ids = [(eid, k) for eid in range(g.n_edges) for k in range(len(values[eid]))]
    dsu = _DSU(ids)
    for v in range(g.n_vertices):
        entries = _vertex_entries(g, breaks, values, v)
        for i in range(len(entries)):
            for j in range(i + 1, len(entries)):
                if entries[i][1] == entries[j][1]:
                    dsu.union(entries[i][0], entries[j][0])
    groups: dict = {}
    for pid in ids:
        groups.setdefault(dsu.find(pid), []).append(pid)
    return dsu, groups


def _group_speeds(g: MetricGraph, breaks, values, dsu, groups, exact: bool):
    """Net boundary flux over length for every constant region."""
    zero = _num(0, exact)
    flux = {gid: zero for gid in groups}
    # interior jumps: mass flows in from the higher side
    for eid in range(g.n_edges):
        vals = values[eid]
        for k in range(len(vals) - 1):
            s = _sign(vals[k + 1] - vals[k])
            flux[dsu.find((eid, k))] += s
            flux[dsu.find((eid, k + 1))] -= s
    # vertices: sign pattern of the traces around the median; the tied side
    # (always a single region: equal traces at a vertex are connected there)
    # absorbs the balancing flux
    for v in range(g.n_vertices):
        entries = _vertex_entries(g, breaks, values, v)
        m = _median([c for _, c in entries])
        tied_gid = None
        balance = 0
        for pid, c in entries:
            gid = dsu.find(pid)
            if c == m:
                if tied_gid is not None and tied_gid != gid:
                    raise OracleError("tied vertex traces in distinct regions")
                tied_gid = gid
            else:
                s = _sign(c - m)
                flux[gid] -= s
                balance += s
        flux[tied_gid] += balance
    speeds = {}
    for gid, members in groups.items():
        ell = sum(breaks[eid][k + 1] - breaks[eid][k] for eid, k in members)
        speeds[gid] = flux[gid] / ell
    return speeds


def _validate_phase(g: MetricGraph, breaks, values, dsu, groups, speeds) -> None:
    """Certify a bounded dual field consistent with the phase's speeds.

    Per plateau the field is affine with slope equal to the region speed;
    endpoint values are +/-1 at jumps and the signed trace pattern at
    vertices, tied traces being free unknowns subject to the vertex balance.
    Solved in float least squares; infeasibility means the plateau ansatz is
    invalid, which no supported family triggers.
    """
    unknown: dict = {}
    rows: list[dict] = []
    rhs: list[float] = []

    def z_end(eid: int, k: int, at_term_end: bool):
        """(known value, unknown key) for the z value at a plateau end."""
        vals = values[eid]
        if at_term_end and k < len(vals) - 1:
            return float(_sign(vals[k + 1] - vals[k])), None
        if not at_term_end and k > 0:
            return float(_sign(vals[k] - vals[k - 1])), None
        e = g.edges[eid]
        v = e.term if at_term_end else e.init
        c = vals[k]
        m = _median([cc for _, cc in _vertex_entries(g, breaks, values, v)])
        orient = -1.0 if at_term_end else 1.0  # z(l) = -t*, z(0) = +t*
        if c != m:
            return orient * float(_sign(c - m)), None
        return None, ((v, eid), orient)

    for gid, members in groups.items():
        speed = float(speeds[gid])
        for eid, k in members:
            width = float(breaks[eid][k + 1] - breaks[eid][k])
            row: dict = {}
            b = speed * width
            known_r, unk_r = z_end(eid, k, at_term_end=True)
            known_l, unk_l = z_end(eid, k, at_term_end=False)
            if unk_r is not None:
                key, orient = unk_r
                unknown.setdefault(key, len(unknown))
                row[key] = row.get(key, 0.0) + orient
            else:
                b -= known_r
            if unk_l is not None:
                key, orient = unk_l
                unknown.setdefault(key, len(unknown))
                row[key] = row.get(key, 0.0) - orient
            else:
                b += known_l
            rows.append(row)  # row . x = b encodes z_right - z_left = speed * width
            rhs.append(b)

    # vertex balance for the tied trace unknowns
    by_vertex: dict[int, list] = {}
    for (v, eid), _ in unknown.items():
        by_vertex.setdefault(v, []).append(eid)
    for v, eids in by_vertex.items():
        entries = _vertex_entries(g, breaks, values, v)
        m = _median([c for _, c in entries])
        r = 0.0
        for _, c in entries:
            if c != m:
                r -= float(_sign(c - m))
        row = {(v, eid): 1.0 for eid in eids}
        rows.append(row)
        rhs.append(r)

    if unknown:
        A = np.zeros((len(rows), len(unknown)))
        for i, row in enumerate(rows):
            for key, coef in row.items():
                A[i, unknown[key]] = coef
        b = np.array(rhs)
        x, *_ = np.linalg.lstsq(A, b, rcond=None)
        scale = 1.0 + float(np.max(np.abs(b)))
        if float(np.max(np.abs(A @ x - b))) > 1e-9 * scale:
            raise OracleError("no consistent dual field for this phase")
        if float(np.max(np.abs(x))) > 1.0 + 1e-9:
            raise OracleError("dual field exceeds the unit bound")
    else:
        for b in rhs:
            if abs(b) > 1e-9:
                raise OracleError("no consistent dual field for this phase")


def _normalize(breaks, values):
    for eid in range(len(values)):
        bb, vv = breaks[eid], values[eid]
        nb, nv = [bb[0]], []
        for k, val in enumerate(vv):
            if nv and val == nv[-1]:
                nb[-1] = bb[k + 1]
            else:
                nv.append(val)
                nb.append(bb[k + 1])
        breaks[eid], values[eid] = nb, nv


def _solve_flow(g: MetricGraph, breaks, values, exact: bool, validate: bool = True) -> ExplicitSolution:
    breaks = [list(b) for b in breaks]
    values = [list(v) for v in values]
    _normalize(breaks, values)

    zero = _num(0, exact)
    total = sum(
        sum((b[k + 1] - b[k]) * v[k] for k in range(len(v)))
        for b, v in zip(breaks, values)
    )
    length = sum(b[-1] - b[0] for b in breaks)
    mean = total / length

    regions = tuple(
        Region(eid, breaks[eid][k], breaks[eid][k + 1])
        for eid in range(g.n_edges)
        for k in range(len(values[eid]))
    )

    def covering_value_and_speed(reg: Region, cur_breaks, cur_values, dsu, speeds):
        bb = cur_breaks[reg.edge]
        mid = (reg.x0 + reg.x1) / 2
        k = 0
        while k + 1 < len(bb) and not (bb[k] <= mid < bb[k + 1]):
            k += 1
        return cur_values[reg.edge][k], speeds[dsu.find((reg.edge, k))]

    phase_starts = [zero]
    start_values = []
    slopes = []
    t = zero
    max_phases = sum(len(v) for v in values) + g.n_vertices + 1

    for _ in range(max_phases):
        dsu, groups = _compute_groups(g, breaks, values)
        if len(groups) == 1:
            break
        speeds = _group_speeds(g, breaks, values, dsu, groups, exact)
        if validate:
            _validate_phase(g, breaks, values, dsu, groups, speeds)

        vals_now, slopes_now = [], []
        for reg in regions:
            c, s = covering_value_and_speed(reg, breaks, values, dsu, speeds)
            vals_now.append(c)
            slopes_now.append(s)
        start_values.append(tuple(vals_now))
        slopes.append(tuple(slopes_now))

        # next collision between adjacent distinct regions
        pairs = []
        for eid in range(g.n_edges):
            for k in range(len(values[eid]) - 1):
                pairs.append(((eid, k), (eid, k + 1)))
        for v in range(g.n_vertices):
            entries = _vertex_entries(g, breaks, values, v)
            for i in range(len(entries)):
                for j in range(i + 1, len(entries)):
                    if entries[i][1] != entries[j][1]:
                        pairs.append((entries[i][0], entries[j][0]))

        def strictly_before(dt, best):
            return dt < best if exact else float(dt) < float(best) * (1.0 - 1e-12)

        def same_time(dt, best):
            return dt == best if exact else float(dt) <= float(best) * (1.0 + 1e-12)

        best_dt = None
        colliding = []
        for pa, pb in pairs:
            ga, gb = dsu.find(pa), dsu.find(pb)
            if ga == gb:
                continue
            ca = values[pa[0]][pa[1]]
            cb = values[pb[0]][pb[1]]
            if ca == cb:
                continue
            if ca > cb:
                ca, cb, ga, gb = cb, ca, gb, ga
            closing = speeds[ga] - speeds[gb]
            if closing <= 0:
                continue
            dt = (cb - ca) / closing
            if best_dt is None or strictly_before(dt, best_dt):
                best_dt, colliding = dt, [(ga, gb)]
            elif same_time(dt, best_dt):
                colliding.append((ga, gb))
        if best_dt is None:
            raise OracleError("no approaching regions although several remain")

        for eid in range(g.n_edges):
            for k in range(len(values[eid])):
                values[eid][k] = values[eid][k] + speeds[dsu.find((eid, k))] * best_dt
        # colliding regions now share a value; force bitwise equality so the
        # float path groups them reliably on the next pass
        merge = _DSU(list(groups.keys()))
        for ga, gb in colliding:
            merge.union(ga, gb)
        merged: dict = {}
        for gid, members in groups.items():
            merged.setdefault(merge.find(gid), []).extend(members)
        for members in merged.values():
            common = values[members[0][0]][members[0][1]]
            for eid, k in members:
                values[eid][k] = common
        _normalize(breaks, values)
        t = t + best_dt
        phase_starts.append(t)
    else:
        raise OracleError("phase count exceeded the structural bound")

    final = values[0][0]
    if not _close(final, mean, exact):
        raise OracleError(f"final value {final} does not equal the mean {mean}")

    sol = ExplicitSolution(
        graph=g,
        regions=regions,
        phase_starts=tuple(phase_starts),
        start_values=tuple(start_values),
        slopes=tuple(slopes),
        final_value=final,
        exact=exact,
    )
    _check_solution(sol)
    return sol


def _check_solution(sol: ExplicitSolution) -> None:
    # mass conservation per phase and temporal continuity across phases
    for k in range(sol.n_phases):
        drift = sum(reg.length * s for reg, s in zip(sol.regions, sol.slopes[k]))
        if not _close(drift, 0 * drift, sol.exact):
            raise OracleError(f"phase {k} does not conserve mass (drift rate {drift})")
        dur = sol.phase_starts[k + 1] - sol.phase_starts[k]
        for r in range(len(sol.regions)):
            end_val = sol.start_values[k][r] + sol.slopes[k][r] * dur
            nxt = sol.start_values[k + 1][r] if k + 1 < sol.n_phases else sol.final_value
            if not _close(end_val, nxt, sol.exact):
                raise OracleError(f"region {r} jumps in time at phase boundary {k + 1}")


# -- named data --------------------------------------------------------------


def _interval_graph(L) -> MetricGraph:
    return build_graph(["v1", "v2"], [("v1", "v2", float(L))])


def _formula_check(name: str, got, expected, exact: bool) -> None:
    if not _close(got, expected, exact):
        raise OracleError(f"{name}: derived value {got} does not match closed form {expected}")


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ValueError(message)


def neumann1(L, a, k) -> ExplicitSolution:
    """Interval (0, L), zero-flux ends, datum k on (0, a)."""
    exact = _is_exact(L, a, k)
    L, a, k = (_num(x, exact) for x in (L, a, k))
    _require(0 < a < L, "need 0 < a < L")
    _require(k >= 0, "need k >= 0")
    g = _interval_graph(L)
    sol = _solve_flow(g, [[0 * L, a, L]], [[k, 0 * k]], exact)
    if k > 0:
        _formula_check("extinction time", sol.t_ex, k * a * (L - a) / L, exact)
        _formula_check("final value", sol.final_value, k * a / L, exact)
    return sol


def neumann2(L, b, k) -> ExplicitSolution:
    """Interval (0, L), datum k on (b, L); mirror image of :func:`neumann1`."""
    exact = _is_exact(L, b, k)
    L, b, k = (_num(x, exact) for x in (L, b, k))
    _require(0 < b < L, "need 0 < b < L")
    _require(k >= 0, "need k >= 0")
    g = _interval_graph(L)
    sol = _solve_flow(g, [[0 * L, b, L]], [[0 * k, k]], exact)
    if k > 0:
        # the mirror x -> L - x of the left-step formula; the duration is
        # proportional to both b and L - b (a single jump travels both ways)
        _formula_check("extinction time", sol.t_ex, k * b * (L - b) / L, exact)
        _formula_check("final value", sol.final_value, k * (L - b) / L, exact)
    return sol


def neumann3(L, c, k1, k2) -> ExplicitSolution:
    """Interval (0, L), two-level datum k1 on (0, c), k2 on (c, L), k1 <= k2."""
    exact = _is_exact(L, c, k1, k2)
    L, c, k1, k2 = (_num(x, exact) for x in (L, c, k1, k2))
    _require(0 < c < L, "need 0 < c < L")
    _require(0 <= k1 <= k2, "need 0 <= k1 <= k2")
    g = _interval_graph(L)
    sol = _solve_flow(g, [[0 * L, c, L]], [[k1, k2]], exact)
    if k2 > k1:
        _formula_check("extinction time", sol.t_ex, (k2 - k1) * c * (L - c) / L, exact)
        _formula_check("final value", sol.final_value, k1 + (k2 - k1) * (L - c) / L, exact)
    return sol


def neumann4(L, a, b, k) -> ExplicitSolution:
    """Interval (0, L), bump datum k on (a, b) with a < b and L < a + b.

    Two phases: the right plateau reaches the bump first (L - b < a), then a
    two-level profile relaxes to the mean.
    """
    exact = _is_exact(L, a, b, k)
    L, a, b, k = (_num(x, exact) for x in (L, a, b, k))
    _require(0 < a < b < L, "need 0 < a < b < L")
    _require(L < a + b, "need L < a + b")
    _require(k >= 0, "need k >= 0")
    g = _interval_graph(L)
    sol = _solve_flow(g, [[0 * L, a, b, L]], [[0 * k, k, 0 * k]], exact)
    if k > 0:
        T1 = k * (b - a) * (L - b) / (2 * L - (a + b))
        T2 = a * (L - a) / L * (k - T1 * (a + b) / (a * (b - a)))
        _formula_check("first phase duration", sol.phase_durations()[0], T1, exact)
        _formula_check("second phase duration", sol.phase_durations()[1], T2, exact)
        _formula_check("final value", sol.final_value, (T1 + T2) / a, exact)
        _formula_check("mean value", sol.final_value, k * (b - a) / L, exact)
    return sol


def path3(l1, l2, a, k) -> ExplicitSolution:
    """Two-edge path, datum k on the first sub-interval (0, a) of the second edge.

    Requires l1 > l2 - a so the long edge is still below the decaying plateau
    when the in-edge jump disappears.
    """
    exact = _is_exact(l1, l2, a, k)
    l1, l2, a, k = (_num(x, exact) for x in (l1, l2, a, k))
    _require(0 < a < l2, "need 0 < a < l2")
    _require(l1 > l2 - a, "need l1 > l2 - a")
    _require(k >= 0, "need k >= 0")
    g = build_graph(["v1", "v2", "v3"], [("v1", "v2", float(l1)), ("v2", "v3", float(l2))])
    sol = _solve_flow(g, [[0 * l1, l1], [0 * l2, a, l2]], [[0 * k], [k, 0 * k]], exact)
    if k > 0:
        T1 = k * a * (l2 - a) / (2 * l2 - a)
        _formula_check("first phase duration", sol.phase_durations()[0], T1, exact)
        a1 = T1 / l1                      # first edge level when the jump dies
        a2 = k * a / (2 * l2 - a)         # merged level on the second edge
        _formula_check("second edge level at the phase change",
                       sol.region_value(1, T1), a2, exact)
        T2 = l1 * l2 * (a2 - a1) / (l1 + l2)
        _formula_check("second phase duration", sol.phase_durations()[1], T2, exact)
        _formula_check("final value", sol.final_value, a1 + T2 / l1, exact)
        _formula_check("mean value", sol.final_value, k * a / (l1 + l2), exact)
    return sol


def star(l1, l, a, k) -> ExplicitSolution:
    """Three-edge star, both short edges of length l, datum k on (a, l1) of the long edge.

    Requires a < 2l so the long edge's plateaus merge before the star side
    catches up.
    """
    exact = _is_exact(l1, l, a, k)
    l1, l, a, k = (_num(x, exact) for x in (l1, l, a, k))
    _require(0 < a < l1, "need 0 < a < l1")
    _require(a < 2 * l, "need a < 2 l")
    _require(k >= 0, "need k >= 0")
    g = build_graph(
        ["v1", "v2", "v3", "v4"],
        [("v1", "v2", float(l1)), ("v2", "v3", float(l)), ("v2", "v4", float(l))],
    )
    sol = _solve_flow(
        g,
        [[0 * l1, a, l1], [0 * l, l], [0 * l, l]],
        [[0 * k, k], [0 * k], [0 * k]],
        exact,
    )
    if k > 0:
        T1 = k * a * (l1 - a) / (l1 + a)
        T2 = T1 * (2 * l - a) * l1 / (a * (l1 + 2 * l))
        _formula_check("first phase duration", sol.phase_durations()[0], T1, exact)
        _formula_check("second phase duration", sol.phase_durations()[1], T2, exact)
        _formula_check("final value", sol.final_value, k * (l1 - a) / (l1 + 2 * l), exact)
        _formula_check("mean value", sol.final_value,
                       sum(r.length * v for r, v in zip(sol.regions, sol.start_values[0]))
                       / sum(r.length for r in sol.regions), exact)
    return sol


CASES = {
    "neumann1": (neumann1, ("L", "a", "k")),
    "neumann2": (neumann2, ("L", "b", "k")),
    "neumann3": (neumann3, ("L", "c", "k1", "k2")),
    "neumann4": (neumann4, ("L", "a", "b", "k")),
    "path3": (path3, ("l1", "l2", "a", "k")),
    "star": (star, ("l1", "l", "a", "k")),
}
