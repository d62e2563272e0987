"""Mesh discretization and the implicit-Euler total variation flow.

One flow step solves the proximal problem

    min_u  sum_c h_c (u_c - w_c)^2 / (2 tau)  +  TV_h(u)

where TV_h is the discrete total variation: absolute cell differences across
interior faces plus, at every interior vertex, the median variation of the
adjacent cell values.  TV_h(u) = max over dual variables (p, t) of
<Ku, (p, t)> with |p| <= 1 per face and each per-vertex trace vector t_v in
{sum t = 0, |t| <= 1}, K being the face-difference / vertex-restriction
operator.  The saddle point is computed by a primal-dual scheme with clipped
face duals, projected vertex duals and an over-relaxed primal step.

The returned state is the exact minimizer of the Lagrangian at the final
feasible dual, u = w - (tau / h) K^T y.  That choice makes the update
u_next = u_prev + tau * z' hold to rounding (z being the dual field read off
y), conserves mass to rounding, and makes the reported gap coincide with the
dual-certificate energy residual.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .graph import MetricGraph, boundary_interior, total_length
from .pwfunc import PiecewiseConstant


class ProxError(RuntimeError):
    """Proximal solve did not converge; carries the last duality gap."""

    def __init__(self, message: str, gap: float, iterations: int):
        super().__init__(message)
        self.gap = gap
        self.iterations = iterations


# -- mesh -----------------------------------------------------------------


@dataclass(frozen=True)
class Mesh:
    """Per-edge cell partition aligned to a datum's breakpoints.

    Flat arrays concatenate the edges in id order; ``offsets[e]`` is the
    first global cell index of edge ``e``.
    """

    graph: MetricGraph
    bounds: tuple[np.ndarray, ...]
    widths: np.ndarray
    centers: np.ndarray
    offsets: np.ndarray
    face_left: np.ndarray
    face_right: np.ndarray
    interior_vertices: tuple[int, ...]
    vertex_cells: tuple[np.ndarray, ...]

    @property
    def n_cells(self) -> int:
        return int(self.widths.size)

    def edge_slice(self, eid: int) -> slice:
        return slice(int(self.offsets[eid]), int(self.offsets[eid + 1]))


def build_mesh(g: MetricGraph, u0: Optional[PiecewiseConstant], h_max: float) -> Mesh:
    """Union of the datum's breakpoints with a uniform refinement to width <= h_max."""
    if not (h_max > 0.0):
        raise ValueError("h_max must be positive")
    bounds = []
    for e in g.edges:
        anchors = [0.0, e.length]
        if u0 is not None:
            anchors = list(u0.profiles[e.id].breaks)
        pts = [anchors[0]]
        for a, b in zip(anchors[:-1], anchors[1:]):
            n = max(1, int(math.ceil((b - a) / h_max - 1e-12)))
            for k in range(1, n):
                pts.append(a + (b - a) * k / n)
            pts.append(b)
        bounds.append(np.array(pts, dtype=float))
    return mesh_from_bounds(g, bounds)


def mesh_from_bounds(g: MetricGraph, bounds: Sequence[np.ndarray]) -> Mesh:
    """Assemble a mesh from explicit per-edge cell boundaries."""
    if len(bounds) != g.n_edges:
        raise ValueError(f"need boundaries for {g.n_edges} edges")
    checked = []
    for e, b in zip(g.edges, bounds):
        b = np.asarray(b, dtype=float).copy()
        if b.ndim != 1 or b.size < 2 or not np.all(np.diff(b) > 0):
            raise ValueError(f"edge {e.id}: cell boundaries must be strictly increasing")
        if abs(b[0]) > 1e-12 * e.length or abs(b[-1] - e.length) > 1e-12 * max(1.0, e.length):
            raise ValueError(f"edge {e.id}: boundaries must run from 0 to {e.length}")
        b[0], b[-1] = 0.0, e.length
        b.flags.writeable = False
        checked.append(b)
    bounds = checked

    widths = np.concatenate([np.diff(b) for b in bounds])
    centers = np.concatenate([0.5 * (b[:-1] + b[1:]) for b in bounds])
    counts = np.array([b.size - 1 for b in bounds], dtype=np.int64)
    offsets = np.concatenate(([0], np.cumsum(counts)))

    face_left = []
    face_right = []
    for eid in range(g.n_edges):
        lo, hi = offsets[eid], offsets[eid + 1]
        face_left.append(np.arange(lo, hi - 1, dtype=np.int64))
        face_right.append(np.arange(lo + 1, hi, dtype=np.int64))
    face_left = np.concatenate(face_left) if face_left else np.empty(0, dtype=np.int64)
    face_right = np.concatenate(face_right) if face_right else np.empty(0, dtype=np.int64)

    _, interior = boundary_interior(g)
    vertex_cells = []
    for v in interior:
        cells = []
        for eid, sign in g.incident_edges(v):
            lo, hi = offsets[eid], offsets[eid + 1]
            cells.append(hi - 1 if sign > 0 else lo)  # terminal end: last cell
        vertex_cells.append(np.array(cells, dtype=np.int64))

    for a in (widths, centers, offsets, face_left, face_right, *vertex_cells):
        a.flags.writeable = False

    return Mesh(
        graph=g,
        bounds=tuple(bounds),
        widths=widths,
        centers=centers,
        offsets=offsets,
        face_left=face_left,
        face_right=face_right,
        interior_vertices=tuple(interior),
        vertex_cells=tuple(vertex_cells),
    )


# -- states ----------------------------------------------------------------


@dataclass(frozen=True)
class DiscreteState:
    """Cell values on a mesh."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_cells,):
            raise ValueError(f"state has {v.shape} values, mesh has {self.mesh.n_cells} cells")
        v = np.ascontiguousarray(v)
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def edge_values(self, eid: int) -> np.ndarray:
        return self.values[self.mesh.edge_slice(eid)]


def sample(mesh: Mesh, u: PiecewiseConstant) -> DiscreteState:
    """Cell-midpoint sampling; lossless when the mesh is aligned to ``u``."""
    vals = np.empty(mesh.n_cells)
    for eid in range(mesh.graph.n_edges):
        prof = u.profiles[eid]
        mids = mesh.centers[mesh.edge_slice(eid)]
        idx = np.clip(np.searchsorted(prof.breaks, mids, side="right") - 1, 0, prof.values.size - 1)
        vals[mesh.edge_slice(eid)] = prof.values[idx]
    return DiscreteState(mesh, vals)


def sample_cell_means(mesh: Mesh, u: PiecewiseConstant) -> DiscreteState:
    """Exact per-cell averages (preserves the integral on any mesh)."""
    vals = np.empty(mesh.n_cells)
    for eid in range(mesh.graph.n_edges):
        prof = u.profiles[eid]
        cum = np.concatenate(([0.0], np.cumsum(prof.values * np.diff(prof.breaks))))
        b = mesh.bounds[eid]
        integral = np.interp(b, prof.breaks, cum)
        vals[mesh.edge_slice(eid)] = np.diff(integral) / np.diff(b)
    return DiscreteState(mesh, vals)


def to_piecewise_constant(state: DiscreteState) -> PiecewiseConstant:
    mesh = state.mesh
    return PiecewiseConstant(
        mesh.graph,
        [(mesh.bounds[eid], state.edge_values(eid)) for eid in range(mesh.graph.n_edges)],
    )


def state_mass(state: DiscreteState) -> float:
    return math.fsum(state.mesh.widths * state.values)


def state_l2(state: DiscreteState) -> float:
    return math.sqrt(math.fsum(state.mesh.widths * state.values**2))


# -- discrete total variation ----------------------------------------------


def _lower_median(vals: np.ndarray) -> float:
    s = np.sort(vals)
    return float(s[(s.size - 1) // 2])


def discrete_total_variation(mesh: Mesh, u: np.ndarray | DiscreteState, coupled: bool = True) -> float:
    """Face-difference variation plus (when coupled) vertex median variation."""
    vals = u.values if isinstance(u, DiscreteState) else np.asarray(u, dtype=float)
    if vals.shape != (mesh.n_cells,):
        raise ValueError("state/mesh dimension mismatch")
    parts = [math.fsum(np.abs(vals[mesh.face_right] - vals[mesh.face_left]))]
    if coupled:
        for cells in mesh.vertex_cells:
            c = vals[cells]
            m = _lower_median(c)
            parts.append(math.fsum(np.abs(c - m)))
    return math.fsum(parts)


def project_zero_sum_box(c: Sequence[float], tol: float = 1e-12, max_iter: int = 200) -> np.ndarray:
    """Euclidean projection onto {t : sum t = 0, |t_i| <= 1}.

    Monotone bisection on the shift mu in t = clip(c - mu, -1, 1); the sum is
    continuous and nonincreasing in mu, so the bracket [min c - 1, max c + 1]
    always contains a root.
    """
    c = np.asarray(c, dtype=float)
    if c.size == 0:
        raise ValueError("empty vector")
    lo = float(np.min(c)) - 1.0
    hi = float(np.max(c)) + 1.0
    t = np.clip(c, -1.0, 1.0)
    for _ in range(max_iter):
        mu = 0.5 * (lo + hi)
        t = np.clip(c - mu, -1.0, 1.0)
        s = float(np.sum(t))
        if abs(s) <= tol:
            return t
        if s > 0.0:
            lo = mu
        else:
            hi = mu
    raise RuntimeError(f"projection bisection did not reach |sum| <= {tol}")


# -- dual workspace ----------------------------------------------------------


class _Workspace:
    """Index arrays, operator applications and step sizes for one mesh/mode."""

    def __init__(self, mesh: Mesh, coupled: bool = True):
        self.mesh = mesh
        self.coupled = coupled
        self.vertex_cells = mesh.vertex_cells if coupled else ()
        self.vcells_flat = (
            np.concatenate(self.vertex_cells) if self.vertex_cells else np.empty(0, dtype=np.int64)
        )
        slices = []
        pos = 0
        for cells in self.vertex_cells:
            slices.append(slice(pos, pos + cells.size))
            pos += cells.size
        self.vslices = slices
        self.n_faces = mesh.face_left.size
        self.n_vdual = pos
        self.knorm = self._estimate_knorm()

    def apply(self, u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        faces = u[self.mesh.face_right] - u[self.mesh.face_left]
        verts = u[self.vcells_flat]
        return faces, verts

    def apply_T(self, p: np.ndarray, t: np.ndarray) -> np.ndarray:
        out = np.zeros(self.mesh.n_cells)
        if self.n_faces:
            out[self.mesh.face_right] += p
            out[self.mesh.face_left] -= p
        if self.n_vdual:
            # a one-cell edge can sit adjacent to two vertices, so accumulate
            np.add.at(out, self.vcells_flat, t)
        return out

    def _estimate_knorm(self) -> float:
        if self.n_faces + self.n_vdual == 0:
            return 0.0
        rng = np.random.default_rng(12345)
        x = rng.standard_normal(self.mesh.n_cells)
        x /= np.linalg.norm(x)
        lam = 0.0
        for _ in range(50):
            y = self.apply_T(*self.apply(x))
            lam = float(np.linalg.norm(y))
            if lam == 0.0:
                break
            x = y / lam
        max_deg = max((c.size for c in self.vertex_cells), default=0)
        analytic = math.sqrt(4.0 + 2.0 * max_deg)
        return min(math.sqrt(lam) * 1.001, analytic) if lam > 0.0 else analytic

    def energy_tv(self, u: np.ndarray) -> float:
        return discrete_total_variation(self.mesh, u, coupled=self.coupled)

    def pairing(self, faces: np.ndarray, verts: np.ndarray, p: np.ndarray, t: np.ndarray) -> float:
        total = float(np.dot(faces, p)) if self.n_faces else 0.0
        if self.n_vdual:
            total += float(np.dot(verts, t))
        return total

    def tv_of_parts(self, faces: np.ndarray, verts: np.ndarray) -> float:
        total = float(np.sum(np.abs(faces)))
        for sl in self.vslices:
            c = verts[sl]
            total += float(np.sum(np.abs(c - _lower_median(c))))
        return total


# -- prox ---------------------------------------------------------------------


@dataclass(frozen=True)
class ProxOptions:
    tol: float = 1e-8
    max_iter: int = 200_000
    check_every: int = 10
    step_scale: float = 0.99


@dataclass(frozen=True)
class DualState:
    """Feasible dual variables and the reconstructed field's vertex levels.

    ``p`` are the face duals (the dual field at interior faces, |p| <= 1);
    ``t`` holds one trace vector per interior vertex (zero-sum, box-bounded);
    ``mu`` are the exact medians of the adjacent cell values, eliminating the
    auxiliary vertex level in the energy.
    """

    p: np.ndarray
    t: tuple[np.ndarray, ...]
    mu: np.ndarray

    def flat_t(self) -> np.ndarray:
        return np.concatenate(self.t) if self.t else np.empty(0)

    def sup_norm(self) -> float:
        vals = [0.0]
        if self.p.size:
            vals.append(float(np.max(np.abs(self.p))))
        for tv in self.t:
            if tv.size:
                vals.append(float(np.max(np.abs(tv))))
        return max(vals)

    def kirchhoff_residual(self) -> float:
        return max((abs(float(np.sum(tv))) for tv in self.t), default=0.0)


@dataclass(frozen=True)
class ProxReport:
    iterations: int
    gap: float
    energy: float
    div_residual: float
    converged: bool


def _zero_dual(ws: _Workspace) -> tuple[np.ndarray, list[np.ndarray]]:
    p = np.zeros(ws.n_faces)
    t = [np.zeros(cells.size) for cells in ws.vertex_cells]
    return p, t


def _prox_iterate(ws: _Workspace, wv: np.ndarray, tau: float, opts: ProxOptions,
                  p: np.ndarray, t: list[np.ndarray]):
    """Primal-dual saddle iteration; returns (u, p, t, iterations, gap, energy).

    The convergence measure is the duality gap at the dual-reconstructed
    primal u(y) = w - (tau/h) K^T y, which is immediately zero when a warm
    dual is already optimal.
    """
    mesh = ws.mesh
    h = mesh.widths

    def reconstruct():
        tflat = np.concatenate(t) if t else np.empty(0)
        ATy = ws.apply_T(p, tflat)
        return wv - (tau / h) * ATy, tflat

    def gap_energy(u_rec, tflat):
        faces, verts = ws.apply(u_rec)
        tv_val = ws.tv_of_parts(faces, verts)
        pair = ws.pairing(faces, verts, p, tflat)
        quad = 0.5 / tau * float(np.dot(h, (u_rec - wv) ** 2))
        return tv_val - pair, quad + tv_val

    u_rec, tflat = reconstruct()
    gap, energy = gap_energy(u_rec, tflat)
    it = 0
    if gap <= opts.tol * (1.0 + abs(energy)):
        return u_rec, p, t, it, gap, energy

    sigma = tau_pd = opts.step_scale / ws.knorm
    denom = h * tau_pd + tau
    coef_w = h * tau_pd / denom
    coef_q = tau / denom
    u = wv.copy()
    ubar = u.copy()
    while it < opts.max_iter:
        it += 1
        faces, verts = ws.apply(ubar)
        if ws.n_faces:
            np.clip(p + sigma * faces, -1.0, 1.0, out=p)
        for k, sl in enumerate(ws.vslices):
            t[k] = project_zero_sum_box(t[k] + sigma * verts[sl])
        tflat = np.concatenate(t) if t else np.empty(0)
        ATy = ws.apply_T(p, tflat)
        u_new = coef_w * wv + coef_q * (u - tau_pd * ATy)
        ubar = 2.0 * u_new - u
        u = u_new
        if it % opts.check_every == 0 or it == opts.max_iter:
            u_rec = wv - (tau / h) * ATy
            gap, energy = gap_energy(u_rec, tflat)
            if gap <= opts.tol * (1.0 + abs(energy)):
                return u_rec, p, t, it, gap, energy
    raise ProxError(f"prox did not converge in {it} iterations (gap {gap:.3e})", gap, it)


@dataclass(frozen=True)
class _Aggregation:
    """Bitwise-constant runs of the data, as a coarser mesh plus index maps."""

    mesh: Mesh
    fine_starts: tuple[np.ndarray, ...]   # per edge: fine local start cell of each group
    fine_ends: tuple[np.ndarray, ...]     # per edge: one past the last fine cell
    boundary_faces: np.ndarray            # global fine faces matching the coarse faces


def _aggregate(mesh: Mesh, wv: np.ndarray) -> Optional[_Aggregation]:
    g = mesh.graph
    bounds_new, starts_all, ends_all, bfaces = [], [], [], []
    total = 0
    for eid in range(g.n_edges):
        sl = mesh.edge_slice(eid)
        vals = wv[sl]
        b = mesh.bounds[eid]
        change = np.flatnonzero(vals[1:] != vals[:-1]) + 1
        starts = np.concatenate(([0], change))
        ends = np.concatenate((change, [vals.size]))
        bounds_new.append(np.concatenate((b[starts], b[-1:])))
        starts_all.append(starts)
        ends_all.append(ends)
        face_offset = int(mesh.offsets[eid]) - eid
        bfaces.append(face_offset + change - 1)
        total += starts.size
    if total == mesh.n_cells:
        return None
    agg_mesh = mesh_from_bounds(g, bounds_new)
    return _Aggregation(
        mesh=agg_mesh,
        fine_starts=tuple(starts_all),
        fine_ends=tuple(ends_all),
        boundary_faces=np.concatenate(bfaces) if bfaces else np.empty(0, dtype=np.int64),
    )


def _edge_end_duals(ws: _Workspace, t: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Dual-field values at each edge's two ends: z(0) = t, z(length) = -t."""
    g = ws.mesh.graph
    z0 = np.zeros(g.n_edges)
    z1 = np.zeros(g.n_edges)
    for vi, v in enumerate(ws.mesh.interior_vertices if ws.coupled else ()):
        for k, (eid, sign) in enumerate(g.incident_edges(v)):
            if sign < 0:
                z0[eid] = t[vi][k]
            else:
                z1[eid] = -t[vi][k]
    return z0, z1


def _expand_aggregated(mesh: Mesh, ws: _Workspace, agg: _Aggregation,
                       wv: np.ndarray, u_agg: np.ndarray, p_agg: np.ndarray,
                       t: list[np.ndarray], tau: float):
    """Lift the coarse solution to the fine mesh.

    Cell values copy bitwise per run; the face dual integrates the optimality
    relation p_right = p_left - h (w - u) / tau across each edge, pinned to
    the coarse duals at run boundaries, so it is affine inside runs and
    attains its extremes at the pinned faces up to rounding.
    """
    g = mesh.graph
    u_fine = np.empty(mesh.n_cells)
    agg_cell = 0
    for eid in range(g.n_edges):
        lo = int(mesh.offsets[eid])
        for s, e in zip(agg.fine_starts[eid], agg.fine_ends[eid]):
            u_fine[lo + s : lo + e] = u_agg[agg_cell]
            agg_cell += 1

    p_fine = np.empty(ws.n_faces)
    req = mesh.widths * (wv - u_fine) / tau
    z0, _ = _edge_end_duals(ws, t)
    interior_ok = True
    for eid in range(g.n_edges):
        lo, hi = int(mesh.offsets[eid]), int(mesh.offsets[eid + 1])
        m = hi - lo
        if m < 2:
            continue
        fo = lo - eid
        run = z0[eid]
        vals = np.empty(m - 1)
        acc = run - np.cumsum(req[lo : hi - 1])
        vals[:] = acc
        p_fine[fo : fo + m - 1] = vals
    p_fine[agg.boundary_faces] = p_agg
    free = np.ones(ws.n_faces, dtype=bool)
    free[agg.boundary_faces] = False
    if np.any(free) and float(np.max(np.abs(p_fine[free]))) > 1.0 + 1e-9:
        interior_ok = False
    return u_fine, p_fine, interior_ok


def prox_tv(
    mesh: Mesh,
    w: DiscreteState,
    tau: float,
    opts: ProxOptions = ProxOptions(),
    dual: Optional[DualState] = None,
    coupled: bool = True,
    _ws: Optional[_Workspace] = None,
) -> tuple[DiscreteState, DualState, ProxReport]:
    """One implicit-Euler step: resolvent of the discrete total variation.

    Returns the dual-reconstructed primal state, the feasible dual, and a
    report with the terminal duality gap.  Raises :class:`ProxError` when the
    gap target opts.tol * (1 + |energy|) is not met within opts.max_iter.

    When the data is constant on runs of cells the saddle problem is solved
    on the run skeleton (the resolvent of this functional preserves it: cell
    values only merge, they never split a constant run) and lifted back;
    the lifted certificate is re-verified at full resolution and the plain
    full-resolution iteration is the fallback, so the fast path never
    weakens the convergence contract.
    """
    if not (tau > 0.0):
        raise ValueError("tau must be positive")
    ws = _ws if _ws is not None else _Workspace(mesh, coupled=coupled)
    h = mesh.widths
    wv = w.values

    if dual is not None and coupled and len(dual.t) != len(ws.vertex_cells):
        raise ValueError("dual state does not match the mesh")

    # trivial mesh (one cell, no duals): the prox is the identity
    if ws.n_faces + ws.n_vdual == 0:
        rep = ProxReport(0, 0.0, 0.0, 0.0, True)
        return DiscreteState(mesh, wv.copy()), DualState(np.empty(0), (), np.empty(0)), rep

    def finish(u_rec, p, t, it, gap, energy):
        tflat = np.concatenate(t) if t else np.empty(0)
        div = (u_rec - wv) / tau + ws.apply_T(p, tflat) / h
        div_residual = math.sqrt(float(np.dot(h, div**2)))
        mu = np.array([_lower_median(u_rec[cells]) for cells in ws.vertex_cells])
        dual_out = DualState(p=p, t=tuple(t), mu=mu)
        report = ProxReport(it, float(gap), float(energy), div_residual, True)
        return DiscreteState(mesh, u_rec), dual_out, report

    def fine_gap_energy(u_rec, p, tflat):
        faces, verts = ws.apply(u_rec)
        tv_val = ws.tv_of_parts(faces, verts)
        pair = ws.pairing(faces, verts, p, tflat)
        quad = 0.5 / tau * float(np.dot(h, (u_rec - wv) ** 2))
        return tv_val - pair, quad + tv_val

    warm_p, warm_t = _zero_dual(ws)
    if dual is not None:
        warm_p = np.clip(dual.p, -1.0, 1.0)
        if coupled:
            warm_t = [tv.copy() for tv in dual.t]

    agg = _aggregate(mesh, wv)
    if agg is not None:
        agg_ws = _Workspace(agg.mesh, coupled=coupled)
        w_agg = np.empty(agg.mesh.n_cells)
        pos = 0
        for eid in range(mesh.graph.n_edges):
            lo = int(mesh.offsets[eid])
            for s in agg.fine_starts[eid]:
                w_agg[pos] = wv[lo + s]
                pos += 1
        p0 = warm_p[agg.boundary_faces].copy()
        t0 = [tv.copy() for tv in warm_t]
        u_agg, p_agg, t_agg, it, _gap_agg, _en_agg = _prox_iterate(agg_ws, w_agg, tau, opts, p0, t0)
        u_fine, p_fine, interior_ok = _expand_aggregated(mesh, ws, agg, wv, u_agg, p_agg, t_agg, tau)
        tflat = np.concatenate(t_agg) if t_agg else np.empty(0)
        gap, energy = fine_gap_energy(u_fine, p_fine, tflat)
        if interior_ok and gap <= opts.tol * (1.0 + abs(energy)):
            return finish(u_fine, p_fine, t_agg, it, gap, energy)
        # lifted certificate failed (the step must have split a run): warm
        # start the full-resolution iteration from the lifted dual instead
        warm_p = np.clip(p_fine, -1.0, 1.0)
        warm_t = [tv.copy() for tv in t_agg]

    u_rec, p, t, it, gap, energy = _prox_iterate(ws, wv, tau, opts, warm_p, warm_t)
    return finish(u_rec, p, t, it, gap, energy)


# -- flow ----------------------------------------------------------------------


@dataclass(frozen=True)
class StepDiag:
    t: float
    mass: float
    tv: float
    l2: float
    gap: float
    iters: int
    kirchhoff_residual: float
    supnorm_residual: float
    div_residual: float


@dataclass(frozen=True)
class FlowOptions:
    prox: ProxOptions = field(default_factory=ProxOptions)
    ext_tol: float = 1e-6
    snapshot_every: int = 1
    max_steps: int = 1_000_000


@dataclass
class Trajectory:
    """Snapshots plus per-step diagnostics of one flow run.

    ``target`` is the mode's invariant state: the global mean for the coupled
    flow, the per-edge means for the decoupled flow.
    """

    mesh: Mesh
    tau: float
    mode: str
    snapshot_times: list[float]
    snapshots: list[DiscreteState]
    steps: list[StepDiag]
    extinction_time: Optional[float]
    target: np.ndarray
    mean0: float

    @property
    def final_state(self) -> DiscreteState:
        return self.snapshots[-1]


def _invariant_target(mesh: Mesh, u0: DiscreteState, coupled: bool) -> tuple[np.ndarray, float]:
    mean0 = state_mass(u0) / total_length(mesh.graph)
    if coupled:
        return np.full(mesh.n_cells, mean0), mean0
    target = np.empty(mesh.n_cells)
    for eid in range(mesh.graph.n_edges):
        sl = mesh.edge_slice(eid)
        target[sl] = math.fsum(mesh.widths[sl] * u0.values[sl]) / math.fsum(mesh.widths[sl])
    return target, mean0


def _run(mesh, u0, tau, t_end, opts: FlowOptions, coupled: bool) -> Trajectory:
    if not (tau > 0.0):
        raise ValueError("tau must be positive")
    if t_end < 0.0:
        raise ValueError("t_end must be nonnegative")
    ws = _Workspace(mesh, coupled=coupled)
    target, mean0 = _invariant_target(mesh, u0, coupled)
    ext_scale = 1.0 + (abs(mean0) if coupled else float(np.max(np.abs(target))))

    traj = Trajectory(
        mesh=mesh,
        tau=tau,
        mode="coupled" if coupled else "decoupled",
        snapshot_times=[0.0],
        snapshots=[u0],
        steps=[],
        extinction_time=None,
        target=target,
        mean0=mean0,
    )
    if float(np.max(np.abs(u0.values - target))) <= opts.ext_tol * ext_scale:
        traj.extinction_time = 0.0
        return traj

    state = u0
    dual: Optional[DualState] = None
    t = 0.0
    k = 0
    while t < t_end * (1.0 - 1e-12) and k < opts.max_steps:
        state, dual, rep = prox_tv(mesh, state, tau, opts.prox, dual=dual, coupled=coupled, _ws=ws)
        k += 1
        t = k * tau
        traj.steps.append(
            StepDiag(
                t=t,
                mass=state_mass(state),
                tv=discrete_total_variation(mesh, state, coupled=coupled),
                l2=state_l2(state),
                gap=rep.gap,
                iters=rep.iterations,
                kirchhoff_residual=dual.kirchhoff_residual(),
                supnorm_residual=dual.sup_norm() - 1.0,
                div_residual=rep.div_residual,
            )
        )
        extinct = float(np.max(np.abs(state.values - target))) <= opts.ext_tol * ext_scale
        if k % opts.snapshot_every == 0 or extinct or t >= t_end * (1.0 - 1e-12):
            traj.snapshot_times.append(t)
            traj.snapshots.append(state)
        if extinct:
            traj.extinction_time = t
            break
    return traj


def run_flow(mesh: Mesh, u0: DiscreteState, tau: float, t_end: float, opts: FlowOptions = FlowOptions()) -> Trajectory:
    """Implicit-Euler chain of prox steps until t_end or extinction."""
    return _run(mesh, u0, tau, t_end, opts, coupled=True)


def run_decoupled_flow(mesh: Mesh, u0: DiscreteState, tau: float, t_end: float, opts: FlowOptions = FlowOptions()) -> Trajectory:
    """Per-edge flow with all vertex duals frozen at zero.

    This evolves each edge by its own zero-flux problem regardless of the
    graph structure; provided to demonstrate how it differs from the coupled
    flow, whose dual field may carry mass across interior vertices.
    """
    return _run(mesh, u0, tau, t_end, opts, coupled=False)


def detect_extinction(traj: Trajectory, tol: float) -> Optional[float]:
    """First snapshot time at which the state sits on the invariant target."""
    if not (tol > 0.0):
        raise ValueError("tol must be positive")
    scale = 1.0 + (abs(traj.mean0) if traj.mode == "coupled" else float(np.max(np.abs(traj.target))))
    for t, state in zip(traj.snapshot_times, traj.snapshots):
        if float(np.max(np.abs(state.values - traj.target))) <= tol * scale:
            return t
    return None


# -- certificate --------------------------------------------------------------


@dataclass(frozen=True)
class CertificateReport:
    """Residuals of the dual certificate of one accepted prox step.

    sup_excess        sup-norm of the dual field minus one (<= 0 when feasible)
    kirchhoff_defect  worst vertex balance of the trace duals
    divergence        weighted L2 norm of (u_next - u_prev)/tau - z'
    energy_gap        |<u_next, -z'> - TV_h(u_next)|
    """

    sup_excess: float
    kirchhoff_defect: float
    divergence: float
    energy_gap: float
    tv_value: float

    def within(self, tol: float) -> bool:
        return (
            self.sup_excess <= tol
            and self.kirchhoff_defect <= tol
            and self.divergence <= tol
            and self.energy_gap <= tol * (1.0 + self.tv_value)
        )


def certificate_check(
    mesh: Mesh,
    u_prev: DiscreteState,
    u_next: DiscreteState,
    dual: DualState,
    tau: float,
    coupled: bool = True,
) -> CertificateReport:
    """Re-derive the step's dual certificate from scratch and report residuals."""
    ws = _Workspace(mesh, coupled=coupled)
    tflat = dual.flat_t()
    ATy = ws.apply_T(dual.p, tflat)
    h = mesh.widths
    div = (u_next.values - u_prev.values) / tau + ATy / h
    divergence = math.sqrt(float(np.dot(h, div**2)))
    faces, verts = ws.apply(u_next.values)
    tv_val = ws.tv_of_parts(faces, verts)
    pair = ws.pairing(faces, verts, dual.p, tflat)
    return CertificateReport(
        sup_excess=dual.sup_norm() - 1.0,
        kirchhoff_defect=dual.kirchhoff_residual(),
        divergence=divergence,
        energy_gap=abs(pair - tv_val),
        tv_value=tv_val,
    )
