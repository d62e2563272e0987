"""Trajectory and diagnostics CSV files.

Snapshot schema: ``t,edge,cell_left,cell_right,value`` rows, one per cell per
recorded time, preceded by ``# key = value`` metadata comment lines.
Diagnostics schema: ``t,mass,tv,l2,gap,iters,kirchhoff_residual,supnorm_residual``.
Numbers are written with 17 significant digits and a ``.`` decimal separator
regardless of locale, so outputs round-trip and are byte-stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .discrete import StepDiag, Trajectory
from .oracle import ExplicitSolution


def fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass
class TrajectoryTable:
    """Mesh-agnostic snapshot table: per edge, fixed cell bounds and a
    (n_times, n_cells) value matrix."""

    times: list[float]
    cell_bounds: dict[int, np.ndarray]
    values: dict[int, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)

    @property
    def edge_ids(self) -> list[int]:
        return sorted(self.cell_bounds)

    def span(self, eid: int) -> float:
        b = self.cell_bounds[eid]
        return float(b[-1] - b[0])


def from_discrete(traj: Trajectory, metadata: Optional[dict] = None) -> TrajectoryTable:
    mesh = traj.mesh
    g = mesh.graph
    bounds = {eid: np.asarray(mesh.bounds[eid]) for eid in range(g.n_edges)}
    values = {
        eid: np.stack([s.edge_values(eid) for s in traj.snapshots])
        for eid in range(g.n_edges)
    }
    meta = {"mode": traj.mode, "tau": fmt(traj.tau)}
    if traj.extinction_time is not None:
        meta["extinction_time"] = fmt(traj.extinction_time)
    if metadata:
        meta.update({k: str(v) for k, v in metadata.items()})
    return TrajectoryTable(list(traj.snapshot_times), bounds, values, meta)


def from_solution(sol: ExplicitSolution, times: Sequence[float], metadata: Optional[dict] = None) -> TrajectoryTable:
    g = sol.graph
    times = [float(t) for t in times]
    bounds: dict[int, np.ndarray] = {}
    for eid in range(g.n_edges):
        pts = [0.0] + [float(r.x1) for r in sol.regions if r.edge == eid]
        bounds[eid] = np.array(pts)
    values = {eid: [] for eid in range(g.n_edges)}
    for t in times:
        u = sol.eval(t)
        for eid in range(g.n_edges):
            values[eid].append(np.asarray(u.profiles[eid].values, dtype=float))
    meta = {
        "mode": "oracle",
        "t_ex": fmt(sol.t_ex),
        "phase_starts": ",".join(fmt(x) for x in sol.phase_starts),
        "final_value": fmt(sol.final_value),
    }
    if metadata:
        meta.update({k: str(v) for k, v in metadata.items()})
    return TrajectoryTable(times, bounds, {eid: np.stack(v) for eid, v in values.items()}, meta)


def write_trajectory_csv(table: TrajectoryTable, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key in sorted(table.metadata):
            fh.write(f"# {key} = {table.metadata[key]}\n")
        fh.write("t,edge,cell_left,cell_right,value\n")
        for i, t in enumerate(table.times):
            for eid in table.edge_ids:
                b = table.cell_bounds[eid]
                row_vals = table.values[eid][i]
                for j in range(row_vals.size):
                    fh.write(
                        f"{fmt(t)},{eid},{fmt(b[j])},{fmt(b[j + 1])},{fmt(row_vals[j])}\n"
                    )


def read_trajectory_csv(path) -> TrajectoryTable:
    metadata: dict[str, str] = {}
    header = None
    rows: list[tuple[float, int, float, float, float]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                if "=" in line:
                    key, _, val = line[1:].partition("=")
                    metadata[key.strip()] = val.strip()
                continue
            if header is None:
                header = line
                if header != "t,edge,cell_left,cell_right,value":
                    raise ValueError(f"unexpected trajectory header: {header!r}")
                continue
            parts = line.split(",")
            if len(parts) != 5:
                raise ValueError(f"malformed trajectory row: {line!r}")
            rows.append((float(parts[0]), int(parts[1]), float(parts[2]), float(parts[3]), float(parts[4])))
    if header is None or not rows:
        raise ValueError(f"trajectory file {path} has no data")

    # rows are grouped by time in file order; the first block fixes the cells
    times: list[float] = []
    blocks: list[dict[int, list[tuple[float, float, float]]]] = []
    current_t = None
    for t, eid, left, right, value in rows:
        if current_t is None or t != current_t:
            current_t = t
            times.append(t)
            blocks.append({})
        blocks[-1].setdefault(eid, []).append((left, right, value))

    bounds: dict[int, np.ndarray] = {}
    for eid, cell_list in blocks[0].items():
        b = [cell_list[0][0]]
        for left, right, _ in cell_list:
            if left != b[-1] or right <= left:
                raise ValueError(f"edge {eid}: cells do not tile at {left}")
            b.append(right)
        bounds[eid] = np.array(b)

    values: dict[int, list[list[float]]] = {eid: [] for eid in blocks[0]}
    for t_idx, block in enumerate(blocks):
        if sorted(block) != sorted(blocks[0]):
            raise ValueError(f"edge set changes at time index {t_idx}")
        for eid, cell_list in block.items():
            if len(cell_list) != bounds[eid].size - 1:
                raise ValueError(
                    f"edge {eid}: {len(cell_list)} cells at time index {t_idx}, "
                    f"expected {bounds[eid].size - 1}"
                )
            values[eid].append([v for _, _, v in cell_list])
    return TrajectoryTable(times, bounds, {eid: np.array(v) for eid, v in values.items()}, metadata)


def write_diagnostics_csv(steps: Iterable[StepDiag], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t,mass,tv,l2,gap,iters,kirchhoff_residual,supnorm_residual\n")
        for s in steps:
            fh.write(
                ",".join(
                    (
                        fmt(s.t),
                        fmt(s.mass),
                        fmt(s.tv),
                        fmt(s.l2),
                        fmt(s.gap),
                        str(s.iters),
                        fmt(s.kirchhoff_residual),
                        fmt(s.supnorm_residual),
                    )
                )
                + "\n"
            )


# -- comparison ----------------------------------------------------------------


def _step_resample(bounds: np.ndarray, vals: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Cell value on each subinterval of ``grid`` (midpoint lookup)."""
    mids = 0.5 * (grid[:-1] + grid[1:])
    idx = np.clip(np.searchsorted(bounds, mids, side="right") - 1, 0, vals.size - 1)
    return vals[idx]


@dataclass(frozen=True)
class SnapshotError:
    t: float
    linf: float
    l2: float


def compare_tables(a: TrajectoryTable, b: TrajectoryTable, time_tol: float = 1e-9) -> list[SnapshotError]:
    """Per-matched-time energy-norm errors on the union grid.

    Raises ValueError when the tables do not describe the same graph layout
    or share no sample times.
    """
    if a.edge_ids != b.edge_ids:
        raise ValueError(f"edge sets differ: {a.edge_ids} vs {b.edge_ids}")
    for eid in a.edge_ids:
        if abs(a.span(eid) - b.span(eid)) > 1e-12 * max(1.0, a.span(eid)):
            raise ValueError(f"edge {eid} lengths differ: {a.span(eid)} vs {b.span(eid)}")

    pairs = []
    j = 0
    for i, t in enumerate(a.times):
        while j < len(b.times) and b.times[j] < t - time_tol * max(1.0, abs(t)):
            j += 1
        if j < len(b.times) and abs(b.times[j] - t) <= time_tol * max(1.0, abs(t)):
            pairs.append((i, j))
    if not pairs:
        raise ValueError("no common sample times")

    out = []
    for i, j in pairs:
        linf = 0.0
        l2sq = []
        for eid in a.edge_ids:
            grid = np.union1d(a.cell_bounds[eid], b.cell_bounds[eid])
            va = _step_resample(a.cell_bounds[eid], a.values[eid][i], grid)
            vb = _step_resample(b.cell_bounds[eid], b.values[eid][j], grid)
            diff = va - vb
            if diff.size:
                linf = max(linf, float(np.max(np.abs(diff))))
                l2sq.append(float(np.dot(np.diff(grid), diff**2)))
        out.append(SnapshotError(t=a.times[i], linf=linf, l2=math.sqrt(math.fsum(l2sq))))
    return out
