"""Compact, connected metric graphs.

A metric graph is a finite combinatorial graph whose edges carry positive
lengths; every edge is oriented, with the coordinate running from 0 at the
initial vertex to the edge length at the terminal vertex.  The orientation
fixes the sign convention for endpoint traces of dual fields and is never
changed after construction.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence


class GraphError(ValueError):
    """Invalid metric-graph input.  ``code`` names the failure class."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass(frozen=True)
class Edge:
    """Oriented edge; coordinate 0 at ``init``, ``length`` at ``term``."""

    id: int
    init: int
    term: int
    length: float


@dataclass(frozen=True)
class MetricGraph:
    """Validated compact connected metric graph.

    Immutable after construction; safe for concurrent reads.  ``incidence``
    holds, per vertex, the incident edge ids in deterministic (edge id)
    order together with an orientation flag: +1 when the edge arrives at
    the vertex (terminal end), -1 when it departs (initial end).
    """

    vertex_names: tuple[str, ...]
    edges: tuple[Edge, ...]
    incidence: tuple[tuple[tuple[int, int], ...], ...]

    @property
    def n_vertices(self) -> int:
        return len(self.vertex_names)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def degree(self, v: int) -> int:
        return degree(self, v)

    def vertex_index(self, name) -> int:
        try:
            return self.vertex_names.index(str(name))
        except ValueError:
            raise GraphError("unknown-vertex", f"unknown vertex {name!r}") from None

    def incident_edges(self, v: int) -> tuple[tuple[int, int], ...]:
        _check_vertex(self, v)
        return self.incidence[v]


def _check_vertex(g: MetricGraph, v: int) -> None:
    if not (isinstance(v, (int,)) and 0 <= v < g.n_vertices):
        raise GraphError("unknown-vertex", f"unknown vertex index {v!r}")


def build_graph(vertices: Sequence, edges: Iterable) -> MetricGraph:
    """Build and validate a metric graph.

    Parameters
    ----------
    vertices : sequence
        Vertex names (strings or anything str()-able); order defines the
        dense vertex indices 0..|V|-1.
    edges : iterable
        Edge specs, each either a mapping with keys ``id`` (optional),
        ``from``, ``to``, ``length``, or a tuple ``(from, to, length)``.
        When ids are omitted they are assigned in input order; explicit ids
        must be exactly 0..|E|-1.

    Raises
    ------
    GraphError
        Codes: ``duplicate-vertex``, ``unknown-vertex``, ``bad-edge-id``,
        ``nonpositive-length``, ``loop``, ``multi-edge``, ``empty``,
        ``disconnected``.
    """
    names = tuple(str(v) for v in vertices)
    if len(set(names)) != len(names):
        dup = next(n for i, n in enumerate(names) if n in names[:i])
        raise GraphError("duplicate-vertex", f"duplicate vertex {dup!r}")
    index = {n: i for i, n in enumerate(names)}

    raw = []
    for pos, spec in enumerate(edges):
        if isinstance(spec, Mapping):
            eid = spec.get("id", pos)
            src, dst, length = spec["from"], spec["to"], spec["length"]
        else:
            src, dst, length = spec
            eid = pos
        for name in (src, dst):
            if str(name) not in index:
                raise GraphError("unknown-vertex", f"edge {eid} references unknown vertex {name!r}")
        raw.append((eid, index[str(src)], index[str(dst)], length))

    if not raw:
        raise GraphError("empty", "a metric graph needs at least one edge")

    ids = sorted(e[0] for e in raw)
    if ids != list(range(len(raw))):
        raise GraphError("bad-edge-id", f"edge ids must be 0..{len(raw) - 1}, got {ids}")

    raw.sort(key=lambda e: e[0])
    built = []
    seen_pairs: dict[frozenset, int] = {}
    for eid, i, f, length in raw:
        length = float(length)
        if not (math.isfinite(length) and length > 0.0):
            raise GraphError("nonpositive-length", f"edge {eid} has nonpositive length {length}")
        if i == f:
            raise GraphError("loop", f"edge {eid} is a loop at vertex {names[i]!r}")
        pair = frozenset((i, f))
        if pair in seen_pairs:
            raise GraphError(
                "multi-edge",
                f"edges {seen_pairs[pair]} and {eid} both join "
                f"{names[i]!r} and {names[f]!r}",
            )
        seen_pairs[pair] = eid
        built.append(Edge(eid, i, f, length))

    incidence: list[list[tuple[int, int]]] = [[] for _ in names]
    for e in built:
        incidence[e.init].append((e.id, -1))
        incidence[e.term].append((e.id, +1))

    for v, inc in enumerate(incidence):
        if not inc:
            raise GraphError("disconnected", f"vertex {names[v]!r} is isolated")

    # connectivity by breadth-first search over the incidence lists
    seen = {0}
    stack = [0]
    edge_by_id = {e.id: e for e in built}
    while stack:
        v = stack.pop()
        for eid, sign in incidence[v]:
            e = edge_by_id[eid]
            w = e.init if sign > 0 else e.term
            if w not in seen:
                seen.add(w)
                stack.append(w)
    if len(seen) != len(names):
        missing = next(n for i, n in enumerate(names) if i not in seen)
        raise GraphError("disconnected", f"vertex {missing!r} is not reachable")

    return MetricGraph(
        vertex_names=names,
        edges=tuple(built),
        incidence=tuple(tuple(sorted(inc)) for inc in incidence),
    )


def degree(g: MetricGraph, v: int) -> int:
    """Number of edge ends meeting vertex ``v``."""
    _check_vertex(g, v)
    return len(g.incidence[v])


def boundary_interior(g: MetricGraph) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Partition the vertices into degree-1 (boundary) and degree>1 (interior)."""
    boundary = tuple(v for v in range(g.n_vertices) if len(g.incidence[v]) == 1)
    interior = tuple(v for v in range(g.n_vertices) if len(g.incidence[v]) > 1)
    return boundary, interior


def trace_sign(g: MetricGraph, e: Edge, v: int) -> int:
    """Sign of the endpoint trace of a dual field on ``e`` at ``v``.

    +1 at the terminal vertex (trace is the field value at the far end),
    -1 at the initial vertex (trace is minus the value at coordinate 0).
    """
    _check_vertex(g, v)
    if v == e.term:
        return +1
    if v == e.init:
        return -1
    raise GraphError("not-incident", f"vertex {g.vertex_names[v]!r} is not an endpoint of edge {e.id}")


def total_length(g: MetricGraph) -> float:
    return math.fsum(e.length for e in g.edges)


def is_linear(g: MetricGraph) -> bool:
    """True when every interior vertex has degree exactly 2."""
    return all(len(g.incidence[v]) == 2 for v in boundary_interior(g)[1])


def graph_to_dict(g: MetricGraph) -> dict:
    return {
        "vertices": list(g.vertex_names),
        "edges": [
            {"id": e.id, "from": g.vertex_names[e.init], "to": g.vertex_names[e.term], "length": e.length}
            for e in g.edges
        ],
    }


def parse_graph(data: Mapping) -> MetricGraph:
    """Build a graph from the JSON-shaped dict format."""
    try:
        vertices = data["vertices"]
        edges = data["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphError("bad-format", f"graph spec missing key: {exc}") from None
    return build_graph(vertices, edges)


def load_graph(path) -> MetricGraph:
    """Read a graph file (JSON text; decimal lengths, locale-independent)."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise GraphError("bad-format", f"graph file {path}: {exc}") from None
    return parse_graph(data)


def save_graph(g: MetricGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph_to_dict(g), fh, indent=2)
        fh.write("\n")
