"""Contiguity graphs over areal units.

Builds the symmetric binary neighborhood structure over K non-overlapping
polygonal units, either from polygon boundaries (queen/rook contiguity with
vertex snapping) or from an explicit edge list.  Graphs are immutable after
construction and safe to share across threads.
"""
from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg


class GraphError(ValueError):
    """Raised for invalid graph inputs (duplicate ids, degenerate polygons)."""


@dataclass(frozen=True)
class ContiguityRule:
    """How polygon boundaries translate into adjacency.

    kind: "queen" (any shared boundary point) or "rook" (shared boundary
    segment of positive length).  snap_tolerance is the coordinate distance,
    in input units, within which vertices are considered coincident.
    """

    kind: str = "queen"
    snap_tolerance: float = 1e-9

    def __post_init__(self):
        if self.kind not in ("queen", "rook"):
            raise GraphError(f"unknown contiguity rule kind: {self.kind!r}")
        if self.snap_tolerance < 0:
            raise GraphError("snap_tolerance must be >= 0")


def _id_sort_key(unit_id):
    """Order ids numerically when possible so '10' sorts after '9'."""
    try:
        return (0, float(unit_id), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(unit_id))


class ArealGraph:
    """Symmetric binary contiguity structure over K areal units.

    Units are ordered by id.  Adjacency is stored sparsely as an edge list
    plus per-unit neighbor index arrays; the dense K x K matrix is only
    materialized on request.
    """

    def __init__(self, unit_ids, edges):
        ids = list(unit_ids)
        if len(ids) == 0:
            raise GraphError("graph needs at least one unit")
        if len(set(ids)) != len(ids):
            seen, dupes = set(), set()
            for u in ids:
                if u in seen:
                    dupes.add(u)
                seen.add(u)
            raise GraphError(f"duplicate unit ids: {sorted(dupes, key=_id_sort_key)}")
        self.unit_ids = tuple(ids)
        self._index = {u: k for k, u in enumerate(self.unit_ids)}
        K = len(self.unit_ids)

        edge_set = set()
        for a, b in edges:
            i, j = int(a), int(b)
            if not (0 <= i < K and 0 <= j < K):
                raise GraphError(f"edge ({a}, {b}) out of range for K={K}")
            if i == j:
                raise GraphError(f"self-edge on unit index {i}")
            edge_set.add((min(i, j), max(i, j)))
        self.edges = tuple(sorted(edge_set))

        nbrs = [[] for _ in range(K)]
        for i, j in self.edges:
            nbrs[i].append(j)
            nbrs[j].append(i)
        self.neighbors = tuple(np.array(sorted(n), dtype=np.intp) for n in nbrs)
        self.degrees = np.array([len(n) for n in self.neighbors], dtype=np.intp)
        self._laplacian_eigenvalues = None

    @property
    def n_units(self) -> int:
        return len(self.unit_ids)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def index_of(self, unit_id):
        return self._index[unit_id]

    def adjacency_matrix(self) -> np.ndarray:
        """Dense K x K binary adjacency matrix."""
        K = self.n_units
        W = np.zeros((K, K))
        for i, j in self.edges:
            W[i, j] = W[j, i] = 1.0
        return W

    def islands(self):
        """Unit ids with no neighbors."""
        return tuple(self.unit_ids[k] for k in np.flatnonzero(self.degrees == 0))


def build_contiguity(polygons, rule: ContiguityRule = ContiguityRule()) -> ArealGraph:
    """Build an ArealGraph from polygon boundaries.

    Parameters
    ----------
    polygons : mapping of unit id -> sequence of rings, each ring a sequence
        of (x, y) coordinate pairs.  Multipolygon geometries contribute all
        of their rings.
    rule : ContiguityRule
        Queen adjacency links units sharing any snapped vertex; rook requires
        a shared boundary segment of positive length.
    """
    items = list(polygons.items()) if hasattr(polygons, "items") else list(polygons)
    ids = [u for u, _ in items]
    if len(ids) != len(set(ids)):
        seen, dupes = set(), []
        for u in ids:
            if u in seen and u not in dupes:
                dupes.append(u)
            seen.add(u)
        raise GraphError(f"duplicate unit ids in polygon input: {dupes}")

    items.sort(key=lambda kv: _id_sort_key(kv[0]))
    unit_ids = [u for u, _ in items]
    index = {u: k for k, u in enumerate(unit_ids)}

    tol = rule.snap_tolerance

    def snap(pt):
        x, y = float(pt[0]), float(pt[1])
        if tol > 0:
            return (round(x / tol), round(y / tol))
        return (x, y)

    vertex_units = defaultdict(set)
    segment_units = defaultdict(set)
    for unit_id, rings in items:
        k = index[unit_id]
        n_vertices = 0
        for ring in rings:
            pts = [snap(p) for p in ring]
            if pts and pts[0] == pts[-1]:
                pts = pts[:-1]
            n_vertices += len(pts)
            for v in pts:
                vertex_units[v].add(k)
            if rule.kind == "rook":
                for a, b in zip(pts, pts[1:] + pts[:1]):
                    if a == b:
                        continue  # zero-length after snapping
                    segment_units[(min(a, b), max(a, b))].add(k)
        if n_vertices == 0:
            raise GraphError(f"degenerate polygon (zero vertices) for unit {unit_id!r}")

    shared = segment_units if rule.kind == "rook" else vertex_units
    edges = set()
    for units in shared.values():
        if len(units) > 1:
            us = sorted(units)
            for a in range(len(us)):
                for b in range(a + 1, len(us)):
                    edges.add((us[a], us[b]))
    return ArealGraph(unit_ids, edges)


def grid_graph(n_rows: int, n_cols: int, rule: str = "rook") -> ArealGraph:
    """Regular lattice graph; unit ids are row-major integers starting at 0."""
    K = n_rows * n_cols
    edges = []
    for r in range(n_rows):
        for c in range(n_cols):
            k = r * n_cols + c
            if c + 1 < n_cols:
                edges.append((k, k + 1))
            if r + 1 < n_rows:
                edges.append((k, k + n_cols))
            if rule == "queen":
                if r + 1 < n_rows and c + 1 < n_cols:
                    edges.append((k, k + n_cols + 1))
                if r + 1 < n_rows and c - 1 >= 0:
                    edges.append((k, k + n_cols - 1))
    return ArealGraph(list(range(K)), edges)


def laplacian_eigenvalues(graph: ArealGraph) -> np.ndarray:
    """Eigenvalues of D - W in ascending order (cached on the graph).

    The count of (near-)zero eigenvalues equals the number of connected
    components.
    """
    if graph._laplacian_eigenvalues is None:
        L = np.diag(graph.degrees.astype(float)) - graph.adjacency_matrix()
        try:
            vals = scipy.linalg.eigvalsh(L)
        except scipy.linalg.LinAlgError as exc:  # pragma: no cover
            raise GraphError(
                f"symmetric eigen-solver failed on {graph.n_units}x{graph.n_units} Laplacian"
            ) from exc
        graph._laplacian_eigenvalues = np.sort(vals)
    return graph._laplacian_eigenvalues


def connected_components(graph: ArealGraph):
    """Partition unit indices into connected components (BFS)."""
    K = graph.n_units
    seen = np.zeros(K, dtype=bool)
    components = []
    for start in range(K):
        if seen[start]:
            continue
        comp = []
        queue = [start]
        seen[start] = True
        while queue:
            k = queue.pop()
            comp.append(k)
            for j in graph.neighbors[k]:
                if not seen[j]:
                    seen[j] = True
                    queue.append(int(j))
        components.append(tuple(sorted(comp)))
    return tuple(components)


# ---------------------------------------------------------------------------
# GeoJSON input and CSV output


def read_geojson(path, id_property: str = "area_numbe"):
    """Read a GeoJSON FeatureCollection into {unit id: list of rings}."""
    with open(path) as fh:
        doc = json.load(fh)
    features = doc.get("features")
    if features is None:
        raise GraphError(f"{path}: not a GeoJSON FeatureCollection")
    polygons = {}
    for feat in features:
        props = feat.get("properties", {})
        if id_property not in props:
            raise GraphError(f"{path}: feature missing id property {id_property!r}")
        unit_id = props[id_property]
        if unit_id in polygons:
            raise GraphError(f"{path}: duplicate unit id {unit_id!r}")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        coords = geom.get("coordinates", [])
        if gtype == "Polygon":
            rings = [ring for ring in coords]
        elif gtype == "MultiPolygon":
            rings = [ring for poly in coords for ring in poly]
        else:
            raise GraphError(f"{path}: unsupported geometry type {gtype!r} for unit {unit_id!r}")
        polygons[unit_id] = rings
    return polygons


def write_graph(graph: ArealGraph, csv_path):
    """Write the edge list CSV plus a sidecar summary JSON.

    The CSV has columns from_id,to_id with each undirected edge listed once
    (from_id before to_id in unit order).  The sidecar, at
    ``<csv_path>.summary.json``, records unit ids and summary statistics and
    is required to reconstruct the graph (isolated units carry no edges).
    """
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from_id", "to_id"])
        for i, j in graph.edges:
            writer.writerow([graph.unit_ids[i], graph.unit_ids[j]])
    degrees = graph.degrees
    summary = {
        "unit_ids": list(graph.unit_ids),
        "n_units": graph.n_units,
        "n_edges": graph.n_edges,
        "n_components": len(connected_components(graph)),
        "min_degree": int(degrees.min()),
        "max_degree": int(degrees.max()),
        "islands": list(graph.islands()),
    }
    with open(csv_path.with_suffix(csv_path.suffix + ".summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")


def read_graph(csv_path) -> ArealGraph:
    """Reconstruct an ArealGraph written by :func:`write_graph`."""
    csv_path = Path(csv_path)
    summary_path = csv_path.with_suffix(csv_path.suffix + ".summary.json")
    if not summary_path.exists():
        raise GraphError(f"missing graph sidecar {summary_path}")
    with open(summary_path) as fh:
        summary = json.load(fh)
    unit_ids = summary["unit_ids"]
    index = {u: k for k, u in enumerate(unit_ids)}
    # JSON round-trips ids as written; CSV reads them back as strings.
    str_index = {str(u): k for u, k in index.items()}
    edges = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            edges.append((str_index[row["from_id"]], str_index[row["to_id"]]))
    return ArealGraph(unit_ids, edges)
