"""County adjacency graphs and intrinsic-autoregressive (ICAR) support.

The adjacency structure enters the model in two places: the scaled ICAR
prior on the structured spatial effect, and the spatially correlated
hierarchy on the latent offset-error standard deviations.  Everything here
is a pure function of an immutable :class:`AreaGraph`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np


class GraphError(ValueError):
    """Invalid adjacency input (bad index, self-loop, duplicate id)."""


@dataclass(frozen=True)
class AreaGraph:
    """Undirected adjacency over ``n_areas`` areas.

    Edges are canonical: sorted (i < j), deduplicated, no self-loops.
    ``neighbor_counts`` is the diagonal of the degree matrix.
    """

    n_areas: int
    edges: tuple[tuple[int, int], ...]
    neighbor_counts: tuple[int, ...]
    area_ids: tuple[str, ...]
    _edge_i: np.ndarray = field(repr=False, compare=False, default=None)
    _edge_j: np.ndarray = field(repr=False, compare=False, default=None)

    def __post_init__(self):
        ei = np.array([e[0] for e in self.edges], dtype=np.intp)
        ej = np.array([e[1] for e in self.edges], dtype=np.intp)
        object.__setattr__(self, "_edge_i", ei)
        object.__setattr__(self, "_edge_j", ej)

    @property
    def edge_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return self._edge_i, self._edge_j

    def neighbors(self, c: int) -> list[int]:
        out = []
        for i, j in self.edges:
            if i == c:
                out.append(j)
            elif j == c:
                out.append(i)
        return out

    def structure_matrix(self) -> np.ndarray:
        """Dense D - W (degree minus adjacency)."""
        q = np.zeros((self.n_areas, self.n_areas))
        for i, j in self.edges:
            q[i, j] -= 1.0
            q[j, i] -= 1.0
            q[i, i] += 1.0
            q[j, j] += 1.0
        return q


def from_edge_list(n_areas: int, pairs, ids=None) -> AreaGraph:
    """Build a canonical :class:`AreaGraph` from an edge list.

    Pairs are deduplicated after ordering each one as (min, max); self-loops
    and out-of-range indices are rejected.
    """
    if n_areas <= 0:
        raise GraphError("n_areas must be positive")
    if ids is None:
        ids = [str(i) for i in range(n_areas)]
    ids = [str(s) for s in ids]
    if len(ids) != n_areas:
        raise GraphError(f"expected {n_areas} area ids, got {len(ids)}")
    if len(set(ids)) != n_areas:
        seen, dup = set(), None
        for s in ids:
            if s in seen:
                dup = s
                break
            seen.add(s)
        raise GraphError(f"duplicate area id {dup!r}")

    canon = set()
    for i, j in pairs:
        i, j = int(i), int(j)
        if not (0 <= i < n_areas and 0 <= j < n_areas):
            raise GraphError(f"edge ({i},{j}) out of range for {n_areas} areas")
        if i == j:
            raise GraphError(f"self-loop at area {i}")
        canon.add((min(i, j), max(i, j)))

    edges = tuple(sorted(canon))
    counts = [0] * n_areas
    for i, j in edges:
        counts[i] += 1
        counts[j] += 1
    return AreaGraph(n_areas, edges, tuple(counts), tuple(ids))


def connected_components(g: AreaGraph) -> list[set[int]]:
    """Partition areas into connected components (singletons allowed)."""
    parent = list(range(g.n_areas))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i, j in g.edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
    comps: dict[int, set[int]] = {}
    for v in range(g.n_areas):
        comps.setdefault(find(v), set()).add(v)
    return sorted(comps.values(), key=min)


def icar_rank(g: AreaGraph) -> int:
    """Rank of D - W: n_areas minus the number of connected components."""
    return g.n_areas - len(connected_components(g))


def icar_log_density_unnormalized(x, g: AreaGraph, precision: float) -> float:
    """Improper Gaussian Markov random field log density, up to a constant.

    ``(rank/2) * log(precision) - (precision/2) * sum over edges (x_i - x_j)^2``.
    Exactly invariant to adding a constant within a connected component.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (g.n_areas,):
        raise ValueError(f"expected vector of length {g.n_areas}, got shape {x.shape}")
    if not precision > 0:
        raise ValueError("precision must be positive")
    ei, ej = g.edge_arrays
    quad = float(np.sum((x[ei] - x[ej]) ** 2)) if len(ei) else 0.0
    return 0.5 * icar_rank(g) * math.log(precision) - 0.5 * precision * quad


def pairwise_quadratic(x, g: AreaGraph) -> float:
    """x' (D - W) x via the pairwise-difference form."""
    x = np.asarray(x, dtype=float)
    ei, ej = g.edge_arrays
    if len(ei) == 0:
        return 0.0
    return float(np.sum((x[ei] - x[ej]) ** 2))


def bym2_scaling_factor(g: AreaGraph) -> float:
    """Variance scale of the ICAR field under sum-to-zero constraints.

    Geometric mean of the marginal variances of the constrained generalized
    inverse of D - W, taken over non-singleton components.  Dividing ICAR
    marginal variances by this factor gives geometric mean one, so the scaled
    effect has generalized variance approximately one.
    """
    comps = [sorted(c) for c in connected_components(g) if len(c) > 1]
    if not comps:
        raise GraphError("graph has no edges; scaling factor undefined")
    q = g.structure_matrix()
    log_vars = []
    for comp in comps:
        idx = np.array(comp)
        sub = q[np.ix_(idx, idx)]
        # pseudo-inverse = covariance under the per-component sum-to-zero
        # constraint (null space of a connected block is the constant vector)
        cov = np.linalg.pinv(sub, hermitian=True)
        log_vars.extend(np.log(np.diag(cov)))
    return float(np.exp(np.mean(log_vars)))


def center_by_component(x, g: AreaGraph) -> np.ndarray:
    """Subtract the per-component mean; singleton components are zeroed."""
    x = np.asarray(x, dtype=float)
    if x.shape != (g.n_areas,):
        raise ValueError(f"expected vector of length {g.n_areas}, got shape {x.shape}")
    out = x.copy()
    for comp in connected_components(g):
        idx = sorted(comp)
        if len(idx) == 1:
            out[idx[0]] = 0.0
        else:
            out[idx] -= np.mean(out[idx])
    return out


def greedy_coloring(g: AreaGraph) -> list[np.ndarray]:
    """Partition areas into independent sets (no two adjacent share a set).

    Sites in one color class are conditionally independent under the ICAR
    prior given the rest, so the sampler can update a whole class at once.
    """
    adj = [[] for _ in range(g.n_areas)]
    for i, j in g.edges:
        adj[i].append(j)
        adj[j].append(i)
    color = [-1] * g.n_areas
    for v in range(g.n_areas):
        used = {color[u] for u in adj[v] if color[u] >= 0}
        c = 0
        while c in used:
            c += 1
        color[v] = c
    n_colors = max(color) + 1
    return [np.flatnonzero(np.array(color) == c) for c in range(n_colors)]


def induced_subgraph(g: AreaGraph, indices) -> AreaGraph:
    """Subgraph on the given area indices (order preserved)."""
    indices = [int(i) for i in indices]
    pos = {v: k for k, v in enumerate(indices)}
    if len(pos) != len(indices):
        raise GraphError("duplicate indices in subgraph selection")
    pairs = [(pos[i], pos[j]) for i, j in g.edges if i in pos and j in pos]
    ids = [g.area_ids[i] for i in indices]
    return from_edge_list(len(indices), pairs, ids)


def read_edge_list_csv(path, ids=None) -> AreaGraph:
    """Read a `from_id,to_id` CSV of undirected edges.

    If ``ids`` is not given, area ids are the sorted set of ids seen in the
    file; isolated areas must then be supplied explicitly via ``ids``.
    """
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames[:2]] != ["from_id", "to_id"]:
            raise GraphError(f"{path}: expected header 'from_id,to_id'")
        for row in reader:
            rows.append((row["from_id"].strip(), row["to_id"].strip()))
    if ids is None:
        ids = sorted({a for pair in rows for a in pair})
    index = {s: k for k, s in enumerate(ids)}
    pairs = []
    for a, b in rows:
        if a not in index:
            raise GraphError(f"{path}: unknown area id {a!r}")
        if b not in index:
            raise GraphError(f"{path}: unknown area id {b!r}")
        pairs.append((index[a], index[b]))
    return from_edge_list(len(ids), pairs, ids)


def write_edge_list_csv(g: AreaGraph, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["from_id", "to_id"])
        for i, j in g.edges:
            writer.writerow([g.area_ids[i], g.area_ids[j]])


def from_geojson(path, id_property: str, tolerance: float = 1e-9) -> AreaGraph:
    """Queen contiguity from a GeoJSON FeatureCollection.

    Two features are neighbors when any pair of their boundary vertices
    coincide within ``tolerance`` degrees.  Intended as an ingestion
    convenience for county polygons, not general GIS.
    """
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise GraphError(f"{path}: not a FeatureCollection")
    ids = []
    vertex_sets = []
    for feat in doc["features"]:
        props = feat.get("properties") or {}
        if id_property not in props:
            raise GraphError(f"{path}: feature missing id property {id_property!r}")
        ids.append(str(props[id_property]))
        verts = []
        _collect_coords(feat.get("geometry") or {}, verts)
        vertex_sets.append({(round(x / tolerance), round(y / tolerance)) for x, y in verts})
    pairs = []
    for i in range(len(ids)):
        for j in range(i + 1, len(ids)):
            if vertex_sets[i] & vertex_sets[j]:
                pairs.append((i, j))
    return from_edge_list(len(ids), pairs, ids)


def _collect_coords(geometry: dict, out: list) -> None:
    gtype = geometry.get("type")
    coords = geometry.get("coordinates", [])
    if gtype == "Polygon":
        for ring in coords:
            out.extend((pt[0], pt[1]) for pt in ring)
    elif gtype == "MultiPolygon":
        for poly in coords:
            for ring in poly:
                out.extend((pt[0], pt[1]) for pt in ring)
    elif gtype is not None:
        raise GraphError(f"unsupported geometry type {gtype!r}")
