"""Candidate edge bags and per-partition parent resolution.

Each partition of the space-time tessellation is a graph node.  A direction
bag lists K candidate spatial directions, each an offset on the 2-d spatial
partition lattice pointing from a node toward its would-be parent (e.g. "W"
is (-1, 0): the arrow comes from the west neighbor).  A membership vector z
picks one direction per node; every node additionally receives an edge from
the node covering the same spatial region one time slice earlier.

Any bag whose offsets fit in an open half-plane yields an acyclic graph for
every z: a linear potential decreasing along all offsets orders spatial
edges, and temporal edges strictly increase the time index.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .domain import PartitionScheme, ValidationError

__all__ = [
    "DIRECTION_OFFSETS",
    "DirectionBag",
    "DagConfig",
    "resolve_parents",
    "check_acyclic",
    "topological_order",
    "precision_sparsity",
    "moral_adjacency",
    "union_moral_adjacency",
    "greedy_coloring",
    "enumerate_bag_dags",
    "common_z_configs",
]

# (east, north) lattice offsets of the neighbor an arrow comes from
DIRECTION_OFFSETS = {
    "W": (-1, 0),
    "E": (1, 0),
    "N": (0, 1),
    "S": (0, -1),
    "NW": (-1, 1),
    "NE": (1, 1),
    "SW": (-1, -1),
    "SE": (1, -1),
}

# integer normals covering every open half-plane cone expressible by the
# eight compass offsets; v certifies a bag iff v . o < 0 for all offsets o
_HALF_SPACE_CANDIDATES = [
    (1, 0), (0, 1), (-1, 0), (0, -1),
    (1, 1), (1, -1), (-1, 1), (-1, -1),
    (2, 1), (2, -1), (-2, 1), (-2, -1),
    (1, 2), (1, -2), (-1, 2), (-1, -2),
]


@dataclass(frozen=True)
class DirectionBag:
    """K candidate spatial directions shared by every partition."""

    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValidationError("direction bag must contain at least one direction")
        if len(set(self.names)) != len(self.names):
            raise ValidationError("duplicate directions in bag")
        for name in self.names:
            if name not in DIRECTION_OFFSETS:
                raise ValidationError(
                    f"unknown direction {name!r}; choose from {sorted(DIRECTION_OFFSETS)}"
                )
        offs = self.offsets
        ok = any(
            all(v[0] * o[0] + v[1] * o[1] < 0 for o in offs)
            for v in _HALF_SPACE_CANDIDATES
        )
        if not ok:
            raise ValidationError(
                f"directions {self.names} do not fit in an open half-plane; "
                "cycles would be possible"
            )

    @property
    def offsets(self) -> tuple[tuple[int, int], ...]:
        return tuple(DIRECTION_OFFSETS[n] for n in self.names)

    @property
    def K(self) -> int:
        return len(self.names)


@dataclass(frozen=True)
class DagConfig:
    """Resolved parent structure for one membership vector z.

    spatial_parent[i] / temporal_parent[i] hold partition indices, or -1
    where the parent does not exist (lattice boundary, first time slice).
    """

    z: np.ndarray
    spatial_parent: np.ndarray
    temporal_parent: np.ndarray

    @property
    def M(self) -> int:
        return len(self.z)

    def parents_of(self, i: int) -> list[int]:
        out = []
        if self.spatial_parent[i] >= 0:
            out.append(int(self.spatial_parent[i]))
        if self.temporal_parent[i] >= 0:
            out.append(int(self.temporal_parent[i]))
        return out


def _spatial_lattice(scheme: PartitionScheme) -> tuple[int, int]:
    sd = scheme.spatial_dims
    if len(sd) != 2:
        raise ValidationError("direction bags require exactly two spatial axes")
    return sd


def resolve_parents(scheme: PartitionScheme, bag: DirectionBag, z, counts=None) -> DagConfig:
    """Resolve each partition's spatial and temporal parent under z.

    The spatial parent of cell (t, ix, iy) under direction h is the cell at
    (t, ix+ox, iy+oy); the temporal parent is (t-1, ix, iy).  Parents falling
    outside the lattice are absent.  When per-partition reference counts are
    given, parents with zero references are skipped by walking further along
    the same offset (or further back in time) until a non-empty cell is
    found, so empty cells never contribute degenerate blocks.
    """
    n1, n2 = _spatial_lattice(scheme)
    nt = scheme.n_time
    z = np.asarray(z, dtype=int)
    if z.shape != (scheme.M,):
        raise ValidationError("z must have one entry per partition")
    if np.any((z < 0) | (z >= bag.K)):
        raise ValidationError("z values must index into the bag")
    counts = None if counts is None else np.asarray(counts, dtype=int)
    spatial = np.full(scheme.M, -1, dtype=int)
    temporal = np.full(scheme.M, -1, dtype=int)
    for idx in range(scheme.M):
        it, i1, i2 = scheme.cell_of(idx)
        ox, oy = bag.offsets[z[idx]]
        j1, j2 = i1 + ox, i2 + oy
        while 0 <= j1 < n1 and 0 <= j2 < n2:
            cand = scheme.index_of((it, j1, j2))
            if counts is None or counts[cand] > 0:
                spatial[idx] = cand
                break
            j1, j2 = j1 + ox, j2 + oy
        jt = it - 1
        while jt >= 0:
            cand = scheme.index_of((jt, i1, i2))
            if counts is None or counts[cand] > 0:
                temporal[idx] = cand
                break
            jt -= 1
    return DagConfig(z=z, spatial_parent=spatial, temporal_parent=temporal)


def _edges(config: DagConfig):
    for i in range(config.M):
        for j in config.parents_of(i):
            yield j, i  # parent -> child


def check_acyclic(config: DagConfig) -> bool:
    """Kahn's algorithm: True iff a topological order exists."""
    try:
        topological_order(config)
        return True
    except ValidationError:
        return False


def topological_order(config: DagConfig) -> np.ndarray:
    """Permutation of partitions placing every parent before its children."""
    M = config.M
    children: list[list[int]] = [[] for _ in range(M)]
    indeg = np.zeros(M, dtype=int)
    for j, i in _edges(config):
        children[j].append(i)
        indeg[i] += 1
    ready = sorted(np.flatnonzero(indeg == 0).tolist())
    order = []
    while ready:
        node = ready.pop(0)
        order.append(node)
        for ch in children[node]:
            indeg[ch] -= 1
            if indeg[ch] == 0:
                ready.append(ch)
        ready.sort()
    if len(order) != M:
        raise ValidationError("graph contains a cycle")
    return np.array(order, dtype=int)


def precision_sparsity(config: DagConfig) -> set[tuple[int, int]]:
    """Nonzero block coordinates of the latent precision matrix.

    Block (i, j) is present iff i == j, a directed edge joins the two nodes,
    or the nodes share a child (the child's spatial and temporal parents get
    married in the moral graph).
    """
    pattern: set[tuple[int, int]] = {(i, i) for i in range(config.M)}
    for i in range(config.M):
        par = config.parents_of(i)
        for j in par:
            pattern.add((i, j))
            pattern.add((j, i))
        for j1, j2 in itertools.combinations(par, 2):
            pattern.add((j1, j2))
            pattern.add((j2, j1))
    return pattern


def moral_adjacency(config: DagConfig) -> list[set[int]]:
    """Undirected neighbor sets of the moral graph (no self loops)."""
    adj: list[set[int]] = [set() for _ in range(config.M)]
    for i, j in precision_sparsity(config):
        if i != j:
            adj[i].add(j)
    return adj


def union_moral_adjacency(scheme: PartitionScheme, bag: DirectionBag, counts=None) -> list[set[int]]:
    """Union of moral adjacencies over every direction choice.

    Partitions non-adjacent here are conditionally independent under any z,
    so a coloring of this graph yields update groups valid for the whole
    chain.
    """
    M = scheme.M
    adj: list[set[int]] = [set() for _ in range(M)]
    for h in range(bag.K):
        cfg = resolve_parents(scheme, bag, np.full(M, h, dtype=int), counts=counts)
        for i, nbrs in enumerate(moral_adjacency(cfg)):
            adj[i] |= nbrs
    return adj


def greedy_coloring(adj: list[set[int]]) -> list[np.ndarray]:
    """First-fit coloring in index order; returns per-color partition arrays."""
    M = len(adj)
    color = np.full(M, -1, dtype=int)
    for i in range(M):
        used = {color[j] for j in adj[i] if color[j] >= 0}
        c = 0
        while c in used:
            c += 1
        color[i] = c
    return [np.flatnonzero(color == c) for c in range(color.max() + 1)]


def enumerate_bag_dags(K: int, M: int, limit: int = 10**6):
    """Yield every membership vector in {0..K-1}^M exactly once (test-scale)."""
    if K**M > limit:
        raise ValidationError(f"K^M = {K**M} exceeds enumeration guard {limit}")
    for tup in itertools.product(range(K), repeat=M):
        yield np.array(tup, dtype=int)


def common_z_configs(bag: DirectionBag, M: int, probs) -> list[tuple[np.ndarray, float]]:
    """Restricted mixture with one shared direction across all partitions.

    probs gives the weight of the all-h configuration for each direction h;
    weights must sum to 1.
    """
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (bag.K,):
        raise ValidationError("need one probability per bag direction")
    if abs(probs.sum() - 1.0) > 1e-12 or np.any(probs < 0):
        raise ValidationError("probabilities must be non-negative and sum to 1")
    return [(np.full(M, h, dtype=int), float(probs[h])) for h in range(bag.K)]
