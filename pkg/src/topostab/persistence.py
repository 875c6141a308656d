"""Vietoris-Rips persistence in dimensions 0 and 1.

The complex is truncated at triangles, so H1 is exact and nothing above it
is computed. Reduction is over Z/2 with columns held as Python sets; the
triangle columns are reduced first and every edge that becomes a triangle
pivot is cleared (its own column is known to reduce to zero).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Sequence, Tuple

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching


class StructuralError(ValueError):
    """The simplex list is not a valid filtered complex."""


class FilteredSimplex(NamedTuple):
    value: float
    vertices: Tuple[int, ...]

    @property
    def dim(self) -> int:
        return len(self.vertices) - 1


def _sort_key(s: FilteredSimplex):
    return (s.value, len(s.vertices), s.vertices)


@dataclass
class PersistenceDiagram:
    dim: int
    intervals: np.ndarray  # (k, 2), death may be inf

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.intervals)

    def sorted(self) -> np.ndarray:
        if not len(self.intervals):
            return self.intervals
        order = np.lexsort((self.intervals[:, 1], self.intervals[:, 0]))
        return self.intervals[order]


@dataclass
class WindowedDiagram:
    dim: int
    intervals: np.ndarray
    r0: float
    r1: float

    def __post_init__(self):
        self.intervals = np.asarray(self.intervals, dtype=np.float64).reshape(-1, 2)

    def __len__(self):
        return len(self.intervals)


def build_rips(dist: np.ndarray, max_scale: float) -> List[FilteredSimplex]:
    """Rips complex of ``dist`` up to ``max_scale``, capped at triangles.

    Edges need a finite distance no larger than ``max_scale``; triangles
    enter when all three edges are present. Output is sorted by
    (value, dimension, vertices).
    """
    dist = np.asarray(dist, dtype=np.float64)
    n = dist.shape[0]
    simplices = [FilteredSimplex(0.0, (v,)) for v in range(n)]
    ok = np.isfinite(dist) & (dist <= max_scale)
    np.fill_diagonal(ok, False)
    iu, ju = np.nonzero(np.triu(ok, k=1))
    nbrs = [set() for _ in range(n)]
    for i, j in zip(iu.tolist(), ju.tolist()):
        simplices.append(FilteredSimplex(float(dist[i, j]), (i, j)))
        nbrs[i].add(j)
    for i, j in zip(iu.tolist(), ju.tolist()):
        for k in nbrs[i] & nbrs[j]:
            value = max(dist[i, j], dist[i, k], dist[j, k])
            simplices.append(FilteredSimplex(float(value), (i, j, k)))
    simplices.sort(key=_sort_key)
    return simplices


def _faces(vertices: Tuple[int, ...]):
    if len(vertices) == 2:
        return [(vertices[0],), (vertices[1],)]
    a, b, c = vertices
    return [(a, b), (a, c), (b, c)]


def boundary_columns(simplices: Sequence[FilteredSimplex]) -> List[List[int]]:
    """Face indices of every simplex, validating face closure and order."""
    index = {}
    cols = []
    for pos, s in enumerate(simplices):
        if len(s.vertices) > 3 or list(s.vertices) != sorted(set(s.vertices)):
            raise StructuralError(f"bad simplex {s.vertices}")
        if len(s.vertices) == 1:
            cols.append([])
        else:
            col = []
            for f in _faces(s.vertices):
                fi = index.get(f)
                if fi is None:
                    raise StructuralError(f"face {f} of {s.vertices} missing or appears after it")
                if simplices[fi].value > s.value:
                    raise StructuralError(f"face {f} enters after its coface {s.vertices}")
                col.append(fi)
            cols.append(col)
        if s.vertices in index:
            raise StructuralError(f"duplicate simplex {s.vertices}")
        index[s.vertices] = pos
    return cols


def compute_persistence(simplices: Sequence[FilteredSimplex]) -> Tuple[PersistenceDiagram, PersistenceDiagram]:
    """H0 and H1 diagrams of a sorted, face-closed complex.

    Zero-length intervals are dropped. Unpaired vertices and unpaired
    cycle-creating edges give infinite intervals.
    """
    cols = boundary_columns(simplices)
    n = len(simplices)
    dims = [len(s.vertices) - 1 for s in simplices]
    pivot_owner = {}
    reduced = {}
    death_of = {}  # birth simplex index -> killing simplex index
    negative = set()
    for d in (2, 1):
        for j in range(n):
            if dims[j] != d or j in death_of:
                continue
            work = set(cols[j])
            while work:
                low = max(work)
                owner = pivot_owner.get(low)
                if owner is None:
                    pivot_owner[low] = j
                    reduced[j] = work
                    death_of[low] = j
                    negative.add(j)
                    break
                work ^= reduced[owner]
    intervals = ([], [])
    values = [s.value for s in simplices]
    for j in range(n):
        if j in negative or dims[j] > 1:
            continue
        birth = values[j]
        k = death_of.get(j)
        death = values[k] if k is not None else np.inf
        if death > birth:
            intervals[dims[j]].append((birth, death))
    return PersistenceDiagram(0, intervals[0]), PersistenceDiagram(1, intervals[1])


def window_intervals(diag: PersistenceDiagram, r0: float, r1: float) -> WindowedDiagram:
    """Keep intervals with death > r0 and birth < r1, clamped into [r0, r1]."""
    if not r0 < r1:
        raise ValueError(f"need r0 < r1, got {r0}, {r1}")
    iv = diag.intervals
    keep = (iv[:, 1] > r0) & (iv[:, 0] < r1)
    out = np.column_stack([np.maximum(iv[keep, 0], r0), np.minimum(iv[keep, 1], r1)])
    return WindowedDiagram(diag.dim, out, r0, r1)


def _as_points(diag) -> np.ndarray:
    if isinstance(diag, (PersistenceDiagram, WindowedDiagram)):
        return diag.intervals
    return np.asarray(diag, dtype=np.float64).reshape(-1, 2)


def bottleneck_distance(a, b) -> float:
    """Exact bottleneck distance between two diagrams.

    Binary search over the candidate costs with a bipartite perfect-matching
    test at each threshold. Points with infinite death are matched among
    themselves by sorted birth; unequal counts give ``inf``.
    """
    pa, pb = _as_points(a), _as_points(b)
    inf_a, inf_b = np.isinf(pa[:, 1]), np.isinf(pb[:, 1])
    if inf_a.sum() != inf_b.sum():
        return float("inf")
    essential = 0.0
    if inf_a.any():
        essential = float(np.max(np.abs(np.sort(pa[inf_a, 0]) - np.sort(pb[inf_b, 0]))))
    pa, pb = pa[~inf_a], pb[~inf_b]
    na, nb = len(pa), len(pb)
    if na + nb == 0:
        return essential
    # rows: a-points then diagonal slots for b; cols: b-points then diagonal slots for a
    size = na + nb
    cost = np.full((size, size), np.inf)
    if na and nb:
        cost[:na, :nb] = np.maximum(
            np.abs(pa[:, None, 0] - pb[None, :, 0]), np.abs(pa[:, None, 1] - pb[None, :, 1])
        )
    half_a = (pa[:, 1] - pa[:, 0]) / 2
    half_b = (pb[:, 1] - pb[:, 0]) / 2
    cost[np.arange(na), nb + np.arange(na)] = half_a
    cost[na + np.arange(nb), np.arange(nb)] = half_b
    cost[na:, nb:] = 0.0
    candidates = np.unique(cost[np.isfinite(cost)])

    def feasible(t: float) -> bool:
        graph = csr_matrix((cost <= t).astype(np.int8))
        match = maximum_bipartite_matching(graph, perm_type="column")
        return bool(np.all(match >= 0))

    lo, hi = 0, len(candidates) - 1
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(candidates[mid]):
            hi = mid
        else:
            lo = mid + 1
    return max(float(candidates[lo]), essential)


def dump_diagrams(diagrams: Iterable[PersistenceDiagram]) -> str:
    """Text dump, one ``dim birth death`` line per interval (``inf`` allowed)."""
    lines = []
    for dgm in diagrams:
        for b, d in dgm.sorted():
            lines.append(f"{dgm.dim} {float(b)!r} {'inf' if np.isinf(d) else repr(float(d))}")
    return "\n".join(lines) + ("\n" if lines else "")


def load_diagrams(text: str) -> Tuple[PersistenceDiagram, PersistenceDiagram]:
    rows = {0: [], 1: []}
    for line in text.splitlines():
        if not line.strip():
            continue
        dim, b, d = line.split()
        rows[int(dim)].append((float(b), float(d)))
    return PersistenceDiagram(0, rows[0]), PersistenceDiagram(1, rows[1])
