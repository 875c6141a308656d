"""TUDataset ingestion, stratified splitting, batching and HK feature attachment."""
from __future__ import annotations

import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .graph import Graph, PerturbConfig, hop_distances, make_rng, node_degrees, one_hot_degree, perturb_edges
from .images import PiParams, hk_feature_vector

_TOKEN = re.compile(r"[,\s]+")


class DatasetError(Exception):
    pass


class IngestionError(DatasetError):
    """A mandatory dataset file is missing or unreadable."""


class FormatError(DatasetError):
    """A dataset file is malformed."""


class SplitError(ValueError):
    pass


class StateError(RuntimeError):
    """A graph lacks features a later stage depends on."""


@dataclass(frozen=True)
class FeatureConfig:
    d_max: int = 10

    def __post_init__(self):
        if self.d_max < 1:
            raise ValueError("d_max must be at least 1")


@dataclass
class DatasetBundle:
    name: str
    graphs: List[Graph]
    num_classes: int
    feature_dim: int = 0

    def __len__(self):
        return len(self.graphs)

    @property
    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)


def _read_int_rows(path: Path, width: Optional[int]) -> List[List[int]]:
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = [t for t in _TOKEN.split(line.strip()) if t]
            if not tokens:
                continue
            try:
                values = [int(t) for t in tokens]
            except ValueError:
                raise FormatError(f"{path.name}:{lineno}: non-integer token in {line.strip()!r}") from None
            if width is not None and len(values) < width:
                raise FormatError(f"{path.name}:{lineno}: expected {width} values, got {len(values)}")
            rows.append(values)
    return rows


def parse_tudataset(directory, name: str) -> DatasetBundle:
    """Read ``NAME_A``, ``NAME_graph_indicator``, ``NAME_graph_labels`` and,
    when present, ``NAME_node_labels`` from ``directory``.

    Node ids in the files are 1-based; they become 0-based per-graph indices
    here and nowhere else. Node labels, if present, are one-hot encoded over
    the sorted set of label values. Graph labels are remapped to 0..C-1 in
    sorted order.
    """
    base = Path(directory)
    if (base / name).is_dir() and not (base / f"{name}_A.txt").exists():
        base = base / name
    indicator = [r[0] for r in _read_int_rows(base / f"{name}_graph_indicator.txt", 1)]
    raw_labels = [r[0] for r in _read_int_rows(base / f"{name}_graph_labels.txt", 1)]
    edge_rows = _read_int_rows(base / f"{name}_A.txt", 2)
    node_label_path = base / f"{name}_node_labels.txt"
    node_labels = [r[0] for r in _read_int_rows(node_label_path, 1)] if node_label_path.exists() else None

    num_nodes_total = len(indicator)
    indicator = np.asarray(indicator, dtype=np.int64)
    graph_ids = np.unique(indicator)
    if len(graph_ids) != len(raw_labels):
        raise FormatError(
            f"{name}_graph_labels.txt has {len(raw_labels)} labels for {len(graph_ids)} graphs"
        )
    if node_labels is not None and len(node_labels) != num_nodes_total:
        raise FormatError(f"{name}_node_labels.txt has {len(node_labels)} rows for {num_nodes_total} nodes")

    slot = np.searchsorted(graph_ids, indicator)  # 0-based graph index per node
    local = np.zeros(num_nodes_total, dtype=np.int64)
    counts = np.zeros(len(graph_ids), dtype=np.int64)
    for k, gi in enumerate(slot):
        local[k] = counts[gi]
        counts[gi] += 1

    per_graph_edges: List[list] = [[] for _ in graph_ids]
    for lineno, row in enumerate(edge_rows, 1):
        i, j = row[0] - 1, row[1] - 1
        if not (0 <= i < num_nodes_total and 0 <= j < num_nodes_total):
            raise FormatError(f"{name}_A.txt:{lineno}: edge ({row[0]}, {row[1]}) references an unknown node")
        if slot[i] != slot[j]:
            raise FormatError(f"{name}_A.txt:{lineno}: edge ({row[0]}, {row[1]}) joins two graphs")
        per_graph_edges[slot[i]].append((local[i], local[j]))

    label_values = sorted(set(raw_labels))
    label_map = {v: k for k, v in enumerate(label_values)}
    feats = None
    if node_labels is not None:
        node_values = sorted(set(node_labels))
        node_map = {v: k for k, v in enumerate(node_values)}
        feats = np.zeros((num_nodes_total, len(node_values)))
        feats[np.arange(num_nodes_total), [node_map[v] for v in node_labels]] = 1.0

    graphs = []
    for gi in range(len(graph_ids)):
        members = np.flatnonzero(slot == gi)
        g = Graph.from_edges(
            int(counts[gi]),
            per_graph_edges[gi],
            node_features=None if feats is None else feats[members],
            label=label_map[raw_labels[gi]],
        )
        graphs.append(g)
    feature_dim = 0 if feats is None else feats.shape[1]
    return DatasetBundle(name, graphs, len(label_values), feature_dim)


def write_tudataset(directory, name: str, graphs: Sequence[Graph], node_labels: Optional[Sequence[Sequence[int]]] = None):
    """Write graphs in TU text format (both edge directions, 1-based ids)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    offset = 0
    a_lines, ind_lines, lab_lines, nl_lines = [], [], [], []
    for gi, g in enumerate(graphs):
        for i, j in g.edges:
            a_lines.append(f"{i + offset + 1}, {j + offset + 1}")
            a_lines.append(f"{j + offset + 1}, {i + offset + 1}")
        ind_lines.extend([str(gi + 1)] * g.num_nodes)
        lab_lines.append(str(g.label))
        if node_labels is not None:
            nl_lines.extend(str(v) for v in node_labels[gi])
        offset += g.num_nodes
    (d / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (d / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (d / f"{name}_graph_labels.txt").write_text("\n".join(lab_lines) + "\n")
    if node_labels is not None:
        (d / f"{name}_node_labels.txt").write_text("\n".join(nl_lines) + "\n")


def stratified_split(bundle_or_labels, train_frac: float = 0.8, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class contributes round(frac * size) to train.

    Every class keeps at least one graph on each side.
    """
    labels = bundle_or_labels.labels if isinstance(bundle_or_labels, DatasetBundle) else np.asarray(bundle_or_labels)
    rng = make_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        members = np.flatnonzero(labels == c)
        if len(members) < 2:
            raise SplitError(f"class {c} has {len(members)} graph(s); need at least 2 to split")
        members = rng.permutation(members)
        k = int(np.floor(train_frac * len(members) + 0.5))
        k = min(max(k, 1), len(members) - 1)
        train.extend(members[:k].tolist())
        test.extend(members[k:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(test, dtype=np.int64))


@dataclass
class Batch:
    node_features: np.ndarray
    edges: np.ndarray  # (E, 2) undirected pairs in union indexing
    batch_vector: np.ndarray
    labels: np.ndarray
    topo: np.ndarray
    topo_pert: np.ndarray
    _adj: Optional[sp.csr_matrix] = field(default=None, repr=False)

    @property
    def num_graphs(self) -> int:
        return len(self.labels)

    @property
    def num_nodes(self) -> int:
        return len(self.batch_vector)

    @property
    def edge_index(self) -> np.ndarray:
        return np.concatenate([self.edges.T, self.edges[:, ::-1].T], axis=1)

    @property
    def adjacency(self) -> sp.csr_matrix:
        if self._adj is None:
            self._adj = edges_to_adjacency(self.edges, self.num_nodes)
        return self._adj

    def with_edges(self, edges: np.ndarray) -> "Batch":
        return replace(self, edges=edges, _adj=None)


def edges_to_adjacency(edges: np.ndarray, num_nodes: int) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))


def batch_graphs(graphs: Sequence[Graph], order: Optional[Sequence[int]] = None) -> Batch:
    """Disjoint union of ``graphs[order]`` with node offsets and stacked topo rows."""
    if order is None:
        order = range(len(graphs))
    feats, edges, bvec, labels, topo, topo_pert = [], [], [], [], [], []
    offset = 0
    for slot, idx in enumerate(order):
        g = graphs[idx]
        if g.topo is None or g.topo_pert is None:
            raise StateError(f"graph {idx} has no topological features; run attach_hk_features first")
        if g.node_features is None:
            raise StateError(f"graph {idx} has no node features; run attach_hk_features first")
        feats.append(g.node_features)
        edges.append(g.edges + offset)
        bvec.append(np.full(g.num_nodes, slot, dtype=np.int64))
        labels.append(g.label)
        topo.append(g.topo)
        topo_pert.append(g.topo_pert)
        offset += g.num_nodes
    return Batch(
        node_features=np.concatenate(feats, axis=0),
        edges=np.concatenate(edges, axis=0).reshape(-1, 2),
        batch_vector=np.concatenate(bvec),
        labels=np.asarray(labels, dtype=np.int64),
        topo=np.stack(topo),
        topo_pert=np.stack(topo_pert),
    )


def iterate_batches(graphs: Sequence[Graph], indices: Sequence[int], batch_size: int,
                    rng: Optional[np.random.Generator] = None) -> Iterator[Batch]:
    """Mini-batches over ``indices``; shuffled when ``rng`` is given."""
    indices = np.asarray(indices, dtype=np.int64)
    if rng is not None:
        indices = rng.permutation(indices)
    for start in range(0, len(indices), batch_size):
        yield batch_graphs(graphs, indices[start:start + batch_size])


def _graph_topo(args):
    g, index, pi, perturb = args
    adj = g.adjacency()
    topo = hk_feature_vector(hop_distances(adj), pi)
    if perturb.p == 0.0:
        return topo, topo.copy()
    adj_p = perturb_edges(adj, perturb, rng=make_rng(perturb.seed, index))
    return topo, hk_feature_vector(hop_distances(adj_p), pi)


def attach_hk_features(bundle: DatasetBundle, pi: PiParams = PiParams(), perturb: PerturbConfig = PerturbConfig(),
                       features: FeatureConfig = FeatureConfig(), threads: int = 1) -> DatasetBundle:
    """New bundle whose graphs carry node features, ``topo`` and ``topo_pert``.

    Graph ``k``'s perturbation is drawn from ``make_rng(perturb.seed, k)``, so
    the result does not depend on ``threads`` or on processing order.
    """
    jobs = [(g, k, pi, perturb) for k, g in enumerate(bundle.graphs)]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            topos = list(pool.map(_graph_topo, jobs, chunksize=max(1, len(jobs) // (4 * threads))))
    else:
        topos = [_graph_topo(j) for j in jobs]
    graphs = []
    for g, (topo, topo_pert) in zip(bundle.graphs, topos):
        x = g.node_features
        if x is None or x.shape[1] == 0:
            x = one_hot_degree(node_degrees(g), features.d_max)
        graphs.append(replace(g, node_features=x, topo=topo, topo_pert=topo_pert))
    dims = {g.node_features.shape[1] for g in graphs}
    if len(dims) > 1:
        raise FormatError(f"graphs disagree on feature width: {sorted(dims)}")
    return DatasetBundle(bundle.name, graphs, bundle.num_classes, dims.pop() if dims else 0)


def default_data_dir() -> Path:
    return Path(os.environ.get("TOPOSTAB_DATA_DIR", Path(__file__).resolve().parents[2] / "data"))
