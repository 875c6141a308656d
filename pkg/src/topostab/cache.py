"""Feature cache: per-graph ``topo`` and ``topo_pert`` rows as version-tagged text.

Layout::

    # topostab-features v1
    # {"dataset": ..., "dim": D, "num_graphs": N, ...}   (JSON, sorted keys)
    graph_id,topo_0,...,topo_{D-1},pert_0,...,pert_{D-1}

Floats are written with ``repr`` so a read-write round trip is exact and
identical inputs give identical bytes.
"""
from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path
from typing import Tuple

import numpy as np

from .dataset import DatasetBundle, FeatureConfig, FormatError
from .graph import node_degrees, one_hot_degree

MAGIC = "# topostab-features v1"


def write_feature_cache(path, bundle: DatasetBundle, meta: dict) -> None:
    dim = len(bundle.graphs[0].topo) if bundle.graphs else 0
    header = dict(meta, dim=dim, num_graphs=len(bundle.graphs), dataset=bundle.name)
    lines = [MAGIC, "# " + json.dumps(header, sort_keys=True)]
    for k, g in enumerate(bundle.graphs):
        values = np.concatenate([g.topo, g.topo_pert])
        lines.append(",".join([str(k)] + [repr(float(v)) for v in values]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_feature_cache(path) -> Tuple[dict, np.ndarray, np.ndarray]:
    """Return (header, topo, topo_pert) with arrays of shape (N, D)."""
    path = Path(path)
    with open(path) as fh:
        first = fh.readline().rstrip("\n")
        if first != MAGIC:
            raise FormatError(f"{path}: not a version-1 feature cache")
        header = json.loads(fh.readline()[2:])
        dim, n = header["dim"], header["num_graphs"]
        topo, pert = np.zeros((n, dim)), np.zeros((n, dim))
        for lineno, line in enumerate(fh, 3):
            parts = line.rstrip("\n").split(",")
            if len(parts) != 1 + 2 * dim:
                raise FormatError(f"{path}:{lineno}: expected {1 + 2 * dim} fields, got {len(parts)}")
            k = int(parts[0])
            row = np.array([float(v) for v in parts[1:]])
            topo[k], pert[k] = row[:dim], row[dim:]
    return header, topo, pert


def attach_cached(bundle: DatasetBundle, topo: np.ndarray, topo_pert: np.ndarray,
                  features: FeatureConfig = FeatureConfig()) -> DatasetBundle:
    """Attach cached topo rows (and degree features where needed) without recomputing."""
    if len(topo) != len(bundle.graphs):
        raise FormatError(f"cache has {len(topo)} rows for {len(bundle.graphs)} graphs")
    graphs = []
    for g, t, tp in zip(bundle.graphs, topo, topo_pert):
        x = g.node_features
        if x is None or x.shape[1] == 0:
            x = one_hot_degree(node_degrees(g), features.d_max)
        graphs.append(replace(g, node_features=x, topo=t.copy(), topo_pert=tp.copy()))
    dim = graphs[0].node_features.shape[1] if graphs else 0
    return DatasetBundle(bundle.name, graphs, bundle.num_classes, dim)
