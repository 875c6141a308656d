"""TopoGIN-HK classifier, HK stability loss and the proxy certified radius."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tensor

CLAMP_EPS = 1e-8
CHECKPOINT_MAGIC = b"TOPOSTAB-CHECKPOINT 1\n"


class CheckpointMismatch(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    l_pi: float = 1.0
    lambda_kld: float = 0.1
    stability_weight: float = 0.3
    eps: float = CLAMP_EPS

    def __post_init__(self):
        if self.l_pi <= 0:
            raise ValueError("l_pi must be positive")
        if self.lambda_kld < 0 or self.stability_weight < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class ModelConfig:
    in_dim: int
    n_cls: int
    topo_dim: int
    hidden: int = 64
    dropout: float = 0.5
    use_topo: bool = True
    power_warmup: int = 500


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _normalize(v):
    n = np.linalg.norm(v)
    return v / max(n, 1e-12)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        self.weight = ad.parameter(_uniform(rng, in_dim, (out_dim, in_dim)))
        self.bias = ad.parameter(_uniform(rng, in_dim, (out_dim,)))

    def parameters(self) -> Dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}

    def __call__(self, x):
        return ad.matmul(x, self.weight.T) + self.bias


class SnLinear(Linear):
    """Linear layer whose weight is divided by a power-iteration estimate of
    its top singular value.

    ``u`` (output side) and ``v`` (input side) persist between calls. Each
    training-mode call advances the iteration one step before normalising;
    eval-mode calls reuse the stored vectors unchanged. The estimate
    ``u . W v`` is part of the graph, so gradients see the normalisation.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, warmup: int = 500):
        super().__init__(in_dim, out_dim, rng)
        self.u = _normalize(rng.standard_normal(out_dim))
        self.v = _normalize(self.weight.data.T @ self.u)
        self.power_iterate(warmup)

    def power_iterate(self, steps: int = 1):
        w = self.weight.data
        for _ in range(steps):
            self.v = _normalize(w.T @ self.u)
            self.u = _normalize(w @ self.v)

    def sigma_estimate(self) -> float:
        return float(self.u @ self.weight.data @ self.v)

    def normalized_weight(self) -> Tensor:
        wv = ad.matmul(self.weight, self.v[:, None])
        sigma = ad.sum_(ad.mul(wv, self.u[:, None]))
        return ad.div(self.weight, sigma)

    def __call__(self, x, train: bool = False):
        if train:
            self.power_iterate(1)
        return ad.matmul(x, self.normalized_weight().T) + self.bias


class GinConv:
    """out_i = MLP((1 + eps) x_i + sum of neighbour rows), eps fixed at 0."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator, eps: float = 0.0):
        self.eps = eps
        self.lin1 = Linear(in_dim, hidden, rng)
        self.lin2 = Linear(hidden, hidden, rng)

    def parameters(self):
        return {f"lin1.{k}": v for k, v in self.lin1.parameters().items()} | {
            f"lin2.{k}": v for k, v in self.lin2.parameters().items()
        }

    def mlp(self, h):
        return self.lin2(ad.relu(self.lin1(h)))

    def __call__(self, x, adj: sp.spmatrix):
        agg = ad.spmm(adj, x)
        return self.mlp(agg + (x * (1.0 + self.eps) if self.eps else x))


def _as_adjacency(edges, num_nodes: int) -> sp.csr_matrix:
    if sp.issparse(edges):
        return edges.tocsr()
    e = np.asarray(edges, dtype=np.int64)
    if e.ndim == 2 and e.shape[0] == 2 and e.shape[1] != 2:
        rows, cols = e[0], e[1]  # directed edge_index
    else:
        e = e.reshape(-1, 2)
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(num_nodes, num_nodes))


class TopoGinHk:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        h = cfg.hidden
        self.gin1 = GinConv(cfg.in_dim, h, rng)
        self.gin2 = GinConv(h, h, rng)
        self.topo_proj = SnLinear(cfg.topo_dim, h, rng, cfg.power_warmup) if cfg.use_topo else None
        self.fusion = SnLinear(2 * h if cfg.use_topo else h, h, rng, cfg.power_warmup)
        self.classifier = SnLinear(h, cfg.n_cls, rng, cfg.power_warmup)

    def sn_layers(self) -> Dict[str, SnLinear]:
        layers = {"fusion": self.fusion, "classifier": self.classifier}
        if self.topo_proj is not None:
            layers = {"topo_proj": self.topo_proj} | layers
        return layers

    def parameters(self) -> Dict[str, Tensor]:
        out = {}
        for name, mod in [("gin1", self.gin1), ("gin2", self.gin2)] + list(self.sn_layers().items()):
            out.update({f"{name}.{k}": v for k, v in mod.parameters().items()})
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, layer in self.sn_layers().items():
            out[f"{name}.u"] = layer.u
            out[f"{name}.v"] = layer.v
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    def forward(self, x, edges, batch_vector, topo, train: bool = False, rng=None) -> Tensor:
        """Logits of shape (num_graphs, n_cls).

        ``edges`` may be a sparse adjacency, an (E, 2) undirected pair list or
        a (2, E) directed edge index. ``topo`` must have one row per graph.
        """
        x = ad.as_tensor(x)
        batch_vector = np.asarray(batch_vector, dtype=np.int64)
        topo = np.asarray(topo, dtype=np.float64)
        d = self.cfg.topo_dim
        if topo.ndim == 1 and topo.size % d == 0:
            topo = topo.reshape(-1, d)
        num_graphs = topo.shape[0]
        if topo.ndim != 2 or topo.shape[1] != d or (len(batch_vector) and batch_vector.max() >= num_graphs):
            raise ad.ShapeError(f"topo has shape {topo.shape}, expected (num_graphs, {d})")
        adj = _as_adjacency(edges, x.shape[0])
        rate = self.cfg.dropout
        h = self.gin1(x, adj)
        h = ad.dropout(h, rate, train, rng)
        h = self.gin2(h, adj)
        g = ad.scatter_add_pool(h, batch_vector, num_graphs)
        if self.topo_proj is not None:
            g_topo = self.topo_proj(ad.relu(ad.as_tensor(topo)), train)
            g = ad.concat([g, g_topo], axis=1)
        g = ad.elu(self.fusion(g, train))
        g = ad.dropout(g, rate, train, rng)
        return self.classifier(g, train)

    def forward_batch(self, batch, topo=None, train: bool = False, rng=None) -> Tensor:
        return self.forward(batch.node_features, batch.adjacency, batch.batch_vector,
                            batch.topo if topo is None else topo, train, rng)

    def save(self, path, hyper: Optional[dict] = None, rng_state: Optional[dict] = None):
        """Write a versioned flat checkpoint: magic line, JSON header line, raw float64 data."""
        arrays = {k: v.data for k, v in self.parameters().items()} | self.buffers()
        entries, blobs, offset = [], [], 0
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name], dtype="<f8")
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            blobs.append(arr.tobytes())
            offset += arr.nbytes
        header = {"arch": asdict(self.cfg), "hyper": hyper or {}, "rng_state": rng_state, "tensors": entries}
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for blob in blobs:
                fh.write(blob)

    @classmethod
    def load(cls, path, expect: Optional[ModelConfig] = None) -> "TopoGinHk":
        header, arrays = read_checkpoint(path)
        cfg = ModelConfig(**header["arch"])
        if expect is not None and expect != cfg:
            raise CheckpointMismatch(f"checkpoint architecture {cfg} does not match expected {expect}")
        model = cls(cfg, np.random.default_rng(0))
        params = model.parameters()
        layers = model.sn_layers()
        expected = set(params) | set(model.buffers())
        if expected != set(arrays):
            raise CheckpointMismatch(f"checkpoint tensors {sorted(arrays)} do not match model {sorted(expected)}")
        for name, arr in arrays.items():
            if name in params:
                if params[name].shape != arr.shape:
                    raise CheckpointMismatch(f"{name}: checkpoint shape {arr.shape} vs model {params[name].shape}")
                params[name].data = arr.copy()
            else:
                layer, vec = name.rsplit(".", 1)
                setattr(layers[layer], vec, arr.copy())
        return model


def read_checkpoint(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_MAGIC):
        raise CheckpointMismatch(f"{path} is not a version-1 checkpoint")
    rest = raw[len(CHECKPOINT_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    data = rest[nl + 1:]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"]).reshape(e["shape"])
    return header, arrays


def hk_stability_loss(logits_o, logits_p, topo, topo_pert, cfg: LossConfig = LossConfig()) -> Tensor:
    """mean_i max(0, |lo_i - lp_i|_2 - L_pi * max(|t_i - t'_i|_2, eps))
    plus lambda_kld times the symmetric KL of the two softmax outputs."""
    logits_o, logits_p = ad.as_tensor(logits_o), ad.as_tensor(logits_p)
    b = logits_o.shape[0]
    topo = np.asarray(topo, dtype=np.float64).reshape(b, -1)
    topo_pert = np.asarray(topo_pert, dtype=np.float64).reshape(b, -1)
    d_pi = np.maximum(np.linalg.norm(topo - topo_pert, axis=1), cfg.eps)
    d_logit = ad.rowwise_l2(logits_o - logits_p)
    loss = ad.mean(ad.hinge(d_logit - cfg.l_pi * d_pi))
    if cfg.lambda_kld > 0:
        lo, lp = ad.log_softmax(logits_o), ad.log_softmax(logits_p)
        loss = loss + (ad.kl_divergence(lo, lp) + ad.kl_divergence(lp, lo)) * cfg.lambda_kld
    return loss


def softmax_margin(logits) -> np.ndarray:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    top2 = np.sort(p, axis=1)[:, -2:]
    return top2[:, 1] - top2[:, 0]


def certify_radius(logits, topo, topo_pert, l_pi: float, eps: float = CLAMP_EPS) -> float:
    """Mean over graphs of (top1 - top2 probability) / (L_pi * max(|t - t'|_1, eps))."""
    margin = softmax_margin(logits)
    b = len(margin)
    topo = np.asarray(topo, dtype=np.float64).reshape(b, -1)
    topo_pert = np.asarray(topo_pert, dtype=np.float64).reshape(b, -1)
    d_pi = np.maximum(np.abs(topo - topo_pert).sum(axis=1), eps)
    return float(np.mean(margin / (l_pi * d_pi)))
