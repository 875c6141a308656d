"""AdamW, gradient clipping, the CE + stability objective, evaluation and the main loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from . import autodiff as ad
from .dataset import (Batch, DatasetBundle, FeatureConfig, StateError, attach_hk_features, iterate_batches,
                      parse_tudataset, stratified_split)
from .graph import PerturbConfig, drop_edges, make_rng
from .images import PiParams
from .model import LossConfig, ModelConfig, TopoGinHk, certify_radius, hk_stability_loss

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "topo", "stability", "full")


class NumericError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    seed: int = 42
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 32
    grad_clip_norm: float = 1.0
    eval_every: int = 5
    noisy_eval_drop_p: float = 0.1
    train_frac: float = 0.8

    def __post_init__(self):
        if self.epochs < 1 or self.learning_rate <= 0 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1 and learning_rate > 0")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    clean_acc: float
    noisy_acc: float
    cert_radius: float
    best: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


# -- optimisation --------------------------------------------------------------

def adamw_step(params: List[ad.Tensor], grads: List[Optional[np.ndarray]], state: Dict, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
    """One in-place AdamW update with decoupled weight decay and bias correction.

    ``state`` holds ``t`` and per-parameter first/second moments keyed by
    position in ``params``.
    """
    b1, b2 = betas
    state["t"] = t = state.get("t", 0) + 1
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    for k, (p, g) in enumerate(zip(params, grads)):
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        if g is None:
            continue
        m = m_all[k] = b1 * m_all.get(k, 0.0) + (1 - b1) * g
        v = v_all[k] = b2 * v_all.get(k, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)


class AdamW:
    def __init__(self, params: Iterable[ad.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.state: Dict = {}

    def step(self):
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr, self.betas, self.eps,
                   self.weight_decay)


def clip_grad_norm(params: Iterable[ad.Tensor], max_norm: float) -> float:
    """Rescale all grads so their global L2 norm is at most ``max_norm``; return the scale."""
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float((p.grad**2).sum()) for p in params)))
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad = p.grad * scale
    return scale


# -- epochs ----------------------------------------------------------------------

def batch_objective(model: TopoGinHk, batch: Batch, loss_cfg: LossConfig, rng) -> ad.Tensor:
    """CE on the clean-topo logits, plus the weighted stability term when enabled."""
    if batch.topo_pert is None:
        raise StateError("batch has no perturbed topological features")
    logits_o = model.forward_batch(batch, train=True, rng=rng)
    loss = ad.cross_entropy(logits_o, batch.labels)
    if loss_cfg.stability_weight > 0:
        logits_p = model.forward_batch(batch, topo=batch.topo_pert, train=True, rng=rng)
        stab = hk_stability_loss(logits_o, logits_p, batch.topo, batch.topo_pert, loss_cfg)
        loss = loss + stab * loss_cfg.stability_weight
    return loss


def train_epoch(batches: Iterable[Batch], model: TopoGinHk, opt: AdamW, cfg: TrainConfig, loss_cfg: LossConfig,
                rng: np.random.Generator) -> float:
    """One pass over ``batches``; returns the graph-weighted mean loss."""
    total, count = 0.0, 0
    params = list(model.parameters().values())
    for batch in batches:
        loss = batch_objective(model, batch, loss_cfg, rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss {value} on a batch of {batch.num_graphs} graphs")
        model.zero_grad()
        ad.backward(loss)
        clip_grad_norm(params, cfg.grad_clip_norm)
        opt.step()
        total += value * batch.num_graphs
        count += batch.num_graphs
    return total / count if count else 0.0


def predict(model: TopoGinHk, batch: Batch) -> np.ndarray:
    with ad.no_grad():
        return model.forward_batch(batch, train=False).data


def eval_acc(batches: Iterable[Batch], model: TopoGinHk, drop: bool = False, p: float = 0.0, seed: int = 0) -> float:
    """Accuracy with dropout off; ``drop`` removes each undirected edge with prob ``p``.

    Edge removal touches only the message-passing graph; the stored topo rows
    are used unchanged.
    """
    rng = make_rng(seed)
    correct = total = 0
    for batch in batches:
        if drop and p > 0:
            batch = batch.with_edges(drop_edges(batch.edges, p, rng=rng))
        pred = predict(model, batch).argmax(axis=1)
        correct += int((pred == batch.labels).sum())
        total += batch.num_graphs
    return correct / total if total else 0.0


def eval_cert(batches: Iterable[Batch], model: TopoGinHk, l_pi: float) -> float:
    radii = [certify_radius(predict(model, b), b.topo, b.topo_pert, l_pi) for b in batches]
    return float(np.mean(radii)) if radii else 0.0


def sn_operator_norms(model: TopoGinHk) -> Dict[str, float]:
    """Exact spectral norm of each normalised weight, W / (u . W v)."""
    return {
        name: float(np.linalg.norm(layer.weight.data, 2) / layer.sigma_estimate())
        for name, layer in model.sn_layers().items()
    }


# -- whole runs ----------------------------------------------------------------------

def variant_settings(variant: str, loss_cfg: LossConfig):
    """(use_topo, loss config) for one of the four ablation variants."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    use_topo = variant in ("topo", "full")
    if variant in ("stability", "full"):
        return use_topo, loss_cfg
    return use_topo, LossConfig(l_pi=loss_cfg.l_pi, lambda_kld=0.0, stability_weight=0.0, eps=loss_cfg.eps)


@dataclass
class RunConfig:
    dataset: str = "MUTAG"
    data_dir: Optional[str] = None
    variant: str = "full"
    pi: PiParams = field(default_factory=PiParams)
    perturb_p: float = 0.05
    features: FeatureConfig = field(default_factory=FeatureConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    hidden: int = 64
    dropout: float = 0.5
    threads: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"]["betas"] = list(d["train"]["betas"])
        return d


@dataclass
class RunResult:
    model: TopoGinHk
    history: List[EpochMetrics]
    final_clean: float
    final_noisy: float
    final_cert: float
    best: float
    rng_state: dict = field(default_factory=dict)
    seconds_features: float = 0.0


def fit(bundle: DatasetBundle, train_idx, test_idx, cfg: RunConfig,
        emit: Optional[Callable[[EpochMetrics], None]] = None,
        on_epoch: Optional[Callable[[int, TopoGinHk], None]] = None) -> RunResult:
    """Train on a feature-attached bundle and evaluate every ``eval_every`` epochs."""
    tc = cfg.train
    use_topo, loss_cfg = variant_settings(cfg.variant, cfg.loss)
    topo_dim = cfg.pi.dim
    model = TopoGinHk(
        ModelConfig(in_dim=bundle.feature_dim, n_cls=bundle.num_classes, topo_dim=topo_dim, hidden=cfg.hidden,
                    dropout=cfg.dropout, use_topo=use_topo),
        make_rng(tc.seed, 0),
    )
    opt = AdamW(model.parameters().values(), tc.learning_rate, tc.betas, tc.adam_eps, tc.weight_decay)
    shuffle_rng, dropout_rng = make_rng(tc.seed, 1), make_rng(tc.seed, 2)
    test_batches = list(iterate_batches(bundle.graphs, test_idx, tc.batch_size))
    history: List[EpochMetrics] = []
    best = 0.0
    for epoch in range(1, tc.epochs + 1):
        loss = train_epoch(iterate_batches(bundle.graphs, train_idx, tc.batch_size, shuffle_rng), model, opt, tc,
                           loss_cfg, dropout_rng)
        if on_epoch is not None:
            on_epoch(epoch, model)
        log.debug("epoch %d loss %.6f sn %s", epoch, loss, sn_operator_norms(model))
        if epoch % tc.eval_every == 0:
            clean = eval_acc(test_batches, model)
            noisy = eval_acc(test_batches, model, True, tc.noisy_eval_drop_p, seed=tc.seed + epoch)
            cert = eval_cert(test_batches, model, loss_cfg.l_pi)
            best = max(best, clean)
            m = EpochMetrics(epoch, loss, clean, noisy, cert, best)
            history.append(m)
            if emit is not None:
                emit(m)
            log.info("epoch %d loss %.4f clean %.4f noisy %.4f cert %.4g", epoch, loss, clean, noisy, cert)
    clean = eval_acc(test_batches, model)
    noisy = eval_acc(test_batches, model, True, tc.noisy_eval_drop_p, seed=tc.seed + tc.epochs + 1)
    cert = eval_cert(test_batches, model, loss_cfg.l_pi)
    best = max(best, clean)
    rng_state = {"shuffle": shuffle_rng.bit_generator.state, "dropout": dropout_rng.bit_generator.state}
    return RunResult(model, history, clean, noisy, cert, best, rng_state)


def prepare_dataset(cfg: RunConfig, data_dir) -> DatasetBundle:
    bundle = parse_tudataset(data_dir, cfg.dataset)
    return attach_hk_features(bundle, cfg.pi, PerturbConfig(cfg.perturb_p, cfg.train.seed), cfg.features,
                              threads=cfg.threads)


def run_main(cfg: RunConfig, data_dir=None, metrics_path=None, checkpoint_path=None,
             bundle: Optional[DatasetBundle] = None, on_epoch=None) -> RunResult:
    """Load, attach features, split, train and report in one call.

    Metrics go to ``metrics_path`` as JSON lines, one per evaluation point,
    followed by a summary object echoing the configuration.
    """
    import time

    start = time.perf_counter()
    if bundle is None:
        bundle = prepare_dataset(cfg, data_dir if data_dir is not None else cfg.data_dir)
    feat_seconds = time.perf_counter() - start
    train_idx, test_idx = stratified_split(bundle, cfg.train.train_frac, cfg.train.seed)
    lines: List[str] = []
    result = fit(bundle, train_idx, test_idx, cfg, emit=lambda m: lines.append(m.to_json()), on_epoch=on_epoch)
    result.seconds_features = feat_seconds
    summary = {
        "summary": True,
        "final_clean_acc": result.final_clean,
        "final_noisy_acc": result.final_noisy,
        "final_cert_radius": result.final_cert,
        "best": result.best,
        "num_train": int(len(train_idx)),
        "num_test": int(len(test_idx)),
        "config": cfg.to_dict(),
    }
    lines.append(json.dumps(summary, sort_keys=True))
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    if checkpoint_path is not None:
        result.model.save(checkpoint_path, hyper=cfg.to_dict(), rng_state=result.rng_state)
    return result
