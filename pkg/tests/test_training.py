import json
from dataclasses import replace

import numpy as np
import pytest

from topostab import autodiff as ad
from topostab.dataset import DatasetBundle, StateError, attach_hk_features, batch_graphs, iterate_batches, \
    stratified_split
from topostab.graph import Graph, make_rng
from topostab.model import LossConfig, ModelConfig, TopoGinHk
from topostab.training import (AdamW, NumericError, RunConfig, TrainConfig, adamw_step, batch_objective,
                               clip_grad_norm, eval_acc, eval_cert, fit, predict, run_main, sn_operator_norms,
                               train_epoch, variant_settings)

from conftest import synthetic_bundle


def model_for(bundle, hidden=8, dropout=0.5, seed=5, use_topo=True):
    cfg = ModelConfig(bundle.feature_dim, bundle.num_classes, bundle.graphs[0].topo.size, hidden, dropout, use_topo)
    return TopoGinHk(cfg, make_rng(seed))


def quick_cfg(**train):
    base = dict(epochs=10, seed=3, batch_size=4, eval_every=5)
    base.update(train)
    return RunConfig(dataset="SYN", hidden=8, train=TrainConfig(**base))


# -- optimiser ---------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = ad.parameter([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], {}, lr=0.1, weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_decay_only():
    p = ad.parameter([1.0, -2.0])
    adamw_step([p], [np.zeros(2)], {}, lr=1e-3, weight_decay=0.01)
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 1e-3 * 0.01), rtol=0, atol=1e-15)


def test_adamw_constant_gradient_step_size():
    p = ad.parameter([0.0, 0.0])
    state, lr = {}, 1e-3
    prev = p.data.copy()
    for _ in range(500):
        adamw_step([p], [np.array([0.3, -7.0])], state, lr=lr)
        step = np.abs(p.data - prev)
        assert np.all(step <= lr * (1 + 1e-6))
        prev = p.data.copy()
    np.testing.assert_allclose(step, lr, rtol=1e-4)


def test_adamw_matches_reference_formula():
    rng = make_rng(0)
    w0, grads = rng.standard_normal(3), rng.standard_normal((4, 3))
    p = ad.parameter(w0.copy())
    state = {}
    m = v = np.zeros(3)
    w = w0.copy()
    for t, g in enumerate(grads, 1):
        adamw_step([p], [g], state, 1e-2, (0.9, 0.999), 1e-8, 0.01)
        w = w - 1e-2 * 0.01 * w
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 1e-2 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, w, rtol=1e-14)


def test_clip_examples():
    p = ad.parameter([0.0, 0.0])
    p.grad = np.array([0.3, 0.4])
    assert clip_grad_norm([p], 1.0) == 1.0
    np.testing.assert_array_equal(p.grad, [0.3, 0.4])
    p.grad = np.array([3.0, 4.0])
    clip_grad_norm([p], 1.0)
    np.testing.assert_allclose(p.grad, [0.6, 0.8])
    a, b = ad.parameter(np.zeros(3)), ad.parameter(np.zeros(2))
    a.grad, b.grad = np.array([6.0, 0.0, 0.0]), np.array([0.0, 8.0])
    clip_grad_norm([a, b], 1.0)
    assert np.sqrt((a.grad**2).sum() + (b.grad**2).sum()) == pytest.approx(1.0, abs=1e-9)


# -- objective and epochs ----------------------------------------------------------

def test_baseline_objective_is_plain_ce(small_bundle):
    model = model_for(small_bundle)
    batch = batch_graphs(small_bundle.graphs, range(6))
    off = LossConfig(lambda_kld=0.0, stability_weight=0.0)
    got = batch_objective(model, batch, off, make_rng(9)).data
    ce = ad.cross_entropy(model.forward_batch(batch, train=True, rng=make_rng(9)), batch.labels).data
    assert got == ce


def test_objective_pure_given_seed(small_bundle, monkeypatch):
    from topostab.model import SnLinear
    monkeypatch.setattr(SnLinear, "power_iterate", lambda self, steps=1: None)
    model = model_for(small_bundle)
    batch = batch_graphs(small_bundle.graphs, range(6))
    a = batch_objective(model, batch, LossConfig(), make_rng(4)).data
    b = batch_objective(model, batch, LossConfig(), make_rng(4)).data
    assert a == b


def test_train_epoch_requires_topo_pert(small_bundle):
    model = model_for(small_bundle)
    batch = replace(batch_graphs(small_bundle.graphs, [0, 1]), topo_pert=None)
    with pytest.raises(StateError):
        train_epoch([batch], model, AdamW(model.parameters().values()), TrainConfig(), LossConfig(), make_rng(0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_epoch_rejects_nan(small_bundle):
    model = model_for(small_bundle)
    model.classifier.bias.data[:] = np.nan
    batch = batch_graphs(small_bundle.graphs, [0, 1])
    with pytest.raises(NumericError):
        train_epoch([batch], model, AdamW(model.parameters().values()), TrainConfig(), LossConfig(), make_rng(0))


def test_loss_decreases_on_mutag(mutag_dir):
    from topostab.dataset import parse_tudataset
    bundle = attach_hk_features(parse_tudataset(mutag_dir, "MUTAG"))
    tr, _ = stratified_split(bundle, 0.8, 42)
    model = model_for(bundle, hidden=64)
    opt = AdamW(model.parameters().values())
    tc, shuffle, drop = TrainConfig(), make_rng(42, 1), make_rng(42, 2)
    losses = [train_epoch(iterate_batches(bundle.graphs, tr, 32, shuffle), model, opt, tc, LossConfig(), drop)
              for _ in range(50)]
    assert np.mean(losses[:5]) > np.mean(losses[-5:])
    assert losses[0] > losses[49]


# -- evaluation --------------------------------------------------------------------

def test_eval_deterministic_and_drop_extremes(small_bundle):
    model = model_for(small_bundle)
    batches = list(iterate_batches(small_bundle.graphs, range(12), 5))
    assert eval_acc(batches, model) == eval_acc(batches, model)
    assert eval_acc(batches, model, True, 0.3, seed=7) == eval_acc(batches, model, True, 0.3, seed=7)
    edgeless = [b.with_edges(np.zeros((0, 2), dtype=np.int64)) for b in batches]
    assert eval_acc(batches, model, True, 1.0, seed=1) == eval_acc(edgeless, model)
    assert 0.0 <= eval_acc(batches, model, True, 0.5) <= 1.0


def test_memorisation_reaches_full_accuracy():
    graphs = [Graph.from_edges(n, [(k, k + 1) for k in range(n - 1)], label=n % 2) for n in range(1, 9)]
    bundle = attach_hk_features(DatasetBundle("PATHS", graphs, 2, 0))
    idx = np.arange(8)
    cfg = RunConfig(dataset="PATHS", hidden=16, dropout=0.0, variant="baseline",
                    train=TrainConfig(epochs=300, seed=0, learning_rate=1e-2, batch_size=8, eval_every=300))
    result = fit(bundle, idx, idx, cfg)
    assert result.final_clean == 1.0


def test_eval_cert_empty_and_uniform(small_bundle):
    model = model_for(small_bundle)
    assert eval_cert([], model, 1.0) == 0.0
    cls = model.classifier
    cls.weight.data[:] = cls.weight.data[0]
    cls.bias.data[:] = 0.0
    batches = list(iterate_batches(small_bundle.graphs, range(12), 4))
    assert eval_cert(batches, model, 1.0) == pytest.approx(0.0, abs=1e-6)


def test_eval_cert_grows_as_l_pi_shrinks(small_bundle):
    model = model_for(small_bundle)
    batches = list(iterate_batches(small_bundle.graphs, range(12), 4))
    radii = [eval_cert(batches, model, l) for l in (4.0, 1.0, 0.25)]
    assert radii[0] <= radii[1] <= radii[2]


# -- whole runs ----------------------------------------------------------------------

def test_variants():
    lc = LossConfig()
    assert variant_settings("baseline", lc) == (False, LossConfig(lambda_kld=0.0, stability_weight=0.0))
    assert variant_settings("topo", lc)[0] and variant_settings("topo", lc)[1].stability_weight == 0
    assert variant_settings("stability", lc) == (False, lc)
    assert variant_settings("full", lc) == (True, lc)
    with pytest.raises(ValueError):
        variant_settings("other", lc)


def test_fit_schedule_and_running_best(small_bundle):
    tr, te = stratified_split(small_bundle, 0.8, 0)
    result = fit(small_bundle, tr, te, quick_cfg(epochs=20))
    assert [m.epoch for m in result.history] == [5, 10, 15, 20]
    best = [m.best for m in result.history]
    assert best == list(np.maximum.accumulate([m.clean_acc for m in result.history]))
    assert all(0 <= m.clean_acc <= 1 and 0 <= m.noisy_acc <= 1 and m.cert_radius >= 0 for m in result.history)


def test_sn_estimate_tracks_trained_weights(small_bundle):
    # A short run on a tiny fixture gives the power iteration few steps, so
    # the estimate may lag; continuing the iteration must close the gap.
    tr, te = stratified_split(small_bundle, 0.8, 0)
    model = fit(small_bundle, tr, te, quick_cfg(epochs=20)).model
    for layer in model.sn_layers().values():
        layer.power_iterate(2000)
    assert max(sn_operator_norms(model).values()) <= 1.01


def test_run_main_byte_identical(small_bundle, tmp_path):
    paths = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        run_main(quick_cfg(), bundle=small_bundle, metrics_path=d / "m.jsonl", checkpoint_path=d / "c.ckpt")
        paths.append(d)
    assert (paths[0] / "m.jsonl").read_bytes() == (paths[1] / "m.jsonl").read_bytes()
    assert (paths[0] / "c.ckpt").read_bytes() == (paths[1] / "c.ckpt").read_bytes()
    rows = [json.loads(x) for x in (paths[0] / "m.jsonl").read_text().splitlines()]
    assert set(rows[0]) == {"epoch", "train_loss", "clean_acc", "noisy_acc", "cert_radius", "best"}
    assert rows[-1]["summary"] and rows[-1]["config"]["train"]["seed"] == 3


def test_different_seed_changes_run(small_bundle):
    a = fit(small_bundle, *stratified_split(small_bundle, 0.8, 0), quick_cfg(seed=1))
    b = fit(small_bundle, *stratified_split(small_bundle, 0.8, 0), quick_cfg(seed=2))
    assert [m.train_loss for m in a.history] != [m.train_loss for m in b.history]


def test_predict_has_no_tape(small_bundle):
    model = model_for(small_bundle)
    out = predict(model, batch_graphs(small_bundle.graphs, [0, 1]))
    assert out.shape == (2, 2)
