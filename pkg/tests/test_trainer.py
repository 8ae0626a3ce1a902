import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from voxda import losses as L
from voxda import metrics as Me
from voxda import model as M
from voxda import tensor as T
from voxda import trainer as Tr
from voxda.data import GenConfig, MixedBatchLoader, build_dataset, read_dataset

NET = M.NetworkConfig(image_size=16, voxel_size=8, num_classes=3, latent_dim=16,
                      channel_widths=(4, 8), refiner_channels=2)


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("ds")
    build_dataset(GenConfig(classes=3, instances=4, views=2, target_profile="wild", voxel_size=8,
                            image_size=16, seed=1), path)
    return path


@pytest.fixture(scope="module")
def ds(dataset_dir):
    return read_dataset(dataset_dir)


def cfg(method="dann+class", epochs=2, **kw):
    return Tr.TrainConfig(epochs=epochs, batch_size=8, method=method, weights=Tr.method_weights(method),
                          network=NET, **kw)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

def test_adam_matches_hand_trace():
    theta = np.array([0.5, -1.0, 2.0])
    grads = [np.array([0.1, -0.2, 0.3]), np.array([-0.4, 0.5, 0.0]), np.array([1.0, 1.0, -1.0])]
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    # scalar trace, written out independently
    expected = theta.tolist()
    m = [0.0] * 3
    v = [0.0] * 3
    for t, g in enumerate(grads, start=1):
        for i in range(3):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mhat = m[i] / (1 - b1 ** t)
            vhat = v[i] / (1 - b2 ** t)
            expected[i] -= lr * mhat / (math.sqrt(vhat) + eps)
    state = Tr.AdamState()
    p = {"w": theta.copy()}
    for g in grads:
        Tr.adam_step(p, {"w": g}, state, lr, b1, b2, eps)
    assert state.t == 3
    np.testing.assert_allclose(p["w"], expected, rtol=0, atol=1e-10)


def test_adam_first_step_moves_by_lr():
    p = {"w": np.array([1.0, -1.0])}
    Tr.adam_step(p, {"w": np.array([3.0, -0.01])}, Tr.AdamState(), 0.1)
    np.testing.assert_allclose(p["w"], [0.9, -0.9], atol=1e-6)


def test_adam_zero_gradient_is_noop():
    p = {"w": np.array([1.5, -2.0]), "b": np.array([0.25])}
    before = {k: v.copy() for k, v in p.items()}
    state = Tr.AdamState()
    for _ in range(3):
        Tr.adam_step(p, {"w": np.zeros(2), "b": None}, state, 0.1)
    for k in p:
        assert np.array_equal(p[k], before[k])


def test_adam_minimizes_quadratic():
    p = {"w": np.array([3.0, -2.0, 0.5])}
    state = Tr.AdamState()
    for _ in range(2000):
        Tr.adam_step(p, {"w": 2 * p["w"]}, state, 0.01)
    assert np.abs(p["w"]).max() < 1e-2


def test_adam_nan_gradient_names_parameter():
    p = {"encoder.fc.weight": np.ones(2), "decoder.fc.bias": np.ones(2)}
    state = Tr.AdamState()
    with pytest.raises(FloatingPointError, match="decoder.fc.bias"):
        Tr.adam_step(p, {"encoder.fc.weight": np.ones(2), "decoder.fc.bias": np.array([np.nan, 0])}, state, 0.1)
    assert state.t == 0 and np.array_equal(p["encoder.fc.weight"], np.ones(2))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        Tr.adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, Tr.AdamState(), 0.1)


# ---------------------------------------------------------------------------
# schedule and presets
# ---------------------------------------------------------------------------

def test_grl_ramp_values():
    assert Tr.grl_schedule(0, 10) == 0.0
    assert Tr.grl_schedule(5, 10) == pytest.approx(2 / (1 + math.exp(-5)) - 1)
    vals = [Tr.grl_schedule(e, 30, lam_max=0.5) for e in range(30)]
    assert all(a < b for a, b in zip(vals, vals[1:]))
    assert 0 <= min(vals) and max(vals) < 0.5


def test_grl_constant_and_errors():
    assert Tr.grl_schedule(3, 10, "constant", 0.7) == 0.7
    with pytest.raises(ValueError):
        Tr.grl_schedule(0, 10, "cosine")


def test_method_presets():
    none = Tr.method_weights("none")
    assert (none.w_domain, none.w_class, none.w_coral, none.w_mmd) == (0, 0, 0, 0)
    assert not none.uses_target
    dc = Tr.method_weights("dann+class")
    assert dc.w_domain > 0 and dc.w_class > 0 and dc.w_coral == 0 and dc.w_mmd == 0
    assert Tr.method_weights("coral").w_coral > 0 and Tr.method_weights("mmd").w_mmd > 0
    assert Tr.method_weights("dann", w_domain=0.5).w_domain == 0.5
    with pytest.raises(ValueError):
        Tr.method_weights("adda")


@pytest.mark.parametrize("kwargs", [{"epochs": 0}, {"batch_size": 7}, {"batch_size": 2}, {"lr": 0.0},
                                    {"grl_mode": "step"}, {"eval_every": 0}])
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        Tr.TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def test_target_ground_truth_is_never_read(ds):
    src, tgt = ds.arrays("train", "source"), ds.arrays("train", "target")
    c = cfg(epochs=1)
    p_real, _ = Tr.fit_arrays(src, tgt, NET, c)
    poisoned = replace(tgt, voxels=np.full_like(tgt.voxels, np.nan))
    p_poison, _ = Tr.fit_arrays(src, poisoned, NET, c)
    empty = replace(tgt, voxels=np.empty((0,), np.float32))
    p_empty, _ = Tr.fit_arrays(src, empty, NET, c)
    for k, v in p_real.arrays().items():
        assert np.array_equal(v, p_poison.arrays()[k]) and np.array_equal(v, p_empty.arrays()[k])


def test_method_none_is_plain_reconstruction(ds):
    src = ds.arrays("train", "source")
    c = cfg("none", epochs=2)
    got, _ = Tr.fit_arrays(src, ds.arrays("train", "target"), NET, c)

    # reference loop built directly from the model and loss functions
    params = M.init_params(NET, c.seed)
    state = Tr.AdamState()
    loader = MixedBatchLoader(len(src), len(src), c.batch_size, c.seed)
    for epoch in range(c.epochs):
        for si, _ in loader.epoch(epoch):
            raw = M.decode(M.encode(src.images[si], params, NET, "train"), params, NET, "train")
            refined = M.refine(raw, params, NET, "train")
            loss = T.scale(L.recon_loss(refined, src.voxels[si]) + L.recon_loss(raw, src.voxels[si]), 0.5)
            params.zero_grad()
            loss.backward()
            Tr.adam_step({k: t.data for k, t in params.tensors.items()},
                         {k: t.grad for k, t in params.tensors.items()}, state, c.lr)
    for k, v in params.arrays().items():
        assert np.array_equal(v, got.arrays()[k]), k


def test_needs_target_for_adaptation(ds):
    with pytest.raises(ValueError):
        Tr.fit_arrays(ds.arrays("train", "source"), None, NET, cfg("dann"))


def test_same_seed_same_result_different_seed_differs(ds):
    src, tgt = ds.arrays("train", "source"), ds.arrays("train", "target")
    ev = ds.arrays("test", "source"), ds.arrays("test", "target")
    a, log_a = Tr.fit_arrays(src, tgt, NET, cfg(), *ev)
    b, log_b = Tr.fit_arrays(src, tgt, NET, cfg(), *ev)
    c, _ = Tr.fit_arrays(src, tgt, NET, cfg(seed=1), *ev)
    assert M.checkpoint_bytes(NET, a) == M.checkpoint_bytes(NET, b)
    assert log_a.to_csv() == log_b.to_csv()
    assert M.checkpoint_bytes(NET, a) != M.checkpoint_bytes(NET, c)


def test_class_head_learns_from_source_only(ds):
    src, tgt = ds.arrays("train", "source"), ds.arrays("train", "target")
    net64 = NET
    weights = L.LossWeights(w_domain=0.0, w_class=1.0)
    params = M.init_params(net64, 0)
    si, ti = np.arange(4), np.arange(4)
    Tr.train_step(params, net64, weights, src.images[si], src.voxels[si], src.labels[si],
                  tgt.images[ti], tgt.labels[ti], 0.0, head_source_only=True)
    got = {k: t.grad.copy() for k, t in params.tensors.items() if k.startswith("class_head")}

    # head gradient of the class term alone, using source rows only (mean over all 8 rows)
    x = np.concatenate([src.images[si], tgt.images[ti]])
    refined = M.refine(M.decode(M.encode(x, params, net64, "train", 4), params, net64, "train", 4),
                       params, net64, "train", 4)
    src_part = T.scale(L.class_loss(M.classify_voxel(refined[:4], params, net64), src.labels[si]), 0.5)
    params.zero_grad()
    src_part.backward()
    for k, g in got.items():
        np.testing.assert_allclose(g, params.tensors[k].grad, rtol=1e-4, atol=1e-7, err_msg=k)


def test_source_bn_stats_isolate_source_rows(ds):
    src, tgt = ds.arrays("train", "source"), ds.arrays("train", "target")
    weights = L.LossWeights(w_domain=1.0, w_class=0.0)
    recon = {}
    for flag in (True, False):
        for ti in (np.arange(4), np.arange(4, 8)):
            params = M.init_params(NET, 0)
            rep = Tr.train_step(params, NET, weights, src.images[:4], src.voxels[:4], src.labels[:4],
                                tgt.images[ti], tgt.labels[ti], 1.0, source_bn_stats=flag)
            recon[flag, ti[0]] = rep.parts["recon"]
    # the source reconstruction cannot see which target images share the batch
    assert recon[True, 0] == recon[True, 4]
    assert recon[False, 0] != recon[False, 4]


def test_class_loss_reaches_decoder_from_target(ds):
    src, tgt = ds.arrays("train", "source"), ds.arrays("train", "target")
    weights = L.LossWeights(w_domain=0.0, w_class=1.0)
    grads = []
    for labels in (tgt.labels[:4], (tgt.labels[:4] + 1) % 3):
        params = M.init_params(NET, 0)
        Tr.train_step(params, NET, weights, src.images[:4], src.voxels[:4], src.labels[:4],
                      tgt.images[:4], labels, 0.0)
        grads.append(params.tensors["decoder.fc.weight"].grad.copy())
    # target labels influence the decoder even though the head ignores them
    assert not np.allclose(grads[0], grads[1])


def test_random_init_iou_is_low(ds):
    res = Tr.evaluate_arrays(M.init_params(NET, 0), NET, ds.arrays("test", "source"), None, ds.class_names)
    assert 0.0 <= res.overall("source") <= 0.5


def test_reconstruction_training_improves_iou(tmp_path):
    # default-width network; the tiny one is too small to fit sparse grids
    build_dataset(GenConfig(classes=2, instances=3, views=8, seed=1), tmp_path)
    src = read_dataset(tmp_path).arrays("train", "source")
    net = M.NetworkConfig(num_classes=2)
    before = Tr.evaluate_arrays(M.init_params(net, 0), net, src, None, ["a", "b"]).overall("source")
    c = Tr.TrainConfig(epochs=20, batch_size=16, method="none", weights=Tr.method_weights("none"),
                       network=net, eval_every=20)
    _, log = Tr.fit_arrays(src, None, net, c, src)
    assert log.records[-1].iou_source > before + 0.05
    assert log.column("loss_recon")[-1] < log.column("loss_recon")[0]


# ---------------------------------------------------------------------------
# train() outputs and evaluate()
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset_dir):
    out = tmp_path_factory.mktemp("run")
    c = replace(cfg("dann+class", epochs=3), data_dir=str(dataset_dir), out_dir=str(out))
    _, log = Tr.train(c)
    return out, log, c


def test_train_writes_outputs(trained):
    out, log, c = trained
    assert {p.name for p in out.iterdir()} == {"checkpoint.vxda", "train_log.csv", "iou_report.csv",
                                               "train_config.json"}
    rows = list(csv.reader(io.StringIO((out / "train_log.csv").read_text())))
    assert tuple(rows[0]) == Tr.LOG_COLUMNS and len(rows) == 1 + c.epochs
    assert (out / "train_log.csv").read_text() == log.to_csv()


def test_evaluate_reproduces_final_log_row(trained, ds):
    out, log, c = trained
    res = Tr.evaluate(out / "checkpoint.vxda", ds, Me.EvalConfig(), c.method)
    last = log.records[-1]
    assert res.overall("source") == last.iou_source
    assert res.overall("target") == last.iou_target
    assert res.domain_acc == last.domain_acc
    assert Me.reports_to_csv(res.reports) == (out / "iou_report.csv").read_text()


def test_threshold_sweep(trained, ds):
    out, _, _ = trained
    config, params = M.load_checkpoint(out / "checkpoint.vxda")
    split = ds.arrays("test", "source")
    probs = Tr.predict_voxels(params, config, split.images)
    for t in (0.3, 0.4, 0.5):
        res = Tr.evaluate(out / "checkpoint.vxda", ds, Me.EvalConfig(threshold=t, domain="source"))
        assert res.reports[0].threshold == t
        assert res.overall("source") == pytest.approx(Me.batch_iou(probs, split.voxels, t).mean(), abs=1e-12)


def test_evaluate_rejects_mismatched_network(trained, ds):
    out, _, _ = trained
    with pytest.raises(ValueError):
        Tr.evaluate(out / "checkpoint.vxda", ds, network=replace(NET, latent_dim=32))


def test_evaluate_rejects_incompatible_dataset(trained, tmp_path):
    out, _, _ = trained
    build_dataset(GenConfig(classes=2, instances=2, views=1, voxel_size=8, image_size=16), tmp_path)
    with pytest.raises(ValueError, match="incompatible"):
        Tr.evaluate(out / "checkpoint.vxda", tmp_path)


def test_predict_helpers_chunk_consistently(trained, ds):
    out, _, _ = trained
    config, params = M.load_checkpoint(out / "checkpoint.vxda")
    x = ds.arrays("test", "source").images
    whole = Tr.predict_latent(params, config, x)
    parts = np.concatenate([Tr.predict_latent(params, config, x[i:i + 3]) for i in range(0, len(x), 3)])
    np.testing.assert_allclose(whole, parts, rtol=1e-5, atol=1e-6)
