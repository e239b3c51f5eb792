import numpy as np
import pytest

from conftest import SHAPE, TINY_GEN, assert_metrics_equal, tiny_cfg
from fedzkt import federation as fd
from fedzkt.data import LabeledDataset, make_partition
from fedzkt.nn import NeuralNet, dense, flatten
from fedzkt.optim import OptimizerState
from fedzkt.zoo import build_classifier
from oracles import accuracy_loop


# ensemble / evaluate / sampling ---------------------------------------------------

def _fixed_logits_net(logits):
    """A net that ignores its input and emits ``logits``."""
    c = len(logits)
    net = NeuralNet((1, 1, 1), [flatten(), dense(1, c)])
    net.params[:c] = 0.0
    net.params[c:] = logits
    return net


def test_ensemble_examples():
    x = np.zeros((2, 1, 1, 1))
    a = _fixed_logits_net([50.0, -50.0])
    b = _fixed_logits_net([-50.0, 50.0])
    np.testing.assert_allclose(fd.ensemble_predict([a, b], x), [[0.5, 0.5]] * 2, atol=1e-12)
    m = _fixed_logits_net([0.3, 1.2])
    np.testing.assert_allclose(fd.ensemble_predict([m], x), fd.losses.softmax(m.forward(x)), atol=0)
    np.testing.assert_allclose(fd.ensemble_predict([m] * 4, x), fd.ensemble_predict([m], x), atol=1e-12)
    with pytest.raises(ValueError):
        fd.ensemble_predict([], x)


def test_evaluate_examples():
    labels = np.repeat(np.arange(10), 10)
    ds = LabeledDataset(np.zeros((100, 1, 1, 1)), labels, 10)
    assert fd.evaluate(_fixed_logits_net([1.0] + [0.0] * 9), ds) == pytest.approx(0.1)
    # a lookup table: the image carries its label, the net reads it back
    onehot = np.eye(4)[labels % 4].reshape(100, 1, 1, 4)
    table = NeuralNet((1, 1, 4), [flatten(), dense(4, 4)])
    table.params[:16] = np.eye(4).ravel()
    assert fd.evaluate(table, LabeledDataset(onehot, labels % 4, 4)) == 1.0


def test_evaluate_matches_counting_oracle(toy_data):
    train, _ = toy_data
    ds = train.subset(np.arange(100))
    net = build_classifier("cnn-a", SHAPE, 4, 3)
    assert fd.evaluate(net, ds, batch_size=7) == accuracy_loop(net.forward(ds.images), ds.labels)


def test_sample_active_devices():
    rng = np.random.default_rng(0)
    assert fd.sample_active_devices(7, 1.0, rng) == list(range(7))
    assert len(fd.sample_active_devices(10, 0.2, rng)) == 2
    assert len(fd.sample_active_devices(10, 0.01, rng)) == 1
    draws = {tuple(fd.sample_active_devices(10, 0.3, rng)) for _ in range(20)}
    assert len(draws) > 1
    a = fd.sample_active_devices(10, 0.5, np.random.default_rng(9))
    assert a == fd.sample_active_devices(10, 0.5, np.random.default_rng(9))
    with pytest.raises(ValueError):
        fd.sample_active_devices(5, 0.0, rng)


# device update ----------------------------------------------------------------------

def _device(ds, model="mlp-small", seed=0, idx=None, lr=0.1):
    net = build_classifier(model, ds.image_shape, ds.classes, seed)
    idx = np.arange(len(ds)) if idx is None else idx
    return fd.DeviceState(0, net, net.params.copy(), idx, OptimizerState.sgd(lr), np.random.default_rng(seed))


def test_device_update_decreases_ce_on_separable_pair():
    ds = LabeledDataset(np.array([[[[1.0, -1.0], [1.0, -1.0]]], [[[-1.0, 1.0], [-1.0, 1.0]]]]), np.array([0, 1]), 2)
    dev = _device(ds)
    hist = fd.device_update(dev, ds, 5, 0.0, batch_size=2)
    assert len(hist) == 5
    assert all(b < a for a, b in zip(hist, hist[1:]))


def test_huge_prox_pins_params_to_anchor(toy_data):
    train, _ = toy_data
    dev = _device(train, "cnn-a")
    anchor = dev.anchor_params.copy()
    fd.device_update(dev, train, 3, 1e6, batch_size=16)
    assert np.abs(dev.model.params - anchor).max() < 1e-3


def test_device_update_deterministic_and_rejects_empty(toy_data):
    train, _ = toy_data
    a, b = _device(train, "cnn-a", 2), _device(train, "cnn-a", 2)
    fd.device_update(a, train, 2, 1.0, 16)
    fd.device_update(b, train, 2, 1.0, 16)
    np.testing.assert_array_equal(a.model.params, b.model.params)
    with pytest.raises(ValueError, match="no local data"):
        fd.device_update(_device(train, idx=np.array([], dtype=np.int64)), train, 1, 0.0)


def test_device_state_checks_anchor_length(toy_data):
    train, _ = toy_data
    net = build_classifier("cnn-a", SHAPE, 4, 0)
    with pytest.raises(ValueError, match="anchor"):
        fd.DeviceState(0, net, np.zeros(3), np.arange(4), OptimizerState.sgd(0.1), np.random.default_rng(0))


# server update --------------------------------------------------------------------------

def _setup(toy_data, models=("mlp-small", "cnn-a"), global_model="cnn-wide", **kw):
    train, _ = toy_data
    cfg = tiny_cfg(num_devices=len(models), **kw)
    plan = make_partition(train, len(models), "iid", 0)
    devices = fd.init_devices(cfg, train, plan, list(models))
    server = fd.init_server(cfg, devices, SHAPE, train.classes, global_model, TINY_GEN)
    return cfg, devices, server


def test_degenerate_server_step_is_a_noop(toy_data):
    cfg, devices, server = _setup(toy_data, ("cnn-a",), "cnn-a", distill_iterations=1, weight_decay=0.0)
    server.global_model.params[:] = devices[0].model.params
    before_f = server.global_model.params.copy()
    before_g = server.generator.params.copy()
    report = fd.server_update(server, {0: devices[0].model.params.copy()}, cfg)
    assert report.server_losses == [0.0]
    assert report.generator_losses == [0.0]
    np.testing.assert_array_equal(server.global_model.params, before_f)
    np.testing.assert_array_equal(server.generator.params, before_g)


def test_global_model_makes_distillation_progress(toy_data):
    train, _ = toy_data
    cfg, devices, server = _setup(toy_data, distill_iterations=60, lr_server=0.1)
    for d in devices:
        fd.device_update(d, train, 3, 0.0, 32)
    report = fd.server_update(server, {d.id: d.model.params.copy() for d in devices}, cfg)
    ls = np.array(report.server_losses)
    assert ls[-6:].mean() < ls[:6].mean()


def test_phase_two_leaves_the_generator_alone(toy_data):
    runs = []
    for n_s in (1, 4):
        cfg, devices, server = _setup(toy_data, n_generator=3, n_server=n_s)
        fd.server_update(server, {0: devices[0].model.params.copy()}, cfg)
        runs.append((server.generator.params.copy(), server.generator.buffers.copy(), server.global_model.params.copy()))
    for a, b in zip(*runs):
        np.testing.assert_array_equal(a, b)


def test_shadows_are_distilled_for_every_device(toy_data):
    cfg, devices, server = _setup(toy_data)
    before = [s.params.copy() for s in server.shadows]
    fd.server_update(server, {0: devices[0].model.params.copy()}, cfg)  # device 1 inactive
    assert all(not np.array_equal(b, s.params) for b, s in zip(before, server.shadows))


def test_upload_architecture_mismatch_names_device(toy_data):
    cfg, _, server = _setup(toy_data)
    with pytest.raises(ValueError, match="device 1"):
        fd.server_update(server, {1: np.zeros(5)}, cfg)


def test_gradnorm_diagnostic_reports_all_kinds(toy_data):
    cfg, devices, server = _setup(toy_data)
    report = fd.server_update(server, {0: devices[0].model.params.copy()}, cfg, gradnorm_batch=32)
    assert set(report.gradnorms) == {"kl", "l1", "sl"}
    assert all(v >= 0 for v in report.gradnorms.values())


# full runs --------------------------------------------------------------------------------

def _run(toy_data, **kw):
    train, test = toy_data
    models = kw.pop("models", ["mlp-small", "cnn-a"])
    cfg = tiny_cfg(num_devices=len(models), **kw)
    plan = make_partition(train, len(models), "iid", 0)
    return fd.run_fedzkt(cfg, train, test, plan, models, "cnn-wide", TINY_GEN)


def test_single_device_single_round_smoke(toy_data):
    res = _run(toy_data, models=["cnn-a"])
    assert len(res.metrics) == 1
    m = res.metrics[0]
    assert 0 <= m.global_accuracy <= 1 and all(0 <= a <= 1 for a in m.device_accuracy)
    assert m.active_devices == [0] and m.seconds > 0


def test_download_integrity_and_determinism(toy_data):
    a = _run(toy_data, rounds=2)
    b = _run(toy_data, rounds=2)
    assert_metrics_equal(a.metrics, b.metrics)
    for d, s in zip(a.devices, a.server.shadows):
        assert d.model.params.tobytes() == s.params.tobytes()
        np.testing.assert_array_equal(d.anchor_params, d.model.params)
        assert d.model.same_architecture(s)


def test_inactive_devices_keep_their_params(toy_data):
    train, test = toy_data
    models = ["mlp-small", "cnn-a", "cnn-deep", "lenet-lite"]
    cfg = tiny_cfg(num_devices=4, active_fraction=0.5)
    plan = make_partition(train, 4, "iid", 0)
    initial = [d.model.params.copy() for d in fd.init_devices(cfg, train, plan, models)]
    res = fd.run_fedzkt(cfg, train, test, plan, models, "cnn-wide", TINY_GEN)
    active = res.metrics[0].active_devices
    assert len(active) == 2
    for k, d in enumerate(res.devices):
        assert np.array_equal(d.model.params, initial[k]) == (k not in active)


def test_round_failures_carry_context(toy_data):
    train, test = toy_data
    cfg = tiny_cfg(num_devices=2)
    plan = make_partition(train, 2, "iid", 0)
    plan.assignments[1] = np.array([], dtype=np.int64)
    with pytest.raises(RuntimeError, match="round 1"):
        fd.run_fedzkt(cfg, train, test, plan, ["mlp-small", "cnn-a"], "cnn-wide", TINY_GEN)


def test_config_validation():
    for bad in (dict(rounds=0), dict(active_fraction=0.0), dict(active_fraction=1.5), dict(lr_device=0.0),
                dict(loss_kind="hinge"), dict(local_epochs=0), dict(lr_schedule_scope="epoch")):
        with pytest.raises(ValueError):
            fd.FederationConfig(**bad)
    cfg = fd.FederationConfig(distill_iterations=7)
    assert cfg.n_generator == cfg.n_server == 7
    assert (cfg.lr_device, cfg.lr_generator, cfg.device_batch_size) == (0.01, 0.001, 256)


def test_model_count_must_match(toy_data):
    train, _ = toy_data
    with pytest.raises(ValueError, match="model names"):
        fd.init_devices(tiny_cfg(num_devices=3), train, make_partition(train, 3, "iid", 0), ["cnn-a"])


# FedMD ------------------------------------------------------------------------------------

def test_fedmd_single_device_self_distillation_does_not_degrade(toy_data):
    train, test = toy_data
    cfg = tiny_cfg(num_devices=1, rounds=4, public_size=len(train))
    plan = make_partition(train, 1, "iid", 0)
    res = fd.run_fedmd_baseline(cfg, train, test, plan, ["cnn-a"], train)
    acc = [m.mean_device_accuracy for m in res.metrics]
    assert acc[-1] >= acc[0]
    assert res.metrics[-1].global_accuracy == pytest.approx(acc[-1])


def test_fedmd_determinism_and_shape_check(toy_data):
    train, test = toy_data
    cfg = tiny_cfg(rounds=2, public_size=50)
    plan = make_partition(train, 2, "iid", 0)
    a = fd.run_fedmd_baseline(cfg, train, test, plan, ["mlp-small", "cnn-a"], train)
    b = fd.run_fedmd_baseline(cfg, train, test, plan, ["mlp-small", "cnn-a"], train)
    assert_metrics_equal(a.metrics, b.metrics)
    wrong = LabeledDataset(np.zeros((4, 1, 4, 4)), np.zeros(4), 4)
    with pytest.raises(ValueError, match="public images"):
        fd.run_fedmd_baseline(cfg, train, test, plan, ["mlp-small", "cnn-a"], wrong)
