import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowlens import container, flow
from flowlens.autodiff import Tape

from helpers import numeric_logdet, randomized_flow, stub_layer


def test_zero_heads_layer_is_identity():
    layer = flow.init_flow(6, n_layers=1, seed=3).layers[0]
    x = np.random.default_rng(0).standard_normal((4, 6))
    y, ld = flow.coupling_forward(layer, x)
    np.testing.assert_array_equal(y, x)
    np.testing.assert_array_equal(ld, 0)


def test_hand_evaluated_d2_layer():
    layer = stub_layer(flow.init_flow(2, n_layers=1).layers[0], 0.5, 1.0)
    y, ld = flow.coupling_forward(layer, np.array([2.0, 3.0]))
    np.testing.assert_allclose(y, [4.29744, 3.0], atol=1e-5)
    assert ld == pytest.approx(0.5, abs=1e-6)
    np.testing.assert_allclose(flow.coupling_inverse(layer, y), [2.0, 3.0], atol=1e-6)


def test_logdet_additive_over_layers():
    model = flow.init_flow(2, n_layers=2)
    for layer in model.layers:
        stub_layer(layer, 0.5, 0.0)
    _, ld = flow.flow_forward(model, np.array([0.3, -1.2]))
    assert ld == pytest.approx(1.0, abs=1e-6)


def test_identity_flow_forward():
    model = flow.init_flow(4)
    x = np.arange(4.0)
    u, ld = flow.flow_forward(model, x)
    np.testing.assert_array_equal(u, x)
    assert ld == 0


@pytest.mark.parametrize("x,expected", [((0, 0), -1.837877), ((3, 4), -14.337877)])
def test_identity_log_density(x, expected):
    assert flow.log_density(flow.init_flow(2), np.array(x, float)) == pytest.approx(expected, abs=1e-6)


def test_single_layer_logdet_matches_numeric_jacobian():
    layer = randomized_flow(8, seed=5, n_layers=1, hidden=64).layers[0]
    x = np.random.default_rng(1).standard_normal(8)
    _, ld = flow.coupling_forward(layer, x)
    num = numeric_logdet(lambda v: flow.coupling_forward(layer, v)[0], x)
    assert abs(ld - num) / (abs(num) + 1e-8) < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_full_flow_logdet_matches_numeric_jacobian(seed):
    model = randomized_flow(8, seed=seed)
    model.mean = np.random.default_rng(seed).standard_normal(8)
    model.std = np.random.default_rng(seed + 1).uniform(0.5, 2.0, 8)
    x = np.random.default_rng(seed + 2).standard_normal(8)
    _, ld = flow.flow_forward(model, x)
    num = numeric_logdet(lambda v: flow.flow_forward(model, v)[0], x)
    assert abs(ld - num) / (abs(num) + 1e-8) < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4, 8, 64]), st.integers(0, 10_000))
def test_round_trip(dim, seed):
    model = randomized_flow(dim, seed=seed)
    x = np.random.default_rng(seed).standard_normal((50, dim)) * 2
    u, _ = flow.flow_forward(model, x)
    assert np.abs(flow.flow_inverse(model, u) - x).max() < 1e-5


def test_alternating_parity_touches_every_coordinate():
    model = randomized_flow(8, seed=2)
    x = np.random.default_rng(0).standard_normal(8)
    u, _ = flow.flow_forward(model, x)
    assert np.all(np.abs(u - x) > 1e-9)
    assert [layer.parity for layer in model.layers] == [0, 1] * 5


def test_odd_dimension_rejected():
    with pytest.raises(ValueError, match="even"):
        flow.init_flow(3)


def test_log_density_rejects_bad_input():
    model = flow.init_flow(2)
    with pytest.raises(ValueError, match="non-finite"):
        flow.log_density(model, np.array([np.nan, 0.0]))
    with pytest.raises(ValueError, match="dim"):
        flow.log_density(model, np.zeros(4))


def test_tape_log_density_matches_numpy():
    model = randomized_flow(8, seed=4)
    model.mean = np.linspace(-1, 1, 8)
    model.std = np.linspace(0.5, 1.5, 8)
    x = np.random.default_rng(0).standard_normal((5, 8))
    tape = Tape(np.float64)
    lp = tape.value(flow.record_log_density(tape, model, tape.constant(x)))
    np.testing.assert_allclose(lp, flow.log_density(model, x), rtol=1e-6, atol=1e-5)


def test_unit_gaussian_nll_near_entropy():
    data = np.random.default_rng(0).standard_normal((1000, 2))
    model = flow.train_flow(data, flow.FlowTrainConfig(epochs=60, lr=1e-3, hidden=16, n_layers=4))
    test = np.random.default_rng(1).standard_normal((4000, 2))
    nll = -flow.log_density(model, test).mean()
    assert abs(nll - math.log(2 * math.pi * math.e)) < 0.1


def test_repeated_point_overfits_monotonically():
    data = np.tile([[0.5, -0.25]], (256, 1)) + np.random.default_rng(0).normal(0, 1e-2, (256, 2))
    model = flow.train_flow(data, flow.FlowTrainConfig(epochs=10, lr=1e-3, hidden=16, n_layers=4))
    curve = model.metadata["loss_curve"]
    assert all(b < a for a, b in zip(curve, curve[1:]))


def test_zero_epochs_returns_initial_model():
    data = np.random.default_rng(0).standard_normal((64, 4))
    model = flow.train_flow(data, flow.FlowTrainConfig(epochs=0))
    init = flow.init_flow(4, seed=0, mean=data.mean(0), std=data.std(0))
    for a, b in zip(model.layers, init.layers):
        for pa, pb in zip(a.params, b.params):
            np.testing.assert_array_equal(pa, pb)


def test_training_bit_reproducible():
    data = np.random.default_rng(0).standard_normal((300, 4))
    cfg = flow.FlowTrainConfig(epochs=3, hidden=16, n_layers=4, seed=7)
    a = flow.save_checkpoint(flow.train_flow(data, cfg))
    b = flow.save_checkpoint(flow.train_flow(data, cfg))
    assert a == b


def test_divergence_reports_last_good_model(monkeypatch):
    data = np.random.default_rng(0).standard_normal((64, 2))
    real = flow.record_log_density
    calls = {"n": 0}

    def poisoned(tape, model, x, param_nodes=None):
        calls["n"] += 1
        out = real(tape, model, x, param_nodes)
        if calls["n"] > 1:
            return tape.scale(out, float("nan"))
        return out

    monkeypatch.setattr(flow, "record_log_density", poisoned)
    with pytest.raises(flow.TrainingDiverged) as err:
        flow.train_flow(data, flow.FlowTrainConfig(epochs=3, batch_size=64, hidden=8, n_layers=2))
    assert "epoch 1" in str(err.value)
    assert isinstance(err.value.last_good, flow.FlowModel)


# persistence

def test_checkpoint_round_trip_is_byte_stable():
    model = randomized_flow(8, seed=1)
    model.mean = np.linspace(0, 1, 8)
    model.std = np.linspace(1, 2, 8)
    blob = flow.save_checkpoint(model)
    loaded = flow.load_checkpoint(blob)
    assert flow.save_checkpoint(loaded) == blob
    x = np.random.default_rng(0).standard_normal((100, 8))
    np.testing.assert_array_equal(flow.log_density(loaded, x), flow.log_density(model, x))


def test_checkpoint_wrong_magic():
    blob = bytearray(flow.save_checkpoint(flow.init_flow(2)))
    blob[0] ^= 0xFF
    with pytest.raises(container.ContainerError, match="magic"):
        flow.load_checkpoint(bytes(blob))


def test_checkpoint_version_bump():
    header, arrays = container.unpack(flow.MAGIC, flow.save_checkpoint(flow.init_flow(2)))
    header["format_version"] = container.FORMAT_VERSION + 1
    with pytest.raises(container.ContainerError, match="unsupported version"):
        flow.load_checkpoint(container.pack(flow.MAGIC, header, arrays))


def test_checkpoint_truncated():
    blob = flow.save_checkpoint(flow.init_flow(2))
    for cut in (5, 20, len(blob) - 3):
        with pytest.raises(container.ContainerError, match="truncated"):
            flow.load_checkpoint(blob[:cut])


def test_sample_shape():
    s = flow.sample(flow.init_flow(4), 10, seed=1)
    assert s.shape == (10, 4)
