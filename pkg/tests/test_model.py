import numpy as np
import pytest

from mortnet.ingest import PatientMatrix
from mortnet.container import ContainerError
from mortnet.layers import Dense, Sigmoid, sigmoid
from mortnet.model import (
    ModelConfig,
    build_model,
    load_checkpoint,
    predict,
    predict_logit,
    save_checkpoint,
)

from helpers import tiny_model


def _intermediate_shapes(net, x):
    outs = []
    for branch in net.branches:
        h = x
        for layer in branch:
            h = layer.forward(h)
        outs.append(h)
    h = np.concatenate(outs, axis=1)
    shapes = {"concat": h.shape[1:]}
    for layer in net.trunk:
        h = layer.forward(h)
        shapes.setdefault(type(layer).__name__, h.shape[1:])
    return shapes


def test_default_architecture_shapes():
    net = build_model(ModelConfig())
    net.calibrate(np.random.default_rng(0).normal(size=(8, 22, 48)))
    assert len(net.branches) == 3
    assert [b[0].params["kernel"].shape for b in net.branches] == [(32, 22, 3), (32, 22, 6), (32, 22, 12)]
    shapes = _intermediate_shapes(net, np.zeros((1, 22, 48)))
    assert shapes["concat"] == (96, 48)
    assert shapes["AvgPool1D"] == (96, 16)
    assert shapes["Flatten"] == (1536,)
    assert isinstance(net.trunk[-1], Sigmoid)


def test_layer_order():
    net = build_model(ModelConfig())
    kinds = [layer.kind for layer in net.trunk]
    assert kinds == ["avgpool1d", "dropout", "batchnorm", "flatten", "dense", "relu", "dropout",
                     "batchnorm", "dense", "sigmoid"]
    swapped = build_model(ModelConfig(dropout_before_batchnorm=False))
    assert [layer.kind for layer in swapped.trunk][1:3] == ["batchnorm", "dropout"]


def test_single_scale_network():
    net = build_model(ModelConfig(scales=[3]))
    net.calibrate(np.random.default_rng(1).normal(size=(4, 22, 48)))
    assert len(net.branches) == 1
    assert _intermediate_shapes(net, np.zeros((1, 22, 48)))["concat"] == (32, 48)


def test_scale_longer_than_horizon_rejected():
    with pytest.raises(ValueError):
        ModelConfig(horizon_hours=10, scales=(3, 12))


def test_same_seed_same_parameters():
    a = build_model(ModelConfig(seed=5)).state_dict()
    b = build_model(ModelConfig(seed=5)).state_dict()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = build_model(ModelConfig(seed=6)).state_dict()
    assert any(a[k].tobytes() != c[k].tobytes() for k in a if a[k].any())


def test_init_is_fan_in_uniform():
    net = build_model(ModelConfig(seed=2))
    k = net.branches[2][0].params["kernel"]
    assert np.abs(k).max() <= np.sqrt(3 / (22 * 12))
    assert not net.branches[2][0].params["bias"].any()


def test_zero_final_layer_gives_half():
    net = tiny_model(3)
    final = [layer for layer in net.trunk if isinstance(layer, Dense)][-1]
    final.params["weight"][:] = 0
    final.params["bias"][:] = 0
    x = np.random.default_rng(0).normal(size=(20, 3, 12))
    np.testing.assert_array_equal(predict(net, x), 0.5)
    np.testing.assert_array_equal(predict_logit(net, x), 0.0)


def test_predict_range_and_determinism():
    net = tiny_model(4)
    x = np.random.default_rng(1).normal(size=(1000, 3, 12))
    p = predict(net, x)
    assert np.all((p > 0) & (p < 1))
    assert predict(net, x).tobytes() == p.tobytes()


def test_logit_consistency_and_monotonicity():
    net = tiny_model(5)
    x = np.random.default_rng(2).normal(size=(100, 3, 12))
    z, p = predict_logit(net, x), predict(net, x)
    assert np.max(np.abs(sigmoid(z) - p)) <= 1e-15
    order = np.argsort(z, kind="stable")
    assert np.all(np.diff(p[order]) >= 0)


def test_predict_accepts_patient_matrix_and_single_grid():
    net = tiny_model(6)
    grid = np.random.default_rng(3).normal(size=(3, 12))
    value = predict(net, PatientMatrix("p", grid, 0))
    assert isinstance(value, float)
    assert value == predict(net, grid[None])[0]


def test_predict_shape_mismatch_rejected():
    net = tiny_model(7)
    with pytest.raises(ValueError, match="shape"):
        predict(net, np.zeros((4, 12)))


def test_predict_before_batchnorm_stats_rejected():
    net = build_model(ModelConfig(channels=3, horizon_hours=12, filters_per_scale=2, hidden_units=4))
    with pytest.raises(RuntimeError, match="batchnorm"):
        predict(net, np.zeros((3, 12)))


def test_channel_permutation_with_kernel_slices_is_invariant():
    net = tiny_model(8)
    x = np.random.default_rng(4).normal(size=(5, 3, 12))
    before = predict(net, x)
    perm = np.array([2, 0, 1])
    for branch in net.branches:
        k = branch[0].params["kernel"]
        k[...] = k[:, perm, :]
    np.testing.assert_allclose(predict(net, x[:, perm, :]), before, rtol=1e-13)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    net = tiny_model(9)
    path = tmp_path / "m.ckpt"
    from mortnet.ingest import StandardizationStats

    stats = StandardizationStats(np.arange(3.0), np.ones(3) * 2)
    save_checkpoint(path, net, stats, {"note": "x"})
    ck = load_checkpoint(path)
    a, b = net.state_dict(), ck.network.state_dict()
    assert a.keys() == b.keys()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert ck.config == net.config
    assert ck.standardization.mean.tobytes() == stats.mean.tobytes()
    assert ck.meta == {"note": "x"}
    x = np.random.default_rng(5).normal(size=(4, 3, 12))
    assert predict(ck.network, x).tobytes() == predict(net, x).tobytes()


def test_checkpoint_rejects_wrong_kind(tmp_path):
    from mortnet.synthetic import generate_synthetic_cohort

    path = tmp_path / "c.bin"
    generate_synthetic_cohort(60, seed=0).save(path)
    with pytest.raises(ContainerError):
        load_checkpoint(path)


def test_training_forward_backward_shapes():
    net = tiny_model(10, calibrate=False)
    x = np.random.default_rng(6).normal(size=(4, 3, 12))
    z = net.forward(x, training=True, rng=np.random.default_rng(0), logits=True)
    assert z.shape == (4,)
    gx = net.backward(np.ones(4))
    assert gx.shape == x.shape
    assert set(net.gradients()) == set(net.parameters())
