import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gcnood.backbone import (
    BackboneModel,
    BnLayer,
    Mode,
    backbone_backward,
    backbone_forward,
    backbone_loss,
    extract_features,
    gaussianize,
    load_backbone,
    save_backbone,
    train_backbone,
)
from gcnood.data import OE, DatasetSpec, sample_synthetic
from gcnood.errors import BatchTooSmallError, FormatError, ShapeError
from gcnood.losses import NodeMasks, oe_loss

from .oracles import central_difference, max_rel_error


def _random_model(rng, widths, K):
    model = BackboneModel.init(widths[0], widths[1:], K, seed=int(rng.integers(1 << 30)))
    for bn in model.bns:
        bn.gamma = rng.uniform(0.5, 1.5, bn.gamma.shape)
        bn.beta = rng.normal(0, 0.3, bn.beta.shape)
        bn.running_mean = rng.normal(0, 1, bn.gamma.shape)
        bn.running_var = rng.uniform(0.5, 2.0, bn.gamma.shape)
    for b in model.biases:
        b += rng.normal(0, 0.1, b.shape)
    return model


def test_eval_bn_with_unit_stats_is_identity_up_to_eps():
    model = BackboneModel([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)], [BnLayer.identity(2)])
    x = np.array([[1.0, 2.0], [3.0, 0.5]])
    _, feats = backbone_forward(model, x, Mode.EVAL)
    np.testing.assert_allclose(feats, x / np.sqrt(1 + 1e-5), rtol=1e-15)


def test_zero_final_affine_gives_uniform_softmax():
    model = BackboneModel.init(3, (4,), 5, seed=0)
    model.weights[-1][:] = 0
    logits, _ = backbone_forward(model, np.ones((2, 3)), Mode.EVAL)
    assert np.all(logits == 0)


def test_two_layer_forward_matches_hand_computation():
    w1 = np.array([[1.0, -1.0], [2.0, 0.5]])
    b1 = np.array([0.5, 0.0])
    w2 = np.array([[1.0, 0.0, 2.0], [-1.0, 1.0, 0.0]])
    b2 = np.array([0.0, 0.1, -0.1])
    bn = BnLayer(np.array([2.0, 1.0]), np.array([0.0, 1.0]), np.array([1.0, -1.0]), np.array([4.0, 1.0]), eps=0.0)
    model = BackboneModel([w1, w2], [b1, b2], [bn])
    x = np.array([[1.0, 1.0], [0.0, -1.0]])
    # pre-BN: x @ w1 + b1 = [[3.5, -0.5], [-1.5, -0.5]]
    # normalized: ((a - [1, -1]) / [2, 1]) -> [[1.25, 0.5], [-1.25, 0.5]]
    # affine: gamma * . + beta -> [[2.5, 1.5], [-2.5, 1.5]]; relu -> [[2.5, 1.5], [0, 1.5]]
    h = np.array([[2.5, 1.5], [0.0, 1.5]])
    logits, feats = backbone_forward(model, x, Mode.EVAL)
    np.testing.assert_allclose(feats, h)
    np.testing.assert_allclose(logits, h @ w2 + b2)


def test_one_hidden_layer_single_sample_by_hand():
    w1 = np.array([[2.0], [-1.0]])
    bn = BnLayer(np.ones(1), np.zeros(1), np.array([1.0]), np.array([0.25]), eps=0.0)
    model = BackboneModel([w1, np.ones((1, 1))], [np.zeros(1), np.zeros(1)], [bn])
    # 2*3 - 1*1 = 5, (5 - 1) / 0.5 = 8
    np.testing.assert_allclose(extract_features(model, [[3.0, 1.0]]), [[8.0]])


def test_identity_network_features_equal_input():
    model = BackboneModel([np.eye(3)], [np.zeros(3)], [])
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(extract_features(model, x), x)


def test_extract_features_is_pure():
    model = _random_model(np.random.default_rng(1), [4, 6, 5], 3)
    x = np.random.default_rng(2).normal(size=(7, 4))
    a = extract_features(model, x)
    b = extract_features(model, x)
    assert a.tobytes() == b.tobytes()


def test_shape_errors():
    model = BackboneModel.init(3, (4,), 2)
    with pytest.raises(ShapeError):
        backbone_forward(model, np.ones((2, 5)))
    with pytest.raises(BatchTooSmallError):
        backbone_forward(model, np.ones((1, 3)), Mode.TRAIN)


def test_train_mode_batch_normalization_statistics():
    model = _random_model(np.random.default_rng(3), [5, 8, 6], 4)
    for bn in model.bns:
        bn.gamma[:] = 1.0
        bn.beta[:] = 0.0
    x = np.random.default_rng(4).normal(2.0, 3.0, size=(50, 5))
    _, _, (_, cache) = backbone_forward(model, x, Mode.TRAIN, return_cache=True)
    for _, xhat, _, _ in cache[:-1]:
        assert np.all(np.abs(xhat.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(xhat.var(axis=0) - 1) < 1e-6 * 100)


def test_train_mode_updates_running_stats_eval_does_not():
    model = _random_model(np.random.default_rng(5), [3, 4], 2)
    before = model.bn_checksum()
    x = np.random.default_rng(6).normal(size=(10, 3))
    backbone_forward(model, x, Mode.EVAL)
    assert model.bn_checksum() == before
    backbone_forward(model, x, Mode.TRAIN)
    assert model.bn_checksum() != before


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), depth=st.integers(0, 2), width=st.integers(2, 8))
def test_backbone_gradient_matches_finite_differences(seed, depth, width):
    rng = np.random.default_rng(seed)
    widths = [int(rng.integers(2, 9))] + [width] * depth
    K = int(rng.integers(2, 5))
    model = _random_model(rng, widths, K)
    n = 6
    x = rng.normal(size=(n, widths[0]))
    roles = np.array([0, 1, OE, 0, OE, 1]) % K
    roles = np.where(np.array([0, 0, 1, 0, 1, 0]) == 1, OE, roles)
    lam = 0.7

    _, grads = backbone_loss(model.copy(), x, roles, lam)
    params = model.parameters()
    for p, g in zip(params, grads):
        def loss_at(value, p=p):
            old = p.copy()
            p[...] = value
            logits, _ = backbone_forward(model.copy(), x, Mode.TRAIN)
            p[...] = old
            return oe_loss(logits, NodeMasks.from_roles(roles), lam)[0]
        num = central_difference(loss_at, p.copy(), 1e-5)
        assert max_rel_error(g, num) < 1e-4


def test_lambda_zero_without_oe_is_mean_cross_entropy():
    model = _random_model(np.random.default_rng(7), [3, 4], 3)
    x = np.random.default_rng(8).normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])
    (total, ce, kl), _ = backbone_loss(model.copy(), x, y, 0.0)
    logits, _ = backbone_forward(model.copy(), x, Mode.TRAIN)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    assert total == pytest.approx(-logp[np.arange(5), y].mean(), abs=1e-12)
    assert kl == 0.0


def test_one_class_dataset_reaches_full_accuracy():
    rng = np.random.default_rng(0)
    ds = SimpleNamespace(features=rng.normal(size=(40, 4)), roles=np.zeros(40, dtype=int))
    model, _ = train_backbone(BackboneModel.init(4, (8,), 1), ds, epochs=3, batch_size=8)
    logits, _ = backbone_forward(model, ds.features)
    assert (logits.argmax(axis=1) == 0).mean() == 1.0


def test_training_separates_four_clusters():
    spec = DatasetSpec(K=4, n_max=100, rho=1, dim=8, n_oe=0, n_ood_test=0, seed=0)
    ds = sample_synthetic(spec)
    model, trace = train_backbone(BackboneModel.init(8, (16, 16), 4, seed=0), ds, lr=0.05,
                                  epochs=50, batch_size=32, seed=0)
    assert all(np.isfinite(trace))
    logits, _ = backbone_forward(model, ds.features)
    assert (logits.argmax(axis=1) == ds.roles).mean() >= 0.95


def test_training_is_deterministic():
    spec = DatasetSpec(K=3, n_max=30, rho=3, dim=4, n_oe=10, n_ood_test=0, seed=1)
    ds = sample_synthetic(spec)
    init = BackboneModel.init(4, (6,), 3, seed=2)
    a, _ = train_backbone(init, ds, epochs=3, batch_size=16, lam=0.5, seed=9)
    b, _ = train_backbone(init, ds, epochs=3, batch_size=16, lam=0.5, seed=9)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.tobytes() == q.tobytes()


def _post_norm(model, x):
    _, _, (_, cache) = backbone_forward(model, x, Mode.EVAL, return_cache=True)
    return [xhat for _, xhat, _, _ in cache[:-1]]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gaussianize_contract(seed):
    rng = np.random.default_rng(seed)
    model = _random_model(rng, [6, 8, 7], 3)
    x = rng.normal(rng.normal(size=6) * 3, rng.uniform(0.5, 3, 6), size=(200, 6))
    g = gaussianize(model, x)
    for xhat, bn in zip(_post_norm(g, x), g.bns):
        assert np.all(np.abs(xhat.mean(axis=0)) < 1e-6)
        # exact target var / (var + eps); within 1e-3 of 1 unless eps dominates
        target = bn.running_var / (bn.running_var + bn.eps)
        np.testing.assert_allclose(xhat.var(axis=0), target, rtol=0, atol=1e-9)
        wide = bn.running_var >= 1e-2
        assert np.all(np.abs(xhat.var(axis=0)[wide] - 1) < 1e-3)
    for a, b in zip(model.parameters(), g.parameters()):
        assert np.array_equal(a, b)
    gg = gaussianize(g, x)
    for bn1, bn2 in zip(g.bns, gg.bns):
        assert np.max(np.abs(bn1.running_mean - bn2.running_mean)) < 1e-9
        assert np.max(np.abs(bn1.running_var - bn2.running_var)) < 1e-9


def test_gaussianize_fixed_point_on_standardized_activations():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 3))
    x = (x - x.mean(0)) / x.std(0)
    model = BackboneModel([np.eye(3), np.ones((3, 2))], [np.zeros(3), np.zeros(2)], [BnLayer.identity(3)])
    g = gaussianize(model, x)
    assert np.max(np.abs(g.bns[0].running_mean)) < 1e-6
    assert np.max(np.abs(g.bns[0].running_var - 1)) < 1e-6


def test_gaussianize_constant_channel_warns_and_outputs_zero():
    x = np.random.default_rng(0).normal(size=(20, 2))
    x[:, 1] = 4.0
    model = BackboneModel([np.eye(2), np.ones((2, 2))], [np.zeros(2), np.zeros(2)], [BnLayer.identity(2)])
    with pytest.warns(RuntimeWarning, match="constant"):
        g = gaussianize(model, x)
    (xhat,) = _post_norm(g, x)
    assert np.all(xhat[:, 1] == 0)


def test_gaussianize_shift_moves_running_mean_by_shift():
    x = np.random.default_rng(1).normal(size=(100, 3))
    model = BackboneModel([np.eye(3), np.ones((3, 2))], [np.zeros(3), np.zeros(2)], [BnLayer.identity(3)])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        a = gaussianize(model, x)
        b = gaussianize(model, x + 2.5)
    np.testing.assert_allclose(b.bns[0].running_mean - a.bns[0].running_mean, 2.5, atol=1e-12)


def test_gaussianize_ema_approaches_exact():
    rng = np.random.default_rng(2)
    model = _random_model(rng, [4, 5], 2)
    x = rng.normal(1.0, 2.0, size=(400, 4))
    exact = gaussianize(model, x)
    ema = gaussianize(model, x, mode="ema", epochs=20, batch_size=100)
    np.testing.assert_allclose(ema.bns[0].running_mean, exact.bns[0].running_mean, atol=0.2)
    np.testing.assert_allclose(ema.bns[0].running_var, exact.bns[0].running_var, rtol=0.2)


def test_checkpoint_roundtrip(tmp_path):
    model = _random_model(np.random.default_rng(3), [3, 5, 4], 2)
    save_backbone(tmp_path / "m.gbkb", model)
    back = load_backbone(tmp_path / "m.gbkb")
    assert back.dims == model.dims
    for p, q in zip(model.parameters(), back.parameters()):
        assert p.tobytes() == q.tobytes()
    assert back.bn_checksum() == model.bn_checksum()


def test_checkpoint_rejects_bad_files(tmp_path):
    model = BackboneModel.init(2, (3,), 2)
    path = tmp_path / "m.gbkb"
    save_backbone(path, model)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError):
        load_backbone(path)
    path.write_bytes(b"XXXX" + b"\0" * 20)
    with pytest.raises(FormatError):
        load_backbone(path)


def test_backward_in_eval_mode_matches_finite_differences():
    rng = np.random.default_rng(11)
    model = _random_model(rng, [3, 4], 2)
    x = rng.normal(size=(5, 3))
    logits, _, cache = backbone_forward(model, x, Mode.EVAL, return_cache=True)
    upstream = rng.normal(size=logits.shape)
    grads = backbone_backward(model, cache, upstream)
    w = model.weights[0]

    def f(value):
        old = w.copy()
        w[...] = value
        out = backbone_forward(model, x, Mode.EVAL)[0]
        w[...] = old
        return float((out * upstream).sum())

    assert max_rel_error(grads[0], central_difference(f, w.copy(), 1e-5)) < 1e-6
