import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import central_difference, relative_error
from romgait.neural import (
    MLP,
    Adam,
    AdamState,
    CheckpointVersionMismatch,
    DimensionMismatch,
    MlpSpec,
    NeuralError,
    NoCachedForward,
    NonFiniteGradient,
    NonScalarOutput,
    RunningMeanStd,
    ShapeMismatch,
    adam_step,
    clip_grad_norm,
    load_checkpoint,
    save_checkpoint,
)

ACTIVATIONS = ["relu", "leaky_relu", "tanh", "identity"]


def small(act="tanh", out_act="identity", out=2, dropout=()):
    return MLP(MlpSpec(3, ((5, act), (4, act)), out, out_act, dropout), seed=1)


def test_forward_shapes_and_single_row():
    net = small()
    x = np.ones((7, 3))
    assert net.forward(x).shape == (7, 2)
    np.testing.assert_allclose(net.forward(x[0]), net.forward(x)[0], rtol=1e-13)


def test_forward_matches_manual_composition():
    net = small(act="tanh")
    x = np.random.default_rng(0).normal(size=(4, 3))
    h = np.tanh(x @ net.W(0) + net.b(0))
    h = np.tanh(h @ net.W(1) + net.b(1))
    np.testing.assert_allclose(net.forward(x), h @ net.W(2) + net.b(2), rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(ACTIVATIONS), st.sampled_from(["identity", "sigmoid", "tanh"]), st.integers(0, 10_000))
def test_backward_matches_finite_difference(act, out_act, seed):
    net = MLP(MlpSpec(3, ((5, act), (4, act)), 2, out_act), seed=seed)
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(6, 3)), rng.normal(size=(6, 2))

    def loss(theta):
        net.set_flat(theta)
        return float(np.sum(w * net.forward(x)))

    theta = net.get_flat()
    numeric = central_difference(loss, theta)
    net.set_flat(theta)
    net.forward(x)
    assert relative_error(net.backward(w), numeric) < 1e-6


def test_backward_at_preactivation_skips_head():
    net = small(out_act="sigmoid", out=1)
    x = np.random.default_rng(2).normal(size=(5, 3))

    def logit_sum(theta):
        net.set_flat(theta)
        net.forward(x)
        return float(net.output_preactivation.sum())

    theta = net.get_flat()
    numeric = central_difference(logit_sum, theta)
    net.set_flat(theta)
    net.forward(x)
    assert relative_error(net.backward(np.ones((5, 1)), at_preactivation=True), numeric) < 1e-7


def test_input_gradient_matches_finite_difference():
    net = small(out=1, out_act="sigmoid")
    x = np.random.default_rng(3).normal(size=(4, 3))
    numeric = np.stack([central_difference(lambda v: float(net.forward(v)[0]), row) for row in x])
    np.testing.assert_allclose(net.input_gradient(x), numeric, atol=1e-8)


@pytest.mark.parametrize("head", ["identity", "sigmoid"])
@pytest.mark.parametrize("mode", ["eval", "train"])
def test_gradient_penalty_parameter_gradient(head, mode):
    spec = MlpSpec(5, ((6, "leaky_relu"), (4, "leaky_relu")), 1, head, (0.2, 0.2))
    net = MLP(spec, seed=3, init="fan_in_uniform")
    x = np.random.default_rng(1).normal(size=(7, 5))

    def penalty(theta):
        net.set_flat(theta)
        return net.input_gradient_penalty(x, mode=mode, noise_seed=11)[0]

    theta = net.get_flat()
    numeric = central_difference(penalty, theta)
    net.set_flat(theta)
    p, norms, grad = net.input_gradient_penalty(x, mode=mode, noise_seed=11)
    assert relative_error(grad, numeric) < 1e-6
    if mode == "eval":
        np.testing.assert_allclose(norms, np.linalg.norm(net.input_gradient(x), axis=1), rtol=1e-12)
        assert p == pytest.approx(np.mean((norms - 1.0) ** 2))


def test_gradient_penalty_rejects_smooth_hidden_units():
    with pytest.raises(NeuralError):
        small(act="tanh", out=1).input_gradient_penalty(np.zeros((2, 3)))


def test_dropout_only_in_train_mode():
    net = small(dropout=(0.5, 0.5))
    x = np.ones((200, 3))
    ev = net.forward(x, mode="eval")
    assert np.all(ev == ev[0])
    tr = net.forward(x, mode="train", noise_seed=0)
    assert not np.allclose(tr, ev)
    np.testing.assert_array_equal(tr, net.forward(x, mode="train", noise_seed=0))


def test_inverted_dropout_preserves_mean():
    net = MLP(MlpSpec(2, ((1000, "identity"),), 1, dropout=(0.3,)), seed=0)
    x = np.ones((1, 2))
    net.W(0)[...] = np.abs(net.W(0))
    net.b(0)[...] = np.abs(net.b(0))
    net.W(1)[...] = 1.0
    net.b(1)[...] = 0.0
    h = x @ net.W(0) + net.b(0)
    train = np.mean([net.forward(x, mode="train", noise_seed=s)[0, 0] for s in range(200)])
    assert train == pytest.approx(h.sum(), rel=0.02)


def test_orthogonal_init_columns():
    net = MLP(MlpSpec(8, ((8, "relu"),), 4), seed=0, hidden_gain=1.0)
    W = net.W(0)
    np.testing.assert_allclose(W.T @ W, np.eye(8), atol=1e-12)
    assert np.all(net.b(0) == 0)


def test_fan_in_uniform_bounds():
    net = MLP(MlpSpec(16, ((32, "relu"),), 1), seed=0, init="fan_in_uniform")
    assert np.abs(net.W(0)).max() <= 0.25 and np.abs(net.W(1)).max() <= 1 / np.sqrt(32)


def test_errors():
    net = small()
    with pytest.raises(NoCachedForward):
        MLP(net.spec, seed=0).backward(np.ones((1, 2)))
    with pytest.raises(DimensionMismatch):
        net.forward(np.ones((2, 4)))
    with pytest.raises(NonScalarOutput):
        net.input_gradient(np.ones((1, 3)))
    with pytest.raises(ShapeMismatch):
        net.set_flat(np.zeros(3))
    with pytest.raises(NeuralError):
        MlpSpec(3, ((4, "swish"),), 1)
    with pytest.raises(NeuralError):
        MlpSpec(3, ((4, "relu"),), 1, dropout=(1.0,))


def test_adam_first_step_moves_by_learning_rate():
    # with bias correction the first update is lr * g / (|g| + eps) per coordinate
    params = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -4.0, 1e-3])
    state = AdamState.for_params(3, 0.01)
    adam_step(state, params, g)
    expected = np.array([1.0, -2.0, 0.5]) - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params, expected, rtol=1e-14)


def test_adam_minimizes_quadratic():
    x = np.array([3.0, -2.0])
    opt = Adam(x, 0.1)
    for _ in range(500):
        opt.step(2 * x)
    assert np.linalg.norm(x) < 1e-2


def test_adam_rejects_nan():
    with pytest.raises(NonFiniteGradient):
        adam_step(AdamState.for_params(1, 0.1), np.zeros(1), np.array([np.nan]))


@given(st.lists(st.floats(-100, 100), min_size=1, max_size=6), st.floats(0.01, 10))
def test_clip_grad_norm(values, max_norm):
    g = np.array(values)
    out = clip_grad_norm(g, max_norm)
    assert np.linalg.norm(out) <= max_norm * (1 + 1e-12)
    if np.linalg.norm(g) <= max_norm:
        np.testing.assert_array_equal(out, g)


@settings(max_examples=30)
@given(st.lists(st.integers(1, 20), min_size=1, max_size=5), st.integers(0, 1000))
def test_running_mean_std_matches_batch_statistics(sizes, seed):
    rng = np.random.default_rng(seed)
    chunks = [rng.normal(3.0, 2.0, (n, 3)) for n in sizes]
    rms = RunningMeanStd(3)
    for c in chunks:
        rms.update(c)
    data = np.concatenate(chunks)
    np.testing.assert_allclose(rms.mean, data.mean(axis=0), atol=1e-6)
    np.testing.assert_allclose(rms.var, data.var(axis=0), rtol=1e-5, atol=1e-6)


def test_checkpoint_roundtrip(tmp_path):
    net = small()
    opt = Adam(net, 1e-3)
    opt.step(np.ones(len(net.get_flat())))
    path = tmp_path / "ck.npz"
    save_checkpoint(path, nets={"pi": net}, optimizers={"pi": opt.state}, arrays={"x": np.arange(3)},
                    meta={"kind": "test"})
    ck = load_checkpoint(path)
    np.testing.assert_array_equal(ck.nets["pi"].get_flat(), net.get_flat())
    assert ck.nets["pi"].spec == net.spec
    np.testing.assert_array_equal(ck.optimizers["pi"].m, opt.state.m)
    assert ck.optimizers["pi"].step == 1
    np.testing.assert_array_equal(ck.arrays["x"], np.arange(3))
    assert ck.meta == {"kind": "test"}


def test_checkpoint_version_mismatch(tmp_path):
    path = tmp_path / "ck.npz"
    save_checkpoint(path, nets={"pi": small()})
    with np.load(path) as data:
        payload = dict(data)
    header = json.loads(bytes(payload["header"]).decode())
    header["version"] = 99
    payload["header"] = np.frombuffer(json.dumps(header).encode(), dtype=np.uint8)
    np.savez(path, **payload)
    with pytest.raises(CheckpointVersionMismatch):
        load_checkpoint(path)
