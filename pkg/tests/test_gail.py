import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

from helpers import discriminator_case, relative_error
import romgait.gail as gail
from romgait.gail import (
    PROB_CLIP,
    DiscriminatorConfig,
    EmptyBatch,
    GaitDiscriminator,
    ScheduledDiscriminator,
    bce_with_logits,
    blend_reward,
    bonus_from_probability,
    build_discriminator,
    discriminator_loss,
    imitation_bonus,
    stack_windows,
)
from romgait.neural import MLP


def constant_half(config=None):
    """Discriminator whose output is exactly 0.5 everywhere (all weights zero)."""
    net = build_discriminator(config or DiscriminatorConfig())
    net.set_flat(np.zeros_like(net.get_flat()))
    return net


def test_bonus_at_half_is_ln2():
    assert imitation_bonus(np.zeros(5), constant_half()) == pytest.approx(math.log(2), abs=1e-15)


def test_blend_published_example():
    assert blend_reward(1.0, math.log(2), 0.5) == pytest.approx(0.8466, abs=1e-4)


def test_blend_endpoints():
    assert blend_reward(0.3, 2.0, 1.0) == 0.3
    assert blend_reward(0.3, 2.0, 0.0) == 2.0
    with pytest.raises(ValueError):
        blend_reward(1.0, 1.0, 1.5)


@given(st.floats(-10, 10), st.floats(-10, 10), st.floats(0, 1))
def test_blend_is_convex_combination(a, b, eta):
    r = blend_reward(a, b, eta)
    assert min(a, b) - 1e-9 <= r <= max(a, b) + 1e-9
    assert blend_reward(a, a, eta) == pytest.approx(a, abs=1e-12)


def test_bce_floor_constant_half_unsmoothed():
    config = DiscriminatorConfig(label_real=1.0, label_fake=0.0, input_noise_sigma=0.0,
                                 gradient_penalty_coeff=0.0, dropout_prob=0.0)
    rng = np.random.default_rng(0)
    info, _ = discriminator_loss(rng.normal(size=(32, 5)), rng.normal(size=(32, 5)), constant_half(config),
                                 seed=0, config=config)
    assert abs(info.bce - 2 * math.log(2)) <= 1e-9


# the probability form loses digits once 1 - p underflows, so keep it where it is accurate
@given(st.lists(st.floats(-15, 15), min_size=1, max_size=20), st.floats(0, 1))
def test_bce_with_logits_matches_probability_form(logits, target):
    z = np.array(logits)
    p = 1 / (1 + np.exp(-z))
    naive = -(target * np.log(p) + (1 - target) * np.log1p(-p))
    loss, grad = bce_with_logits(z, target)
    assert loss == pytest.approx(naive.mean(), rel=1e-8, abs=1e-9)
    np.testing.assert_allclose(grad, (p - target) / z.size, atol=1e-15)


def test_bce_with_logits_is_stable_for_huge_logits():
    loss, grad = bce_with_logits(np.array([1e4, -1e4]), 0.5)
    assert math.isfinite(loss) and np.all(np.isfinite(grad))


@given(st.floats(0, 1))
def test_bonus_bounded_and_monotone(d):
    r = bonus_from_probability(d)
    assert 0 <= r <= -math.log(PROB_CLIP) + 1e-9
    assert bonus_from_probability(min(1.0, d + 0.01)) >= r


@pytest.mark.parametrize("seed", range(5))
def test_discriminator_gradient_matches_finite_difference(seed):
    analytic, numeric, n_params = discriminator_case(seed)
    assert n_params <= 256
    assert relative_error(analytic, numeric) < 1e-4


def test_discriminator_loss_adds_weighted_penalty():
    rng = np.random.default_rng(0)
    real, fake = rng.normal(size=(16, 5)), rng.normal(size=(16, 5))
    net = build_discriminator(DiscriminatorConfig(), seed=1)
    info, _ = discriminator_loss(real, fake, net, seed=3)
    assert info.loss == pytest.approx(info.bce + 10.0 * info.penalty)
    assert info.penalty > 0
    with pytest.raises(EmptyBatch):
        discriminator_loss(real[:0], fake, net, seed=0)


def test_recipe_defaults():
    c = DiscriminatorConfig()
    assert (c.hidden, c.activation, c.dropout_prob, c.input_noise_sigma) == ((64, 32), "leaky_relu", 0.2, 0.05)
    assert (c.label_real, c.label_fake, c.learning_rate, c.gradient_penalty_coeff) == (0.9, 0.1, 1e-5, 10.0)
    assert (c.update_every, c.start_step, c.patience) == (5, 5000, 10)
    spec = c.mlp_spec()
    assert spec.output_activation == "sigmoid" and spec.dropout == (0.2, 0.2)


@pytest.mark.parametrize("kw", [{"holdout_fraction": 0.0}, {"patience": 0}, {"label_real": 1.2},
                                {"window": 0}, {"input_noise_sigma": -1.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DiscriminatorConfig(**kw)


def test_stack_windows():
    frames = np.arange(20.0).reshape(4, 5)
    w = stack_windows(frames, 2)
    assert w.shape == (3, 10)
    np.testing.assert_array_equal(w[0], np.r_[frames[0], frames[1]])
    with pytest.raises(EmptyBatch):
        stack_windows(frames, 5)


def separable(n, seed):
    rng = np.random.default_rng(seed)
    mu = np.full(5, 0.5) / np.sqrt(5)
    return rng.normal(0, 0.1, (n, 5)) + mu, rng.normal(0, 0.1, (n, 5)) - mu


def test_gait_discriminator_estimator_api():
    real, fake = separable(300, 0)
    X, y = np.vstack([real, fake]), np.r_[np.ones(300), np.zeros(300)]
    est = GaitDiscriminator(hidden=(16, 8), n_updates=600, batch_size=64, learning_rate=1e-3, seed=2)
    assert clone(est).get_params()["hidden"] == (16, 8)
    est.fit(X, y)
    proba = est.predict_proba(X)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(np.unique(est.predict(X))) <= {0, 1}
    assert est.score(X, y) > 0.95
    p = est.predict_proba(X)[:, 1]
    assert p[:300].mean() > 0.6 and p[300:].mean() < 0.4
    assert np.all(est.imitation_bonus(X) >= 0)
    with pytest.raises(EmptyBatch):
        GaitDiscriminator().fit(real, np.ones(300))


def test_training_is_seed_deterministic():
    real, fake = separable(100, 1)
    X, y = np.vstack([real, fake]), np.r_[np.ones(100), np.zeros(100)]
    a = GaitDiscriminator(hidden=(8, 8), n_updates=5, batch_size=32, seed=4).fit(X, y)
    b = GaitDiscriminator(hidden=(8, 8), n_updates=5, batch_size=32, seed=4).fit(X, y)
    np.testing.assert_array_equal(a.net_.get_flat(), b.net_.get_flat())


# schedule ---------------------------------------------------------------------------

def fake_sampler(n, rng):
    return rng.normal(-0.3, 0.1, (n, 5))


def small_schedule(**kw):
    reference = np.random.default_rng(0).normal(0.3, 0.1, (200, 5))
    base = dict(hidden=(8, 8), batch_size=16, start_step=50)
    base.update(kw)
    return ScheduledDiscriminator(reference, DiscriminatorConfig(**base), seed=0)


def test_schedule_gates_on_step_and_update_count():
    sd = small_schedule(patience=10_000)
    taken = []
    updates = 0
    for step in range(1, 200):
        updates += 1  # one learner update per env step
        if sd.scheduled_update(step, updates, fake_sampler):
            taken.append((step, updates))
    assert all(step >= 50 and u % 5 == 0 for step, u in taken)
    assert [u for _, u in taken] == list(range(50, 200, 5))
    assert sd.updates == len(taken)


def test_freeze_after_patience_non_improving(monkeypatch):
    losses = iter([5.0, 4.0, 4.5] + [4.0] * 9 + [0.1] * 50)
    monkeypatch.setattr(gail, "evaluation_loss", lambda *a: next(losses))
    sd = small_schedule(start_step=0, patience=10)
    for u in range(1, 200):
        sd.scheduled_update(10_000, u * 5, fake_sampler)
    # two improvements, then ten stale evaluations -> frozen for good
    assert sd.frozen and sd.updates == 12
    frozen_params = sd.snapshot.get_flat()
    assert not sd.scheduled_update(20_000, 5000, fake_sampler)
    np.testing.assert_array_equal(sd.snapshot.get_flat(), frozen_params)


def test_bonus_uses_snapshot_and_survives_freeze():
    sd = small_schedule(start_step=0)
    x = np.zeros((3, 5))
    before = sd.bonus(x)
    sd.net.set_flat(sd.net.get_flat() + 1.0)  # live weights alone do not change the bonus
    np.testing.assert_array_equal(sd.bonus(x), before)


def test_schedule_save_and_load(tmp_path):
    sd = small_schedule(start_step=0)
    for u in range(5, 30, 5):
        sd.scheduled_update(100, u, fake_sampler)
    sd.save(tmp_path / "disc.npz")
    other = small_schedule(start_step=0)
    other.load_state(tmp_path / "disc.npz")
    assert (other.updates, other.frozen, other.stale) == (sd.updates, sd.frozen, sd.stale)
    np.testing.assert_array_equal(other.bonus(np.ones((2, 5))), sd.bonus(np.ones((2, 5))))


def test_split_is_disjoint_and_seeded():
    sd = small_schedule()
    assert len(set(sd.holdout_index) & set(sd.train_index)) == 0
    assert len(sd.holdout_index) == 20
    np.testing.assert_array_equal(sd.holdout_index, small_schedule().holdout_index)


def test_write_log(tmp_path):
    sd = small_schedule(start_step=0)
    sd.scheduled_update(1, 5, fake_sampler)
    sd.write_log(tmp_path / "d.csv")
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0].split(",") == list(gail.DISC_METRICS_COLUMNS)
    assert len(lines) == 2


def test_imitation_bonus_scalar_and_batch():
    net = build_discriminator(DiscriminatorConfig(), seed=0)
    x = np.random.default_rng(0).normal(size=(4, 5))
    batch = imitation_bonus(x, net)
    assert batch.shape == (4,)
    assert imitation_bonus(x[0], net) == pytest.approx(batch[0])
    assert isinstance(net, MLP)


def test_holdout_loss_uses_teacher_frames_only():
    sd = small_schedule(start_step=0, patience=10_000)
    calls = []

    def sampler(n, rng):
        calls.append(n)
        return fake_sampler(n, rng)

    for u in range(5, 55, 5):
        sd.scheduled_update(1, u, sampler)
    assert calls == [16] * 10  # one training batch per update, nothing for validation
    expected = gail.evaluation_loss(sd.holdout_real, None, sd.net, sd.config)
    assert sd.log[-1]["holdout_loss"] == expected
