import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.base import clone

import romgait.sac as sac
from helpers import actor_case, critic_case, relative_error
from romgait.distributions import squashed_log_prob
from romgait.gaitdata import FEATURE_DIM
from romgait.gail import DiscriminatorConfig
from romgait.sac import (
    ReplayBuffer,
    SACStudent,
    SacConfig,
    SacNetworks,
    critic_target,
    make_critic,
    polyak_update,
    q_values,
    sac_update,
    sample_action,
)


def test_replay_ring_keeps_newest_in_order():
    buf = ReplayBuffer(3, obs_dim=1, act_dim=1, feature_dim=1)
    for k in range(5):
        buf.add([k], [0.0], float(k), [0.0], [k + 1], False)
    assert len(buf) == 3
    np.testing.assert_array_equal(buf.r_env[buf.ordered_indices()], [2.0, 3.0, 4.0])
    other = ReplayBuffer(3, 1, 1, 1)
    other.load_arrays(buf.state_arrays())
    np.testing.assert_array_equal(other.r_env[other.ordered_indices()], [2.0, 3.0, 4.0])


def test_replay_sample_is_uniform_over_filled_slots():
    buf = ReplayBuffer(100, 1, 1, 1)
    for k in range(4):
        buf.add([k], [0.0], float(k), [0.0], [0.0], k == 3)
    batch = buf.sample(4000, np.random.default_rng(0))
    counts = np.bincount(batch["r_env"].astype(int), minlength=4)
    assert counts.sum() == 4000 and np.all(np.abs(counts - 1000) < 120)
    assert set(batch["dones"][batch["r_env"] == 3]) == {1.0}
    with pytest.raises(ValueError):
        ReplayBuffer(5, 1, 1, 1).sample(1, np.random.default_rng(0))


@given(st.floats(0.001, 1.0))
def test_polyak_update(tau):
    online = make_critic(3, 1, (4,), seed=0)
    target = make_critic(3, 1, (4,), seed=1)
    expected = (1 - tau) * target.get_flat() + tau * online.get_flat()
    polyak_update(target, online, tau)
    np.testing.assert_allclose(target.get_flat(), expected, rtol=1e-12, atol=1e-15)


def test_squashed_log_prob_change_of_variables():
    rng = np.random.default_rng(0)
    mu, log_std = rng.normal(size=(50, 1)), rng.uniform(-2, 0.5, (50, 1))
    u = rng.normal(size=(50, 1)) * 2
    a = np.tanh(u)[:, 0]
    sigma = np.exp(log_std[:, 0])
    z = (np.arctanh(a) - mu[:, 0]) / sigma
    oracle = -0.5 * z**2 - np.log(sigma * math.sqrt(2 * math.pi)) - np.log(1 - a**2)
    np.testing.assert_allclose(squashed_log_prob(u, mu, log_std), oracle, rtol=1e-8, atol=1e-8)


def test_critic_target_hand_computed():
    actor = sac.SquashedGaussianActor(2, 1, (4,), seed=0)
    q1, q2 = make_critic(2, 1, (4,), seed=1), make_critic(2, 1, (4,), seed=2)
    batch = {"next_obs": np.array([[0.1, -0.2], [0.3, 0.4]]), "dones": np.array([0.0, 1.0])}
    r = np.array([1.0, 2.0])
    y = critic_target(batch, (q1, q2), actor, 0.2, 0.9, r, np.random.default_rng(5))
    a, logp, _ = actor.sample(batch["next_obs"], np.random.default_rng(5))
    qmin = np.minimum(q_values(q1, batch["next_obs"], a), q_values(q2, batch["next_obs"], a))
    assert y[0] == pytest.approx(1.0 + 0.9 * (qmin[0] - 0.2 * logp[0]))
    assert y[1] == 2.0


@pytest.mark.parametrize("case", [critic_case, actor_case])
@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_difference(case, seed):
    analytic, numeric, n_params = case(seed)
    assert n_params <= 256
    assert relative_error(analytic, numeric) < 1e-4


def test_sample_action_modes():
    actor = sac.SquashedGaussianActor(3, 2, (8,), seed=0)
    s = np.array([0.1, 0.2, 0.3])
    a, _ = sample_action(actor, s, "deterministic")
    np.testing.assert_array_equal(a, actor.deterministic(s[None])[0])
    b, lp = sample_action(actor, np.stack([s, s]), rng=np.random.default_rng(0))
    assert b.shape == (2, 2) and lp.shape == (2,) and np.all(np.abs(b) < 1)
    with pytest.raises(ValueError):
        sample_action(actor, s, "greedy")


def test_sac_update_moves_critics_toward_target():
    config = SacConfig(batch_size=32, replay_capacity=64, critic_lr=1e-2, auto_alpha=False)
    nets = SacNetworks.create(3, 1, config, hidden=(16,), seed=0)
    rng = np.random.default_rng(0)
    batch = {"obs": rng.normal(size=(32, 3)), "actions": rng.uniform(-1, 1, (32, 1)),
             "next_obs": rng.normal(size=(32, 3)), "dones": np.ones(32)}
    r = rng.normal(size=32)
    first = sac_update(nets, batch, config, r, rng)
    for _ in range(200):
        last = sac_update(nets, batch, config, r, rng)
    # all transitions are terminal, so the target is the reward itself
    assert last["critic1_loss"] < 0.2 * first["critic1_loss"]
    assert nets.alpha == pytest.approx(1.0)


def test_auto_alpha_follows_entropy_gap():
    config = SacConfig(batch_size=16, replay_capacity=16, alpha_lr=1e-2, entropy_target=50.0)
    nets = SacNetworks.create(3, 1, config, hidden=(8,), seed=0)
    rng = np.random.default_rng(1)
    batch = {"obs": rng.normal(size=(16, 3)), "actions": rng.uniform(-1, 1, (16, 1)),
             "next_obs": rng.normal(size=(16, 3)), "dones": np.zeros(16)}
    for _ in range(5):
        sac_update(nets, batch, config, np.zeros(16), rng)
    # entropy far below an unreachable target -> temperature rises
    assert nets.alpha > 1.0


@pytest.mark.parametrize("kw", [{"tau": 0.0}, {"replay_capacity": 10, "batch_size": 20}, {"gamma": 1.1},
                                {"initial_alpha": 0.0}, {"updates_per_env_step": 0.0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SacConfig(**kw)


def tiny_student(**kw):
    base = dict(total_steps=120, warmup_steps=60, batch_size=16, hidden=(16, 16), log_every=40, seed=2,
                discriminator=DiscriminatorConfig(hidden=(8, 8), batch_size=16, start_step=70))
    base.update(kw)
    return SACStudent(**base)


def reference(n=200):
    rng = np.random.default_rng(0)
    return np.clip(rng.normal(0, 0.3, (n, FEATURE_DIM)) + [1.0, 0, -1.0, 0, -1.0], -9, 9)


def test_student_fit_is_deterministic(tmp_path):
    a = tiny_student().fit(reference(), out_dir=tmp_path / "a")
    b = tiny_student().fit(reference(), out_dir=tmp_path / "b")
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    np.testing.assert_array_equal(a.nets_.actor.net.get_flat(), b.nets_.actor.net.get_flat())
    assert a.disc_.updates > 0
    assert (tmp_path / "a" / "discriminator_metrics.csv").exists()
    # one update per env step from the step that ends warmup (60..120 inclusive)
    assert a.steps_done_ == 120 and a.updates_done_ == 61


def test_student_estimator_api_and_checkpoint(tmp_path):
    s = tiny_student(eta=1.0)
    assert clone(s).get_params()["eta"] == 1.0
    s.fit(out_dir=tmp_path)
    loaded = SACStudent.load(tmp_path / "checkpoint_final.npz")
    obs = s.make_env().reset(0)
    np.testing.assert_array_equal(loaded.predict(obs), s.predict(obs))
    assert s.predict(np.stack([obs, obs])).shape == (2, s.act_dim_)


def test_eta_one_never_builds_discriminator(monkeypatch):
    def forbidden(*a, **k):
        raise AssertionError("discriminator constructed")

    monkeypatch.setattr(sac, "ScheduledDiscriminator", forbidden)
    s = tiny_student(eta=1.0).fit(reference())
    assert s.disc_ is None
    batch = s.replay_.sample(8, np.random.default_rng(0))
    rewards, r_im = s._blended(batch)
    np.testing.assert_array_equal(rewards, batch["r_env"])
    assert np.all(r_im == 0)


def test_student_requires_reference_below_eta_one():
    with pytest.raises(ValueError):
        tiny_student(eta=0.5).fit()
    with pytest.raises(ValueError):
        tiny_student(eta=1.5).fit(reference())


def test_rollout_features_deterministic():
    s = tiny_student(eta=1.0).fit()
    f1, r1, fell1 = sac.rollout_features(s, s.make_env(), 3, 50)
    f2, r2, fell2 = sac.rollout_features(s, s.make_env(), 3, 50)
    np.testing.assert_array_equal(f1, f2)
    assert f1.shape[1] == FEATURE_DIM and fell1 == fell2
