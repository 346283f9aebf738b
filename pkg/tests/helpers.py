"""Shared oracles: central finite differences and small gradient-check cases."""
import numpy as np

from romgait.gail import DiscriminatorConfig, build_discriminator, discriminator_loss
from romgait.ppo import GaussianPolicy, policy_loss_and_grad
from romgait.sac import SquashedGaussianActor, actor_loss_and_grad, critic_loss_and_grad, make_critic

FD_STEP = 1e-6


def central_difference(f, theta, h=FD_STEP):
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        grad[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return grad


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def _with_flat(net, f):
    def wrapped(theta):
        saved = net.get_flat()
        net.set_flat(theta)
        try:
            return f()
        finally:
            net.set_flat(saved)
    return wrapped


def policy_case(seed):
    """PPO clipped-surrogate loss: analytic vs numeric gradient over mean net and log-std."""
    rng = np.random.default_rng(seed)
    obs_dim, act_dim, n = 4, 2, 8
    pol = GaussianPolicy(obs_dim, act_dim, hidden=(8, 8), log_std_init=rng.uniform(-1.0, 0.0), seed=seed)
    pol.mean_net.set_flat(pol.mean_net.get_flat() + rng.normal(0, 0.3, len(pol.mean_net.get_flat())))
    obs = rng.normal(size=(n, obs_dim))
    u = rng.normal(size=(n, act_dim))
    old_lp = rng.normal(-2.0, 1.0, n)
    adv = rng.normal(size=n)
    # put probability ratios near 1 so most samples sit inside the clip range
    _, _, _, info = policy_loss_and_grad(pol, obs, u, old_lp, adv, 0.2)
    old_lp = old_lp + np.log(info["ratio"]) + rng.normal(0, 0.15, n)
    entropy_coeff = 0.01

    def loss(theta):
        pol.mean_net.set_flat(theta[:-act_dim])
        pol.log_std[:] = theta[-act_dim:]
        return policy_loss_and_grad(pol, obs, u, old_lp, adv, 0.2, entropy_coeff)[0]

    theta0 = np.concatenate([pol.mean_net.get_flat(), pol.log_std])
    _, g_mu, g_ls, _ = policy_loss_and_grad(pol, obs, u, old_lp, adv, 0.2, entropy_coeff)
    analytic = np.concatenate([g_mu, g_ls])
    numeric = central_difference(loss, theta0)
    loss(theta0)
    return analytic, numeric, theta0.size


def critic_case(seed):
    rng = np.random.default_rng(seed)
    q = make_critic(4, 2, hidden=(8, 8), seed=seed)
    # zero initial biases can put a ReLU input exactly on its kink (a row with all
    # first-layer units off); a generic parameter point keeps the loss differentiable
    q.set_flat(q.get_flat() + rng.normal(0, 0.1, q.get_flat().size))
    obs, act = rng.normal(size=(16, 4)), rng.uniform(-1, 1, (16, 2))
    y = rng.normal(size=16)
    _, analytic = critic_loss_and_grad(q, obs, act, y)
    numeric = central_difference(_with_flat(q, lambda: critic_loss_and_grad(q, obs, act, y)[0]), q.get_flat())
    return analytic, numeric, q.get_flat().size


def actor_case(seed):
    """SAC reparameterized actor loss through two critics (noise fixed by the seed)."""
    rng = np.random.default_rng(seed)
    actor = SquashedGaussianActor(4, 2, hidden=(8, 8), seed=seed)
    actor.net.set_flat(actor.net.get_flat() + rng.normal(0, 0.3, len(actor.net.get_flat())))
    critics = (make_critic(4, 2, (8, 8), seed=seed + 1), make_critic(4, 2, (8, 8), seed=seed + 2))
    obs = rng.normal(size=(8, 4))
    alpha = float(rng.uniform(0.05, 1.0))
    noise_seed = int(rng.integers(2**31))

    def loss():
        return actor_loss_and_grad(actor, critics, obs, alpha, np.random.default_rng(noise_seed))[0]

    _, analytic, _ = actor_loss_and_grad(actor, critics, obs, alpha, np.random.default_rng(noise_seed))
    numeric = central_difference(_with_flat(actor.net, loss), actor.net.get_flat())
    return analytic, numeric, actor.net.get_flat().size


def discriminator_case(seed):
    """Full training loss (noise, dropout, smoothed labels, gradient penalty) of a small discriminator."""
    rng = np.random.default_rng(seed)
    config = DiscriminatorConfig(hidden=(8, 6))
    net = build_discriminator(config, seed=seed)
    real = rng.normal(0.3, 0.5, (8, 5))
    fake = rng.normal(-0.3, 0.5, (8, 5))
    noise_seed = int(rng.integers(2**31))

    def loss():
        return discriminator_loss(real, fake, net, seed=noise_seed, config=config)[0].loss

    _, analytic = discriminator_loss(real, fake, net, seed=noise_seed, config=config)
    numeric = central_difference(_with_flat(net, loss), net.get_flat())
    return analytic, numeric, net.get_flat().size


GRADIENT_CASES = {"policy": policy_case, "critic": critic_case, "actor": actor_case,
                  "discriminator": discriminator_case}
