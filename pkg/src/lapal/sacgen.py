"""Soft actor-critic generator over a normalized action box.

The actor emits a tanh-squashed diagonal Gaussian, so every emitted action
lies in (-1, 1)^d: for the imitation baseline d is the raw action dimension
(rescaled to env bounds by the caller), for latent policies d is the latent
dimension and a decoder turns emissions into env actions. Twin critics with
Polyak-averaged targets score (state, action-box) pairs; episodes terminate
only at the time limit, so TD targets always bootstrap.

Rewards are never stored: the replay buffer holds (s, a, s') only and
critic updates recompute rewards through a callable, which keeps the
discriminator-induced reward current as the adversary trains.

Log-probabilities of squashed samples use the exact identity
log(1 - tanh(z)^2) = 2(log 2 - z - softplus(-2z)); its z-derivative is
-2 tanh(z), which the hand-assembled actor gradient relies on.
"""

from __future__ import annotations

from collections import namedtuple
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .nncore import (
    TANH_CAP,
    AdamScalar,
    MLPSpec,
    ParamTree,
    gaussian_head,
    sigmoid,
    softplus,
    tanh_log_jacobian,
)


def squash(z):
    """Capped tanh: emitted actions stay strictly inside the open box."""
    return np.clip(np.tanh(z), -TANH_CAP, TANH_CAP)


_squash = squash


BufferBatch = namedtuple("BufferBatch", ["states", "actions", "next_states", "dones"])


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 128
    buffer_capacity: int = 100_000
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 0.2
    auto_tune_alpha: bool = True
    target_entropy: float | None = None    # default: -action_dim
    actor_hidden: tuple = (64, 64)
    critic_hidden: tuple = (64, 64)


class SacAgent:
    def __init__(self, state_dim: int, u_dim: int, cfg: SacConfig, seed):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.state_dim = state_dim
        self.u_dim = u_dim
        self.cfg = cfg
        self.actor = ParamTree.init(
            MLPSpec(state_dim, cfg.actor_hidden, 2 * u_dim, activation="relu"), rng
        )
        critic_spec = MLPSpec(state_dim + u_dim, cfg.critic_hidden, 1, activation="relu")
        self.critic1 = ParamTree.init(critic_spec, rng)
        self.critic2 = ParamTree.init(critic_spec, rng)
        self.target1 = self.critic1.copy()
        self.target2 = self.critic2.copy()
        self.log_alpha = AdamScalar(float(np.log(cfg.init_alpha)))
        self.target_entropy = (
            cfg.target_entropy if cfg.target_entropy is not None else -float(u_dim)
        )

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha.value))

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for tree in (self.actor, self.critic1, self.critic2, self.target1, self.target2):
            h.update(tree.digest().encode())
        h.update(repr(self.log_alpha.value).encode())
        return h.hexdigest()


def actor_dist(agent: SacAgent, states):
    raw = agent.actor.forward(np.atleast_2d(states))
    dist, _ = gaussian_head(raw)
    return dist


def act(agent: SacAgent, state, deterministic: bool, rng=None) -> np.ndarray:
    dist = actor_dist(agent, state)
    if deterministic:
        return _squash(dist.mean)[0]
    if rng is None:
        raise ConfigError("stochastic action needs an rng")
    return _squash(dist.sample(rng.standard_normal(dist.mean.shape)))[0]


def sample_with_log_prob(agent: SacAgent, states, rng, record: bool = False):
    """Reparameterized squashed sample plus its log-density.

    Returns (u, log_prob, cache); the cache carries what the actor update
    needs to assemble gradients by hand.
    """
    raw = agent.actor.forward(states, record=record)
    dist, clamp_mask = gaussian_head(raw)
    eps = rng.standard_normal(dist.mean.shape)
    z = dist.mean + dist.std * eps
    u = _squash(z)
    gauss = (-0.5 * eps * eps - dist.log_std - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    log_prob = gauss - tanh_log_jacobian(z).sum(axis=1)
    return u, log_prob, (dist, clamp_mask, eps, z, u)


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """FIFO ring over (state, raw action, next state, done); no rewards."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ConfigError("capacity must be positive")
        self.capacity = capacity
        self.states = np.empty((capacity, state_dim))
        self.actions = np.empty((capacity, action_dim))
        self.next_states = np.empty((capacity, state_dim))
        self.dones = np.empty(capacity)
        self.size = 0
        self.cursor = 0

    def __len__(self):
        return self.size

    def push(self, state, action, next_state, done) -> None:
        i = self.cursor
        self.states[i] = state
        self.actions[i] = action
        self.next_states[i] = next_state
        self.dones[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int) -> BufferBatch:
        if self.size == 0:
            raise StateError("cannot sample from an empty replay buffer")
        idx = rng.integers(0, self.size, size=n)
        return BufferBatch(
            states=self.states[idx], actions=self.actions[idx],
            next_states=self.next_states[idx], dones=self.dones[idx],
        )


# ---------------------------------------------------------------------------
# updates


def polyak_update(agent: SacAgent, tau: float) -> None:
    for critic, target in ((agent.critic1, agent.target1), (agent.critic2, agent.target2)):
        for lc, lt in zip(critic.layers, target.layers):
            lt.w += tau * (lc.w - lt.w)
            lt.b += tau * (lc.b - lt.b)


def _q(tree: ParamTree, states, u, record=False):
    return tree.forward(np.concatenate([states, u], axis=1), record=record)[:, 0]


def critic_update(agent: SacAgent, states, u, next_states, reward_fn, rng) -> dict:
    """Twin-critic TD(0) step; rewards recomputed through reward_fn.

    Targets bootstrap unconditionally: episodes end only at the time limit,
    so there is no environment-terminal state to zero out.
    """
    batch = BufferBatch(states, u, next_states, None)
    assert not hasattr(batch, "reward") and not hasattr(batch, "rewards")
    rewards = np.asarray(reward_fn(states, u), dtype=np.float64)
    u2, logp2, _ = sample_with_log_prob(agent, next_states, rng)
    q1t = _q(agent.target1, next_states, u2)
    q2t = _q(agent.target2, next_states, u2)
    soft_value = np.minimum(q1t, q2t) - agent.alpha * logp2
    y = rewards + agent.cfg.gamma * soft_value
    losses = {}
    b = states.shape[0]
    for name, critic in (("critic1", agent.critic1), ("critic2", agent.critic2)):
        q = _q(critic, states, u, record=True)
        err = q - y
        losses[name] = float(np.mean(err * err))
        critic.backward(((2.0 / b) * err)[:, None])
        critic.adam_step(agent.cfg.critic_lr)
    polyak_update(agent, agent.cfg.tau)
    losses["q_mean"] = float(np.mean(y))
    return losses


@dataclass
class DecoderPathContext:
    """Hook for training a decoder through the adversarial reward.

    Minimizes mean log(1 - D(s, encode_mean(s, decode(s, u)))) w.r.t. the
    decoder parameters only: emissions are treated as constants, so the
    actor's own update stays bit-identical to the plain path; the encoder
    and discriminator serve purely as the differentiable reward surface.
    """

    codec: object
    discriminator: object
    decoder_lr: float
    raw_states: object = None          # set per batch before actor_update


def actor_loss(agent: SacAgent, states, eps) -> float:
    """The actor objective at fixed reparameterization noise (no gradients)."""
    raw = agent.actor.forward(states)
    dist, _ = gaussian_head(raw)
    z = dist.mean + dist.std * eps
    u = _squash(z)
    gauss = (-0.5 * eps * eps - dist.log_std - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    log_prob = gauss - tanh_log_jacobian(z).sum(axis=1)
    qmin = np.minimum(_q(agent.critic1, states, u), _q(agent.critic2, states, u))
    return float(np.mean(agent.alpha * log_prob - qmin))


def actor_loss_and_grad(agent: SacAgent, states, eps):
    """Accumulate actor gradients of E[alpha log pi - min Q] at fixed noise.

    Returns (loss, u, log_prob). Critic parameters are left untouched (their
    backward pass only transports the input gradient).
    """
    b = states.shape[0]
    raw = agent.actor.forward(states, record=True)
    dist, clamp_mask = gaussian_head(raw)
    z = dist.mean + dist.std * eps
    u = _squash(z)
    gauss = (-0.5 * eps * eps - dist.log_std - 0.5 * np.log(2 * np.pi)).sum(axis=1)
    log_prob = gauss - tanh_log_jacobian(z).sum(axis=1)
    q1 = _q(agent.critic1, states, u, record=True)
    q2 = _q(agent.critic2, states, u, record=True)
    qmin = np.minimum(q1, q2)
    alpha = agent.alpha
    loss = float(np.mean(alpha * log_prob - qmin))

    min1 = (q1 <= q2).astype(np.float64)
    din1 = agent.critic1.backward((-min1 / b)[:, None], accumulate=False)
    din2 = agent.critic2.backward((-(1.0 - min1) / b)[:, None], accumulate=False)
    d_u = din1[:, agent.state_dim:] + din2[:, agent.state_dim:]

    # d log_prob / d mean = 2u and / d log_std = -1 + 2u * sigma * eps (from
    # d/dz log(1 - tanh^2 z) = -2 tanh z); the q path chains through
    # du/dz = 1 - u^2
    sigma_eps = dist.std * eps
    dz = d_u * (1.0 - u * u)
    d_mean = (alpha / b) * (2.0 * u) + dz
    d_log_std = (alpha / b) * (-1.0 + 2.0 * u * sigma_eps) + dz * sigma_eps
    agent.actor.backward(np.concatenate([d_mean, d_log_std * clamp_mask], axis=1))
    return loss, u, log_prob


def actor_update(agent: SacAgent, states, rng, decoder_path: DecoderPathContext | None = None) -> dict:
    """Reparameterized policy step: minimize E[alpha log pi(u|s) - min Q(s,u)].

    `states` are whatever the networks consume (features); a decoder path
    additionally needs the raw env states set on the context beforehand.
    """
    eps = rng.standard_normal((states.shape[0], agent.u_dim))
    loss, u, log_prob = actor_loss_and_grad(agent, states, eps)
    agent.actor.adam_step(agent.cfg.actor_lr)
    out = {"actor": loss, "entropy": float(np.mean(-log_prob)), "alpha": agent.alpha,
           "u": u}
    if agent.cfg.auto_tune_alpha:
        grad = -float(np.mean(log_prob + agent.target_entropy))
        agent.log_alpha.update(grad, agent.cfg.alpha_lr)
    if decoder_path is not None:
        out["decoder_adv"] = decoder_adversarial_step(
            decoder_path, decoder_path.raw_states, states, u)
    return out


def decoder_adversarial_step(ctx: DecoderPathContext, raw_states, features, u) -> float:
    from . import adversary, latentact

    codec = ctx.codec
    codec.require_mutable()
    b = np.atleast_2d(raw_states).shape[0]
    actions = latentact.decode(codec, raw_states, u, record=True)
    post = latentact.encode(codec, raw_states, actions, record=True)
    abar = np.tanh(post.mean)
    logits = adversary.disc_logit(ctx.discriminator, features, abar, record=True)
    loss = float(np.mean(-softplus(logits)))
    d_logit = (-sigmoid(logits) / b)[:, None]
    din_disc = ctx.discriminator.tree.backward(d_logit, accumulate=False)
    d_abar = din_disc[:, features.shape[1]:]
    d_mean = d_abar * (1.0 - abar * abar)
    enc_upstream = np.concatenate([d_mean, np.zeros_like(d_mean)], axis=1)
    din_enc = codec.encoder.backward(enc_upstream, accumulate=False)
    d_actions = din_enc[:, codec.feat_dim:]
    codec.decoder.backward(d_actions * codec.action_high)
    codec.decoder.adam_step(ctx.decoder_lr)
    return loss
