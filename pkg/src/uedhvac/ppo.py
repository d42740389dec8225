"""Clipped-surrogate PPO for a diagonal-Gaussian actor and a scalar critic.

Rollouts run with dropout active (inverted scaling) and store the masks they
used, so the update re-evaluates exactly the network realisation that acted
and the importance ratio is 1 at the collecting parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .building_env import ACTION_HIGH, ACTION_LOW, BuildingEnv, rbc_policy
from .neural import (
    AdamState,
    NetworkParams,
    adam_update,
    backward_cache,
    forward,
    forward_cache,
    init_network,
    sample_mask,
)
from .ou_weather import EnvConfig

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2.0 * math.pi)


class PPOUpdateError(FloatingPointError):
    """Raised when an update produces a non-finite loss; parameters are left untouched."""


@dataclass
class ObsNormalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, obs: np.ndarray, min_std: float = 1e-6) -> "ObsNormalizer":
        obs = np.asarray(obs, dtype=np.float64)
        std = obs.std(axis=0)
        return cls(obs.mean(axis=0), np.where(std < min_std, 1.0, std))

    @classmethod
    def identity(cls, dim: int) -> "ObsNormalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def __call__(self, obs) -> np.ndarray:
        return ((np.asarray(obs, dtype=np.float64) - self.mean) / self.std).astype(np.float32)


def rbc_normalizer(base, cfg: EnvConfig | None = None, episodes: int = 10, dt: float = 1.0,
                   seed: int = 0) -> ObsNormalizer:
    """Observation statistics from rule-based-controller episodes on the base configuration."""
    cfg = cfg if cfg is not None else EnvConfig()
    env = BuildingEnv(base, dt)
    rows = []
    for ep in range(episodes):
        obs = env.reset(cfg, seed + ep)
        ep_rows = [obs]
        done = False
        while not done:
            obs, _, done = env.step(rbc_policy(obs))
            ep_rows.append(obs)
        rows.append(np.array(ep_rows[:-1]))
    return ObsNormalizer.fit(np.concatenate(rows))


@dataclass
class ActorCritic:
    actor: NetworkParams
    critic: NetworkParams
    log_std: np.ndarray
    normalizer: ObsNormalizer
    action_low: np.ndarray | None = None
    action_high: np.ndarray | None = None

    def arrays(self) -> list[np.ndarray]:
        return self.actor.arrays() + [self.log_std] + self.critic.arrays()

    def copy(self) -> "ActorCritic":
        return replace(self, actor=self.actor.copy(), critic=self.critic.copy(), log_std=self.log_std.copy())

    def to_action(self, u: np.ndarray) -> np.ndarray:
        """Map raw Gaussian samples to environment actions (identity when no bounds)."""
        if self.action_low is None:
            return np.asarray(u, dtype=np.float64)
        u = np.clip(np.asarray(u, dtype=np.float64), -1.0, 1.0)
        return self.action_low + 0.5 * (u + 1.0) * (self.action_high - self.action_low)

    def mean_action(self, obs) -> np.ndarray:
        """Deterministic action with dropout off."""
        return self.to_action(forward(self.normalizer(obs), self.actor))

    def value(self, obs) -> float:
        return float(forward(self.normalizer(obs), self.critic)[0])


def make_actor_critic(obs_dim: int, act_dim: int, hidden: Sequence[int] = (256, 256), dropout: float = 0.1,
                      rng: np.random.Generator | None = None, normalizer: ObsNormalizer | None = None,
                      action_low=ACTION_LOW, action_high=ACTION_HIGH, init_log_std: float = -0.5) -> ActorCritic:
    rng = rng if rng is not None else np.random.default_rng(0)
    sizes = [obs_dim, *hidden]
    return ActorCritic(
        actor=init_network(sizes + [act_dim], dropout, rng),
        critic=init_network(sizes + [1], dropout, rng),
        log_std=np.full(act_dim, init_log_std, dtype=np.float32),
        normalizer=normalizer if normalizer is not None else ObsNormalizer.identity(obs_dim),
        action_low=None if action_low is None else np.asarray(action_low, dtype=np.float64),
        action_high=None if action_high is None else np.asarray(action_high, dtype=np.float64),
    )


def gaussian_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    z = (u - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * u.shape[-1] * _LOG_2PI


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + _LOG_2PI))


@dataclass
class TrajectoryBatch:
    obs: np.ndarray                 # normalized, (T, obs_dim) float32
    actions: np.ndarray             # raw Gaussian samples, (T, act_dim)
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    actor_masks: list[np.ndarray]
    critic_masks: list[np.ndarray]
    last_value: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    energy: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.rewards)


def evaluate_batch(policy: ActorCritic, obs: np.ndarray, actions: np.ndarray, actor_masks, critic_masks):
    """Log-probabilities and values of stored samples under the stored masks."""
    mean = forward(obs, policy.actor, actor_masks, train_scale=True).astype(np.float64)
    values = forward(obs, policy.critic, critic_masks, train_scale=True)[:, 0]
    logp = gaussian_log_prob(np.asarray(actions, dtype=np.float64), mean, policy.log_std.astype(np.float64))
    return logp, values.astype(np.float64)


def sample_actions(policy: ActorCritic, obs: np.ndarray, rng: np.random.Generator):
    """Draw masks and Gaussian actions for a batch of normalized observations."""
    n = obs.shape[0]
    amask = sample_mask(policy.actor, rng, batch=n)
    cmask = sample_mask(policy.critic, rng, batch=n)
    mean = forward(obs, policy.actor, amask, train_scale=True)
    u = mean + np.exp(policy.log_std) * rng.standard_normal(mean.shape).astype(np.float32)
    logp, values = evaluate_batch(policy, obs, u, amask, cmask)
    return u, logp, values, amask, cmask


def collect_trajectories(env: BuildingEnv, policy: ActorCritic, horizon: int, rng: np.random.Generator,
                         obs: np.ndarray | None = None) -> TrajectoryBatch:
    """On-policy rollout of ``horizon`` steps from the env's current observation.

    A finished episode is reset with the same configuration and a fresh seed.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if obs is None:
        obs = env.last_obs
    act_dim = policy.log_std.size
    amask = sample_mask(policy.actor, rng, batch=horizon + 1)
    cmask = sample_mask(policy.critic, rng, batch=horizon + 1)
    noise = rng.standard_normal((horizon, act_dim)).astype(np.float32)
    std = np.exp(policy.log_std)
    scale = np.float32(1.0 / (1.0 - policy.actor.dropout)) if policy.actor.dropout > 0 else np.float32(1.0)
    ws, bs = policy.actor.weights, policy.actor.biases
    n_layers = len(ws)

    obs_n = np.empty((horizon + 1, obs.shape[0]), dtype=np.float32)
    actions = np.empty((horizon, act_dim), dtype=np.float32)
    rewards = np.empty(horizon)
    dones = np.zeros(horizon, dtype=bool)
    energy = np.empty(horizon)
    for t in range(horizon):
        x = policy.normalizer(obs)
        obs_n[t] = x
        h = x
        for i in range(n_layers - 1):
            h = np.maximum(h @ ws[i] + bs[i], 0) * (amask[i][t] * scale)
        mean = h @ ws[-1] + bs[-1]
        u = mean + std * noise[t]
        actions[t] = u
        obs, r, done = env.step(policy.to_action(u))
        rewards[t] = r
        energy[t] = obs[11]
        if done:
            dones[t] = True
            obs = env.reset(env.cfg, int(rng.integers(2**31)))
    obs_n[horizon] = policy.normalizer(obs)
    env.last_obs = obs

    am = [m[:horizon] for m in amask]
    cm = [m[:horizon] for m in cmask]
    logp, values = evaluate_batch(policy, obs_n[:horizon], actions, am, cm)
    last = forward(obs_n[horizon:], policy.critic, [m[horizon:] for m in cmask], train_scale=True)
    return TrajectoryBatch(obs_n[:horizon], actions, logp, rewards, values, dones, am, cm,
                           last_value=float(last[0, 0]), energy=energy)


def compute_gae(batch: TrajectoryBatch, gamma: float = 0.8, lam: float = 0.95) -> TrajectoryBatch:
    """Generalized advantage estimation; terminal steps bootstrap 0."""
    T = len(batch)
    adv = np.zeros(T)
    running = 0.0
    next_value = batch.last_value
    for t in range(T - 1, -1, -1):
        nonterminal = 0.0 if batch.dones[t] else 1.0
        delta = batch.rewards[t] + gamma * next_value * nonterminal - batch.values[t]
        running = delta + gamma * lam * nonterminal * running
        adv[t] = running
        next_value = batch.values[t]
    batch.advantages = adv
    batch.returns = adv + batch.values
    return batch


def ppo_loss_and_grads(batch: TrajectoryBatch, policy: ActorCritic, idx: np.ndarray, adv: np.ndarray,
                       clip: float, vf_coef: float = 0.5, ent_coef: float = 0.01):
    """Loss terms and gradients (ordered as ``policy.arrays()``) on the samples ``idx``."""
    obs = batch.obs[idx]
    u = batch.actions[idx].astype(np.float64)
    a = adv[idx]
    n = len(idx)
    amask = [m[idx] for m in batch.actor_masks]
    cmask = [m[idx] for m in batch.critic_masks]

    mean, acache = forward_cache(obs, policy.actor, amask, train_scale=True)
    mean = mean.astype(np.float64)
    log_std = policy.log_std.astype(np.float64)
    var = np.exp(2.0 * log_std)
    logp = gaussian_log_prob(u, mean, log_std)
    ratio = np.exp(logp - batch.log_probs[idx])
    clipped = np.clip(ratio, 1.0 - clip, 1.0 + clip)
    policy_loss = -float(np.mean(np.minimum(ratio * a, clipped * a)))
    # subgradient: the unclipped branch carries gradient only strictly inside the trust region
    active = ((a > 0) & (ratio < 1.0 + clip)) | ((a < 0) & (ratio > 1.0 - clip))
    g_logp = -(a * ratio * active) / n
    resid = u - mean
    g_mean = g_logp[:, None] * resid / var
    entropy = gaussian_entropy(log_std)
    g_log_std = (g_logp[:, None] * (resid * resid / var - 1.0)).sum(axis=0) - ent_coef

    v, ccache = forward_cache(obs, policy.critic, cmask, train_scale=True)
    v = v[:, 0].astype(np.float64)
    err = v - batch.returns[idx]
    value_loss = float(np.mean(err * err))
    g_v = (vf_coef * 2.0 * err / n)[:, None]

    total = policy_loss + vf_coef * value_loss - ent_coef * entropy
    ga = backward_cache(acache, policy.actor, g_mean.astype(np.float32))
    gc = backward_cache(ccache, policy.critic, g_v.astype(np.float32))
    grads = ga.arrays() + [g_log_std.astype(np.float32)] + gc.arrays()
    stats = {
        "loss": total,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "approx_kl": float(np.mean(batch.log_probs[idx] - logp)),
    }
    return stats, grads, ratio


def normalized_advantages(batch: TrajectoryBatch) -> np.ndarray:
    adv = batch.advantages
    std = adv.std()
    return (adv - adv.mean()) / (std + 1e-8)


def ppo_update(batch: TrajectoryBatch, policy: ActorCritic, adam: AdamState, clip: float = 0.3,
               lr: float = 5e-5, epochs: int = 40, rng: np.random.Generator | None = None,
               minibatch: int = 512, vf_coef: float = 0.5, ent_coef: float = 0.01,
               normalize: bool = True) -> dict:
    """``epochs`` passes over the batch in shuffled minibatches, one Adam step per minibatch."""
    if batch.advantages is None:
        raise ValueError("compute_gae must run before ppo_update")
    rng = rng if rng is not None else np.random.default_rng(0)
    adv = normalized_advantages(batch) if normalize else batch.advantages
    T = len(batch)
    size = T if not minibatch or minibatch >= T else minibatch
    history = []
    for epoch in range(epochs):
        perm = rng.permutation(T)
        for start in range(0, T - size + 1, size):
            idx = np.sort(perm[start:start + size])
            stats, grads, _ = ppo_loss_and_grads(batch, policy, idx, adv, clip, vf_coef, ent_coef)
            if not math.isfinite(stats["loss"]) or not all(np.all(np.isfinite(g)) for g in grads):
                raise PPOUpdateError(f"non-finite PPO loss in epoch {epoch}: {stats}")
            adam_update(policy.arrays(), grads, adam, lr)
            np.clip(policy.log_std, LOG_STD_MIN, LOG_STD_MAX, out=policy.log_std)
            history.append(stats)
    return {k: float(np.mean([h[k] for h in history])) for k in history[0]} if history else {}


def value_loss(batch: TrajectoryBatch, policy: ActorCritic) -> float:
    """Mean absolute error of dropout-free value predictions against the value targets."""
    if batch.returns is None:
        raise ValueError("compute_gae must run before value_loss")
    v = forward(batch.obs, policy.critic)[:, 0].astype(np.float64)
    return float(np.mean(np.abs(v - batch.returns)))
