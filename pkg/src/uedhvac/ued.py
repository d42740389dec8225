"""Environment design: PLR replay, robust PLR, domain randomization, ActiveRL / ActivePLR.

ActiveRL proposes a new level by projected extragradient ascent (Adam-scaled)
on the critic's MC-Dropout uncertainty at the initial state, minus a distance
penalty to the base level.  ActivePLR mixes those proposals with prioritized
replay of earlier levels.

The search runs in normalized-observation units, ``u = phi / std`` with the
observation normalizer's per-variable std, and projects onto the offset box
that keeps the initial weather slice inside the physical bounds table.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .building_env import OBS_DIM, RewardParams, BuildingEnv, observed_weather_bounds
from .neural import AdamState, CheckpointError, adam_direction, load_arrays, mc_uncertainty_grad, save_arrays
from .ou_weather import LOWER_BOUNDS, N_VARS, UPPER_BOUNDS, EnvConfig, WeatherTrace
from .ppo import (
    ActorCritic,
    ObsNormalizer,
    collect_trajectories,
    compute_gae,
    make_actor_critic,
    ppo_update,
    rbc_normalizer,
    value_loss,
)

log = logging.getLogger(__name__)

STRATEGIES = ("vanilla", "dr", "plr", "rplr", "active_rl", "active_plr")


class SearchAborted(FloatingPointError):
    """Raised by :func:`extragradient_step` on a non-finite gradient field."""


def stream_rng(master: int, tag: str) -> np.random.Generator:
    """Independent generator for a named purpose; stream id = sha256(master, tag)."""
    digest = hashlib.sha256(f"{int(master)}:{tag}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:16], "little"))


# --- configs ----------------------------------------------------------------


@dataclass
class PLRConfig:
    rho: float = 0.1     # staleness weight
    beta: float = 0.1    # rank temperature
    n_plr: float = 100   # replay-probability denominator

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"plr.rho must be in [0, 1], got {self.rho}")
        if self.beta <= 0:
            raise ValueError(f"plr.beta must be > 0, got {self.beta}")
        if self.n_plr < 1:
            raise ValueError(f"plr.n_plr must be >= 1, got {self.n_plr}")


# PLR and RPLR use their own tuned values; ActivePLR keeps the PLRConfig defaults
BASELINE_PLR = {"rho": 0.045, "beta": 0.0015, "n_plr": 10}


def default_plr(strategy: str) -> PLRConfig:
    return PLRConfig(**BASELINE_PLR) if strategy in ("plr", "rplr") else PLRConfig()


@dataclass
class SearchConfig:
    n_iters: int = 91
    eta: float = 0.01
    gamma: float = 0.5
    lower: np.ndarray = field(default_factory=lambda: LOWER_BOUNDS.copy())
    upper: np.ndarray = field(default_factory=lambda: UPPER_BOUNDS.copy())
    mc_passes: int = 10
    dropout: float = 0.1
    squared_distance: bool = False

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.lower.shape != (N_VARS,) or self.upper.shape != (N_VARS,):
            raise ValueError(f"search bounds must have {N_VARS} entries")
        if not np.all(self.lower < self.upper):
            raise ValueError("search.lower must be < search.upper elementwise")
        if self.n_iters < 0:
            raise ValueError(f"search.n_iters must be >= 0, got {self.n_iters}")
        if self.eta <= 0:
            raise ValueError(f"search.eta must be > 0, got {self.eta}")
        if self.gamma < 0:
            raise ValueError(f"search.gamma must be >= 0, got {self.gamma}")
        if self.mc_passes < 1:
            raise ValueError(f"search.mc_passes must be >= 1, got {self.mc_passes}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"search.dropout must be in [0, 1), got {self.dropout}")


@dataclass
class MultiplierState:
    lam: np.ndarray  # lower-bound multipliers
    nu: np.ndarray   # upper-bound multipliers

    @classmethod
    def zeros(cls, k: int) -> "MultiplierState":
        return cls(np.zeros(k), np.zeros(k))


# --- level buffer -----------------------------------------------------------


@dataclass
class LevelBuffer:
    levels: list[np.ndarray] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    timestamps: list[int] = field(default_factory=list)
    counter: int = 0

    def __len__(self) -> int:
        return len(self.levels)

    def _check(self, i: int) -> None:
        if not 0 <= i < len(self.levels):
            raise IndexError(f"level index {i} out of range for buffer of size {len(self.levels)}")

    def insert(self, phi) -> int:
        self.levels.append(np.array(phi, dtype=float))
        self.scores.append(0.0)
        self.timestamps.append(0)
        return len(self.levels) - 1

    def update_score(self, i: int, score: float) -> None:
        self._check(i)
        if score < 0:
            raise ValueError(f"level scores must be >= 0, got {score}")
        self.scores[i] = float(score)

    def touch(self, i: int) -> None:
        self._check(i)
        self.timestamps[i] = self.counter

    def state_dict(self) -> dict:
        return {"levels": [l.tolist() for l in self.levels], "scores": list(self.scores),
                "timestamps": list(self.timestamps), "counter": self.counter}

    @classmethod
    def from_state(cls, d: dict) -> "LevelBuffer":
        return cls([np.array(l) for l in d["levels"]], list(d["scores"]), list(d["timestamps"]), d["counter"])


def sample_replay_decision(buffer_size: int, n_plr: float, rng: np.random.Generator) -> int:
    """1 (replay) with probability ``min(1, buffer_size / n_plr)``, else 0 (generate)."""
    if n_plr < 1:
        raise ValueError(f"n_plr must be >= 1, got {n_plr}")
    p = min(1.0, buffer_size / n_plr)
    return int(rng.random() < p)


def score_probabilities(scores, beta: float) -> np.ndarray:
    """Rank prioritization ``(1/rank)^(1/beta)``; rank 1 is the highest score, ties by index."""
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    logw = -np.log(ranks) / beta
    w = np.exp(logw - logw.max())
    return w / w.sum()


def staleness_probabilities(timestamps, counter: int) -> np.ndarray:
    stale = counter - np.asarray(timestamps, dtype=float)
    total = stale.sum()
    if total <= 0:
        return np.full(len(stale), 1.0 / len(stale))
    return stale / total


def plr_probabilities(buffer: LevelBuffer, cfg: PLRConfig) -> np.ndarray:
    if not len(buffer):
        raise ValueError("cannot sample from an empty level buffer")
    return ((1.0 - cfg.rho) * score_probabilities(buffer.scores, cfg.beta)
            + cfg.rho * staleness_probabilities(buffer.timestamps, buffer.counter))


def plr_sample(buffer: LevelBuffer, cfg: PLRConfig, rng: np.random.Generator) -> int:
    p = plr_probabilities(buffer, cfg)
    i = int(rng.choice(len(p), p=p))
    buffer.touch(i)
    return i


def domain_randomize(a, b, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(np.asarray(a, dtype=float), np.asarray(b, dtype=float))


# --- uncertainty search -----------------------------------------------------

UncertaintyFn = Callable[[np.ndarray, np.random.Generator], "tuple[float, np.ndarray]"]


def critic_uncertainty(policy: ActorCritic, s0: np.ndarray, passes: int, dropout: float,
                       anchor: np.ndarray) -> UncertaintyFn:
    """Critic MC-Dropout uncertainty at ``s0`` with its weather slice set to ``anchor + phi``.

    Returns ``(L, dL/dphi)`` with the gradient in physical offset units.
    """
    s0 = np.array(s0, dtype=float)
    anchor = np.asarray(anchor, dtype=float)
    std = policy.normalizer.std[:N_VARS]

    def fn(phi, rng):
        obs = s0.copy()
        obs[:N_VARS] = anchor + phi
        value, gx = mc_uncertainty_grad(policy.normalizer(obs), policy.critic, passes, rng, dropout)
        return value, gx[:N_VARS] / std

    return fn


def distance(phi, phi0, squared: bool = False) -> float:
    d = float(np.linalg.norm(np.asarray(phi) - np.asarray(phi0)))
    return d * d if squared else d


def objective(phi, phi0, gamma: float, uncertainty: UncertaintyFn, rng: np.random.Generator,
              squared: bool = False) -> float:
    """Uncertainty at ``phi`` minus ``gamma`` times its distance from ``phi0``."""
    value, _ = uncertainty(np.asarray(phi, dtype=float), rng)
    return value - gamma * distance(phi, phi0, squared)


def distance_grad(delta: np.ndarray, squared: bool = False) -> np.ndarray:
    if squared:
        return 2.0 * delta
    n = np.linalg.norm(delta)
    return np.zeros_like(delta) if n == 0.0 else delta / n


def extragradient_step(phi: np.ndarray, mult: MultiplierState, grad_fn: Callable[[np.ndarray], np.ndarray],
                       eta: float, a: np.ndarray, b: np.ndarray, adam: AdamState | None = None):
    """One projected extragradient step on the box-constrained Lagrangian.

    Maximizes ``O(phi)`` subject to ``a <= phi <= b`` through
    ``L = O + lam.(phi - a) + nu.(b - phi)``: ``phi`` ascends, the
    multipliers descend, and every half and full step is projected onto
    ``[a, b] x [0, inf) x [0, inf)``.  With ``adam`` the field is rescaled by
    Adam moments, updated at both evaluations.  Returns ``(phi, mult, adam)``.
    """
    phi = np.asarray(phi, dtype=float)
    k = phi.size

    def field_at(p, m):
        g = np.asarray(grad_fn(p), dtype=float)
        if g.shape != p.shape or not np.all(np.isfinite(g)):
            raise SearchAborted(f"non-finite or mis-shaped objective gradient {g}")
        return np.concatenate([-(g + m.lam - m.nu), p - a, b - p])

    def project(w):
        return (np.clip(w[:k], a, b), MultiplierState(np.maximum(w[k:2 * k], 0.0), np.maximum(w[2 * k:], 0.0)))

    def direction(F):
        return adam_direction([F], adam)[0] if adam is not None else F

    omega = np.concatenate([phi, mult.lam, mult.nu])
    half_phi, half_mult = project(omega - eta * direction(field_at(phi, mult)))
    new_phi, new_mult = project(omega - eta * direction(field_at(half_phi, half_mult)))
    return new_phi, new_mult, adam


def active_search(uncertainty: UncertaintyFn, phi0, cfg: SearchConfig, rng: np.random.Generator,
                  lower=None, upper=None, start=None, scale=None) -> np.ndarray:
    """Propose a level by ``cfg.n_iters`` extragradient-Adam iterations.

    ``uncertainty(phi, rng)`` returns ``(L, dL/dphi)``.  ``lower``/``upper``
    bound the offsets (default ``cfg.lower``/``cfg.upper``), ``start`` is the
    first iterate (default ``phi0``) and ``scale`` the per-coordinate unit of
    the search space.  Fresh dropout masks are drawn at every gradient
    evaluation.  On a non-finite gradient the best evaluated point so far is
    returned.
    """
    phi0 = np.asarray(phi0, dtype=float)
    lower = cfg.lower if lower is None else np.asarray(lower, dtype=float)
    upper = cfg.upper if upper is None else np.asarray(upper, dtype=float)
    scale = np.ones_like(phi0) if scale is None else np.asarray(scale, dtype=float)
    start = np.clip(phi0 if start is None else np.asarray(start, dtype=float), lower, upper)
    if cfg.n_iters == 0:
        return start.copy()
    u0 = phi0 / scale
    lo_u, hi_u = lower / scale, upper / scale
    u = np.clip(start / scale, lo_u, hi_u)
    mult = MultiplierState.zeros(u.size)
    adam = AdamState.zeros_like([np.zeros(3 * u.size)])
    best = [-math.inf, u.copy()]

    def grad_fn(v):
        value, g = uncertainty(v * scale, rng)
        delta = v - u0
        obj = value - cfg.gamma * distance(v, u0, cfg.squared_distance)
        if math.isfinite(obj) and obj > best[0]:
            best[0], best[1] = obj, v.copy()
        return np.asarray(g) * scale - cfg.gamma * distance_grad(delta, cfg.squared_distance)

    for it in range(cfg.n_iters):
        try:
            u, mult, adam = extragradient_step(u, mult, grad_fn, cfg.eta, lo_u, hi_u, adam)
        except SearchAborted as exc:
            log.warning("uncertainty search aborted at iteration %d: %s", it, exc)
            return np.clip(best[1] * scale, lower, upper)
    return np.clip(u * scale, lower, upper)


# --- training loop ----------------------------------------------------------


@dataclass
class PPOConfig:
    lr: float = 5e-5
    clip: float = 0.3
    gamma: float = 0.8
    gae_lambda: float = 0.95
    inner_steps: int = 40   # epochs over each rollout
    minibatch: int = 512
    vf_coef: float = 0.5
    ent_coef: float = 0.01
    hidden: tuple = (256, 256)
    dropout: float = 0.1
    init_log_std: float = -0.5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.lr <= 0:
            raise ValueError(f"ppo.lr must be > 0, got {self.lr}")
        if not 0.0 <= self.clip < 1.0:
            raise ValueError(f"ppo.clip must be in [0, 1), got {self.clip}")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("ppo.gamma and ppo.gae_lambda must be in [0, 1]")
        if self.inner_steps < 0 or self.minibatch < 1:
            raise ValueError("ppo.inner_steps must be >= 0 and ppo.minibatch >= 1")
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError(f"ppo.hidden must be a nonempty list of positive widths, got {self.hidden}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"ppo.dropout must be in [0, 1), got {self.dropout}")


@dataclass
class TrainConfig:
    strategy: str = "active_plr"
    seed: int = 0
    total_steps: int = 200_000
    dt: float = 1.0
    normalizer_episodes: int = 10
    episode_steps: int | None = None  # None: one simulated year
    ppo: PPOConfig = field(default_factory=PPOConfig)
    plr: PLRConfig | None = None  # None: default_plr(strategy)
    search: SearchConfig = field(default_factory=SearchConfig)
    reward: RewardParams = field(default_factory=RewardParams)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.plr is None:
            self.plr = default_plr(self.strategy)
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.episode_steps is not None and self.episode_steps < 1:
            raise ValueError(f"episode_steps must be >= 1, got {self.episode_steps}")
        if self.normalizer_episodes < 1:
            raise ValueError(f"normalizer_episodes must be >= 1, got {self.normalizer_episodes}")


def params_digest(policy: ActorCritic) -> str:
    h = hashlib.sha256()
    for a in policy.arrays():
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


class Trainer:
    """Single-owner training loop for one strategy and one master seed.

    One episode is one full simulated year (truncated at ``total_steps``).
    Each episode picks a level, rolls it out, scores it by value loss, and
    (except for RPLR on generated levels) applies a PPO update.
    """

    RNG_TAGS = ("init", "normalizer", "levels", "rollout", "ppo", "search")

    def __init__(self, cfg: TrainConfig, base: WeatherTrace):
        self.cfg = cfg
        self.base = base
        self.rngs = {tag: stream_rng(cfg.seed, tag) for tag in self.RNG_TAGS}
        self.env = BuildingEnv(base, dt=cfg.dt, reward_params=cfg.reward)
        self.base_cfg = EnvConfig()
        self.phi0 = self.base_cfg.phi
        self.anchor = np.asarray(base.values[0], dtype=float)
        lo, hi = observed_weather_bounds(self.anchor)
        self.lower = np.maximum(lo, cfg.search.lower - self.anchor)
        self.upper = np.minimum(hi, cfg.search.upper - self.anchor)
        normalizer = rbc_normalizer(base, self.base_cfg, episodes=cfg.normalizer_episodes, dt=cfg.dt,
                                    seed=int(self.rngs["normalizer"].integers(2**31)))
        p = cfg.ppo
        self.policy = make_actor_critic(OBS_DIM, 2, hidden=p.hidden, dropout=p.dropout, rng=self.rngs["init"],
                                        normalizer=normalizer, init_log_std=p.init_log_std)
        self.adam = AdamState.zeros_like(self.policy.arrays())
        self.buffer = LevelBuffer()
        self.s0 = self.env.reset(self.base_cfg, seed=0).copy()
        self.search_start = self.phi0.copy()
        self.episode = 0
        self.steps = 0

    @property
    def done(self) -> bool:
        return self.steps >= self.cfg.total_steps

    def _search(self) -> np.ndarray:
        sc = self.cfg.search
        fn = critic_uncertainty(self.policy, self.s0, sc.mc_passes, sc.dropout, self.anchor)
        phi = active_search(fn, self.phi0, sc, self.rngs["search"], self.lower, self.upper,
                            start=self.search_start, scale=self.policy.normalizer.std[:N_VARS])
        self.search_start = phi.copy()
        return phi

    def choose_level(self) -> tuple[np.ndarray, int | None, str]:
        """Return ``(phi, buffer index or None, source)`` for the next episode."""
        kind, rng = self.cfg.strategy, self.rngs["levels"]
        if kind == "vanilla":
            return self.phi0.copy(), None, "generated"
        if kind == "dr":
            return domain_randomize(self.lower, self.upper, rng), None, "generated"
        if kind == "active_rl":
            return self._search(), None, "generated"
        if sample_replay_decision(len(self.buffer), self.cfg.plr.n_plr, rng):
            i = plr_sample(self.buffer, self.cfg.plr, rng)
            return self.buffer.levels[i].copy(), i, "replay"
        phi = domain_randomize(self.lower, self.upper, rng) if kind in ("plr", "rplr") else self._search()
        return phi, None, "generated"

    def run_episode(self) -> dict:
        phi, idx, source = self.choose_level()
        if not (np.all(phi >= self.lower - 1e-9) and np.all(phi <= self.upper + 1e-9)):
            raise AssertionError(f"level {phi} escaped the bounds box")
        env_cfg = self.base_cfg.with_phi(phi)
        length = self.env.episode_steps if self.cfg.episode_steps is None else min(self.cfg.episode_steps,
                                                                                     self.env.episode_steps)
        horizon = min(length, self.cfg.total_steps - self.steps)
        seed = int(self.rngs["rollout"].integers(2**31))
        obs = self.env.reset(env_cfg, seed=seed)
        batch = collect_trajectories(self.env, self.policy, horizon, self.rngs["rollout"], obs=obs)
        p = self.cfg.ppo
        batch = compute_gae(batch, p.gamma, p.gae_lambda)
        score = value_loss(batch, self.policy)
        update = not (self.cfg.strategy == "rplr" and source == "generated")
        stats = {"entropy": float(np.sum(0.5 * np.log(2 * np.pi * np.e) + self.policy.log_std))}
        if update and p.inner_steps > 0:
            stats = ppo_update(batch, self.policy, self.adam, clip=p.clip, lr=p.lr, epochs=p.inner_steps,
                               rng=self.rngs["ppo"], minibatch=p.minibatch, vf_coef=p.vf_coef,
                               ent_coef=p.ent_coef)
        if self.cfg.strategy in ("plr", "rplr", "active_plr"):
            if idx is None:
                idx = self.buffer.insert(phi)
            self.buffer.update_score(idx, score)
            self.buffer.touch(idx)
            self.buffer.counter += 1
        self.steps += horizon
        record = {
            "episode": self.episode,
            "strategy": self.cfg.strategy,
            "phi": [float(v) for v in phi],
            "source": source,
            "score": float(score),
            "step": self.steps,
            "mean_reward": float(np.mean(batch.rewards)),
            "value_loss": float(score),
            "entropy": float(stats["entropy"]),
            "updated": bool(update),
        }
        self.episode += 1
        return record

    def run(self, callback: Callable[[dict], None] | None = None) -> list[dict]:
        records = []
        while not self.done:
            rec = self.run_episode()
            records.append(rec)
            if callback is not None:
                callback(rec)
        return records

    # -- checkpoint state (network arrays are stored separately) --

    def state_dict(self) -> dict:
        return {
            "episode": self.episode,
            "steps": self.steps,
            "buffer": self.buffer.state_dict(),
            "search_start": self.search_start.tolist(),
            "rngs": {k: g.bit_generator.state for k, g in self.rngs.items()},
            "adam_t": self.adam.t,
            "cfg": {"strategy": self.cfg.strategy, "seed": self.cfg.seed},
        }

    def load_state(self, d: dict) -> None:
        if d["cfg"] != {"strategy": self.cfg.strategy, "seed": self.cfg.seed}:
            raise CheckpointError(f"checkpoint was written for {d['cfg']}, not this run")
        self.episode, self.steps = int(d["episode"]), int(d["steps"])
        self.buffer = LevelBuffer.from_state(d["buffer"])
        self.search_start = np.asarray(d["search_start"], dtype=float)
        for k, state in d["rngs"].items():
            self.rngs[k].bit_generator.state = state
        self.adam.t = int(d["adam_t"])

    def _array_names(self) -> list[str]:
        n = len(self.policy.arrays())
        return [f"param{i}" for i in range(n)] + [f"adam_m{i}" for i in range(n)] + [f"adam_v{i}" for i in range(n)]

    def save(self, path) -> None:
        """Write network, optimizer moments and loop state into one checkpoint file."""
        arrays = self.policy.arrays() + self.adam.m + self.adam.v
        meta = {"trainer": self.state_dict(),
                "arch": {"obs_dim": OBS_DIM, "act_dim": 2, "hidden": list(self.cfg.ppo.hidden),
                         "dropout": self.cfg.ppo.dropout},
                "normalizer": {"mean": self.policy.normalizer.mean.tolist(),
                               "std": self.policy.normalizer.std.tolist()}}
        save_arrays(path, dict(zip(self._array_names(), arrays)), meta)

    def load(self, path) -> None:
        current = self.policy.arrays() + self.adam.m + self.adam.v
        expect = {k: a.shape for k, a in zip(self._array_names(), current)}
        loaded, meta = load_arrays(path, expect)
        for k, a in zip(self._array_names(), current):
            a[...] = loaded[k]
        self.policy.normalizer.mean[...] = meta["normalizer"]["mean"]
        self.policy.normalizer.std[...] = meta["normalizer"]["std"]
        self.load_state(meta["trainer"])


def load_policy(path) -> ActorCritic:
    """Rebuild the policy stored in a :meth:`Trainer.save` checkpoint."""
    arrays, meta = load_arrays(path)
    try:
        arch, norm = meta["arch"], meta["normalizer"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: checkpoint lacks {exc.args[0]!r} metadata") from None
    policy = make_actor_critic(arch["obs_dim"], arch["act_dim"], hidden=arch["hidden"], dropout=arch["dropout"],
                               normalizer=ObsNormalizer(np.asarray(norm["mean"]), np.asarray(norm["std"])))
    current = policy.arrays()
    for i, a in enumerate(current):
        got = arrays.get(f"param{i}")
        if got is None or got.shape != a.shape:
            raise CheckpointError(f"{path}: parameter {i} missing or mis-shaped")
        a[...] = got
    return policy


def train_strategy(kind: str, cfg: TrainConfig, base: WeatherTrace, callback=None):
    """Train ``kind`` under ``cfg``; returns ``(policy, per-episode records)``."""
    cfg = TrainConfig(**{**asdict_shallow(cfg), "strategy": kind})
    trainer = Trainer(cfg, base)
    records = trainer.run(callback)
    return trainer.policy, records


def asdict_shallow(cfg) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
