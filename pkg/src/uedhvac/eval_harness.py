"""Evaluation: extreme-weather suite, fidelity jump, comfort violations, ablations.

Episodic reward is the time integral of the per-step reward rate,
``sum(r * dt)``, so a year at ``dt = 0.25`` and a year at ``dt = 1`` are on
the same scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .building_env import (
    OBS_NAMES,
    BuildingEnv,
    RewardParams,
    rbc_policy,
    random_policy,
)
from .ou_weather import DEFAULT_SIGMA, DEFAULT_TAU, EnvConfig, WeatherTrace
from .ppo import ActorCritic

_OCC = OBS_NAMES.index("occupancy")
_MONTH = OBS_NAMES.index("month")
_DAY = OBS_NAMES.index("day")

REPORT_FIELDS = ("env", "strategy", "seed", "reward", "violation_days", "energy_wh", "mean_ppd")
PPD_LIMIT = 20.0

# --- controllers ------------------------------------------------------------


class Controller:
    """Maps an observation to a (cooling, heating) setpoint pair."""

    name = "controller"

    def reset(self, seed: int) -> None:
        pass

    def __call__(self, obs: np.ndarray):
        raise NotImplementedError


class NetworkController(Controller):
    """Deterministic mean action of the actor, dropout off."""

    def __init__(self, policy: ActorCritic, name: str = "network"):
        self.policy = policy
        self.name = name

    def __call__(self, obs):
        return self.policy.mean_action(obs)


class RBCController(Controller):
    name = "rbc"

    def __call__(self, obs):
        return rbc_policy(obs)


class RandomController(Controller):
    name = "random"

    def __init__(self):
        self.rng = np.random.default_rng(0)

    def reset(self, seed: int) -> None:
        self.rng = np.random.default_rng([seed, 0x5EED])

    def __call__(self, obs):
        return random_policy(self.rng)


class ConstantController(Controller):
    def __init__(self, cooling: float, heating: float):
        self.action = (float(cooling), float(heating))
        self.name = f"constant({cooling:g},{heating:g})"

    def __call__(self, obs):
        return self.action


# --- episodes ---------------------------------------------------------------


@dataclass
class EpisodeLog:
    """Per-decision record of one evaluation episode."""

    dt: float
    rewards: np.ndarray    # per-step reward rates
    ppd: np.ndarray
    occupancy: np.ndarray
    month: np.ndarray
    day: np.ndarray
    demand: np.ndarray     # W

    @property
    def hours(self) -> float:
        return len(self.rewards) * self.dt

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards) * self.dt)

    @property
    def energy_wh(self) -> float:
        return float(np.sum(self.demand) * self.dt)

    @property
    def mean_occupied_ppd(self) -> float:
        occ = self.occupancy > 0
        return float(self.ppd[occ].mean()) if occ.any() else 0.0


def run_episode(controller: Controller, env: BuildingEnv, cfg: EnvConfig, seed: int,
                repeat: int = 1) -> EpisodeLog:
    """One full year; each controller decision is held for ``repeat`` env steps."""
    if repeat < 1:
        raise ValueError(f"repeat must be >= 1, got {repeat}")
    if env.episode_steps % repeat:
        raise ValueError(f"repeat {repeat} does not divide the episode length {env.episode_steps}")
    controller.reset(seed)
    obs = env.reset(cfg, seed=seed)
    n = env.episode_steps
    cols = {k: np.empty(n) for k in ("rewards", "ppd", "occupancy", "month", "day", "demand")}
    action = None
    for k in range(n):
        if k % repeat == 0:
            action = controller(obs)
        cols["occupancy"][k] = obs[_OCC]
        cols["month"][k] = obs[_MONTH]
        cols["day"][k] = obs[_DAY]
        obs, r, _ = env.step(action)
        cols["rewards"][k] = r
        cols["ppd"][k] = env.ppd
        cols["demand"][k] = env.demand
    return EpisodeLog(dt=env.dt, **cols)


def comfort_violation_days(log: EpisodeLog, limit: float = PPD_LIMIT) -> int:
    """Number of calendar days with at least one occupied step above ``limit`` PPD."""
    bad = (log.occupancy > 0) & (log.ppd > limit)
    days = {(int(m), int(d)) for m, d in zip(log.month[bad], log.day[bad])}
    return len(days)


# --- reports ----------------------------------------------------------------


@dataclass
class EvalRow:
    env: str
    strategy: str
    seed: int
    reward: float
    violation_days: int
    energy_wh: float
    mean_ppd: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("no values to aggregate")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self

    def summary(self) -> list[dict]:
        """Mean and SE over seeds for every (env, strategy) pair, in first-seen order."""
        groups: dict[tuple[str, str], list[EvalRow]] = {}
        for r in self.rows:
            groups.setdefault((r.env, r.strategy), []).append(r)
        out = []
        for (env, strat), rows in groups.items():
            entry = {"env": env, "strategy": strat, "n_seeds": len(rows), "seeds": [r.seed for r in rows]}
            for k in ("reward", "violation_days", "energy_wh", "mean_ppd"):
                entry[k], entry[f"{k}_se"] = mean_se([getattr(r, k) for r in rows])
            out.append(entry)
        return out

    def mean_reward(self, strategy: str, envs: Sequence[str] | None = None) -> float:
        vals = [r.reward for r in self.rows if r.strategy == strategy and (envs is None or r.env in envs)]
        if not vals:
            raise KeyError(f"no rows for strategy {strategy!r}")
        return float(np.mean(vals))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.as_dict().items()})

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != REPORT_FIELDS:
                raise ValueError(f"{path}: header {reader.fieldnames} != {list(REPORT_FIELDS)}")
            rows = [EvalRow(d["env"], d["strategy"], int(d["seed"]), float(d["reward"]),
                            int(d["violation_days"]), float(d["energy_wh"]), float(d["mean_ppd"]))
                    for d in reader]
        return cls(rows)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps({"rows": [r.as_dict() for r in self.rows],
                                          "summary": self.summary()}, indent=2))

    @classmethod
    def read_json(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls([EvalRow(**r) for r in d["rows"]])

    def write_long_csv(self, path) -> None:
        """Plot-ready long format: one line per (env, strategy, seed, metric)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env", "strategy", "seed", "metric", "value"])
            for r in self.rows:
                for k in ("reward", "violation_days", "energy_wh", "mean_ppd"):
                    w.writerow([r.env, r.strategy, r.seed, k, repr(getattr(r, k))])


def evaluate(controller: Controller, base: WeatherTrace, cfg: EnvConfig, env_name: str = "phi0",
             dt: float = 1.0, seeds: Sequence[int] = (0, 1, 2), episodes: int = 1, repeat: int = 1,
             reward_params: RewardParams = RewardParams(), occupancy_override: int | None = None,
             strategy: str | None = None) -> EvalReport:
    """Evaluate one controller on one configuration; one row per seed.

    With ``episodes > 1`` each row holds the mean over episodes with weather
    seeds ``seed * 1000 + e``.
    """
    if episodes < 1:
        raise ValueError(f"episodes must be >= 1, got {episodes}")
    env = BuildingEnv(base, dt=dt, reward_params=reward_params, occupancy_override=occupancy_override)
    rows = []
    for s in seeds:
        logs = [run_episode(controller, env, cfg, seed=int(s) * 1000 + e, repeat=repeat) for e in range(episodes)]
        rows.append(EvalRow(
            env=env_name,
            strategy=strategy or controller.name,
            seed=int(s),
            reward=float(np.mean([l.total_reward for l in logs])),
            violation_days=int(round(np.mean([comfort_violation_days(l) for l in logs]))),
            energy_wh=float(np.mean([l.energy_wh for l in logs])),
            mean_ppd=float(np.mean([l.mean_occupied_ppd for l in logs])),
        ))
    return EvalReport(rows)


# --- suite ------------------------------------------------------------------

EXTREME_OFFSETS = {
    "phi1_drought": (15.0, -30.0, 0.0, 0.0, 200.0),
    "phi2_storm": (-2.0, 25.0, 8.0, 0.0, 0.0),
    "phi3_heatwave": (10.0, 25.0, 0.0, 0.0, 100.0),
    "phi4_cold_snap": (-15.0, 0.0, 3.0, 0.0, 0.0),
}


def build_suite(sigma=DEFAULT_SIGMA, tau=DEFAULT_TAU) -> dict[str, EnvConfig]:
    """Base level plus five extreme scenarios, in a fixed order."""
    suite = {"phi0": EnvConfig.from_phi(np.zeros(5), sigma, tau)}
    for name, off in EXTREME_OFFSETS.items():
        suite[name] = EnvConfig.from_phi(off, sigma, tau)
    suite["phi5_erratic"] = suite["phi0"].scale_sigma(3.0)
    return suite


def evaluate_suite(controller: Controller, base: WeatherTrace, suite: dict[str, EnvConfig] | None = None,
                   seeds: Sequence[int] = (0, 1, 2), strategy: str | None = None, **kw) -> EvalReport:
    suite = build_suite() if suite is None else suite
    report = EvalReport()
    for name, cfg in suite.items():
        report.extend(evaluate(controller, base, cfg, env_name=name, seeds=seeds, strategy=strategy, **kw))
    return report


# --- fidelity jump ----------------------------------------------------------


@dataclass
class Sim2RealResult:
    env: str
    reward_lo: float
    reward_hi: float
    hours_lo: float
    hours_hi: float

    @property
    def relative_change(self) -> float:
        """``(hi - lo) / |lo|``; negative means the fine simulator scored worse."""
        return (self.reward_hi - self.reward_lo) / abs(self.reward_lo)

    @property
    def drop(self) -> float:
        """Size of the fidelity gap, either direction."""
        return abs(self.relative_change)


def sim2real_eval(controller: Controller, base: WeatherTrace, suite: dict[str, EnvConfig],
                  seeds: Sequence[int] = (0,), repeat: int = 4,
                  reward_params: RewardParams = RewardParams()) -> list[Sim2RealResult]:
    """Evaluate at ``dt = 1`` and at ``dt = 1/repeat`` with actions held ``repeat`` sub-steps."""
    fine_dt = 1.0 / repeat
    lo_env = BuildingEnv(base, dt=1.0, reward_params=reward_params)
    hi_env = BuildingEnv(base, dt=fine_dt, reward_params=reward_params)
    out = []
    for name, cfg in suite.items():
        lo = [run_episode(controller, lo_env, cfg, seed=s) for s in seeds]
        hi = [run_episode(controller, hi_env, cfg, seed=s, repeat=repeat) for s in seeds]
        out.append(Sim2RealResult(
            env=name,
            reward_lo=float(np.mean([l.total_reward for l in lo])),
            reward_hi=float(np.mean([l.total_reward for l in hi])),
            hours_lo=lo[0].hours,
            hours_hi=hi[0].hours,
        ))
    return out


def mean_relative_change(results: Sequence[Sim2RealResult]) -> float:
    return float(np.mean([r.relative_change for r in results]))


# --- ablations --------------------------------------------------------------


def ablation(param: str, values: Sequence[float], train_fn: Callable[[str, float, int], ActorCritic],
             base: WeatherTrace, seeds: Sequence[int] = (0, 1, 2), eval_seeds: Sequence[int] = (0,),
             suite: dict[str, EnvConfig] | None = None) -> list[dict]:
    """One row per value: ActiveRL trained with ``param = value`` on each seed, scored on the suite.

    ``train_fn(param, value, seed)`` returns a trained policy.
    """
    if param not in ("gamma", "eta"):
        raise ValueError(f"ablation parameter must be 'gamma' or 'eta', got {param!r}")
    suite = build_suite() if suite is None else suite
    rows = []
    for v in values:
        per_seed = []
        for s in seeds:
            policy = train_fn(param, float(v), int(s))
            rep = evaluate_suite(NetworkController(policy, "active_rl"), base, suite, seeds=eval_seeds)
            per_seed.append({name: rep.mean_reward("active_rl", [name]) for name in suite})
        row = {"param": param, "value": float(v), "seeds": [int(s) for s in seeds]}
        for name in suite:
            row[name], row[f"{name}_se"] = mean_se([p[name] for p in per_seed])
        row["suite_mean"], row["suite_mean_se"] = mean_se([np.mean(list(p.values())) for p in per_seed])
        rows.append(row)
    return rows


def ablation_gamma(values: Sequence[float], train_fn, base, **kw) -> list[dict]:
    return ablation("gamma", values, train_fn, base, **kw)


def ablation_eta(values: Sequence[float], train_fn, base, **kw) -> list[dict]:
    return ablation("eta", values, train_fn, base, **kw)
