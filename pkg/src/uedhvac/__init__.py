"""Robust HVAC control by training PPO agents on adversarially generated weather."""

from uedhvac.building_env import BuildingEnv, RewardParams, rbc_policy
from uedhvac.eval_harness import build_suite, evaluate, evaluate_suite, sim2real_eval
from uedhvac.ou_weather import EnvConfig, WeatherTrace, fit_ou, generate_noisy_trace, synthetic_base_year
from uedhvac.ued import STRATEGIES, Trainer, TrainConfig, load_policy, train_strategy

__version__ = "0.1.0"

__all__ = [
    "BuildingEnv",
    "EnvConfig",
    "RewardParams",
    "STRATEGIES",
    "TrainConfig",
    "Trainer",
    "WeatherTrace",
    "build_suite",
    "evaluate",
    "evaluate_suite",
    "fit_ou",
    "generate_noisy_trace",
    "load_policy",
    "rbc_policy",
    "sim2real_eval",
    "synthetic_base_year",
    "train_strategy",
]
