"""Single-zone RC building with thermostat setpoint actions.

The zone temperature follows a first-order (explicit Euler) RC update driven by
outdoor temperature, a deadband thermostat, occupants and solar gain.  Weather
comes from a base hourly year plus per-variable OU noise; the observation is a
17-vector (see ``OBS_NAMES``).

Each step is treated as an interval: outdoor forcing is the interval mean of the
linearly interpolated weather and comfort is scored at the interval-mean indoor
temperature, so refining ``dt`` only refines the integration.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .ou_weather import (
    HOURS_PER_YEAR,
    LOWER_BOUNDS,
    UPPER_BOUNDS,
    EnvConfig,
    WeatherTrace,
    add_ou_noise,
)

log = logging.getLogger(__name__)

OBS_NAMES = (
    "outdoor_temp", "outdoor_rh", "wind_speed", "wind_direction", "direct_solar",
    "indoor_temp", "indoor_rh", "clothing", "ppd", "heating_setpoint",
    "cooling_setpoint", "hvac_demand", "occupancy", "year", "month", "day", "hour",
)
OBS_DIM = len(OBS_NAMES)
WEATHER_SLICE = slice(0, 5)

COOLING_RANGE = (22.5, 30.0)
HEATING_RANGE = (15.0, 22.5)
ACTION_LOW = np.array([COOLING_RANGE[0], HEATING_RANGE[0]])
ACTION_HIGH = np.array([COOLING_RANGE[1], HEATING_RANGE[1]])

# RC surrogate constants.  C_TH is a light-construction effective thermal mass
# (~110 kJ/(m^2 K) over 463.6 m^2); with bare air mass the hourly explicit update
# is unstable, (1/R_TH + K_HVAC) * 3600 / C_TH must stay well below 1.
C_TH = 5.1e7          # J/K
R_TH = 0.005          # K/W
Q_MAX = 10_000.0      # W
K_HVAC = 2000.0       # W/K
ETA_HEAT = 0.9
COP_COOL = 3.0
Q_PER_OCCUPANT = 100.0  # W
SOLAR_APERTURE = 0.05 * 46.36  # m^2, multiplies direct solar W/m^2
ALPHA_RH = 0.2        # 1/h
T_INIT = 21.0
RH_INIT = 50.0
YEAR = 1991
OCCUPANTS = 10

_MONTH_DAYS = (31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31)
_MONTH_START = np.cumsum((0,) + _MONTH_DAYS[:-1])


class Action(NamedTuple):
    cooling: float
    heating: float


@dataclass(frozen=True)
class RewardParams:
    rho_reward: float = 0.5
    lambda_E: float = 1e-4
    lambda_P: float = 0.1
    ppd_threshold: float = 20.0

    def __post_init__(self):
        if not 0.0 <= self.rho_reward <= 1.0:
            raise ValueError(f"rho_reward must be in [0, 1], got {self.rho_reward}")
        if self.lambda_E <= 0 or self.lambda_P <= 0:
            raise ValueError("lambda_E and lambda_P must be > 0")


@dataclass
class ZoneState:
    indoor_temp: float
    indoor_rh: float
    year: int
    month: int
    day: int
    hour: int
    noise: np.ndarray


class BoundsError(ValueError):
    """Raised when a configuration's observed weather slice leaves the bounds table."""


def calendar(hours: float) -> tuple[int, int, int, int, int]:
    """(year, month, day, hour, weekday) for an elapsed-hours clock; Jan 1 is a Monday."""
    whole = int(math.floor(hours + 1e-9))
    year_idx, h = divmod(whole, HOURS_PER_YEAR)
    doy, hour = divmod(h, 24)
    month = int(np.searchsorted(_MONTH_START, doy, side="right"))
    day = doy - int(_MONTH_START[month - 1]) + 1
    return YEAR + year_idx, month, day, hour, doy % 7


def day_of_year(month: int, day: int) -> int:
    return int(_MONTH_START[month - 1]) + day - 1


def occupancy_schedule(month: int, day: int, hour: int) -> int:
    """10 occupants 08:00-17:59 on weekdays, else 0."""
    weekday = day_of_year(month, day) % 7
    return OCCUPANTS if weekday < 5 and 8 <= hour <= 17 else 0


def clothing(month: int) -> float:
    return 1.0 if month >= 10 or month <= 3 else 0.5


def compute_ppd(t_in: float, rh: float, clo: float) -> float:
    """Fanger-curve PPD from a linear PMV proxy."""
    t_comfort = 22.0 + (1.0 - clo) * 5.0  # 22 at 1.0 clo, 24.5 at 0.5 clo
    pmv = 0.3 * (t_in - t_comfort) + 0.01 * (rh - 50.0)
    return ppd_from_pmv(pmv)


def ppd_from_pmv(pmv: float) -> float:
    p2 = pmv * pmv
    return 100.0 - 95.0 * math.exp(-0.03353 * p2 * p2 - 0.2179 * p2)


def compute_reward(p_t: float, ppd: float, occupancy: float, params: RewardParams = RewardParams()) -> float:
    energy = params.rho_reward * params.lambda_E * p_t
    comfort = 0.0
    if occupancy > 0 and ppd > params.ppd_threshold:
        comfort = (1.0 - params.rho_reward) * params.lambda_P * ppd
    return -energy - comfort


def hvac_power(t_in: float, heating_sp: float, cooling_sp: float) -> float:
    """Deadband thermostat heat flow in W (positive heats, negative cools)."""
    if t_in < heating_sp:
        return min(K_HVAC * (heating_sp - t_in), Q_MAX)
    if t_in > cooling_sp:
        return -min(K_HVAC * (t_in - cooling_sp), Q_MAX)
    return 0.0


def electricity_demand(q_hvac: float) -> float:
    if q_hvac > 0:
        return q_hvac / ETA_HEAT
    return -q_hvac / COP_COOL


def clamp_action(action: Sequence[float]) -> tuple[Action, bool]:
    cool, heat = float(action[0]), float(action[1])
    c = min(max(cool, COOLING_RANGE[0]), COOLING_RANGE[1])
    h = min(max(heat, HEATING_RANGE[0]), HEATING_RANGE[1])
    return Action(c, h), (c != cool or h != heat)


def rbc_policy(obs: np.ndarray) -> Action:
    """Seasonal setpoint bands; everything off when nobody is in."""
    if obs[12] <= 0:
        return Action(COOLING_RANGE[1], HEATING_RANGE[0])
    if 6 <= int(obs[14]) <= 9:
        return Action(29.0, min(26.0, HEATING_RANGE[1]))
    return Action(23.5, 20.0)


def random_policy(rng: np.random.Generator) -> Action:
    return Action(float(rng.uniform(*COOLING_RANGE)), float(rng.uniform(*HEATING_RANGE)))


def observed_weather_bounds(anchor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Offset box that keeps ``anchor + phi`` inside the bounds table."""
    anchor = np.asarray(anchor, dtype=float)
    return LOWER_BOUNDS - anchor, UPPER_BOUNDS - anchor


def interpolate_hourly(values: np.ndarray, dt: float) -> np.ndarray:
    """Linear interpolation of hourly rows onto a ``dt``-hour grid (wrapping at year end)."""
    if dt == 1.0:
        return np.array(values, dtype=float)
    n = values.shape[0]
    t = np.arange(int(round(n / dt))) * dt
    lo = np.floor(t).astype(int)
    frac = (t - lo)[:, None]
    hi = (lo + 1) % n
    return values[lo] * (1.0 - frac) + values[hi] * frac


class BuildingEnv:
    """Gym-style single-zone HVAC environment.

    ``reset(cfg, seed)`` builds the perturbed weather for the whole episode,
    ``step(action)`` advances one ``dt``-hour interval.  Rewards are per-step
    rates; multiply by ``dt`` to weight them by simulated hours.
    """

    def __init__(self, base: WeatherTrace, dt: float = 1.0, reward_params: RewardParams = RewardParams(),
                 occupancy_override: int | None = None):
        if dt not in (1.0, 0.25, 0.5):
            raise ValueError(f"dt must be 1.0, 0.5 or 0.25 hours, got {dt}")
        self.base = base
        self.dt = dt
        self.reward_params = reward_params
        self.occupancy_override = occupancy_override
        self.episode_steps = int(round(HOURS_PER_YEAR / dt))
        self._base_fine = interpolate_hourly(base.values, dt)
        self.cfg: EnvConfig | None = None
        self._weather: list[list[float]] | None = None
        self._noise: np.ndarray | None = None
        self._k = 0
        self.clamp_count = 0
        self.last_obs: np.ndarray | None = None

    @property
    def anchor(self) -> np.ndarray:
        """Base weather at the first timestep; the reset weather slice is ``anchor + phi``."""
        return self.base.values[0].copy()

    def check_bounds(self, cfg: EnvConfig) -> None:
        obs_weather = self.anchor + cfg.phi
        bad = (obs_weather < LOWER_BOUNDS - 1e-9) | (obs_weather > UPPER_BOUNDS + 1e-9)
        if bad.any():
            raise BoundsError(
                f"phi={cfg.phi.tolist()} puts the initial weather {obs_weather.tolist()} outside "
                f"[{LOWER_BOUNDS.tolist()}, {UPPER_BOUNDS.tolist()}]"
            )

    def reset(self, cfg: EnvConfig, seed: int = 0) -> np.ndarray:
        self.check_bounds(cfg)
        self.cfg = cfg
        noisy = add_ou_noise(self._base_fine, cfg, self.dt, seed)
        self._noise = noisy - self._base_fine
        self._weather = noisy.tolist()
        self._forcing = (0.5 * (noisy + np.roll(noisy, -1, axis=0))).tolist()
        self._k = 0
        self.t_in = T_INIT
        self.rh_in = RH_INIT
        self.cooling_sp, self.heating_sp = 23.5, 20.0
        self.demand = 0.0
        self.clamp_count = 0
        _, month, day, hour, _ = calendar(0.0)
        self.clo = clothing(month)
        self.ppd = compute_ppd(self.t_in, self.rh_in, self.clo)
        self.last_obs = self._observe()
        return self.last_obs

    def _occupancy(self, month: int, day: int, hour: int) -> int:
        if self.occupancy_override is not None:
            return self.occupancy_override
        return occupancy_schedule(month, day, hour)

    def _observe(self) -> np.ndarray:
        year, month, day, hour, _ = calendar(self._k * self.dt)
        w = self._weather[self._k % self.episode_steps]
        return np.array(
            w + [self.t_in, self.rh_in, self.clo, self.ppd, self.heating_sp, self.cooling_sp,
                 self.demand, float(self._occupancy(month, day, hour)), float(year), float(month),
                 float(day), float(hour)]
        )

    @property
    def state(self) -> ZoneState:
        year, month, day, hour, _ = calendar(self._k * self.dt)
        return ZoneState(self.t_in, self.rh_in, year, month, day, hour,
                         self._noise[self._k % self.episode_steps].copy())

    @property
    def done(self) -> bool:
        return self._k >= self.episode_steps

    def step(self, action: Sequence[float]) -> tuple[np.ndarray, float, bool]:
        if self._weather is None:
            raise RuntimeError("reset() must be called before step()")
        if self.done:
            raise RuntimeError("episode finished; call reset()")
        act, clamped = clamp_action(action)
        if clamped:
            if self.clamp_count == 0:
                log.warning("action %s outside setpoint bounds, clamped to %s", tuple(action), tuple(act))
            self.clamp_count += 1
        self.cooling_sp, self.heating_sp = act.cooling, act.heating

        _, month, day, hour, _ = calendar(self._k * self.dt)
        occ = self._occupancy(month, day, hour)
        t_out, rh_out, _, _, solar = self._forcing[self._k]
        t_prev, rh_prev = self.t_in, self.rh_in
        q_hvac = hvac_power(t_prev, self.heating_sp, self.cooling_sp)
        q_gain = q_hvac + Q_PER_OCCUPANT * occ + SOLAR_APERTURE * solar
        self.t_in = t_prev + (self.dt * 3600.0 / C_TH) * ((t_out - t_prev) / R_TH + q_gain)
        self.rh_in = rh_prev + ALPHA_RH * self.dt * (rh_out - rh_prev)
        self.demand = electricity_demand(q_hvac)
        self.clo = clothing(month)
        self.ppd = compute_ppd(0.5 * (t_prev + self.t_in), 0.5 * (rh_prev + self.rh_in), self.clo)
        reward = compute_reward(self.demand, self.ppd, occ, self.reward_params)

        self._k += 1
        self.last_obs = self._observe()
        return self.last_obs, reward, self.done
