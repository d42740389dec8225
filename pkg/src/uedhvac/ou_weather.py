"""Ornstein-Uhlenbeck weather perturbation, OU parameter fitting and weather CSV I/O.

The five perturbed weather variables, in observation order, are outdoor air
temperature, outdoor relative humidity, wind speed, wind direction and direct
solar radiation.  A level (environment configuration) is one OU parameter
triple per variable; its ``phi`` vector is the five mean offsets.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

VARIABLES = ("temp_c", "rh_pct", "wind_ms", "wind_deg", "solar_w")
N_VARS = len(VARIABLES)
HOURS_PER_YEAR = 8760

# Physical bounds of each weather variable; also the hard bounds for the
# observed weather slice of the initial state.
LOWER_BOUNDS = np.array([-31.05, 3.0, 0.0, 0.0, 0.0])
UPPER_BOUNDS = np.array([60.7, 100.0, 23.1, 360.0, 1033.0])

# Noise scale / timescale used when a configuration only specifies offsets.
DEFAULT_SIGMA = (1.5, 5.0, 1.0, 30.0, 30.0)
DEFAULT_TAU = (10.0, 10.0, 5.0, 5.0, 3.0)


class WeatherFileError(ValueError):
    """Raised for malformed weather CSV files."""


class OUFitError(ValueError):
    """Raised when a series cannot be described by a mean-reverting OU process."""


@dataclass(frozen=True)
class OUParams:
    mu_offset: float = 0.0
    sigma: float = 0.0
    tau: float = 1.0

    def __post_init__(self):
        for name in ("mu_offset", "sigma", "tau"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"OUParams.{name} must be finite")
        if self.sigma < 0:
            raise ValueError(f"OUParams.sigma must be >= 0, got {self.sigma}")
        if self.tau <= 0:
            raise ValueError(f"OUParams.tau must be > 0, got {self.tau}")


@dataclass(frozen=True)
class EnvConfig:
    """One :class:`OUParams` per weather variable, in ``VARIABLES`` order."""

    params: tuple[OUParams, ...] = field(
        default_factory=lambda: tuple(
            OUParams(0.0, s, t) for s, t in zip(DEFAULT_SIGMA, DEFAULT_TAU)
        )
    )

    def __post_init__(self):
        if len(self.params) != N_VARS:
            raise ValueError(f"EnvConfig needs {N_VARS} OUParams, got {len(self.params)}")

    @property
    def phi(self) -> np.ndarray:
        return np.array([p.mu_offset for p in self.params])

    @property
    def sigmas(self) -> np.ndarray:
        return np.array([p.sigma for p in self.params])

    @property
    def taus(self) -> np.ndarray:
        return np.array([p.tau for p in self.params])

    @classmethod
    def from_phi(cls, phi: Sequence[float], sigma=DEFAULT_SIGMA, tau=DEFAULT_TAU) -> "EnvConfig":
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (N_VARS,):
            raise ValueError(f"phi must have shape ({N_VARS},), got {phi.shape}")
        return cls(tuple(OUParams(float(m), float(s), float(t)) for m, s, t in zip(phi, sigma, tau)))

    def with_phi(self, phi: Sequence[float]) -> "EnvConfig":
        return EnvConfig.from_phi(phi, self.sigmas, self.taus)

    def scale_sigma(self, factor: float) -> "EnvConfig":
        return EnvConfig.from_phi(self.phi, self.sigmas * factor, self.taus)

    def to_dict(self) -> dict:
        return {
            name: {"mu": p.mu_offset, "sigma": p.sigma, "tau": p.tau}
            for name, p in zip(VARIABLES, self.params)
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Mapping[str, float]]) -> "EnvConfig":
        unknown = set(d) - set(VARIABLES)
        if unknown:
            raise ValueError(f"unknown weather variables: {sorted(unknown)}")
        missing = [v for v in VARIABLES if v not in d]
        if missing:
            raise ValueError(f"missing weather variables: {missing}")
        return cls(
            tuple(
                OUParams(float(d[v]["mu"]), float(d[v]["sigma"]), float(d[v]["tau"]))
                for v in VARIABLES
            )
        )


@dataclass(frozen=True)
class WeatherTrace:
    """One simulated year of hourly weather, shape ``(8760, 5)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (HOURS_PER_YEAR, N_VARS):
            raise ValueError(f"weather trace must have shape ({HOURS_PER_YEAR}, {N_VARS}), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("weather trace contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, VARIABLES.index(name)]

    def __eq__(self, other):
        if not isinstance(other, WeatherTrace):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    __hash__ = None


def ou_step(x: float, p: OUParams, dt: float, z: float) -> float:
    """Advance OU noise one step: ``x + dt*(-(x - mu)/tau) + sigma*sqrt(2/tau)*z``."""
    if not (math.isfinite(x) and math.isfinite(z) and math.isfinite(dt)):
        raise ValueError("ou_step inputs must be finite")
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    return x + dt * (-(x - p.mu_offset) / p.tau) + p.sigma * math.sqrt(2.0 / p.tau) * z


def ou_noise(p: OUParams, n: int, dt: float, rng: np.random.Generator) -> np.ndarray:
    """``n`` samples of an OU stream started at ``x_0 = mu_offset``."""
    if dt <= 0:
        raise ValueError(f"dt must be > 0, got {dt}")
    out = np.empty(n)
    if n == 0:
        return out
    tau = p.tau
    noise_scale = p.sigma * math.sqrt(2.0 / tau)
    mu = p.mu_offset
    if noise_scale == 0.0:
        kicks = [0.0] * (n - 1)
    else:
        kicks = (noise_scale * rng.standard_normal(n - 1)).tolist()
    x = mu
    out[0] = x
    # same arithmetic as ou_step, unrolled for speed
    for t in range(1, n):
        x = x + dt * (-(x - mu) / tau) + kicks[t - 1]
        out[t] = x
    return out


def variable_rng(seed: int, index: int) -> np.random.Generator:
    """Per-variable noise stream: Philox keyed by (seed, variable index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(index)])))


def add_ou_noise(base: np.ndarray, cfg: EnvConfig, dt: float, seed: int) -> np.ndarray:
    """Add independent OU streams to every column of ``base`` and clamp to physical bounds."""
    base = np.asarray(base, dtype=float)
    noisy = np.empty_like(base)
    for i, p in enumerate(cfg.params):
        noisy[:, i] = base[:, i] + ou_noise(p, base.shape[0], dt, variable_rng(seed, i))
    return np.clip(noisy, LOWER_BOUNDS, UPPER_BOUNDS)


def generate_noisy_trace(base: WeatherTrace, cfg: EnvConfig, seed: int) -> WeatherTrace:
    return WeatherTrace(add_ou_noise(base.values, cfg, 1.0, seed))


def fit_ou(series: Sequence[float], dt: float = 1.0) -> OUParams:
    """Recover OU parameters from a residual series by regressing x[t+1] on x[t].

    With ``x[t+1] = m*x[t] + b + E`` the back-transform is ``tau = dt/(1-m)``,
    ``mu = b*tau/dt`` and ``sigma = std(E)/sqrt(2/tau)``.
    """
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 100:
        raise OUFitError(f"need a 1-D series with at least 100 samples, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise OUFitError("series contains non-finite values")
    if dt <= 0:
        raise OUFitError(f"dt must be > 0, got {dt}")
    xt, xn = x[:-1], x[1:]
    dx = xt - xt.mean()
    sxx = float(dx @ dx)
    if sxx == 0.0 or np.ptp(x) == 0.0:
        raise OUFitError("series is constant; regression slope is undefined")
    m = float(dx @ (xn - xn.mean())) / sxx
    b = float(xn.mean() - m * xt.mean())
    if m >= 1.0:
        raise OUFitError(f"regression slope m={m:.6g} >= 1: series is not mean-reverting")
    resid = xn - (m * xt + b)
    tau = dt / (1.0 - m)
    mu = b * tau / dt
    sigma = math.sqrt(float(np.var(resid, ddof=1))) / math.sqrt(2.0 / tau)
    return OUParams(mu, sigma, tau)


def residualize(raw: Sequence[float], base: Sequence[float] | None = None, window: int = 24) -> np.ndarray:
    """Residual of ``raw`` against a reference series or a centered moving average.

    Moving-average mode drops the edges; the result has ``len(raw) - window + 1``
    entries, aligned with ``raw[(window - 1)//2 :]``.
    """
    raw = np.asarray(raw, dtype=float)
    if base is not None:
        base = np.asarray(base, dtype=float)
        if base.shape != raw.shape:
            raise ValueError(f"length mismatch: raw {raw.shape} vs base {base.shape}")
        return raw - base
    if window < 2:
        raise ValueError(f"moving-average window must be >= 2, got {window}")
    if raw.size < window:
        raise ValueError(f"series of length {raw.size} shorter than window {window}")
    ma = np.convolve(raw, np.ones(window) / window, mode="valid")
    start = (window - 1) // 2
    return raw[start:start + ma.size] - ma


def fit_trace(trace: WeatherTrace, dt: float = 1.0, base: WeatherTrace | None = None,
              window: int = 24) -> dict[str, OUParams]:
    """Fit every column of ``trace`` (against ``base`` or a moving average)."""
    out = {}
    for i, name in enumerate(VARIABLES):
        ref = None if base is None else base.values[:, i]
        try:
            out[name] = fit_ou(residualize(trace.values[:, i], ref, window), dt)
        except OUFitError as exc:
            raise OUFitError(f"{name}: {exc}") from None
    return out


def write_weather_csv(trace: WeatherTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(VARIABLES)
        for row in trace.values:
            w.writerow([repr(float(v)) for v in row])


def load_weather_csv(path) -> WeatherTrace:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise WeatherFileError(f"{path}: empty file, expected header and {HOURS_PER_YEAR} rows (got 0 rows)")
        if [h.strip() for h in header] != list(VARIABLES):
            raise WeatherFileError(f"{path}: row 1: header must be {','.join(VARIABLES)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != N_VARS:
                raise WeatherFileError(f"{path}: row {lineno}: expected {N_VARS} columns, got {len(row)}")
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise WeatherFileError(f"{path}: row {lineno}: non-numeric cell in {row}") from None
            if not all(math.isfinite(v) for v in vals):
                raise WeatherFileError(f"{path}: row {lineno}: non-finite value")
            rows.append(vals)
    if len(rows) != HOURS_PER_YEAR:
        raise WeatherFileError(f"{path}: expected {HOURS_PER_YEAR} data rows, got {len(rows)} rows")
    return WeatherTrace(np.array(rows))


def synthetic_base_year(seed: int = 2023) -> WeatherTrace:
    """A deterministic hot-desert typical year (Phoenix-like climate).

    Seasonal and diurnal cycles plus small AR(1) weather noise; stands in for a
    recorded TMY file when none is supplied.
    """
    rng = np.random.default_rng(seed)
    h = np.arange(HOURS_PER_YEAR, dtype=float)
    day = h / 24.0
    hour = h % 24.0
    season = -np.cos(2 * np.pi * (day - 15.0) / 365.0)  # -1 mid-January, +1 mid-July

    def ar1(phi, scale):
        e = rng.standard_normal(HOURS_PER_YEAR) * scale
        out = np.empty(HOURS_PER_YEAR)
        acc = 0.0
        for i in range(HOURS_PER_YEAR):
            acc = phi * acc + e[i]
            out[i] = acc
        return out

    diurnal = np.cos(2 * np.pi * (hour - 15.0) / 24.0)
    temp = 23.5 + 10.5 * season + 7.0 * diurnal + ar1(0.95, 0.45)
    rh = 32.0 - 12.0 * season - 12.0 * diurnal + ar1(0.95, 1.5)
    wind = 3.0 + 1.5 * np.cos(2 * np.pi * (hour - 16.0) / 24.0) + 0.5 * season + ar1(0.8, 0.4)
    wdir = 200.0 + 40.0 * np.sin(2 * np.pi * day / 365.0) + 30.0 * np.sin(2 * np.pi * hour / 24.0) + ar1(0.9, 6.0)

    lat = np.deg2rad(33.4)
    decl = np.deg2rad(23.44) * np.sin(2 * np.pi * (day - 80.0) / 365.0)
    ha = np.deg2rad(15.0 * (hour + 0.5 - 12.0))
    sin_elev = np.sin(lat) * np.sin(decl) + np.cos(lat) * np.cos(decl) * np.cos(ha)
    clearness = np.clip(0.85 + ar1(0.97, 0.02), 0.3, 1.0)
    solar = 950.0 * np.clip(sin_elev, 0.0, None) ** 1.15 * clearness

    values = np.column_stack([temp, rh, wind, wdir, solar])
    return WeatherTrace(np.clip(values, LOWER_BOUNDS, UPPER_BOUNDS))
