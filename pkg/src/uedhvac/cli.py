"""``uedhvac`` command line: train, eval, fit-weather, ablate, report.

Configuration is one JSON file with nested sections mirroring the library
configs.  Unknown keys are errors.  Any key can be overridden from the
environment as ``UEDHVAC__<section>__<key>=<json value>`` (top-level keys
as ``UEDHVAC__<key>``).  All RNG streams derive from the master seed via
``sha256(seed, purpose)``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal, InvalidOperation
from pathlib import Path

from .building_env import RewardParams
from .eval_harness import (
    EvalReport,
    NetworkController,
    RandomController,
    RBCController,
    build_suite,
    evaluate_suite,
    mean_relative_change,
    sim2real_eval,
    ablation,
)
from .neural import CheckpointError
from .ou_weather import (
    OUFitError,
    WeatherFileError,
    WeatherTrace,
    fit_trace,
    load_weather_csv,
    synthetic_base_year,
)
from .ued import STRATEGIES, PLRConfig, PPOConfig, SearchConfig, Trainer, TrainConfig, default_plr, load_policy

log = logging.getLogger("uedhvac")

ENV_PREFIX = "UEDHVAC__"
CHECKPOINT = "checkpoint.bin"
METRICS = "metrics.jsonl"
LEVELS = "levels.jsonl"
METRIC_KEYS = ("episode", "step", "mean_reward", "value_loss", "entropy")
LEVEL_KEYS = ("episode", "strategy", "phi", "source", "score")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the offending key."""


# --- configuration ----------------------------------------------------------


@dataclass
class ExperimentConfig:
    train: TrainConfig
    output_dir: Path = Path("runs/default")
    workers: int = 1
    checkpoint_every: int = 5
    max_episodes: int | None = None
    weather_csv: str | None = None
    synthetic_seed: int = 2023
    eval_seeds: list = field(default_factory=lambda: [0, 1, 2])

    def base_weather(self) -> WeatherTrace:
        if self.weather_csv:
            return load_weather_csv(self.weather_csv)
        return synthetic_base_year(self.synthetic_seed)


_SECTIONS = {"ppo": PPOConfig, "plr": PLRConfig, "search": SearchConfig, "reward": RewardParams}
_TOP_TRAIN = ("strategy", "seed", "total_steps", "dt", "normalizer_episodes", "episode_steps")
_TOP_RUN = ("output_dir", "workers", "checkpoint_every", "max_episodes", "eval_seeds")
_WEATHER = ("csv", "synthetic_seed")


def _section_keys(cls) -> set[str]:
    keys = {f.name for f in fields(cls)}
    if cls is SearchConfig:
        keys -= {"lower", "upper"}  # supplied by the bounds section
    return keys


def apply_env_overrides(raw: dict, environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = json.loads(json.dumps(raw))
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        path = name[len(ENV_PREFIX):].split("__")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        for k in path[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{name}: '{k}' is not a section")
        node[path[-1]] = parsed
    return out


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a raw config mapping; every error names the key at fault."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    allowed = set(_TOP_TRAIN) | set(_TOP_RUN) | set(_SECTIONS) | {"bounds", "weather"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    if "bounds" not in raw:
        raise ConfigError("missing required key: bounds")
    bounds = raw["bounds"]
    if not isinstance(bounds, dict):
        raise ConfigError("bounds must be an object with 'lower' and 'upper'")
    for k in ("lower", "upper"):
        if k not in bounds:
            raise ConfigError(f"missing required key: bounds.{k}")
    extra = sorted(set(bounds) - {"lower", "upper"})
    if extra:
        raise ConfigError(f"unknown config key(s): {', '.join('bounds.' + e for e in extra)}")

    strategy = raw.get("strategy", TrainConfig.strategy)
    sections = {}
    for name, cls in _SECTIONS.items():
        if name == "plr" and name not in raw:
            continue  # TrainConfig picks the strategy's own PLR defaults
        sec = raw.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name} must be an object")
        bad = sorted(set(sec) - _section_keys(cls))
        if bad:
            raise ConfigError(f"unknown config key(s): {', '.join(f'{name}.{b}' for b in bad)}")
        kw = dict(sec)
        if cls is PLRConfig and strategy in STRATEGIES:
            kw = {**asdict(default_plr(strategy)), **kw}
        if cls is SearchConfig:
            kw.update(lower=bounds["lower"], upper=bounds["upper"])
        try:
            sections[name] = cls(**kw)
        except (TypeError, ValueError) as exc:
            label = "bounds/search" if cls is SearchConfig else name
            raise ConfigError(f"{label}: {exc}") from None

    weather = raw.get("weather", {})
    bad = sorted(set(weather) - set(_WEATHER))
    if bad:
        raise ConfigError(f"unknown config key(s): {', '.join('weather.' + b for b in bad)}")

    top = {k: raw[k] for k in _TOP_TRAIN if k in raw}
    try:
        train = TrainConfig(**top, **sections)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    run = {k: raw[k] for k in _TOP_RUN if k in raw}
    if "output_dir" in run:
        run["output_dir"] = Path(run["output_dir"])
    cfg = ExperimentConfig(train=train, weather_csv=weather.get("csv"),
                           synthetic_seed=int(weather.get("synthetic_seed", 2023)), **run)
    if cfg.workers < 1:
        raise ConfigError(f"workers must be >= 1, got {cfg.workers}")
    if cfg.checkpoint_every < 1:
        raise ConfigError(f"checkpoint_every must be >= 1, got {cfg.checkpoint_every}")
    if cfg.max_episodes is not None and cfg.max_episodes < 1:
        raise ConfigError(f"max_episodes must be >= 1, got {cfg.max_episodes}")
    return cfg


def load_config(path, environ=None) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(apply_env_overrides(raw, environ))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    t = cfg.train
    def plain(obj, skip=()):
        return {f.name: (list(v) if isinstance(v, tuple) else v)
                for f in fields(obj) if f.name not in skip for v in [getattr(obj, f.name)]}
    return {
        "strategy": t.strategy, "seed": t.seed, "total_steps": t.total_steps, "dt": t.dt,
        "normalizer_episodes": t.normalizer_episodes, "episode_steps": t.episode_steps,
        "ppo": plain(t.ppo), "plr": plain(t.plr), "search": plain(t.search, ("lower", "upper")),
        "reward": plain(t.reward),
        "bounds": {"lower": t.search.lower.tolist(), "upper": t.search.upper.tolist()},
        "output_dir": str(cfg.output_dir), "workers": cfg.workers, "checkpoint_every": cfg.checkpoint_every,
        "max_episodes": cfg.max_episodes, "eval_seeds": list(cfg.eval_seeds),
        "weather": {"csv": cfg.weather_csv, "synthetic_seed": cfg.synthetic_seed},
    }


# --- train ------------------------------------------------------------------


def _dump(rec: dict, keys) -> str:
    return json.dumps({k: rec[k] for k in keys}) + "\n"


def _truncate_jsonl(path: Path, episodes: int) -> None:
    """Keep only records of episodes before ``episodes`` (drops work after the last checkpoint)."""
    if not path.exists():
        return
    kept = [l for l in path.read_text().splitlines(keepends=True) if l.strip() and json.loads(l)["episode"] < episodes]
    path.write_text("".join(kept))


def run_training(cfg: ExperimentConfig, resume: bool = False) -> Trainer:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg.train, cfg.base_weather())
    ckpt = out / CHECKPOINT
    if resume and ckpt.exists():
        trainer.load(ckpt)
        log.info("resumed from %s at episode %d", ckpt, trainer.episode)
        _truncate_jsonl(out / METRICS, trainer.episode)
        _truncate_jsonl(out / LEVELS, trainer.episode)
        mode = "a"
    else:
        mode = "w"
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2))
    ran = 0
    with open(out / METRICS, mode) as mf, open(out / LEVELS, mode) as lf:
        while not trainer.done and (cfg.max_episodes is None or ran < cfg.max_episodes):
            rec = trainer.run_episode()
            ran += 1
            mf.write(_dump(rec, METRIC_KEYS))
            lf.write(_dump(rec, LEVEL_KEYS))
            mf.flush()
            lf.flush()
            log.info("episode %d step %d reward %.4f value_loss %.4f", rec["episode"], rec["step"],
                     rec["mean_reward"], rec["value_loss"])
            if trainer.episode % cfg.checkpoint_every == 0 or trainer.done:
                trainer.save(ckpt)
    if trainer.done:
        trainer.save(out / "final.bin")
    return trainer


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.output_dir:
        cfg.output_dir = Path(args.output_dir)
    if args.max_episodes is not None:
        cfg.max_episodes = args.max_episodes
    run_training(cfg, resume=args.resume)
    return 0


# --- eval -------------------------------------------------------------------


def _select_suite(which: str) -> dict:
    suite = build_suite()
    if which == "base":
        return {"phi0": suite["phi0"]}
    if which == "extreme":
        return {k: v for k, v in suite.items() if k != "phi0"}
    return suite


def cmd_eval(args) -> int:
    cfg = load_config(args.config) if args.config else None
    base = cfg.base_weather() if cfg else synthetic_base_year()
    seeds = args.seeds if args.seeds else (cfg.eval_seeds if cfg else [0, 1, 2])
    policy = load_policy(args.checkpoint)
    suite = _select_suite(args.suite)
    controllers = [NetworkController(policy, args.name)]
    if args.baselines:
        controllers += [RBCController(), RandomController()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sim2real:
        rows = []
        for c in controllers:
            res = sim2real_eval(c, base, suite, seeds=seeds, repeat=4)
            for r in res:
                rows.append({"strategy": c.name, "env": r.env, "reward_lo": r.reward_lo, "reward_hi": r.reward_hi,
                             "hours_lo": r.hours_lo, "hours_hi": r.hours_hi,
                             "relative_change": r.relative_change})
            print(f"{c.name}: mean relative change {mean_relative_change(res):+.4f}")
        (out / "sim2real.json").write_text(json.dumps(rows, indent=2))
        return 0
    report = EvalReport()
    for c in controllers:
        report.extend(evaluate_suite(c, base, suite, seeds=seeds))
    report.write_csv(out / "report.csv")
    report.write_json(out / "report.json")
    report.write_long_csv(out / "report_long.csv")
    _print_summary(report)
    return 0


def _print_summary(report: EvalReport) -> None:
    print(f"{'env':16s} {'strategy':12s} {'reward':>12s} {'se':>8s} {'viol.days':>9s}")
    for s in report.summary():
        print(f"{s['env']:16s} {s['strategy']:12s} {s['reward']:12.2f} {s['reward_se']:8.2f} "
              f"{s['violation_days']:9.1f}")


# --- fit-weather ------------------------------------------------------------


def cmd_fit_weather(args) -> int:
    trace = load_weather_csv(args.csv)
    base = load_weather_csv(args.base) if args.base else None
    fitted = fit_trace(trace, dt=args.dt, base=base, window=args.window)
    d = {name: {"mu": p.mu_offset, "sigma": p.sigma, "tau": p.tau} for name, p in fitted.items()}
    text = json.dumps(d, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# --- ablate -----------------------------------------------------------------


def parse_decimal(text: str) -> float:
    try:
        v = Decimal(text)
    except InvalidOperation:
        raise argparse.ArgumentTypeError(f"not a decimal number: {text!r}") from None
    if not v.is_finite():
        raise argparse.ArgumentTypeError(f"value must be finite, got {text!r}")
    return float(v)


def _ablation_train(job):
    cfg_dict, param, value, seed = job
    cfg = parse_config(cfg_dict)
    t = cfg.train
    t.strategy, t.seed = "active_rl", seed
    if param == "gamma":
        t.search.gamma = value
    else:
        t.search.eta = value
    trainer = Trainer(t, cfg.base_weather())
    trainer.run()
    return trainer.policy


def cmd_ablate(args) -> int:
    if args.param not in ("gamma", "eta"):
        raise ConfigError(f"--param must be gamma or eta, got {args.param!r}")
    for v in args.values:
        if args.param == "gamma" and v < 0:
            raise ConfigError(f"gamma values must be >= 0, got {v}")
        if args.param == "eta" and v <= 0:
            raise ConfigError(f"eta values must be > 0, got {v}")
    cfg = load_config(args.config)
    raw = config_to_dict(cfg)
    seeds = args.seeds if args.seeds else [cfg.train.seed]
    jobs = [(raw, args.param, v, s) for v in args.values for s in seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            trained = dict(zip([(j[2], j[3]) for j in jobs], pool.map(_ablation_train, jobs)))
    else:
        trained = {(j[2], j[3]): _ablation_train(j) for j in jobs}
    rows = ablation(args.param, args.values, lambda p, v, s: trained[(v, s)], cfg.base_weather(),
                    seeds=seeds, eval_seeds=cfg.eval_seeds[:1])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("".join(json.dumps(r) + "\n" for r in rows))
    for r in rows:
        print(f"{args.param}={r['value']:g}: suite mean {r['suite_mean']:.2f} +/- {r['suite_mean_se']:.2f}")
    return 0


# --- report -----------------------------------------------------------------


def cmd_report(args) -> int:
    report = EvalReport()
    for p in args.inputs:
        report.extend(EvalReport.read_json(p) if str(p).endswith(".json") else EvalReport.read_csv(p))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "combined.csv")
        report.write_long_csv(out / "combined_long.csv")
        (out / "summary.json").write_text(json.dumps(report.summary(), indent=2))
    _print_summary(report)
    return 0


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="uedhvac", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one strategy from a config file")
    t.add_argument("config")
    t.add_argument("--output-dir")
    t.add_argument("--resume", action="store_true", help="continue from the latest checkpoint")
    t.add_argument("--max-episodes", type=int, help="stop after this many episodes in this invocation")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the weather suite")
    e.add_argument("checkpoint")
    e.add_argument("--config")
    e.add_argument("--suite", choices=("base", "extreme", "all"), default="all")
    e.add_argument("--sim2real", action="store_true", help="also run at dt=0.25 with actions held 4 steps")
    e.add_argument("--seeds", type=int, nargs="+")
    e.add_argument("--baselines", action="store_true", help="add RBC and random rows")
    e.add_argument("--name", default="network", help="strategy label for the report")
    e.add_argument("--out", default="eval")
    e.set_defaults(fn=cmd_eval)

    f = sub.add_parser("fit-weather", help="fit OU parameters to an hourly weather CSV")
    f.add_argument("csv")
    f.add_argument("--dt", type=float, default=1.0)
    f.add_argument("--base", help="base-trend CSV; default is a 24 h moving average")
    f.add_argument("--window", type=int, default=24)
    f.add_argument("--out")
    f.set_defaults(fn=cmd_fit_weather)

    a = sub.add_parser("ablate", help="ActiveRL gamma or eta sweep")
    a.add_argument("config")
    a.add_argument("--param", required=True)
    a.add_argument("--values", type=parse_decimal, nargs="+", required=True)
    a.add_argument("--seeds", type=int, nargs="+")
    a.add_argument("--out", default="ablation.jsonl")
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="combine eval reports and print a summary")
    r.add_argument("inputs", nargs="+")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, WeatherFileError, OUFitError, FileNotFoundError) as exc:
        print(f"uedhvac {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
