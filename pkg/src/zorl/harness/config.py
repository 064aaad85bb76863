"""Experiment configuration.

Config files are INI-style (``configparser``). Run settings live in an
``[experiment]`` section, algorithm-specific knobs in ``[zo-rl]``,
``[guided-es]`` and ``[train-policy]`` sections. Every key is also a CLI flag
of the same name, and flags win over the file.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Optional

from ..errors import ConfigError
from ..updates import VARIANTS

ALGORITHMS = ("zo-gs", "guided-es", "zo-rl")
DEFAULT_DELTAS = (0.01, 0.1, 1.0, 10.0, 100.0, 1000.0)
DEFAULT_BETA1S = (0.9, 0.99)
DEFAULT_BETA2S = (0.99, 0.996, 0.999)


def _floats(text: str) -> tuple[float, ...]:
    vals = tuple(float(t) for t in str(text).replace(" ", "").split(",") if t)
    if not vals:
        raise ValueError("empty list")
    return vals


def _names(text: str) -> tuple[str, ...]:
    vals = tuple(t.strip() for t in str(text).split(",") if t.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _opt_int(text) -> Optional[int]:
    if text is None or str(text).strip().lower() in ("", "none", "off"):
        return None
    return int(text)


@dataclass(frozen=True)
class Key:
    name: str  # flag / config spelling, e.g. "probe-every"
    section: str
    parse: Callable[[str], Any]
    help: str

    @property
    def attr(self) -> str:
        return self.name.replace("-", "_")


KEYS: tuple[Key, ...] = (
    Key("task", "experiment", str, "quadratic-family, quadratic:<d>, lsq:<libsvm file>, attack[:<images>,<labels>]"),
    Key("algo", "experiment", _names, "comma-separated algorithms: zo-gs, guided-es, zo-rl"),
    Key("update", "experiment", str, "update rule: sgd, signsgd or adam"),
    Key("q", "experiment", int, "query directions per iteration"),
    Key("mu", "experiment", float, "finite-difference smoothing radius"),
    Key("steps", "experiment", int, "iterations per run (K)"),
    Key("trials", "experiment", int, "reported trials per algorithm (R)"),
    Key("seed", "experiment", int, "master seed"),
    Key("out", "experiment", str, "output directory (run/report) or artifact path (train-policy)"),
    Key("probe-every", "experiment", _opt_int, "variance probe interval; off when unset"),
    Key("probe-repeats", "experiment", int, "estimates per variance probe (M)"),
    Key("workers", "experiment", int, "worker processes for trials (default: CPU count)"),
    Key("tune-trials", "experiment", int, "runs per grid point during tuning"),
    Key("deltas", "experiment", _floats, "step-size grid; eta = delta / d"),
    Key("beta1s", "experiment", _floats, "Adam beta1 grid"),
    Key("beta2s", "experiment", _floats, "Adam beta2 grid"),
    Key("c", "experiment", float, "attack distortion weight"),
    Key("victim-epochs", "experiment", int, "epochs for the attack victim"),
    Key("attack-train", "experiment", int, "attack instances reserved for tuning and policy training"),
    Key("attack-test", "experiment", int, "attack instances for reported trials"),
    Key("policy", "zo-rl", str, "trained actor artifact for zo-rl"),
    Key("beta", "zo-rl", float, "guidance weight of the learned direction"),
    Key("alpha", "guided-es", float, "isotropic share of the guided-es covariance"),
    Key("subspace", "guided-es", int, "guided-es subspace size k"),
    Key("episodes", "train-policy", int, "DDPG training episodes"),
    Key("delta", "train-policy", float, "training step size; eta = delta / d"),
    Key("reward", "train-policy", str, "reward: decrease, negative-loss or log-decrease"),
    Key("actor-lr", "train-policy", float, "actor learning rate"),
    Key("critic-lr", "train-policy", float, "critic learning rate"),
    Key("noise", "train-policy", float, "exploration noise scale"),
    Key("gamma", "train-policy", float, "discount factor"),
    Key("tau", "train-policy", float, "target-network tracking rate"),
    Key("batch-size", "train-policy", int, "replay minibatch size"),
    Key("eval-every", "train-policy", int, "episodes between greedy evaluations"),
    Key("eval-episodes", "train-policy", int, "episodes per greedy evaluation"),
)
KEY_BY_NAME = {k.name: k for k in KEYS}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "quadratic-family"
    algo: tuple[str, ...] = ("zo-gs", "guided-es")
    update: str = "sgd"
    q: int = 20
    mu: float = 0.01
    steps: int = 200
    trials: int = 10
    seed: int = 0
    out: str = "results"
    probe_every: Optional[int] = None
    probe_repeats: int = 20
    workers: int = field(default_factory=lambda: os.cpu_count() or 1)
    tune_trials: int = 3
    deltas: tuple[float, ...] = DEFAULT_DELTAS
    beta1s: tuple[float, ...] = DEFAULT_BETA1S
    beta2s: tuple[float, ...] = DEFAULT_BETA2S
    c: float = 0.1
    victim_epochs: int = 20
    attack_train: int = 50
    attack_test: int = 50
    policy: Optional[str] = None
    beta: float = 0.5
    alpha: float = 0.5
    subspace: int = 5
    episodes: int = 60
    delta: float = 1.0
    reward: str = "decrease"
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    noise: float = 0.1
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    eval_every: int = 5
    eval_episodes: int = 10
    extra: dict = field(default_factory=dict, compare=False)

    def validate(self) -> "ExperimentConfig":
        bad = [a for a in self.algo if a not in ALGORITHMS]
        if bad:
            raise ConfigError(f"unknown algorithm(s) {bad}; expected {ALGORITHMS}")
        if self.update not in VARIANTS:
            raise ConfigError(f"unknown update {self.update!r}; expected one of {VARIANTS}")
        for name in ("q", "steps", "trials", "workers", "tune_trials", "probe_repeats"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name.replace('_', '-')} must be >= 1")
        if self.mu <= 0:
            raise ConfigError("mu must be > 0")
        if self.probe_every is not None and self.probe_every < 1:
            raise ConfigError("probe-every must be >= 1")
        if any(d <= 0 for d in self.deltas):
            raise ConfigError("deltas must be > 0")
        if not all(0 <= b < 1 for b in self.beta1s + self.beta2s):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 <= self.beta < 1:
            raise ConfigError("beta must lie in [0, 1)")
        if not 0 <= self.alpha <= 1:
            raise ConfigError("alpha must lie in [0, 1]")
        if "zo-rl" in self.algo and not self.policy:
            raise ConfigError("zo-rl needs a trained actor: set policy in [zo-rl] or pass --policy")
        return self


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a config file into ``{attr: value}``; unknown keys are a ConfigError."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file {path}: {exc}") from None
    values: dict[str, Any] = {}
    for section in parser.sections():
        for name, raw in parser.items(section):
            key = KEY_BY_NAME.get(name) or KEY_BY_NAME.get(name.replace("_", "-"))
            if key is None:
                raise ConfigError(f"unknown key {name!r} in [{section}]")
            if key.section != section:
                raise ConfigError(f"key {name!r} belongs in [{key.section}], found in [{section}]")
            values[key.attr] = _parse(key, raw)
    return values


def _parse(key: Key, raw) -> Any:
    try:
        return key.parse(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {raw!r} for {key.name}: {exc}") from None


def build_config(file_values: dict[str, Any], overrides: dict[str, Any]) -> ExperimentConfig:
    """Defaults, then the config file, then CLI overrides (already parsed or raw strings)."""
    merged = dict(file_values)
    for attr, raw in overrides.items():
        if raw is None:
            continue
        key = KEY_BY_NAME[attr.replace("_", "-")]
        merged[attr] = _parse(key, raw) if isinstance(raw, str) else raw
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown settings {sorted(unknown)}")
    return ExperimentConfig(**merged)
