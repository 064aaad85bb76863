"""Task descriptions and the objectives they expand to.

A :class:`TaskSpec` is a small picklable value; worker processes rebuild the
objectives from it (with a per-process cache) because objectives wrap
closures that do not pickle.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from ..errors import ConfigError, DataFormatError
from ..numerics import RngStream
from ..objectives import (
    Objective,
    QuadraticFamily,
    attack_instances,
    attack_objective,
    builtin_digits,
    least_squares_objective,
    load_idx_images,
    load_libsvm,
    synthetic_quadratic,
    train_victim,
)


@dataclass(frozen=True)
class TaskSpec:
    kind: str  # quadratic-family | quadratic | lsq | attack
    arg: str = ""
    seed: int = 0
    c: float = 0.1
    victim_epochs: int = 20
    attack_train: int = 50
    attack_test: int = 50

    @property
    def label(self) -> str:
        """File-name friendly task name."""
        if self.kind == "lsq":
            return "lsq-" + Path(self.arg).stem
        if self.kind == "quadratic":
            return f"quadratic-d{self.arg}"
        if self.kind == "attack":
            return "attack" if not self.arg else "attack-" + Path(self.arg.split(",")[0]).stem
        return self.kind


def parse_task(text: str, seed: int = 0, **options) -> TaskSpec:
    kind, _, arg = text.partition(":")
    if kind == "quadratic-family" and not arg:
        return TaskSpec(kind, "", seed, **options)
    if kind == "quadratic":
        arg = arg or "10"
        if not re.fullmatch(r"[1-9][0-9]*", arg):
            raise ConfigError(f"quadratic dimension must be a positive integer, got {arg!r}")
        return TaskSpec(kind, arg, seed, **options)
    if kind == "lsq":
        if not arg:
            raise ConfigError("lsq task needs a libsvm file: lsq:<path>")
        return TaskSpec(kind, arg, seed, **options)
    if kind == "attack":
        if arg and len(arg.split(",")) != 2:
            raise ConfigError("attack task takes attack:<images.idx>,<labels.idx>")
        return TaskSpec(kind, arg, seed, **options)
    raise ConfigError(f"unknown task {text!r}")


@functools.lru_cache(maxsize=8)
def _victim_and_instances(task: TaskSpec):
    if task.arg:
        images, labels = task.arg.split(",")
        data = load_idx_images(images, labels)
    else:
        data = builtin_digits()
    root = RngStream(task.seed, ("attack",))
    victim = train_victim(data, task.victim_epochs, root.child("victim"))
    pool = attack_instances(victim, data, task.attack_train + task.attack_test, root.child("pick"), c=task.c)
    return victim, pool[: task.attack_train], pool[task.attack_train :]


@functools.lru_cache(maxsize=8)
def _single(task: TaskSpec) -> Objective:
    if task.kind == "quadratic":
        return synthetic_quadratic(int(task.arg), RngStream(task.seed, ("quadratic",)))
    if task.kind == "lsq":
        path = Path(task.arg)
        if not path.is_file():
            raise DataFormatError(f"dataset file {path} not found")
        return least_squares_objective(load_libsvm(path))
    raise AssertionError(task.kind)


def objective_for(task: TaskSpec, purpose: str, index: int) -> Objective:
    """Objective for tuning run / reported trial ``index``.

    ``purpose`` is ``"tune"`` or ``"report"``. Families draw tuning and
    reporting instances from disjoint streams; single-objective tasks reuse
    one objective and rely on disjoint direction seeds instead.
    """
    if purpose not in ("tune", "report"):
        raise ValueError(purpose)
    if task.kind == "quadratic-family":
        return QuadraticFamily().sample(RngStream(task.seed, ("instance", purpose, index)))
    if task.kind == "attack":
        victim, train, test = _victim_and_instances(task)
        insts = train if purpose == "tune" else test
        if not insts:
            raise ConfigError(f"no attack instances reserved for {purpose}")
        return attack_objective(victim, insts[index % len(insts)])
    return _single(task)


def training_sampler(task: TaskSpec) -> Callable[[RngStream], Objective]:
    """Objective sampler for policy training; never touches reporting instances."""
    if task.kind == "quadratic-family":
        return QuadraticFamily().sample
    if task.kind == "attack":
        victim, train, _ = _victim_and_instances(task)
        if not train:
            raise ConfigError("attack-train must be >= 1 to train a policy")
        return lambda rng: attack_objective(victim, train[int(rng.integers(0, len(train)))])
    obj = _single(task)
    return lambda rng: obj
