"""Tuned, repeated comparison runs and their aggregation."""

from __future__ import annotations

import itertools
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import nn
from ..errors import ConfigError, ZorlError
from ..numerics import RngStream
from ..optimizer import RunConfig, RunTrace, run
from ..policies import GuidedESPolicy, RLActorPolicy, StandardGaussianPolicy
from ..updates import UpdateRule
from .config import ExperimentConfig
from .tasks import TaskSpec, objective_for, parse_task

logger = logging.getLogger(__name__)

ABORT_LIMIT = 0.2


class RunFailure(ZorlError, RuntimeError):
    """Too many trials aborted, or no grid point produced a finite loss."""


@dataclass(frozen=True)
class AlgoSpec:
    """Picklable recipe for a sampling policy."""

    name: str
    beta: float = 0.5
    alpha: float = 0.5
    subspace: int = 5
    actor: Optional[bytes] = None  # serialized actor for zo-rl

    def build(self):
        if self.name == "zo-gs":
            return StandardGaussianPolicy()
        if self.name == "guided-es":
            return GuidedESPolicy(self.alpha, self.subspace)
        if self.name == "zo-rl":
            params, spec = _load_actor(self.actor)
            return RLActorPolicy(params, spec, beta=self.beta)
        raise ValueError(f"unknown algorithm {self.name!r}")


def _load_actor(blob: Optional[bytes]):
    if blob is None:
        raise ValueError("zo-rl needs a serialized actor")
    return nn.deserialize(blob)


@dataclass(frozen=True)
class Hyper:
    delta: float
    beta1: float = 0.9
    beta2: float = 0.999

    def rule(self, variant: str, d: int) -> UpdateRule:
        return UpdateRule(variant, eta=self.delta / d, beta1=self.beta1, beta2=self.beta2)


@dataclass(frozen=True)
class TrialJob:
    task: TaskSpec
    algo: AlgoSpec
    variant: str
    hyper: Hyper
    run_cfg: RunConfig
    purpose: str
    index: int
    seed_path: tuple


def execute(job: TrialJob) -> RunTrace:
    objective = objective_for(job.task, job.purpose, job.index)
    rule = job.hyper.rule(job.variant, objective.dim)
    rng = RngStream(job.seed_path[0], job.seed_path[1:])
    return run(objective, job.algo.build(), rule, job.run_cfg, rng)


def _map(jobs: Sequence[TrialJob], workers: int) -> list[RunTrace]:
    if workers <= 1 or len(jobs) <= 1:
        return [execute(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(execute, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


@dataclass
class TrialSeries:
    """Per-iteration aggregates over the completed trials of one algorithm.

    ``loss_std`` is the population standard deviation (divides by R).
    """

    algo: str
    iteration: np.ndarray
    loss_mean: np.ndarray
    loss_std: np.ndarray
    grad_norm_mean: np.ndarray
    variance_mean: np.ndarray  # NaN where no probe ran
    queries: np.ndarray
    raw_loss: np.ndarray  # (R, K)
    hyper: Optional[Hyper] = None
    aborted: int = 0
    final_losses: list[float] = field(default_factory=list)

    @property
    def has_variance(self) -> bool:
        return bool(np.any(np.isfinite(self.variance_mean)))


def aggregate(algo: str, traces: Sequence[RunTrace], hyper: Optional[Hyper] = None, aborted: int = 0) -> TrialSeries:
    """Mean and population std across complete traces of equal length."""
    if not traces:
        raise RunFailure(f"{algo}: no completed trials to aggregate")
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise ValueError(f"traces differ in length: {sorted(lengths)}")
    arr = [t.as_arrays() for t in traces]
    loss = np.stack([a["loss"] for a in arr])
    var = np.stack([a["variance"] for a in arr])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        var_mean = np.nanmean(var, axis=0)
    return TrialSeries(
        algo=algo,
        iteration=arr[0]["iteration"],
        loss_mean=loss.mean(axis=0),
        loss_std=loss.std(axis=0),
        grad_norm_mean=np.stack([a["grad_norm"] for a in arr]).mean(axis=0),
        variance_mean=var_mean,
        queries=arr[0]["queries"],
        raw_loss=loss,
        hyper=hyper,
        aborted=aborted,
        final_losses=[t.final_loss for t in traces],
    )


def hyper_grid(cfg: ExperimentConfig) -> list[Hyper]:
    if cfg.update == "adam":
        return [Hyper(d, b1, b2) for d, b1, b2 in itertools.product(cfg.deltas, cfg.beta1s, cfg.beta2s)]
    return [Hyper(d) for d in cfg.deltas]


def _score(traces: Sequence[RunTrace]) -> float:
    finals = [t.final_loss if t.complete else math.inf for t in traces]
    return float(np.mean(finals)) if all(math.isfinite(f) for f in finals) else math.inf


def tune(
    task: TaskSpec, algo: AlgoSpec, cfg: ExperimentConfig, run_cfg: RunConfig
) -> tuple[Hyper, dict[Hyper, float]]:
    """Pick the grid point with the lowest mean final loss on tuning runs.

    Tuning runs use objectives and seeds that reported trials never see.
    Ties go to the earlier grid point.
    """
    grid = hyper_grid(cfg)
    tune_cfg = RunConfig(run_cfg.steps, run_cfg.q, run_cfg.mu, None, run_cfg.probe_repeats, run_cfg.history)
    jobs = [
        TrialJob(task, algo, cfg.update, h, tune_cfg, "tune", j, (cfg.seed, "tune", algo.name, j))
        for h in grid
        for j in range(cfg.tune_trials)
    ]
    traces = _map(jobs, cfg.workers)
    scores = {}
    for i, h in enumerate(grid):
        scores[h] = _score(traces[i * cfg.tune_trials : (i + 1) * cfg.tune_trials])
    best = min(grid, key=lambda h: scores[h])
    if not math.isfinite(scores[best]):
        raise RunFailure(f"{algo.name}: every grid point diverged during tuning")
    logger.info("%s tuned to %s (score %.4g)", algo.name, best, scores[best])
    return best, scores


def run_trials(
    task: TaskSpec, algo: AlgoSpec, hyper: Hyper, cfg: ExperimentConfig, run_cfg: RunConfig
) -> TrialSeries:
    jobs = [
        TrialJob(task, algo, cfg.update, hyper, run_cfg, "report", r, (cfg.seed, algo.name, r))
        for r in range(cfg.trials)
    ]
    traces = _map(jobs, cfg.workers)
    done = [t for t in traces if t.complete]
    aborted = len(traces) - len(done)
    for r, t in enumerate(traces):
        if not t.complete:
            logger.warning("%s trial %d aborted and excluded: %s", algo.name, r, t.error)
    if aborted > ABORT_LIMIT * len(traces):
        raise RunFailure(f"{algo.name}: {aborted}/{len(traces)} trials aborted")
    return aggregate(algo.name, done, hyper, aborted)


def algo_specs(cfg: ExperimentConfig) -> list[AlgoSpec]:
    actor = None
    if "zo-rl" in cfg.algo:
        path = Path(cfg.policy)
        if not path.is_file():
            raise ConfigError(f"policy artifact {path} not found")
        actor = path.read_bytes()
        nn.deserialize(actor)  # fail early on a corrupt artifact
    return [AlgoSpec(a, cfg.beta, cfg.alpha, cfg.subspace, actor if a == "zo-rl" else None) for a in cfg.algo]


def task_from_config(cfg: ExperimentConfig) -> TaskSpec:
    return parse_task(
        cfg.task,
        cfg.seed,
        c=cfg.c,
        victim_epochs=cfg.victim_epochs,
        attack_train=cfg.attack_train,
        attack_test=cfg.attack_test,
    )


def run_experiment(cfg: ExperimentConfig) -> dict[str, TrialSeries]:
    """Tune then run every configured algorithm under one shared budget (q, K, mu)."""
    cfg.validate()
    task = task_from_config(cfg)
    run_cfg = RunConfig(cfg.steps, cfg.q, cfg.mu, cfg.probe_every, cfg.probe_repeats)
    out: dict[str, TrialSeries] = {}
    for algo in algo_specs(cfg):
        hyper, _ = tune(task, algo, cfg, run_cfg)
        out[algo.name] = run_trials(task, algo, hyper, cfg, run_cfg)
    return out
