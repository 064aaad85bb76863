"""Outer zeroth-order loop: sample directions, estimate, update, record."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import EstimationError, InvalidDimensionError
from .estimator import EstimatorConfig, estimate_gradient, estimator_statistics
from .numerics import RngStream
from .objectives import Objective
from .policies import OptimizerState
from .updates import UpdateRule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    steps: int = 200
    q: int = 20
    mu: float = 0.01
    probe_every: Optional[int] = None
    probe_repeats: int = 20
    history: int = 5

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidDimensionError("steps must be >= 1")
        if self.probe_every is not None and self.probe_every < 1:
            raise ValueError("probe_every must be >= 1")

    @property
    def estimator(self) -> EstimatorConfig:
        return EstimatorConfig(self.mu, self.q)


@dataclass
class RunTrace:
    """Per-iteration records. Row k describes iterate ``x_k``.

    ``queries[k] = k (q + 1)`` is the optimization query cost of reaching
    ``x_k``; probe queries are kept in ``probe_queries`` only.
    """

    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    variance: list[float] = field(default_factory=list)
    cosine: list[float] = field(default_factory=list)
    queries: list[int] = field(default_factory=list)
    final_x: Optional[np.ndarray] = None
    final_loss: float = float("nan")
    wall_time: float = 0.0
    probe_queries: int = 0
    complete: bool = True
    error: Optional[str] = None

    def __len__(self) -> int:
        return len(self.iteration)

    def as_arrays(self) -> dict[str, np.ndarray]:
        return {
            "iteration": np.asarray(self.iteration),
            "loss": np.asarray(self.loss, dtype=float),
            "grad_norm": np.asarray(self.grad_norm, dtype=float),
            "variance": np.asarray(self.variance, dtype=float),
            "cosine": np.asarray(self.cosine, dtype=float),
            "queries": np.asarray(self.queries),
        }


def run(
    objective: Objective,
    policy,
    update_rule: UpdateRule,
    cfg: RunConfig,
    rng: RngStream,
    x0: Optional[np.ndarray] = None,
) -> RunTrace:
    """Run ``cfg.steps`` iterations; probes fire when ``cfg.probe_every`` is set."""
    started = time.perf_counter()
    x = np.array(objective.x0 if x0 is None else x0, dtype=np.float64)
    est_cfg = cfg.estimator
    rule_state = update_rule.init(x.size)
    state = OptimizerState.empty(x.size, horizon=cfg.steps, history=cfg.history)
    dir_rng = rng.child("directions")
    trace = RunTrace()
    spent = 0
    for k in range(cfg.steps):
        try:
            f_k = objective(x)
            spent += 1
            if not np.isfinite(f_k):
                raise EstimationError(f"non-finite objective value at iteration {k}", point=x.copy())
            state = state.with_value(f_k)
            var = cos = float("nan")
            if cfg.probe_every is not None and k % cfg.probe_every == 0:
                if cfg.probe_repeats >= 2:
                    stats = estimator_statistics(
                        x, objective, policy, est_cfg, cfg.probe_repeats, rng.child("probe", k), state
                    )
                    trace.probe_queries += stats.queries
                    var = stats.variance
                    cos = float("nan") if stats.cosine is None else stats.cosine
            directions = policy.propose(state, cfg.q, dir_rng)
            est = estimate_gradient(x, objective, directions, est_cfg, base_value=f_k)
            spent += est.queries_used
        except EstimationError as exc:
            logger.warning("run aborted at iteration %d: %s", k, exc)
            trace.complete = False
            trace.error = str(exc)
            break
        trace.iteration.append(k)
        trace.loss.append(f_k)
        trace.grad_norm.append(float(np.linalg.norm(est.g)))
        trace.variance.append(var)
        trace.cosine.append(cos)
        trace.queries.append(k * (cfg.q + 1))
        rule_state, x_next = update_rule.apply(rule_state, x, est.g)
        state = state.advance(est.g, x_next - x)
        x = x_next
    trace.final_x = x
    final = objective.evaluate_uncounted(x)
    trace.final_loss = final if np.isfinite(final) else float("inf")
    if not trace.complete:
        trace.final_loss = float("inf")
    trace.wall_time = time.perf_counter() - started
    return trace


def run_with_variance_probe(
    objective: Objective,
    policy,
    update_rule: UpdateRule,
    cfg: RunConfig,
    rng: RngStream,
    probe_every: int = 10,
    probe_repeats: int = 20,
    x0: Optional[np.ndarray] = None,
) -> RunTrace:
    """Like :func:`run` but probes estimator spread every ``probe_every`` iterations.

    With ``probe_repeats < 2`` the variance is undefined and recorded as NaN.
    """
    if probe_every < 1:
        raise ValueError("probe_every must be >= 1")

    cfg = replace(cfg, probe_every=probe_every, probe_repeats=probe_repeats)
    return run(objective, policy, update_rule, cfg, rng, x0)


@dataclass
class MatchedProbes:
    """Estimator statistics of several policies at the same iterates.

    ``variance[name][j]`` and ``cosine[name][j]`` belong to iteration
    ``iteration[j]`` of the trajectory driven by ``driver``.
    """

    iteration: list[int] = field(default_factory=list)
    variance: dict[str, list[float]] = field(default_factory=dict)
    cosine: dict[str, list[float]] = field(default_factory=dict)


def matched_probes(
    objective: Objective,
    policies: dict[str, object],
    driver: str,
    update_rule: UpdateRule,
    cfg: RunConfig,
    rng: RngStream,
    probe_every: int = 10,
    probe_repeats: int = 20,
) -> MatchedProbes:
    """Follow the ``driver`` policy and probe every policy at its iterates.

    All policies see the same ``x`` and optimizer state, so differences in
    the probes come from the sampling rule alone. Probe queries are not part
    of the optimization budget.
    """
    if driver not in policies:
        raise ValueError(f"driver {driver!r} is not among the policies")
    if probe_every < 1 or probe_repeats < 2:
        raise ValueError("need probe_every >= 1 and probe_repeats >= 2")
    x = np.array(objective.x0, dtype=np.float64)
    est_cfg = cfg.estimator
    rule_state = update_rule.init(x.size)
    state = OptimizerState.empty(x.size, horizon=cfg.steps, history=cfg.history)
    dir_rng = rng.child("directions")
    out = MatchedProbes(variance={n: [] for n in policies}, cosine={n: [] for n in policies})
    for k in range(cfg.steps):
        f_k = objective(x)
        if not np.isfinite(f_k):
            raise EstimationError(f"non-finite objective value at iteration {k}", point=x.copy())
        state = state.with_value(f_k)
        if k % probe_every == 0:
            out.iteration.append(k)
            for name, pol in policies.items():
                stats = estimator_statistics(x, objective, pol, est_cfg, probe_repeats, rng.child("probe", k, name), state)
                out.variance[name].append(stats.variance)
                out.cosine[name].append(float("nan") if stats.cosine is None else stats.cosine)
        est = estimate_gradient(x, objective, policies[driver].propose(state, cfg.q, dir_rng), est_cfg, base_value=f_k)
        rule_state, x_next = update_rule.apply(rule_state, x, est.g)
        state = state.advance(est.g, x_next - x)
        x = x_next
    return out
