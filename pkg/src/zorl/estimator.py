"""Zeroth-order gradient estimation from function values alone."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionMismatchError, EstimationError, InvalidDimensionError
from .numerics import RngStream, Vector
from .objectives import Objective


@dataclass(frozen=True)
class EstimatorConfig:
    mu: float = 0.01
    q: int = 20

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"smoothing parameter mu must be > 0, got {self.mu}")
        if self.q < 1:
            raise ValueError(f"q must be >= 1, got {self.q}")


@dataclass(frozen=True)
class GradientEstimate:
    g: Vector
    queries_used: int
    directions: np.ndarray  # (q, d)
    base_value: float


def estimate_gradient(
    x: Vector,
    f: Objective,
    directions: Sequence[Vector] | np.ndarray,
    cfg: EstimatorConfig,
    base_value: Optional[float] = None,
) -> GradientEstimate:
    """Forward-difference estimate ``(1/(mu q)) sum_i [f(x + mu u_i) - f(x)] u_i``.

    ``f(x)`` is queried once and shared by all q differences. Callers that
    already hold ``f(x)`` from a previous step may pass it as ``base_value``;
    the returned ``queries_used`` then reports only the fresh queries.
    """
    x = np.asarray(x, dtype=np.float64)
    U = np.asarray(directions, dtype=np.float64)
    if U.ndim != 2 or U.shape[1] != x.size:
        raise DimensionMismatchError(f"directions must be (q, {x.size}), got {U.shape}")
    if U.shape[0] != cfg.q:
        raise DimensionMismatchError(f"expected {cfg.q} directions, got {U.shape[0]}")
    used = 0
    if base_value is None:
        base_value = f(x)
        used += 1
    if not np.isfinite(base_value):
        raise EstimationError(f"non-finite objective value {base_value} at x", point=x.copy())
    diffs = np.empty(cfg.q)
    for i, u in enumerate(U):
        point = x + cfg.mu * u
        val = f(point)
        if not np.isfinite(val):
            raise EstimationError(f"non-finite objective value {val} at query {i}", point=point)
        diffs[i] = val - base_value
    used += cfg.q
    g = (diffs @ U) / (cfg.mu * cfg.q)
    return GradientEstimate(g, used, U, float(base_value))


@dataclass(frozen=True)
class EstimatorStats:
    mean: Vector
    variance: Optional[float]  # trace(cov) / d; None when M < 2
    cosine: Optional[float]  # mean cosine to the analytic gradient
    relative_variance: Optional[float]  # trace(cov) / ||mean||^2
    queries: int


def estimator_statistics(
    x: Vector,
    f: Objective,
    policy,
    cfg: EstimatorConfig,
    repeats: int,
    rng: RngStream,
    state=None,
) -> EstimatorStats:
    """Repeat the estimate ``repeats`` times at a fixed ``x`` and summarize the spread.

    ``f(x)`` is queried once and reused, so the probe costs ``1 + repeats * q``
    queries. ``state`` is the optimizer state handed to ``policy.propose``.
    """
    if repeats < 1:
        raise InvalidDimensionError("repeats must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    if state is None:
        from .policies import OptimizerState

        state = OptimizerState.empty(x.size)
    base = f(x)
    queries = 1
    G = np.empty((repeats, x.size))
    for m in range(repeats):
        U = policy.propose(state, cfg.q, rng)
        est = estimate_gradient(x, f, U, cfg, base_value=base)
        G[m] = est.g
        queries += est.queries_used
    mean = G.mean(axis=0)
    variance = rel = None
    if repeats >= 2:
        centered = G - mean
        trace = float(np.sum(centered * centered) / (repeats - 1))
        variance = trace / x.size
        mn = float(mean @ mean)
        rel = trace / mn if mn > 0 else None
    cosine = None
    if f.has_gradient:
        true = np.asarray(f.gradient(x), dtype=np.float64)
        tn = np.linalg.norm(true)
        gn = np.linalg.norm(G, axis=1)
        ok = gn > 0
        if tn > 0 and np.any(ok):
            cosine = float(np.mean((G[ok] @ true) / (gn[ok] * tn)))
    return EstimatorStats(mean, variance, cosine, rel, queries)
