"""Sampling policies: the rules that produce the q query directions.

Three variants share the ``propose(state, q, rng) -> (q, d) array`` contract:

* ``standard-gaussian`` draws ``N(0, I_d)``;
* ``guided-es`` mixes isotropic noise with a low-rank subspace spanned by the
  recent gradient estimates;
* ``rl-actor`` asks a trained actor network for a guiding vector and
  blends it with isotropic noise; the vector's length (capped at 1) sets
  how strongly it guides.

Actor actions are dimension-free. An action holds ``2H`` coefficients: the
first ``H`` weight the unit-normalized gradient estimates in the history
(newest first) and the last ``H`` weight the unit-normalized parameter
updates. :func:`decode_action` turns them into a direction in ``R^d``, so one
actor serves objectives of any dimension.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Protocol

import numpy as np

from . import nn
from .errors import DimensionMismatchError, NonFiniteError
from .numerics import RngStream, unit

DEFAULT_HISTORY = 5
DEFAULT_TOP_M = 8


@dataclass(frozen=True)
class OptimizerState:
    """What a policy may observe. Histories are stored newest first."""

    dim: int
    f_current: Optional[float] = None
    grad_history: tuple[np.ndarray, ...] = ()
    delta_history: tuple[np.ndarray, ...] = ()
    f_history: tuple[float, ...] = ()
    iteration: int = 0
    horizon: int = 200
    history: int = DEFAULT_HISTORY

    @classmethod
    def empty(cls, dim: int, horizon: int = 200, history: int = DEFAULT_HISTORY) -> "OptimizerState":
        return cls(dim=dim, horizon=horizon, history=history)

    def with_value(self, f_value: float) -> "OptimizerState":
        return replace(self, f_current=float(f_value))

    def advance(self, g: np.ndarray, delta_x: np.ndarray) -> "OptimizerState":
        """Record the estimate formed at the current iterate and the step taken from it."""
        g = np.asarray(g, dtype=np.float64)
        delta_x = np.asarray(delta_x, dtype=np.float64)
        if g.shape != (self.dim,) or delta_x.shape != (self.dim,):
            raise DimensionMismatchError("history vectors must match the state dimension")
        H = self.history
        f_now = self.f_current if self.f_current is not None else 0.0
        return replace(
            self,
            grad_history=((g,) + self.grad_history)[:H],
            delta_history=((delta_x,) + self.delta_history)[:H],
            f_history=((f_now,) + self.f_history)[:H],
            iteration=self.iteration + 1,
        )


def _slog(v: float) -> float:
    return float(np.sign(v) * np.log1p(abs(v)))


def feature_channels(top_m: int = DEFAULT_TOP_M) -> int:
    return top_m + 5


def featurize(state: OptimizerState, top_m: int = DEFAULT_TOP_M) -> np.ndarray:
    """Fixed ``(H, top_m + 5)`` feature matrix; row j describes the j-th newest history entry.

    Channel layout:

    ====================  =====================================================
    0                     signed ``log1p`` of the current function value (all rows)
    1 .. top_m            largest ``|g_j| / ||g_j||`` coordinates, descending
    top_m + 1             ``log1p(||g_j||)``
    top_m + 2             relative change ``(f_j - f_{j+1}) / (|f_j| + |f_{j+1}|)``
    top_m + 3             iteration fraction of the row, ``(k - j) / K``
    top_m + 4             cosine between ``g_j`` and ``g_{j+1}``
    ====================  =====================================================

    Rows without history are zero apart from channel 0.
    """
    H = state.history
    F = np.zeros((H, top_m + 5))
    if state.f_current is not None:
        F[:, 0] = _slog(state.f_current)
    fvals = (state.f_current,) + state.f_history if state.f_current is not None else state.f_history
    for j, g in enumerate(state.grad_history[:H]):
        gn = float(np.linalg.norm(g))
        if gn > 0:
            mags = np.sort(np.abs(g) / gn)[::-1][:top_m]
            F[j, 1 : 1 + mags.size] = mags
        F[j, top_m + 1] = np.log1p(gn)
        # f_history[j] is the value at the iterate where g_j was formed
        if state.f_current is not None and j + 1 < len(fvals):
            a, b = fvals[j], fvals[j + 1]
            denom = abs(a) + abs(b)
            F[j, top_m + 2] = (b - a) / denom if denom > 0 else 0.0
        F[j, top_m + 3] = max(state.iteration - j, 0) / max(state.horizon, 1)
        if j + 1 < len(state.grad_history):
            h = state.grad_history[j + 1]
            hn = float(np.linalg.norm(h))
            if gn > 0 and hn > 0:
                F[j, top_m + 4] = float(g @ h) / (gn * hn)
    return F


def decode_action(action: np.ndarray, state: OptimizerState) -> np.ndarray:
    """Map ``2H`` history coefficients to a direction in ``R^d`` (not normalized)."""
    a = np.asarray(action, dtype=np.float64).ravel()
    H = state.history
    if a.size != 2 * H:
        raise DimensionMismatchError(f"action must have {2 * H} coefficients, got {a.size}")
    out = np.zeros(state.dim)
    for c, g in zip(a[:H], state.grad_history):
        out += c * unit(g)
    for c, dx in zip(a[H:], state.delta_history):
        out += c * unit(dx)
    return out


def guided_directions(
    guide: np.ndarray, q: int, rng: RngStream, beta: float, d: int
) -> np.ndarray:
    """``u_i = beta sqrt(d) v + sqrt(1 - beta^2 ||v||^2) zeta_i`` with ``zeta_i ~ N(0, I_d)``.

    ``v`` is ``guide`` clipped to the unit ball, so a unit guide gives the
    full-strength blend and a shorter one proportionally weaker guidance.
    Every variant keeps ``E||u||^2 = d``. A guide shorter than 1e-12 returns
    the plain Gaussian draws.
    """
    zeta = rng.normal((q, d))
    v = np.asarray(guide, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        return zeta
    if n > 1.0:
        v = v / n
        n = 1.0
    return beta * np.sqrt(d) * v + np.sqrt(1.0 - beta * beta * n * n) * zeta


class SamplingPolicy(Protocol):
    variant: str

    def propose(self, state: OptimizerState, q: int, rng: RngStream) -> np.ndarray: ...


class StandardGaussianPolicy:
    variant = "standard-gaussian"

    def propose(self, state: OptimizerState, q: int, rng: RngStream) -> np.ndarray:
        if q < 1:
            raise ValueError("q must be >= 1")
        return rng.normal((q, state.dim))


@dataclass(frozen=True)
class GuidedSubspace:
    """Orthonormal basis ``U`` (d x k') of the retained surrogate gradients."""

    dim: int
    max_k: int = DEFAULT_HISTORY
    alpha: float = 0.5
    vectors: tuple[np.ndarray, ...] = ()
    U: np.ndarray = field(default=None)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.U is None:
            object.__setattr__(self, "U", np.zeros((self.dim, 0)))

    @property
    def k(self) -> int:
        return self.U.shape[1]


def _orthonormalize(vectors, tol: float = 1e-10) -> np.ndarray:
    """Modified Gram-Schmidt with one re-orthogonalization pass; drops dependent columns."""
    cols: list[np.ndarray] = []
    for v in vectors:
        w = np.asarray(v, dtype=np.float64).copy()
        scale = np.linalg.norm(w)
        if scale == 0:
            continue
        for _ in range(2):
            for c in cols:
                w -= (c @ w) * c
        n = np.linalg.norm(w)
        if n > tol * scale:
            cols.append(w / n)
    if not cols:
        return np.zeros((len(vectors[0]) if vectors else 0, 0))
    return np.stack(cols, axis=1)


def update_subspace(sub: GuidedSubspace, new_grad: np.ndarray) -> GuidedSubspace:
    g = np.asarray(new_grad, dtype=np.float64)
    if g.shape != (sub.dim,):
        raise DimensionMismatchError(f"gradient has shape {g.shape}, subspace dim {sub.dim}")
    if not np.any(g):
        return sub
    vectors = (sub.vectors + (g.copy(),))[-sub.max_k :]
    U = _orthonormalize(vectors)
    if U.shape[0] == 0:
        U = np.zeros((sub.dim, 0))
    return replace(sub, vectors=vectors, U=U)


class GuidedESPolicy:
    variant = "guided-es"

    def __init__(self, alpha: float = 0.5, k: int = DEFAULT_HISTORY):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
        self.alpha = alpha
        self.k = k

    def subspace(self, state: OptimizerState) -> GuidedSubspace:
        sub = GuidedSubspace(state.dim, self.k, self.alpha)
        for g in reversed(state.grad_history):
            sub = update_subspace(sub, g)
        return sub

    def propose(self, state: OptimizerState, q: int, rng: RngStream) -> np.ndarray:
        if q < 1:
            raise ValueError("q must be >= 1")
        d = state.dim
        sub = self.subspace(state)
        if sub.k == 0:
            # no subspace yet: isotropic N(0, I/d)
            return rng.normal((q, d)) / np.sqrt(d)
        eps1 = rng.normal((q, d))
        eps2 = rng.normal((q, sub.k))
        return np.sqrt(self.alpha / d) * eps1 + np.sqrt((1.0 - self.alpha) / sub.k) * (eps2 @ sub.U.T)


class RLActorPolicy:
    """Directions guided by a frozen actor network."""

    variant = "rl-actor"

    def __init__(
        self,
        params: nn.NetworkParameters,
        spec: nn.NetworkSpec,
        beta: float = 0.5,
        top_m: int = DEFAULT_TOP_M,
    ):
        if not 0.0 <= beta < 1.0:
            raise ValueError(f"beta must lie in [0, 1), got {beta}")
        self.params = params
        self.spec = spec
        self.beta = beta
        self.top_m = top_m

    def action(self, state: OptimizerState) -> np.ndarray:
        feats = featurize(state, self.top_m)
        x = feats.T[None, :, :]
        if x.shape[1:] != self.spec.input_shape:
            raise DimensionMismatchError(
                f"featurized state {x.shape[1:]} does not match actor input {self.spec.input_shape}"
            )
        a = nn.predict(self.params, self.spec, x)[0]
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("actor produced a non-finite action")
        return a

    def propose(self, state: OptimizerState, q: int, rng: RngStream) -> np.ndarray:
        if q < 1:
            raise ValueError("q must be >= 1")
        guide = decode_action(self.action(state), state)
        return guided_directions(guide, q, rng, self.beta, state.dim)
