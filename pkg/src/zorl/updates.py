"""Parameter update rules driven by zeroth-order gradient estimates."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import DimensionMismatchError

VARIANTS = ("sgd", "signsgd", "adam")


def _check(x, g):
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise DimensionMismatchError(f"x has shape {x.shape}, g has {g.shape}")
    return x, g


def sgd_step(x, g, eta: float) -> np.ndarray:
    x, g = _check(x, g)
    return x - eta * g


def signsgd_step(x, g, eta: float) -> np.ndarray:
    """``x - eta * sign(g)`` with ``sign(0) = 0``."""
    x, g = _check(x, g)
    return x - eta * np.sign(g)


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, d: int, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(np.zeros(d), np.zeros(d), 0, beta1, beta2, eps)


def adam_step(state: AdamState, x, g, eta: float) -> tuple[AdamState, np.ndarray]:
    x, g = _check(x, g)
    if state.m.shape != x.shape:
        raise DimensionMismatchError("Adam moments do not match parameter dimension")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * g
    v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    x_next = x - eta * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, t=t), x_next


@dataclass(frozen=True)
class UpdateRule:
    """Configured update rule; :meth:`init` gives per-run state, :meth:`apply` steps."""

    variant: str = "sgd"
    eta: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown update rule {self.variant!r}; expected one of {VARIANTS}")
        if not self.eta > 0:
            raise ValueError(f"learning rate must be > 0, got {self.eta}")

    def with_eta(self, eta: float) -> "UpdateRule":
        return replace(self, eta=eta)

    def init(self, d: int) -> Optional[AdamState]:
        if self.variant == "adam":
            return AdamState.fresh(d, self.beta1, self.beta2, self.eps)
        return None

    def apply(self, state, x, g):
        if self.variant == "sgd":
            return state, sgd_step(x, g, self.eta)
        if self.variant == "signsgd":
            return state, signsgd_step(x, g, self.eta)
        return adam_step(state, x, g, self.eta)
