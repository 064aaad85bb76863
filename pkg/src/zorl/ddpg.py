"""Deep deterministic policy gradient for learning a sampling policy.

The environment is one zeroth-order optimization episode: the observation is
the featurized optimizer state, the action is a vector of history
coefficients (see :mod:`zorl.policies`), and the reward is the per-step
decrease of the objective.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Optional

import numpy as np

from . import nn
from .errors import DimensionMismatchError, DivergenceError, EstimationError
from .estimator import EstimatorConfig, estimate_gradient
from .numerics import RngStream
from .objectives import Objective
from .policies import (
    DEFAULT_HISTORY,
    DEFAULT_TOP_M,
    OptimizerState,
    RLActorPolicy,
    decode_action,
    feature_channels,
    featurize,
    guided_directions,
)
from .updates import UpdateRule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    terminal: bool


class Batch(NamedTuple):
    s: np.ndarray  # (N, *obs_shape)
    a: np.ndarray  # (N, action_dim)
    r: np.ndarray  # (N,)
    s_next: np.ndarray
    terminal: np.ndarray  # (N,) bool


class ReplayBuffer:
    """Fixed-capacity ring of transitions; the oldest entry is overwritten first."""

    def __init__(self, capacity: int, obs_shape: tuple[int, ...], action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        self._alloc(min(capacity, 1024))
        self._next = 0
        self.size = 0

    def _alloc(self, n: int) -> None:
        """(Re)allocate storage for ``n`` slots, keeping stored rows; storage grows on demand."""
        old = getattr(self, "_s", None)
        arrays = (
            np.zeros((n, *self.obs_shape)),
            np.zeros((n, self.action_dim)),
            np.zeros(n),
            np.zeros((n, *self.obs_shape)),
            np.zeros(n, dtype=bool),
        )
        if old is not None:
            for new_arr, old_arr in zip(arrays, (self._s, self._a, self._r, self._s2, self._done)):
                new_arr[: len(old_arr)] = old_arr
        self._s, self._a, self._r, self._s2, self._done = arrays

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        if tr.s.shape != self.obs_shape or tr.s_next.shape != self.obs_shape:
            raise DimensionMismatchError("transition observation shape mismatch")
        if np.shape(tr.a) != (self.action_dim,):
            raise DimensionMismatchError("transition action shape mismatch")
        i = self._next
        if i >= len(self._r):
            self._alloc(min(self.capacity, 2 * len(self._r)))
        self._s[i], self._a[i], self._r[i] = tr.s, tr.a, tr.r
        self._s2[i], self._done[i] = tr.s_next, tr.terminal
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, n: int, rng: RngStream) -> np.ndarray:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return rng.integers(0, self.size, n)

    def sample(self, n: int, rng: RngStream) -> Batch:
        idx = self.sample_indices(n, rng)
        return self.batch(idx)

    def batch(self, idx: np.ndarray) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._done[idx])


@dataclass(frozen=True)
class DdpgHyperparams:
    gamma: float = 0.99
    tau: float = 0.005
    batch_size: int = 64
    buffer_size: int = 100_000
    actor_lr: float = 1e-4
    critic_lr: float = 1e-3
    exploration_noise: float = 0.1
    episodes: int = 40
    steps_per_episode: int = 200
    eval_every: int = 5
    eval_episodes: int = 5

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


# ------------------------------------------------------------------ networks


def default_actor_spec(
    history: int = DEFAULT_HISTORY, top_m: int = DEFAULT_TOP_M, seed: int = 0, channels: int = 8, hidden: int = 32
) -> nn.NetworkSpec:
    c_in = feature_channels(top_m)
    length = history
    layers: list = [nn.BatchNorm(c_in)]
    c = c_in
    for _ in range(2):
        if length >= 3:
            layers += [nn.Conv1d(c, channels, 3), nn.Activation("relu")]
            c, length = channels, length - 2
    layers += [
        nn.Flatten(),
        nn.Dense(c * length, hidden),
        nn.Activation("relu"),
        nn.Dense(hidden, 2 * history),
        nn.Activation("tanh"),
    ]
    return nn.NetworkSpec((c_in, history), tuple(layers), seed=seed, final_scale=0.01)


def default_critic_spec(
    history: int = DEFAULT_HISTORY, top_m: int = DEFAULT_TOP_M, seed: int = 1, hidden: int = 64
) -> nn.NetworkSpec:
    width = feature_channels(top_m) * history + 2 * history
    return nn.NetworkSpec(
        (width,),
        (
            nn.BatchNorm(width),
            nn.Dense(width, hidden),
            nn.Activation("relu"),
            nn.Dense(hidden, hidden),
            nn.Activation("relu"),
            nn.Dense(hidden, 1),
        ),
        seed=seed,
    )


def critic_input(s: np.ndarray, a: np.ndarray) -> np.ndarray:
    return np.concatenate([s.reshape(s.shape[0], -1), a], axis=1)


@dataclass
class Net:
    spec: nn.NetworkSpec
    params: nn.NetworkParameters
    opt: Optional[nn.AdamState] = None

    @classmethod
    def create(cls, spec: nn.NetworkSpec) -> "Net":
        params = nn.init_params(spec)
        return cls(spec, params, nn.AdamState.zeros_like(params, spec))

    def copy(self) -> "Net":
        return Net(self.spec, self.params.copy(), None)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return nn.predict(self.params, self.spec, x)


def actor_fn(net: Net) -> Callable[[np.ndarray], np.ndarray]:
    return lambda s: net(s)


def critic_fn(net: Net) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    return lambda s, a: net(critic_input(s, a))[:, 0]


# ------------------------------------------------------------------ updates


def td_targets(batch: Batch, target_actor, target_critic, gamma: float) -> np.ndarray:
    """``y = r + gamma * Q'(s', pi'(s'))``; terminal transitions keep only ``r``.

    ``target_actor(S) -> A`` and ``target_critic(S, A) -> (N,)`` are callables.
    """
    r = np.asarray(batch.r, dtype=np.float64)
    if r.size == 0:
        raise ValueError("batch must be nonempty")
    q_next = np.asarray(target_critic(batch.s_next, target_actor(batch.s_next)), dtype=np.float64)
    return r + gamma * np.where(batch.terminal, 0.0, q_next.reshape(r.shape))


def critic_loss_grad(critic: Net, batch: Batch, y: np.ndarray):
    """Mean squared TD error and its parameter gradients (train-mode forward)."""
    q, tape = nn.forward(critic.params, critic.spec, critic_input(batch.s, batch.a), "train")
    resid = np.asarray(y, dtype=np.float64).reshape(-1) - q[:, 0]
    n = resid.size
    loss = float(np.mean(resid * resid))
    grads, _ = nn.backward(tape, (-2.0 * resid / n)[:, None])
    return loss, grads


def critic_update(critic: Net, batch: Batch, y: np.ndarray, lr: float) -> tuple[Net, float]:
    """One Adam step on the critic loss; returns the updated critic and the pre-step loss."""
    loss, grads = critic_loss_grad(critic, batch, y)
    if not math.isfinite(loss):
        raise DivergenceError(f"critic loss became non-finite ({loss})")
    params, opt = nn.adam_update_net(critic.params, grads, critic.opt, lr)
    return Net(critic.spec, params, opt), loss


def actor_objective_grad(actor: Net, critic: Net, s: np.ndarray):
    """``J = mean_i Q(s_i, pi(s_i))`` and ``dJ/dtheta_pi`` via the critic's action gradient.

    The actor runs in train mode; the critic is read in eval mode so this
    evaluation leaves it untouched.
    """
    a, a_tape = nn.forward(actor.params, actor.spec, s, "train")
    q, q_tape = nn.forward(critic.params, critic.spec, critic_input(s, a), "eval")
    n = q.shape[0]
    J = float(np.mean(q))
    _, dinput = nn.backward(q_tape, np.full((n, 1), 1.0 / n))
    dJ_da = dinput[:, -a.shape[1] :]
    grads, _ = nn.backward(a_tape, dJ_da)
    return J, grads


def actor_update(actor: Net, critic: Net, batch: Batch, lr: float) -> tuple[Net, float]:
    """Gradient ascent on J, done as one Adam step on ``-J``; returns the pre-step J."""
    J, grads = actor_objective_grad(actor, critic, batch.s)
    neg = [{k: -v for k, v in g.items()} for g in grads]
    params, opt = nn.adam_update_net(actor.params, neg, actor.opt, lr)
    return Net(actor.spec, params, opt), J


def soft_update(learned: nn.NetworkParameters, target: nn.NetworkParameters, tau: float) -> nn.NetworkParameters:
    """``theta' <- tau * theta + (1 - tau) * theta'`` for every array, running statistics included."""
    layers = []
    for lp, tp in zip(learned.layers, target.layers, strict=True):
        if lp.keys() != tp.keys():
            raise DimensionMismatchError("learned and target layers differ")
        out = {}
        for k in lp:
            if lp[k].shape != tp[k].shape:
                raise DimensionMismatchError(f"shape mismatch for {k}: {lp[k].shape} vs {tp[k].shape}")
            out[k] = tau * lp[k] + (1.0 - tau) * tp[k]
        layers.append(out)
    return nn.NetworkParameters(layers)


# ---------------------------------------------------------------- environment


REWARD_MODES = ("decrease", "negative-loss", "log-decrease")


class ZoEnvironment:
    """One optimization episode per :meth:`reset`.

    The step size follows the harness convention ``eta = delta / d`` for the
    sampled objective's dimension ``d``.
    """

    def __init__(
        self,
        sampler: Callable[[RngStream], Objective],
        estimator: EstimatorConfig = EstimatorConfig(),
        update: UpdateRule = UpdateRule("sgd"),
        delta: float = 1.0,
        beta: float = 0.5,
        steps: int = 200,
        history: int = DEFAULT_HISTORY,
        top_m: int = DEFAULT_TOP_M,
        reward_mode: str = "decrease",
        normalize_reward: bool = True,
        penalty: float = 10.0,
    ):
        if reward_mode not in REWARD_MODES:
            raise ValueError(f"unknown reward mode {reward_mode!r}")
        self.sampler = sampler
        self.estimator = estimator
        self.update = update
        self.delta = delta
        self.beta = beta
        self.steps = steps
        self.history = history
        self.top_m = top_m
        self.reward_mode = reward_mode
        self.normalize_reward = normalize_reward
        self.penalty = penalty
        self.objective: Optional[Objective] = None

    @property
    def action_dim(self) -> int:
        return 2 * self.history

    @property
    def obs_shape(self) -> tuple[int, int]:
        return (feature_channels(self.top_m), self.history)

    def observe(self) -> np.ndarray:
        return featurize(self.state, self.top_m).T.copy()

    def reset(self, rng: RngStream, objective: Optional[Objective] = None) -> np.ndarray:
        self.objective = objective if objective is not None else self.sampler(rng.child("objective"))
        d = self.objective.dim
        self.rule = self.update.with_eta(self.delta / d)
        self.rule_state = self.rule.init(d)
        self.x = np.array(self.objective.x0, dtype=np.float64)
        self.f = self.objective(self.x)
        self.f0 = self.f
        self.scale = 1.0 / abs(self.f0) if self.normalize_reward and self.f0 != 0 else 1.0
        self.state = OptimizerState.empty(d, horizon=self.steps, history=self.history).with_value(self.f)
        self.t = 0
        self.dir_rng = rng.child("directions")
        return self.observe()

    def step(self, action: np.ndarray) -> tuple[float, np.ndarray, bool]:
        if self.objective is None:
            raise RuntimeError("call reset() before step()")
        d = self.objective.dim
        guide = decode_action(action, self.state)
        U = guided_directions(guide, self.estimator.q, self.dir_rng, self.beta, d)
        self.t += 1
        try:
            est = estimate_gradient(self.x, self.objective, U, self.estimator, base_value=self.f)
            self.rule_state, x_next = self.rule.apply(self.rule_state, self.x, est.g)
            f_next = self.objective(x_next)
            if not (math.isfinite(f_next) and np.all(np.isfinite(x_next))):
                raise EstimationError("non-finite objective after update", point=x_next)
        except EstimationError:
            return -self.penalty, self.observe(), True
        if self.reward_mode == "decrease":
            reward = (self.f - f_next) * self.scale
        elif self.reward_mode == "negative-loss":
            reward = -f_next * self.scale
        else:
            reward = _log_gap(self.f, f_next)
        # a single blow-up step must not swamp the critic's regression targets
        reward = min(max(reward, -self.penalty), self.penalty)
        self.state = self.state.advance(est.g, x_next - self.x).with_value(f_next)
        self.x, self.f = x_next, f_next
        return float(reward), self.observe(), self.t >= self.steps


def _log_gap(f_before: float, f_after: float, floor: float = 1e-300) -> float:
    return math.log(max(f_before, floor)) - math.log(max(f_after, floor))


def env_step(env: ZoEnvironment, action: np.ndarray) -> tuple[float, np.ndarray, bool]:
    return env.step(action)


# ------------------------------------------------------------------ training


@dataclass
class TrainingResult:
    actor: Net
    best_score: float
    log: list[dict] = field(default_factory=list)

    def policy(self, beta: float = 0.5, top_m: int = DEFAULT_TOP_M) -> RLActorPolicy:
        return RLActorPolicy(self.actor.params, self.actor.spec, beta=beta, top_m=top_m)


def greedy_episode(env: ZoEnvironment, actor: Net, rng: RngStream, objective: Optional[Objective] = None) -> float:
    """Run one noise-free episode; returns ``log10(f_T / f_0)`` (lower is better)."""
    s = env.reset(rng, objective)
    done = False
    while not done:
        a = actor(s[None])[0]
        _, s, done = env.step(a)
    ratio = env.f / env.f0 if env.f0 != 0 else env.f
    if not math.isfinite(ratio):
        return math.inf
    return math.log10(max(ratio, 1e-12))


def evaluate_actor(env: ZoEnvironment, actor: Net, rng: RngStream, episodes: int) -> float:
    """Mean greedy ``log10(f_T / f_0)`` over fixed evaluation instances."""
    return float(np.mean([greedy_episode(env, actor, rng.child(i)) for i in range(episodes)]))


def train_policy(
    env_factory: Callable[[], ZoEnvironment],
    actor_spec: nn.NetworkSpec,
    critic_spec: nn.NetworkSpec,
    hp: DdpgHyperparams,
    rng: RngStream,
    log_path: Optional[str | Path] = None,
) -> TrainingResult:
    """Train actor and critic; return the actor snapshot with the best greedy evaluation."""
    env = env_factory()
    if actor_spec.input_shape != env.obs_shape:
        raise DimensionMismatchError(f"actor expects {actor_spec.input_shape}, env emits {env.obs_shape}")
    actor, critic = Net.create(actor_spec), Net.create(critic_spec)
    actor_t, critic_t = actor.copy(), critic.copy()
    buffer = ReplayBuffer(hp.buffer_size, env.obs_shape, env.action_dim)
    replay_rng, noise_rng = rng.child("replay"), rng.child("noise")
    eval_env, eval_rng = env_factory(), rng.child("eval")

    best = Net(actor.spec, actor.params.copy())
    best_score = evaluate_actor(eval_env, best, eval_rng, hp.eval_episodes) if hp.episodes > 0 else math.inf
    log: list[dict] = []
    for ep in range(hp.episodes):
        s = env.reset(rng.child("episode", ep))
        rewards, losses = [], []
        for _ in range(hp.steps_per_episode):
            a = actor(s[None])[0] + hp.exploration_noise * noise_rng.normal(env.action_dim)
            a = np.clip(a, -1.0, 1.0)
            r, s2, done = env.step(a)
            buffer.add(Transition(s, a, r, s2, done))
            rewards.append(r)
            s = s2
            if len(buffer) >= hp.batch_size:
                batch = buffer.sample(hp.batch_size, replay_rng)
                y = td_targets(batch, actor_fn(actor_t), critic_fn(critic_t), hp.gamma)
                critic, loss = critic_update(critic, batch, y, hp.critic_lr)
                losses.append(loss)
                actor, _ = actor_update(actor, critic, batch, hp.actor_lr)
                actor_t = Net(actor.spec, soft_update(actor.params, actor_t.params, hp.tau))
                critic_t = Net(critic.spec, soft_update(critic.params, critic_t.params, hp.tau))
            if done:
                break
        score = math.nan
        if (ep + 1) % hp.eval_every == 0 or ep + 1 == hp.episodes:
            score = evaluate_actor(eval_env, actor, eval_rng, hp.eval_episodes)
            if score < best_score:
                best_score = score
                best = Net(actor.spec, actor.params.copy())
        row = {
            "episode": ep,
            "mean_reward": float(np.mean(rewards)) if rewards else math.nan,
            "critic_loss": float(np.mean(losses)) if losses else math.nan,
            "eval_score": score,
        }
        log.append(row)
        logger.info(
            "episode %d reward %.4g critic %.4g eval %.4g", ep, row["mean_reward"], row["critic_loss"], score
        )
    if log_path is not None:
        write_training_log(log, log_path)
    return TrainingResult(best, best_score, log)


def write_training_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["episode", "mean_reward", "critic_loss", "eval_score"])
        w.writeheader()
        for row in rows:
            w.writerow(row)
