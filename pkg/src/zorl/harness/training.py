"""Offline policy training driven by an :class:`ExperimentConfig`."""

from __future__ import annotations

import logging
from pathlib import Path

from .. import nn
from ..ddpg import (
    DdpgHyperparams,
    REWARD_MODES,
    TrainingResult,
    ZoEnvironment,
    default_actor_spec,
    default_critic_spec,
    train_policy,
)
from ..errors import ConfigError
from ..estimator import EstimatorConfig
from ..numerics import RngStream
from ..updates import UpdateRule
from .config import ExperimentConfig
from .tasks import parse_task, training_sampler

logger = logging.getLogger(__name__)


def hyperparams(cfg: ExperimentConfig) -> DdpgHyperparams:
    try:
        return DdpgHyperparams(
            gamma=cfg.gamma,
            tau=cfg.tau,
            batch_size=cfg.batch_size,
            actor_lr=cfg.actor_lr,
            critic_lr=cfg.critic_lr,
            exploration_noise=cfg.noise,
            episodes=cfg.episodes,
            steps_per_episode=cfg.steps,
            eval_every=cfg.eval_every,
            eval_episodes=cfg.eval_episodes,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def environment_factory(cfg: ExperimentConfig):
    if cfg.reward not in REWARD_MODES:
        raise ConfigError(f"unknown reward {cfg.reward!r}; expected one of {REWARD_MODES}")
    if cfg.delta <= 0:
        raise ConfigError("delta must be > 0")
    task = parse_task(
        cfg.task,
        cfg.seed,
        c=cfg.c,
        victim_epochs=cfg.victim_epochs,
        attack_train=cfg.attack_train,
        attack_test=cfg.attack_test,
    )
    sampler = training_sampler(task)
    update = UpdateRule(cfg.update)

    def factory() -> ZoEnvironment:
        return ZoEnvironment(
            sampler,
            EstimatorConfig(cfg.mu, cfg.q),
            update,
            delta=cfg.delta,
            beta=cfg.beta,
            steps=cfg.steps,
            reward_mode=cfg.reward,
        )

    return factory


def train_rl_policy_cmd(cfg: ExperimentConfig) -> tuple[Path, Path, TrainingResult]:
    """Train an actor and write ``<out>`` (actor artifact) and ``<out>.log.csv``."""
    factory = environment_factory(cfg)
    hp = hyperparams(cfg)
    artifact = Path(cfg.out)
    artifact.parent.mkdir(parents=True, exist_ok=True)
    log_path = artifact.with_name(artifact.name + ".log.csv")
    result = train_policy(
        factory,
        default_actor_spec(),
        default_critic_spec(),
        hp,
        RngStream(cfg.seed, ("train-policy",)),
        log_path=log_path,
    )
    artifact.write_bytes(nn.serialize(result.actor.params, result.actor.spec))
    logger.info("actor written to %s (best eval %.4g)", artifact, result.best_score)
    return artifact, log_path, result
