"""Training, greedy evaluation and baseline rollouts."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import agent as ag
from .checkpoint import save_checkpoint
from .graph import FeatureLayout, FogPartition, build_adjacency, build_features, per_node_reward, preset_partition
from .nn import ParamSet
from .sim import RoadNetwork, SimConfig, build_grid, step as sim_step

log = logging.getLogger(__name__)

__all__ = [
    "TrainingDiverged",
    "TrainConfig",
    "TrainLog",
    "DelayCurve",
    "train",
    "evaluate",
    "rollout",
    "baseline_policy",
    "discounted_return",
    "average_reward",
    "param_digest",
]

TRAIN_LOG_FIELDS = ("step", "episode", "epsilon", "loss", "mean_reward", "avg_delay_s", "injected", "departed")
DELAY_CURVE_FIELDS = ("step", "avg_intersection_delay_s")

PARTITION_ALIASES = {"full": "fully_observable", "two_fog": "two_fog_rows"}


class TrainingDiverged(RuntimeError):
    """The TD loss became non-finite (learning rate or reward scale too large)."""


@dataclass
class TrainConfig:
    rows: int = 2
    cols: int = 3
    sim: SimConfig = field(default_factory=SimConfig)
    partition: str | list[list[int]] = "two_fog_rows"
    hp: ag.Hyperparams = field(default_factory=ag.Hyperparams)
    layout: FeatureLayout = field(default_factory=FeatureLayout)
    sigma_wait: float = 1.0
    sigma_wave: float = 0.30
    reward_scale: float = 100.0
    total_steps: int = 100_000
    warmup_steps: int = 20_000
    episode_length: int = 1_000
    eval_every: int = 0
    eval_steps: int = 1_000
    checkpoint_dir: str | None = None
    checkpoint_every: int = 0
    log_every: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.warmup_steps >= self.total_steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")
        if self.episode_length <= 0:
            raise ValueError("episode_length must be > 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def build_network(self) -> RoadNetwork:
        return build_grid(self.rows, self.cols, self.sim)

    def fog_partition(self, net: RoadNetwork) -> FogPartition:
        if isinstance(self.partition, str):
            return preset_partition(net, PARTITION_ALIASES.get(self.partition, self.partition))
        return FogPartition(self.partition)

    def agent_spec(self) -> ag.AgentSpec:
        return ag.AgentSpec(features=self.layout.width)


def _seed(*words: int) -> int:
    return int(np.random.SeedSequence([int(w) for w in words]).generate_state(1)[0])


# Stream tags for derived seeds.
_INIT, _AGENT, _EPISODE, _EVAL, _BASELINE = range(5)


def episode_seed(seed: int, episode: int) -> int:
    return _seed(seed, _EPISODE, episode)


def eval_seed(seed: int) -> int:
    return _seed(seed, _EVAL)


@dataclass
class TrainLog:
    rows: list[tuple] = field(default_factory=list)

    def append(self, step, episode, epsilon, loss, mean_reward, avg_delay, injected, departed) -> None:
        self.rows.append((step, episode, epsilon, loss, mean_reward, avg_delay, injected, departed))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list:
        i = TRAIN_LOG_FIELDS.index(name)
        return [r[i] for r in self.rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAIN_LOG_FIELDS)
            for r in self.rows:
                w.writerow([_fmt(v) for v in r])


@dataclass
class DelayCurve:
    delays: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.delays)) if self.delays else 0.0

    @property
    def final(self) -> float:
        return self.delays[-1] if self.delays else 0.0

    def __len__(self) -> int:
        return len(self.delays)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(DELAY_CURVE_FIELDS)
            for i, d in enumerate(self.delays, start=1):
                w.writerow([i, _fmt(d)])


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    total = 0.0
    weight = 1.0
    for r in rewards:
        total += weight * r
        weight *= gamma
    return total


def average_reward(rewards: Sequence[float]) -> float:
    if len(rewards) == 0:
        raise ValueError("average_reward of an empty sequence")
    return math.fsum(rewards) / len(rewards)


def param_digest(params: ParamSet) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v).tobytes())
    return h.hexdigest()


def _check_writable(directory) -> Path:
    path = Path(directory)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"checkpoint directory {path} is not writable: {exc}") from exc
    return path


def train(
    config: TrainConfig,
    on_eval: Callable[[int, DelayCurve], None] | None = None,
    checkpoint_meta: dict | None = None,
) -> tuple[ParamSet, TrainLog]:
    """Warm up on random actions, then train with double-Q targets and soft updates.

    ``checkpoint_meta`` is written into checkpoint headers (defaults to the
    agent hyperparameters).
    """
    ckpt_dir = _check_writable(config.checkpoint_dir) if config.checkpoint_dir else None
    hp = config.hp
    meta = hp.to_dict() if checkpoint_meta is None else checkpoint_meta
    net = config.build_network()
    partition = config.fog_partition(net)
    A = build_adjacency(net, partition)
    layout = config.layout

    online = ag.init_agent(config.agent_spec(), _seed(config.seed, _INIT))
    target = ParamSet(online)
    buffer = ag.ReplayBuffer(hp.buffer_capacity)
    rng = np.random.default_rng(_seed(config.seed, _AGENT))
    fwd = {"slope": hp.leaky_slope, "gat_activation": hp.gat_activation}
    history = TrainLog()

    episode = 0
    net.reset(episode_seed(config.seed, episode))
    X = build_features(net, layout)
    for t in range(config.total_steps):
        eps = ag.epsilon_at(t, config.warmup_steps, hp)
        if t < config.warmup_steps:
            actions = rng.integers(0, ag.N_PHASES, size=net.n)
        else:
            actions = ag.select_actions(ag.forward(online, X, A, **fwd), eps, rng)
        metrics = sim_step(net, actions)
        rewards = per_node_reward(net, config.sigma_wait, config.sigma_wave, config.reward_scale, layout)
        X_next = build_features(net, layout)
        done = (t + 1) % config.episode_length == 0
        buffer.push(ag.Transition(X, A, actions, rewards, X_next, A, done))

        loss = None
        if t >= config.warmup_steps:
            if (t - config.warmup_steps) % hp.train_every == 0:
                online, loss = ag.train_step(online, target, buffer, hp, rng)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"non-finite TD loss at step {t}; lower agent.lr or raise reward.reward_scale")
            target = ag.soft_update(target, online, hp.tau)

        history.append(t, episode, eps, loss, float(rewards.mean()), metrics.avg_intersection_delay,
                       metrics.injected, metrics.departed)
        if config.log_every and (t + 1) % config.log_every == 0:
            log.info("step %d episode %d eps %.3f loss %s delay %.1f", t + 1, episode, eps,
                     "-" if loss is None else f"{loss:.4g}", metrics.avg_intersection_delay)
        if ckpt_dir and config.checkpoint_every and (t + 1) % config.checkpoint_every == 0:
            save_checkpoint(ckpt_dir / f"step_{t + 1}.ckpt", online, t + 1, meta)
        if on_eval and config.eval_every and (t + 1) % config.eval_every == 0:
            on_eval(t + 1, evaluate(online, config, config.eval_steps))

        if done:
            episode += 1
            net.reset(episode_seed(config.seed, episode))
            X = build_features(net, layout)
        else:
            X = X_next

    if ckpt_dir:
        save_checkpoint(ckpt_dir / "final.ckpt", online, config.total_steps, meta)
    return online, history


Policy = Callable[[RoadNetwork, np.ndarray, int], Sequence[int]]


def rollout(policy: Policy, config: TrainConfig, steps: int = 1000, seed: int | None = None) -> DelayCurve:
    """Run ``policy`` from a fresh reset and record the per-step average delay.

    The simulator seed defaults to the config's evaluation seed so every
    policy sees the same arrival stream.
    """
    net = config.build_network()
    net.reset(eval_seed(config.seed) if seed is None else seed)
    delays = []
    for k in range(steps):
        X = build_features(net, config.layout)
        delays.append(sim_step(net, policy(net, X, k)).avg_intersection_delay)
    return DelayCurve(delays)


def evaluate(params: ParamSet, config: TrainConfig, steps: int = 1000, seed: int | None = None) -> DelayCurve:
    """Greedy (epsilon = 0) policy replay."""
    net = config.build_network()
    A = build_adjacency(net, config.fog_partition(net))
    hp = config.hp

    def greedy(_net, X, _k):
        return np.argmax(ag.forward(params, X, A, slope=hp.leaky_slope, gat_activation=hp.gat_activation), axis=-1)

    return rollout(greedy, config, steps, seed)


def baseline_policy(kind: str, net: RoadNetwork, steps_per_phase: int = 4, seed: int = 0) -> Policy:
    """``fixed_time`` cycles phases 0..4 round-robin; ``random`` draws uniformly each step."""
    if kind in ("fixed", "fixed_time"):
        if steps_per_phase < 1:
            raise ValueError("steps_per_phase must be >= 1")

        def fixed(_net, _X, k):
            return [(k // steps_per_phase) % ag.N_PHASES] * net.n

        return fixed
    if kind == "random":
        rng = np.random.default_rng(_seed(seed, _BASELINE))

        def random_policy(_net, _X, _k):
            return rng.integers(0, ag.N_PHASES, size=net.n)

        return random_policy
    raise ValueError(f"unknown baseline policy {kind!r} (expected 'fixed' or 'random')")
