"""Graph-attention double-Q agent.

Pipeline per observation: dense encoder -> one graph attention layer ->
dense Q-network -> per-node 5-way head. One parameter set is shared by all
nodes and fogs; fogs only differ through the adjacency they observe.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, NamedTuple

import numpy as np

from . import nn
from .nn import ParamSet, Tape

__all__ = [
    "N_PHASES",
    "Hyperparams",
    "AgentSpec",
    "Transition",
    "ReplayBuffer",
    "layer_spec",
    "init_agent",
    "encode",
    "attention_coefficients",
    "gat_layer",
    "forward",
    "select_actions",
    "double_q_targets",
    "td_loss",
    "train_step",
    "soft_update",
    "epsilon_at",
]

N_PHASES = 5


@dataclass
class Hyperparams:
    gamma: float = 0.9
    lr: float = 1e-5
    tau: float = 1e-3
    epsilon_start: float = 1.0
    epsilon_end: float = 0.05
    epsilon_decay_end: int = 70_000
    batch_size: int = 64
    buffer_capacity: int = 20_000
    train_every: int = 1
    leaky_slope: float = 0.2
    gat_activation: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError(f"gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("epsilon_start", "epsilon_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.train_every < 1:
            raise ValueError("batch_size, buffer_capacity and train_every must be >= 1")
        if not 0.0 < self.leaky_slope < 1.0:
            raise ValueError("leaky_slope must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class AgentSpec:
    """Layer widths of the network."""

    features: int = 12
    encoder: tuple[int, ...] = (32, 32)
    gat: int = 32
    qnet: tuple[int, ...] = (32, 32, 64, 32)
    actions: int = N_PHASES


def layer_spec(spec: AgentSpec = AgentSpec()) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; weights are (fan_out, fan_in)."""
    out = []
    width = spec.features
    for k, size in enumerate(spec.encoder):
        out += [(f"enc{k}_W", (size, width)), (f"enc{k}_b", (size,))]
        width = size
    out += [("gat_W", (width, spec.gat)), ("gat_attn", (2 * spec.gat,)), ("gat_b", (spec.gat,))]
    width = spec.gat
    for k, size in enumerate(spec.qnet):
        out += [(f"q{k}_W", (size, width)), (f"q{k}_b", (size,))]
        width = size
    out += [("head_W", (spec.actions, width)), ("head_b", (spec.actions,))]
    return out


def init_agent(spec: AgentSpec = AgentSpec(), seed: int = 0) -> ParamSet:
    return nn.init_params(layer_spec(spec), seed)


def _n_layers(params: Mapping, prefix: str) -> int:
    k = 0
    while f"{prefix}{k}_W" in params:
        k += 1
    return k


def encode(params: Mapping, X):
    H = X
    for k in range(_n_layers(params, "enc")):
        H = nn.relu(nn.dense(H, params[f"enc{k}_W"], params[f"enc{k}_b"]))
    return H


def _attention(Z, A, a, slope: float):
    return nn.masked_softmax(nn.leaky_relu(nn.attention_logits(Z, a), slope), A)


def attention_coefficients(H, A, W, a, slope: float = 0.2):
    """Masked-softmax attention weights over each node's neighbourhood in ``A``.

    The score for edge (i, j) is ``LeakyReLU(a . [z_i || z_j])`` with ``Z = H @ W``.
    """
    return _attention(nn.matmul(H, W), A, a, slope)


def gat_layer(params: Mapping, H, A, slope: float = 0.2, activation: bool = False):
    """``alpha @ H @ W + b``; optional ReLU on the output."""
    Z = nn.matmul(H, params["gat_W"])
    out = nn.add(nn.matmul(_attention(Z, A, params["gat_attn"], slope), Z), params["gat_b"])
    return nn.relu(out) if activation else out


def forward(params: Mapping, X, A, slope: float = 0.2, gat_activation: bool = False):
    """Q-values of shape (..., N, 5) for node features X (..., N, F) and adjacency A."""
    x = nn.as_array(X)
    W0 = nn.as_array(params["enc0_W"])
    if x.shape[-1] != W0.shape[1]:
        raise nn.ShapeError(f"features have width {x.shape[-1]}, encoder expects {W0.shape[1]}")
    if np.shape(A)[-2:] != (x.shape[-2], x.shape[-2]):
        raise nn.ShapeError(f"adjacency {np.shape(A)} does not match {x.shape[-2]} nodes")
    H = encode(params, X)
    H = gat_layer(params, H, A, slope, gat_activation)
    for k in range(_n_layers(params, "q")):
        H = nn.relu(nn.dense(H, params[f"q{k}_W"], params[f"q{k}_b"]))
    return nn.dense(H, params["head_W"], params["head_b"])


def select_actions(Q: np.ndarray, epsilon: float, rng: np.random.Generator) -> np.ndarray:
    """Per-node epsilon-greedy; greedy ties resolve to the lowest phase index."""
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError(f"epsilon must lie in [0, 1], got {epsilon}")
    Q = np.asarray(Q)
    greedy = np.argmax(Q, axis=-1)
    if epsilon == 0.0:
        return greedy
    explore = rng.random(greedy.shape) < epsilon
    random_actions = rng.integers(0, Q.shape[-1], size=greedy.shape)
    return np.where(explore, random_actions, greedy)


def epsilon_at(step: int, warmup: int, hp: Hyperparams) -> float:
    """1 through warmup, then linear decay to ``epsilon_end`` at ``epsilon_decay_end``."""
    if step < warmup:
        return 1.0
    span = hp.epsilon_decay_end - warmup
    if span <= 0 or step >= hp.epsilon_decay_end:
        return hp.epsilon_end
    frac = (step - warmup) / span
    return hp.epsilon_start + frac * (hp.epsilon_end - hp.epsilon_start)


class Transition(NamedTuple):
    X: np.ndarray
    A: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    X_next: np.ndarray
    A_next: np.ndarray
    done: bool


class Batch(NamedTuple):
    X: np.ndarray  # (B, N, F)
    A: np.ndarray  # (B, N, N)
    actions: np.ndarray  # (B, N)
    rewards: np.ndarray  # (B, N)
    X_next: np.ndarray
    A_next: np.ndarray
    done: np.ndarray  # (B,)


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._store: dict[str, np.ndarray] | None = None
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, t: Transition) -> None:
        c = self.capacity
        self._store = {
            "X": np.zeros((c, *np.shape(t.X))),
            "A": np.zeros((c, *np.shape(t.A))),
            "actions": np.zeros((c, *np.shape(t.actions)), dtype=np.int64),
            "rewards": np.zeros((c, *np.shape(t.rewards))),
            "X_next": np.zeros((c, *np.shape(t.X_next))),
            "A_next": np.zeros((c, *np.shape(t.A_next))),
            "done": np.zeros(c, dtype=bool),
        }

    def push(self, t: Transition) -> None:
        actions = np.asarray(t.actions)
        if actions.min(initial=0) < 0 or actions.max(initial=0) >= N_PHASES:
            raise ValueError(f"actions must lie in 0..{N_PHASES - 1}")
        if self._store is None:
            self._allocate(t)
        i = self._next
        for key, value in zip(Transition._fields, t):
            self._store[key][i] = value
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def get(self, i: int) -> Transition:
        """i-th stored transition, oldest first."""
        if not 0 <= i < self._size:
            raise IndexError(i)
        slot = (self._next - self._size + i) % self.capacity
        return Transition(*(self._store[k][slot] for k in Transition._fields))

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size > self._size:
            raise ValueError(f"cannot sample {batch_size} transitions from a buffer holding {self._size}")
        idx = rng.choice(self._size, size=batch_size, replace=False)
        idx = (self._next - self._size + idx) % self.capacity
        return Batch(*(self._store[k][idx] for k in Transition._fields))


def double_q_targets(online: Mapping, target: Mapping, batch: Batch, gamma: float, **fwd) -> np.ndarray:
    """Per-node targets: reward plus discounted target-net value at the online argmax."""
    q_online = forward(online, batch.X_next, batch.A_next, **fwd)
    q_target = forward(target, batch.X_next, batch.A_next, **fwd)
    best = np.argmax(q_online, axis=-1)
    bootstrap = np.take_along_axis(q_target, best[..., None], axis=-1)[..., 0]
    not_done = 1.0 - np.asarray(batch.done, dtype=np.float64)
    return np.asarray(batch.rewards) + gamma * not_done[:, None] * bootstrap


def td_loss(params: Mapping, batch: Batch, y: np.ndarray, **fwd):
    Q = forward(params, batch.X, batch.A, **fwd)
    return nn.mse(nn.gather_rows(Q, batch.actions), y)


def train_step(
    online: ParamSet,
    target: ParamSet,
    buffer: ReplayBuffer,
    hp: Hyperparams,
    rng: np.random.Generator,
) -> tuple[ParamSet, float]:
    """One minibatch SGD step on squared TD error; the target net is not touched."""
    if len(buffer) < hp.batch_size:
        raise ValueError(f"buffer holds {len(buffer)} transitions, batch needs {hp.batch_size}")
    batch = buffer.sample(hp.batch_size, rng)
    fwd = {"slope": hp.leaky_slope, "gat_activation": hp.gat_activation}
    y = double_q_targets(online, target, batch, hp.gamma, **fwd)
    tape = Tape()
    loss = td_loss(tape.watch(online), batch, y, **fwd)
    grads = nn.backward(loss)
    return nn.sgd_step(online, grads, hp.lr), float(loss.value)


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    nn._check_compatible(target, online, "soft_update")
    if tau == 1.0:
        return ParamSet(online)
    return target.map(lambda k, v: (1.0 - tau) * v + tau * online[k])
