"""Agent-facing graph observations built from simulator state.

Nodes are intersections. A fog partition groups intersections; adjacency only
links road-connected intersections inside the same fog, so each fog's agent
sees its own sub-graph and nothing beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .sim import Approach, Movement, RoadNetwork, observe_wait, observe_wave

__all__ = [
    "PartitionError",
    "FogPartition",
    "FeatureLayout",
    "GraphObservation",
    "LANE_SLOTS",
    "build_adjacency",
    "build_features",
    "preset_partition",
    "preset_partitions",
    "per_node_reward",
    "observe",
]

LANE_SLOTS: tuple[tuple[Approach, Movement], ...] = (
    (Approach.E, Movement.THROUGH),
    (Approach.E, Movement.LEFT),
    (Approach.W, Movement.THROUGH),
    (Approach.W, Movement.LEFT),
    (Approach.N, Movement.SHARED),
    (Approach.S, Movement.SHARED),
)


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class FogPartition:
    fogs: tuple[tuple[int, ...], ...]

    def __init__(self, fogs: Sequence[Sequence[int]]):
        object.__setattr__(self, "fogs", tuple(tuple(int(i) for i in fog) for fog in fogs))
        seen = set()
        for k, fog in enumerate(self.fogs):
            if not fog:
                raise PartitionError(f"fog {k} is empty")
            for i in fog:
                if i in seen:
                    raise PartitionError(f"intersection {i} assigned to more than one fog")
                seen.add(i)

    def assignment(self, n: int) -> list[int]:
        """Fog id for each of ``n`` intersections; raises if any is uncovered."""
        out = [-1] * n
        for k, fog in enumerate(self.fogs):
            for i in fog:
                if not 0 <= i < n:
                    raise PartitionError(f"intersection index {i} out of range for {n} intersections")
                out[i] = k
        missing = [i for i, k in enumerate(out) if k < 0]
        if missing:
            raise PartitionError(f"intersections not covered by any fog: {missing}")
        return out

    def to_lists(self) -> list[list[int]]:
        return [list(f) for f in self.fogs]


@dataclass(frozen=True)
class FeatureLayout:
    wait_scale: float = 120.0
    wave_scale: float = 50.0
    slots: tuple[tuple[Approach, Movement], ...] = LANE_SLOTS

    @property
    def width(self) -> int:
        return 2 * len(self.slots)


@dataclass(frozen=True)
class GraphObservation:
    X: np.ndarray
    A: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def f(self) -> int:
        return self.X.shape[1]


def build_adjacency(net: RoadNetwork, partition: FogPartition) -> np.ndarray:
    fog_of = partition.assignment(net.n)
    A = np.eye(net.n)
    for i in range(net.n):
        for j in net.neighbors(i):
            if fog_of[i] == fog_of[j]:
                A[i, j] = 1.0
    return A


def raw_lane_state(net: RoadNetwork, slots=LANE_SLOTS) -> tuple[np.ndarray, np.ndarray]:
    """(wait, wave) arrays of shape (N, slots); absent lanes are 0."""
    wait = np.zeros((net.n, len(slots)))
    wave = np.zeros((net.n, len(slots)))
    for inter in net.intersections:
        for s, key in enumerate(slots):
            lane = inter.lanes.get(key)
            if lane is not None:
                wait[inter.index, s] = observe_wait(lane, net.time)
                wave[inter.index, s] = observe_wave(lane)
    return wait, wave


def build_features(net: RoadNetwork, layout: FeatureLayout = FeatureLayout()) -> np.ndarray:
    wait, wave = raw_lane_state(net, layout.slots)
    X = np.empty((net.n, layout.width))
    X[:, 0::2] = np.clip(wait / layout.wait_scale, 0.0, 1.0)
    X[:, 1::2] = np.clip(wave / layout.wave_scale, 0.0, 1.0)
    return X


def preset_partition(net: RoadNetwork, name: str) -> FogPartition:
    """``fully_observable`` (one fog over everything) or ``two_fog_rows`` (2-row grids only)."""
    if name == "fully_observable":
        return FogPartition([range(net.n)])
    if name == "two_fog_rows":
        if net.rows != 2:
            raise PartitionError(f"two_fog_rows needs a 2-row grid, got {net.rows} rows")
        return FogPartition([range(net.cols), range(net.cols, 2 * net.cols)])
    raise PartitionError(f"unknown partition preset {name!r}")


def preset_partitions(net: RoadNetwork) -> dict[str, FogPartition]:
    return {name: preset_partition(net, name) for name in ("fully_observable", "two_fog_rows")}


def per_node_reward(
    net: RoadNetwork,
    sigma_wait: float = 1.0,
    sigma_wave: float = 0.30,
    reward_scale: float = 100.0,
    layout: FeatureLayout = FeatureLayout(),
) -> np.ndarray:
    """Negative weighted wait/wave penalty per intersection, on raw lane values."""
    if sigma_wait < 0 or sigma_wave < 0:
        raise ValueError("reward weights must be nonnegative")
    wait, wave = raw_lane_state(net, layout.slots)
    return -(sigma_wait * wait + sigma_wave * wave).sum(axis=1) / reward_scale


def observe(net: RoadNetwork, partition: FogPartition, layout: FeatureLayout = FeatureLayout()) -> GraphObservation:
    return GraphObservation(build_features(net, layout), build_adjacency(net, partition))
