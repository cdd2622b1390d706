"""Point-queue microsimulation of a signalized grid.

Vehicles are injected at boundary links, traverse each link in a fixed time,
then wait in vertical FIFO lane queues that discharge at the saturation rate
while their movement has green. Every intersection has the same five phases.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, field, fields
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "Approach",
    "Movement",
    "SignalPhase",
    "PHASE_GREENS",
    "SimConfig",
    "Vehicle",
    "Lane",
    "Intersection",
    "EntrySegment",
    "RoadNetwork",
    "StepMetrics",
    "ConfigError",
    "build_grid",
    "step",
    "reset",
    "observe_wait",
    "observe_wave",
    "average_intersection_delay",
    "write_metrics_csv",
]


class ConfigError(ValueError):
    pass


class Approach(IntEnum):
    """Side of the intersection a vehicle arrives from."""

    E = 0
    W = 1
    N = 2
    S = 3


class Movement(IntEnum):
    THROUGH = 0
    LEFT = 1
    SHARED = 2


class Turn(IntEnum):
    THROUGH = 0
    LEFT = 1
    RIGHT = 2


class SignalPhase(IntEnum):
    EW_THROUGH = 0
    EW_LEFT = 1
    E_ALL = 2
    W_ALL = 3
    NS_ALL = 4


PHASE_GREENS: dict[SignalPhase, frozenset[tuple[Approach, Movement]]] = {
    SignalPhase.EW_THROUGH: frozenset({(Approach.E, Movement.THROUGH), (Approach.W, Movement.THROUGH)}),
    SignalPhase.EW_LEFT: frozenset({(Approach.E, Movement.LEFT), (Approach.W, Movement.LEFT)}),
    SignalPhase.E_ALL: frozenset({(Approach.E, Movement.THROUGH), (Approach.E, Movement.LEFT)}),
    SignalPhase.W_ALL: frozenset({(Approach.W, Movement.THROUGH), (Approach.W, Movement.LEFT)}),
    SignalPhase.NS_ALL: frozenset({(Approach.N, Movement.SHARED), (Approach.S, Movement.SHARED)}),
}

# Unit heading of traffic arriving on each approach, as (drow, dcol).
_HEADING = {
    Approach.E: (0, -1),  # westbound
    Approach.W: (0, 1),
    Approach.N: (1, 0),  # southbound
    Approach.S: (-1, 0),
}
_APPROACH_FOR_HEADING = {v: k for k, v in _HEADING.items()}


def _turned(heading: tuple[int, int], turn: Turn) -> tuple[int, int]:
    dr, dc = heading
    if turn == Turn.THROUGH:
        return heading
    if turn == Turn.LEFT:
        return (-dc, dr)
    return (dc, -dr)


@dataclass
class SimConfig:
    """Scenario parameters. Times in seconds, flows in veh/h."""

    decision_interval: float = 5.0
    arrival_rate: float = 2200.0
    saturation_headway: float = 2.0
    link_traversal_time: float = 30.0
    lane_capacity: int = 40
    turn_probabilities: tuple[float, float, float] = (0.70, 0.15, 0.15)
    lost_time: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.turn_probabilities = tuple(float(p) for p in self.turn_probabilities)
        if self.decision_interval <= 0:
            raise ConfigError("decision_interval must be > 0")
        if self.arrival_rate < 0:
            raise ConfigError("arrival_rate must be >= 0")
        if self.saturation_headway <= 0:
            raise ConfigError("saturation_headway must be > 0")
        if self.link_traversal_time < 0:
            raise ConfigError("link_traversal_time must be >= 0")
        if self.lane_capacity < 1:
            raise ConfigError("lane_capacity must be >= 1")
        if self.lost_time < 0:
            raise ConfigError("lost_time must be >= 0")
        probs = self.turn_probabilities
        if len(probs) != 3 or any(p < 0 for p in probs) or not math.isclose(sum(probs), 1.0, abs_tol=1e-9):
            raise ConfigError(f"turn_probabilities must be 3 nonnegative values summing to 1, got {probs}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["turn_probabilities"] = list(self.turn_probabilities)
        return out


@dataclass(eq=False)
class Vehicle:
    id: int
    injection_time: float
    turn: Turn
    accumulated_delay: float = 0.0
    queue_join_time: float = 0.0
    # Turn at the *next* intersection, sampled once when discharge is first attempted.
    pending_turn: Turn | None = None


@dataclass(eq=False)
class Lane:
    """One incoming lane: a FIFO queue plus vehicles still traversing the link.

    Queued vehicles' delay is tracked lazily: ``delay_base`` sums the delay each
    queued vehicle carried in, ``join_sum`` sums their queue-join times, so the
    total accumulated delay at time t is ``delay_base + len(queue) * t - join_sum``.
    """

    intersection: int
    approach: Approach
    movement: Movement
    capacity: int
    queue: deque = field(default_factory=deque)
    in_transit: deque = field(default_factory=deque)  # (arrival_time, Vehicle), FIFO in arrival time
    discharge_carry: float = 0.0
    delay_base: float = 0.0
    join_sum: float = 0.0

    def occupancy(self) -> int:
        return len(self.queue) + len(self.in_transit)

    def has_room(self) -> bool:
        return self.occupancy() < self.capacity

    def clear(self) -> None:
        self.queue.clear()
        self.in_transit.clear()
        self.discharge_carry = 0.0
        self.delay_base = 0.0
        self.join_sum = 0.0

    def queued_delay(self, now: float) -> float:
        return max(0.0, self.delay_base + len(self.queue) * now - self.join_sum)


@dataclass(eq=False)
class Intersection:
    index: int
    row: int
    col: int
    lanes: dict[tuple[Approach, Movement], Lane]
    last_phase: SignalPhase | None = None


@dataclass(frozen=True)
class EntrySegment:
    """Boundary link feeding ``approach`` of intersection ``intersection``."""

    intersection: int
    approach: Approach


@dataclass
class StepMetrics:
    step: int
    time: float
    injected: int
    rejected: int
    departed: int
    in_network: int
    cumulative_injected: int
    cumulative_departed: int
    cumulative_rejected: int
    intersection_delay: list[float]
    avg_intersection_delay: float
    wait: list[list[float]]
    wave: list[list[int]]

    CSV_FIELDS = (
        "step", "time", "injected", "rejected", "departed", "in_network",
        "cumulative_injected", "cumulative_departed", "avg_intersection_delay_s",
    )

    def csv_row(self) -> list:
        return [
            self.step, repr(float(self.time)), self.injected, self.rejected, self.departed,
            self.in_network, self.cumulative_injected, self.cumulative_departed,
            repr(float(self.avg_intersection_delay)),
        ]


def _lane_keys(approach: Approach) -> tuple[Movement, ...]:
    if approach in (Approach.E, Approach.W):
        return (Movement.THROUGH, Movement.LEFT)
    return (Movement.SHARED,)


def _lane_for_turn(approach: Approach, turn: Turn) -> Movement:
    if approach in (Approach.N, Approach.S):
        return Movement.SHARED
    return Movement.LEFT if turn == Turn.LEFT else Movement.THROUGH


class RoadNetwork:
    """Grid of intersections with directed links and lane queues.

    Intersections are indexed row-major from the top-left corner. Every
    intersection has all four approaches; approaches on the grid boundary are
    fed by entry segments, and movements leaving the grid exit the network.
    """

    def __init__(self, rows: int, cols: int, config: SimConfig) -> None:
        if rows < 1 or cols < 1:
            raise ConfigError(f"grid must have rows >= 1 and cols >= 1, got {rows}x{cols}")
        self.rows = rows
        self.cols = cols
        self.config = config
        self.intersections: list[Intersection] = []
        for r in range(rows):
            for c in range(cols):
                idx = r * cols + c
                lanes = {
                    (a, m): Lane(idx, a, m, config.lane_capacity)
                    for a in Approach
                    for m in _lane_keys(a)
                }
                self.intersections.append(Intersection(idx, r, c, lanes))
        self.entry_segments: list[EntrySegment] = []
        self.exit_segments: list[EntrySegment] = []
        for inter in self.intersections:
            for a in Approach:
                dr, dc = _HEADING[a]
                # Upstream intersection lies opposite to the heading.
                if not self._inside(inter.row - dr, inter.col - dc):
                    self.entry_segments.append(EntrySegment(inter.index, a))
                # Outgoing side toward which approach-a traffic would go straight.
                if not self._inside(inter.row + dr, inter.col + dc):
                    self.exit_segments.append(EntrySegment(inter.index, a))
        self.links: list[tuple[int, int]] = []
        for inter in self.intersections:
            if inter.col + 1 < cols:
                self.links += [(inter.index, inter.index + 1), (inter.index + 1, inter.index)]
            if inter.row + 1 < rows:
                self.links += [(inter.index, inter.index + cols), (inter.index + cols, inter.index)]
        self.reset(config.seed)

    @property
    def n(self) -> int:
        return len(self.intersections)

    def _inside(self, r: int, c: int) -> bool:
        return 0 <= r < self.rows and 0 <= c < self.cols

    def neighbors(self, index: int) -> list[int]:
        inter = self.intersections[index]
        out = []
        for dr, dc in ((-1, 0), (0, -1), (0, 1), (1, 0)):
            r, c = inter.row + dr, inter.col + dc
            if self._inside(r, c):
                out.append(r * self.cols + c)
        return out

    def lanes(self) -> Iterable[Lane]:
        for inter in self.intersections:
            yield from inter.lanes.values()

    def reset(self, seed: int | None = None) -> "RoadNetwork":
        for lane in self.lanes():
            lane.clear()
        for inter in self.intersections:
            inter.last_phase = None
        self.time = 0.0
        self.step_count = 0
        self.next_vehicle_id = 0
        self.cumulative_injected = 0
        self.cumulative_departed = 0
        self.cumulative_rejected = 0
        self.in_network = 0
        self.rng = np.random.default_rng(self.config.seed if seed is None else seed)
        return self

    def _sample_turn(self) -> Turn:
        u = self.rng.random()
        p_through, p_left, _ = self.config.turn_probabilities
        if u < p_through:
            return Turn.THROUGH
        if u < p_through + p_left:
            return Turn.LEFT
        return Turn.RIGHT

    def _downstream(self, lane: Lane, turn: Turn) -> tuple[int, Approach] | None:
        """Intersection and approach a vehicle reaches after ``turn``; None on exit."""
        inter = self.intersections[lane.intersection]
        heading = _turned(_HEADING[lane.approach], turn)
        r, c = inter.row + heading[0], inter.col + heading[1]
        if not self._inside(r, c):
            return None
        return r * self.cols + c, _APPROACH_FOR_HEADING[heading]


def build_grid(rows: int, cols: int, config: SimConfig | None = None) -> RoadNetwork:
    return RoadNetwork(rows, cols, config or SimConfig())


def reset(net: RoadNetwork, seed: int | None = None) -> RoadNetwork:
    return net.reset(seed)


def observe_wait(lane: Lane, now: float) -> float:
    if not lane.queue:
        return 0.0
    return now - lane.queue[0].queue_join_time


def observe_wave(lane: Lane) -> int:
    return len(lane.queue) + len(lane.in_transit)


def average_intersection_delay(net: RoadNetwork) -> float:
    return float(np.mean(_intersection_delays(net)))


def _intersection_delays(net: RoadNetwork) -> list[float]:
    out = []
    for inter in net.intersections:
        count = 0
        total = 0.0
        for lane in inter.lanes.values():
            if lane.queue:
                count += len(lane.queue)
                total += lane.queued_delay(net.time)
        out.append(total / count if count else 0.0)
    return out


def _join_queue(lane: Lane, vehicle: Vehicle, now: float) -> None:
    vehicle.queue_join_time = now
    lane.queue.append(vehicle)
    lane.delay_base += vehicle.accumulated_delay
    lane.join_sum += now


def _leave_queue(lane: Lane, now: float) -> Vehicle:
    vehicle = lane.queue.popleft()
    lane.delay_base -= vehicle.accumulated_delay
    lane.join_sum -= vehicle.queue_join_time
    vehicle.accumulated_delay += now - vehicle.queue_join_time
    if not lane.queue:
        # Drop accumulated rounding once the queue drains.
        lane.delay_base = 0.0
        lane.join_sum = 0.0
    return vehicle


def _enter_link(net: RoadNetwork, inter_idx: int, approach: Approach, vehicle: Vehicle, turn: Turn) -> bool:
    lane = net.intersections[inter_idx].lanes[(approach, _lane_for_turn(approach, turn))]
    if not lane.has_room():
        return False
    vehicle.turn = turn
    vehicle.pending_turn = None
    lane.in_transit.append((net.time + net.config.link_traversal_time, vehicle))
    return True


def step(net: RoadNetwork, phases: Sequence[SignalPhase | int | None]) -> StepMetrics:
    """Advance the network by one decision interval under ``phases``.

    ``phases[i]`` is the phase shown at intersection ``i``; ``None`` holds
    that intersection all-red for the interval.
    """
    if len(phases) != net.n:
        raise ValueError(f"expected {net.n} phases (one per intersection), got {len(phases)}")
    phases = [None if p is None else SignalPhase(p) for p in phases]
    cfg = net.config
    now = net.time
    dt = cfg.decision_interval

    # (1) Poisson arrivals at entry segments.
    injected = rejected = 0
    mean_arrivals = cfg.arrival_rate * dt / 3600.0
    for seg in net.entry_segments:
        for _ in range(int(net.rng.poisson(mean_arrivals))):
            vehicle = Vehicle(net.next_vehicle_id, now, Turn.THROUGH)
            net.next_vehicle_id += 1
            if _enter_link(net, seg.intersection, seg.approach, vehicle, net._sample_turn()):
                injected += 1
            else:
                rejected += 1

    # (2) Link traversal completes.
    for lane in net.lanes():
        transit = lane.in_transit
        while transit and transit[0][0] <= now:
            _join_queue(lane, transit.popleft()[1], now)

    # (3) Signal-gated discharge.
    departed = 0
    per_step_budget = dt / cfg.saturation_headway
    for inter, phase in zip(net.intersections, phases):
        greens = PHASE_GREENS[phase] if phase is not None else frozenset()
        lost = cfg.lost_time if (phase is not None and inter.last_phase is not None and phase != inter.last_phase) else 0.0
        inter.last_phase = phase
        for key, lane in inter.lanes.items():
            if key not in greens:
                lane.discharge_carry = 0.0
                continue
            budget = per_step_budget - lost / cfg.saturation_headway + lane.discharge_carry
            budget = max(budget, 0.0)
            allowance = math.floor(budget)
            moved = 0
            while moved < allowance and lane.queue:
                head = lane.queue[0]
                destination = net._downstream(lane, head.turn)
                if destination is not None:
                    if head.pending_turn is None:
                        head.pending_turn = net._sample_turn()
                    target_idx, target_approach = destination
                    target = net.intersections[target_idx].lanes[(target_approach, _lane_for_turn(target_approach, head.pending_turn))]
                    if not target.has_room():
                        break
                    vehicle = _leave_queue(lane, now)
                    _enter_link(net, target_idx, target_approach, vehicle, vehicle.pending_turn)
                else:
                    _leave_queue(lane, now)
                    departed += 1
                moved += 1
            lane.discharge_carry = budget - allowance if moved == allowance else 0.0

    # (4) Clock advance; queued vehicles accrue dt of delay implicitly.
    net.time = now + dt
    net.step_count += 1
    net.cumulative_injected += injected
    net.cumulative_departed += departed
    net.cumulative_rejected += rejected
    net.in_network += injected - departed
    return snapshot(net, injected=injected, rejected=rejected, departed=departed)


def snapshot(net: RoadNetwork, injected: int = 0, rejected: int = 0, departed: int = 0) -> StepMetrics:
    delays = _intersection_delays(net)
    wait = []
    wave = []
    for inter in net.intersections:
        wait.append([observe_wait(lane, net.time) for lane in inter.lanes.values()])
        wave.append([observe_wave(lane) for lane in inter.lanes.values()])
    return StepMetrics(
        step=net.step_count,
        time=net.time,
        injected=injected,
        rejected=rejected,
        departed=departed,
        in_network=net.in_network,
        cumulative_injected=net.cumulative_injected,
        cumulative_departed=net.cumulative_departed,
        cumulative_rejected=net.cumulative_rejected,
        intersection_delay=delays,
        avg_intersection_delay=float(np.mean(delays)),
        wait=wait,
        wave=wave,
    )


def count_in_network(net: RoadNetwork) -> int:
    """Recount vehicles held in queues and links (independent of the running tally)."""
    return sum(lane.occupancy() for lane in net.lanes())


def write_metrics_csv(path, rows: Iterable[StepMetrics]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(StepMetrics.CSV_FIELDS)
        for m in rows:
            writer.writerow(m.csv_row())
