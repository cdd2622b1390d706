import numpy as np
import pytest

from foggrid.graph import (
    FeatureLayout,
    FogPartition,
    PartitionError,
    build_adjacency,
    build_features,
    observe,
    per_node_reward,
    preset_partition,
    preset_partitions,
)
from foggrid.sim import Approach, Movement, SimConfig, Vehicle, build_grid, reset, step
from foggrid.sim import _join_queue


def grid_degree(rows, cols, i):
    r, c = divmod(i, cols)
    return sum(0 <= r + dr < rows and 0 <= c + dc < cols for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)))


class TestAdjacency:
    def test_single_intersection(self):
        net = build_grid(1, 1)
        assert build_adjacency(net, FogPartition([[0]])).tolist() == [[1.0]]

    def test_full_grid_matches_degree_oracle(self):
        net = build_grid(2, 3)
        A = build_adjacency(net, preset_partition(net, "fully_observable"))
        for i in range(6):
            assert A[i].sum() == 1 + grid_degree(2, 3, i)
        assert A[0].sum() == 3

    def test_two_fog_rows_block_structure(self):
        net = build_grid(2, 3)
        A = build_adjacency(net, preset_partition(net, "two_fog_rows"))
        assert np.all(A[:3, 3:] == 0) and np.all(A[3:, :3] == 0)
        assert np.all(np.diag(A) == 1)
        assert np.array_equal(A, A.T)

    def test_custom_fogs(self):
        net = build_grid(2, 3)
        A = build_adjacency(net, FogPartition([[0, 3], [1, 2, 4, 5]]))
        assert A[0, 3] == 1 and A[0, 1] == 0 and A[1, 4] == 1 and A[4, 5] == 1

    def test_uncovered_intersection(self):
        net = build_grid(2, 3)
        with pytest.raises(PartitionError, match="not covered"):
            build_adjacency(net, FogPartition([[0, 1, 2], [3, 4]]))

    def test_duplicate_and_empty_fogs(self):
        with pytest.raises(PartitionError):
            FogPartition([[0, 1], [1, 2]])
        with pytest.raises(PartitionError):
            FogPartition([[0, 1], []])


class TestPresets:
    def test_fully_observable(self):
        net = build_grid(2, 3)
        assert preset_partitions(net)["fully_observable"].fogs == ((0, 1, 2, 3, 4, 5),)

    def test_two_fog_rows(self):
        net = build_grid(2, 3)
        assert preset_partitions(net)["two_fog_rows"].fogs == ((0, 1, 2), (3, 4, 5))

    def test_two_fog_rows_needs_two_rows(self):
        with pytest.raises(PartitionError):
            preset_partitions(build_grid(3, 3))
        with pytest.raises(PartitionError):
            preset_partition(build_grid(3, 3), "two_fog_rows")

    def test_fully_observable_any_grid(self):
        assert preset_partition(build_grid(3, 3), "fully_observable").fogs == (tuple(range(9)),)


def _put(net, approach, movement, join_times, node=0):
    lane = net.intersections[node].lanes[(approach, movement)]
    for t in join_times:
        _join_queue(lane, Vehicle(net.next_vehicle_id, t, 0), t)
        net.next_vehicle_id += 1
    return lane


class TestFeatures:
    def test_empty_network_is_zero(self):
        X = build_features(build_grid(2, 3))
        assert X.shape == (6, 12) and np.all(X == 0)

    def test_wait_scaling(self):
        net = build_grid(1, 1)
        _put(net, Approach.W, Movement.LEFT, [0.0])
        net.time = 60.0
        X = build_features(net, FeatureLayout(wait_scale=120.0))
        # slot order E-thr, E-left, W-thr, W-left, N, S; (wait, wave) per slot
        assert X[0, 6] == 0.5
        assert X[0, 7] == 1 / 50

    def test_wave_clamped(self):
        net = build_grid(1, 1, SimConfig(lane_capacity=100))
        _put(net, Approach.S, Movement.SHARED, [0.0] * 55)
        X = build_features(net, FeatureLayout(wave_scale=50.0))
        assert X[0, 11] == 1.0

    def test_bounded_under_traffic(self):
        net = build_grid(2, 3)
        rng = np.random.default_rng(0)
        for _ in range(300):
            step(net, rng.integers(0, 5, 6))
            X = build_features(net)
            assert X.min() >= 0 and X.max() <= 1

    def test_pure_function_of_state(self):
        net = build_grid(2, 3)
        for _ in range(30):
            step(net, [1] * 6)
        a, b = observe(net, preset_partition(net, "two_fog_rows")), observe(net, preset_partition(net, "two_fog_rows"))
        assert np.array_equal(a.X, b.X) and np.array_equal(a.A, b.A)
        assert (a.n, a.f) == (6, 12)


class TestReward:
    def test_empty_is_zero(self):
        assert np.all(per_node_reward(build_grid(2, 3)) == 0)

    def test_weighted_sum(self):
        net = build_grid(1, 1)
        # waits 10 and 5, waves 3 and 2
        _put(net, Approach.E, Movement.THROUGH, [0.0, 4.0, 8.0])
        _put(net, Approach.N, Movement.SHARED, [5.0, 9.0])
        net.time = 10.0
        r = per_node_reward(net, 1.0, 0.30, reward_scale=1.0)
        assert r[0] == pytest.approx(-(10 + 5 + 0.3 * (3 + 2)), abs=1e-12)
        assert r[0] == pytest.approx(-16.5, abs=1e-12)

    def test_linear_in_wait(self):
        net = build_grid(1, 1)
        _put(net, Approach.E, Movement.LEFT, [0.0])
        net.time = 20.0
        r1 = per_node_reward(net, 1.0, 0.0, 1.0)
        net.time = 40.0
        r2 = per_node_reward(net, 1.0, 0.0, 1.0)
        assert r2[0] == 2 * r1[0]

    def test_nonpositive_and_zero_iff_empty(self):
        net = build_grid(2, 3)
        reset(net, 2)
        rng = np.random.default_rng(2)
        for _ in range(200):
            step(net, rng.integers(0, 5, 6))
            r = per_node_reward(net)
            assert np.all(r <= 0)
            for inter, ri in zip(net.intersections, r):
                empty = all(not l.queue and not l.in_transit for l in inter.lanes.values())
                assert (ri == 0) == empty

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            per_node_reward(build_grid(1, 1), -1.0, 0.3)
