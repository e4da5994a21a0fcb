#!/usr/bin/env python

##Copyright 2024-2026 the XferEngine developers
##
##This file is part of XferEngine.
##
##XferEngine is free software: you can redistribute it and/or modify
##it under the terms of the GNU Lesser General Public License as published by
##the Free Software Foundation, either version 3 of the License, or
##(at your option) any later version.
##
##XferEngine is distributed in the hope that it will be useful,
##but WITHOUT ANY WARRANTY; without even the implied warranty of
##MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
##GNU Lesser General Public License for more details.
##
##You should have received a copy of the GNU Lesser General Public License
##along with XferEngine.  If not, see <http://www.gnu.org/licenses/>.

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from XferEngine.Common import TransferError
from XferEngine.Construct import close_all, make_sim_engines
from XferEngine.fabric import FABRIC_MODES, FaultConfig
from XferEngine.moe import (
    IMM_COMBINE,
    IMM_ROUTES,
    IMM_TOKENS,
    MoeConfig,
    RoutingSpec,
    SharedMemoryLane,
    alltoall_oracle,
    combine_oracle,
    compute_layout,
    make_moe_ranks,
    padded,
    phase_report,
    plan_dispatch,
    random_inputs,
    received_multiset,
    run_ranks,
)
from XferEngine.trace import Trace

SEEDS = (0, 1, 2)


def scale_by_expert(batch):
    return batch.tokens * (batch.experts[:, None] + 1).astype(np.float32)


def scale_rows(expert, rows):
    return rows * np.float32(expert + 1)


class TestRoutingSpec(unittest.TestCase):
    def test_sizes(self):
        spec = RoutingSpec(4, 8, 16, 3)
        assert spec.experts_per_rank == 2
        assert spec.capacity == 4 * 16 * 3
        assert spec.max_pairs_per_dest == 16 * 2
        assert spec.header_bytes == 36
        assert spec.token_bytes == 256

    def test_validation(self):
        with self.assertRaises(ValueError):
            RoutingSpec(3, 8, 16, 2)
        with self.assertRaises(ValueError):
            RoutingSpec(2, 8, 16, 0)
        with self.assertRaises(ValueError):
            RoutingSpec(2, 8, 16, 9)

    def test_padded(self):
        assert padded(5, 8) == 8
        assert padded(16, 8) == 16
        assert padded(0, 8) == 0
        assert padded(5, 1) == 5


class TestPlanning(unittest.TestCase):
    spec = RoutingSpec(2, 4, 4, 2)

    def test_plan(self):
        plan = plan_dispatch([[0, 2], [1, 2], [3, 0]], self.spec)
        assert list(plan.counts) == [2, 1, 2, 1]
        assert plan.pairs[0].tolist() == [[0, 0], [2, 0], [1, 1]]
        assert plan.pairs[1].tolist() == [[0, 2], [1, 2], [2, 3]]

    def test_empty_plan(self):
        plan = plan_dispatch(np.zeros((0, 2), dtype=np.int64), self.spec)
        assert not plan.counts.any()
        assert all(len(p) == 0 for p in plan.pairs)

    def test_plan_errors(self):
        with self.assertRaises(ValueError):
            plan_dispatch([[0, 1]] * 5, self.spec)
        with self.assertRaises(ValueError):
            plan_dispatch([[0, 4]], self.spec)
        with self.assertRaises(ValueError):
            plan_dispatch([[2, 2]], self.spec)

    def test_layout(self):
        spec = RoutingSpec(2, 2, 8, 1)
        layout = compute_layout([[3, 1], [5, 2]], spec, private_tokens=2)
        assert layout.ranges[0] == (((0, 0), 0, 3), ((0, 1), 3, 5))
        assert layout.ranges[1] == (((0, 0), 0, 1), ((0, 1), 1, 2))
        assert layout.spans[0] == ((0, 1), (1, 3))
        assert layout.spans[1] == ((0, 0), (0, 0))
        assert layout.n.tolist() == [[3, 1], [5, 2]]

    def test_layout_orders_by_expert_then_source(self):
        matrix = [[1, 2, 0, 1], [3, 0, 2, 2]]
        layout = compute_layout(matrix, self.spec)
        starts = [(key, start) for key, start, _ in layout.ranges[0]]
        assert starts == [((0, 0), 0), ((0, 1), 1), ((1, 0), 4), ((1, 1), 6)]
        assert layout.pair_prefix(np.array(matrix), self.spec, 1, 1, 1) == 2

    def test_layout_is_deterministic(self):
        rng = np.random.default_rng(1)
        matrix = rng.integers(0, 3, size=(2, 4))
        assert compute_layout(matrix, self.spec, 1) == compute_layout(matrix.copy(), self.spec, 1)
        assert compute_layout(matrix, self.spec, 1) != compute_layout(matrix, self.spec, 2)

    def test_layout_errors(self):
        spec = RoutingSpec(2, 2, 8, 1)
        with self.assertRaises(ValueError):
            compute_layout([[1, 1]], spec)
        with self.assertRaises(ValueError):
            compute_layout([[9, 0], [0, 0]], spec)
        with self.assertRaises(ValueError):
            compute_layout([[-1, 0], [0, 0]], spec)


class TestSharedMemoryLane(unittest.TestCase):
    def test_copy_then_signal(self):
        trace = Trace("lane")
        lane = SharedMemoryLane(trace)
        region = np.zeros(8, dtype=np.uint8)
        lane.attach(1, private=region)
        lane.push(0, 1, 7, "private", 2, np.array([5, 6], dtype=np.uint8))
        lane.wait(1, 7, 1, 1.0)
        assert region.tolist() == [0, 0, 5, 6, 0, 0, 0, 0]
        assert len(trace.select("moe_lane_copy", src=0, dst=1)) == 1

    def test_wait_consumes(self):
        lane = SharedMemoryLane()
        lane.push(0, 1, 7)
        lane.push(2, 1, 7)
        lane.wait(1, 7, 2, 1.0)
        with self.assertRaises(TransferError):
            lane.wait(1, 7, 1, 0.01)


def halves(inputs):
    """the same inputs with every weight 0.5, so an identity expert sums back exactly"""
    return [(x, routes, np.full(routes.shape, 0.5, dtype=np.float32)) for x, routes, _ in inputs]


class MoeHarness(object):
    def deploy(self, spec, config=None, seed=0, mode="window"):
        self.trace = Trace("moe")
        fabric, engines = make_sim_engines(spec.num_ranks, 1, FaultConfig.for_mode(mode, seed=seed), self.trace)
        self.addCleanup(close_all, engines, fabric)
        self.engines = engines
        return make_moe_ranks(engines, spec, config, self.trace)

    def check_step(self, ranks, spec, inputs):
        batches = []

        def expert_fn(batch):
            batches.append(batch)
            return scale_by_expert(batch)

        outputs = run_ranks(ranks, inputs, expert_fn)
        got = {}
        for batch in batches:
            got.update(received_multiset(batch))
        want = {}
        for per_rank in alltoall_oracle(inputs, spec):
            want.update(per_rank)
        assert got == want
        for (x, routes, weights), out in zip(inputs, outputs):
            assert out.shape == x.shape
            error = np.abs(out - combine_oracle(x, routes, weights, scale_rows))
            assert not error.size or error.max() <= 1e-6, error.max()
        for rank in ranks:
            assert rank.peak_received <= spec.capacity
            for start, length in rank.layout.spans[rank.rank]:
                assert start + length <= spec.capacity
        return batches


class TestMoeRanks(MoeHarness, unittest.TestCase):
    def test_dispatch_and_combine(self):
        spec = RoutingSpec(4, 8, 12, 2, hidden=16)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    ranks = self.deploy(spec, MoeConfig(private_tokens=4), seed, mode)
                    self.check_step(ranks, spec, random_inputs(np.random.default_rng(seed), spec))

    def test_identity_round_trip(self):
        spec = RoutingSpec(4, 8, 6, 2, hidden=8)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    ranks = self.deploy(spec, MoeConfig(private_tokens=2), seed, mode)
                    inputs = halves(random_inputs(np.random.default_rng(seed), spec))
                    outputs = run_ranks(ranks, inputs, lambda batch: batch.tokens)
                    for (x, _, _), out in zip(inputs, outputs):
                        assert np.array_equal(out, x)

    def test_wide_header_over_fragmenting_fabric(self):
        # 2049 header words span three 4 KiB fragments
        spec = RoutingSpec(2, 2048, 4, 2, hidden=8)
        assert spec.header_bytes > 2 * 4096
        for seed in SEEDS:
            with self.subTest(seed=seed):
                ranks = self.deploy(spec, MoeConfig(private_tokens=2), seed, "mtu")
                rng = np.random.default_rng(seed)
                for _ in range(3):
                    self.check_step(ranks, spec, random_inputs(rng, spec))

    def test_random_grid(self):
        grid = [
            (N, E, T, R)
            for N in (2, 4, 8)
            for E in (4, 8, 16)
            for T in (1, 16)
            for R in (1, 2, 4)
            if E % N == 0 and R <= E
        ]
        steps = 20
        for N, E, T, R in grid:
            with self.subTest(N=N, E=E, T=T, R=R):
                spec = RoutingSpec(N, E, T, R, hidden=4)
                trace = Trace("grid")
                fabric, engines = make_sim_engines(N, 1, FaultConfig(seed=E + T + R), trace)
                try:
                    ranks = make_moe_ranks(engines, spec, MoeConfig(private_tokens=T // 2), trace)
                    for seed in range(steps):
                        rng = np.random.default_rng(seed)
                        tokens = int(rng.integers(0, T + 1))
                        self.check_step(ranks, spec, random_inputs(rng, spec, tokens=tokens))
                    for engine in engines:
                        addr = engine.main_address()
                        dispatch = trace.select("write", src=addr, imm=IMM_ROUTES)
                        dispatch += trace.select("write", src=addr, imm=IMM_TOKENS)
                        combine = trace.select("write", src=addr, imm=IMM_COMBINE)
                        assert len(dispatch) == 2 * steps * (N - 1)
                        assert len(combine) == steps * (N - 1)
                finally:
                    close_all(engines, fabric)

    def test_ranks_sharing_a_node(self):
        spec = RoutingSpec(4, 8, 10, 3, hidden=8)
        ranks = self.deploy(spec, MoeConfig(private_tokens=3, ranks_per_node=2))
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(2), spec))
        assert ranks[0].local_peers == [0, 1]
        assert ranks[0].remote_peers == [2, 3]
        # per rank: one round-one write to each of two remote peers, two lane pushes
        assert len(self.trace.select("write", imm=IMM_ROUTES)) == 8
        assert len(self.trace.select("moe_lane_copy", imm=IMM_ROUTES)) == 8

    def test_one_routes_write_per_remote_peer(self):
        spec = RoutingSpec(3, 3, 6, 2, hidden=8)
        ranks = self.deploy(spec)
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(3), spec))
        for engine in self.engines:
            sent = self.trace.select("write", src=engine.main_address(), imm=IMM_ROUTES)
            assert len(sent) == 2
            assert len(set(str(e["dst"]) for e in sent)) == 2

    def test_private_slots_cover_small_steps(self):
        spec = RoutingSpec(2, 4, 6, 1, hidden=8)
        ranks = self.deploy(spec, MoeConfig(private_tokens=spec.max_tokens))
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(4), spec))
        assert all(e["length"] == 0 for e in self.trace.select("write", imm=IMM_TOKENS))

    def test_no_private_slots(self):
        spec = RoutingSpec(2, 4, 6, 2, hidden=8)
        ranks = self.deploy(spec, MoeConfig(private_tokens=0))
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(5), spec))
        for e in self.trace.select("write", imm=IMM_ROUTES):
            assert e["length"] == spec.header_bytes

    def test_private_tokens_clamped(self):
        spec = RoutingSpec(2, 4, 6, 2, hidden=8)
        ranks = self.deploy(spec, MoeConfig(private_tokens=1000))
        assert ranks[0].private == 6

    def test_single_expert_identity(self):
        spec = RoutingSpec(2, 2, 8, 1, hidden=8)
        ranks = self.deploy(spec)
        inputs = random_inputs(np.random.default_rng(6), spec)
        outputs = run_ranks(ranks, inputs, lambda batch: batch.tokens)
        for (x, _, _), out in zip(inputs, outputs):
            assert np.array_equal(out, x)

    def test_batches_are_grouped_and_padded(self):
        spec = RoutingSpec(2, 4, 9, 2, hidden=4)
        ranks = self.deploy(spec, MoeConfig(pad=8))
        batches = self.check_step(ranks, spec, random_inputs(np.random.default_rng(7), spec))
        for batch in batches:
            assert all(off % 8 == 0 for off in batch.group_offsets)
            rank = int(batch.experts[batch.experts >= 0][0]) // spec.experts_per_rank
            for local in range(spec.experts_per_rank):
                start = batch.group_offsets[local]
                size = batch.group_sizes[local]
                assert (batch.experts[start : start + size] == rank * spec.experts_per_rank + local).all()
                assert len(batch.group(local)) == size
            assert (batch.experts[batch.index[:, 0] < 0] == -1).all()

    def test_barrier_precedes_combine_writes(self):
        spec = RoutingSpec(3, 3, 6, 2, hidden=8)
        ranks = self.deploy(spec)
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(8), spec))
        last_dispatch = max(e["t"] for e in self.trace.select("moe_dispatched"))
        first_combine = min(e["t"] for e in self.trace.select("moe_combine_write"))
        assert last_dispatch < first_combine
        for rank in range(3):
            lane = self.trace.first("moe_barrier", rank=rank, phase="lane")
            rdma = self.trace.first("moe_barrier", rank=rank, phase="rdma")
            assert lane["t"] <= rdma["t"]

    def test_routes_signal_precedes_lane_copies(self):
        spec = RoutingSpec(2, 4, 4, 2, hidden=8)
        ranks = self.deploy(spec, MoeConfig(ranks_per_node=2))
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(9), spec))
        for rank in range(2):
            signal = self.trace.first("moe_signal", rank=rank)
            copy = self.trace.first("moe_lane_copy", src=rank)
            assert signal["t"] <= copy["t"]
        assert not self.trace.select("write")

    def test_single_rank(self):
        spec = RoutingSpec(1, 4, 8, 2, hidden=8)
        ranks = self.deploy(spec)
        self.check_step(ranks, spec, random_inputs(np.random.default_rng(10), spec))
        assert self.engines[0].stats().get("wrs_posted", 0) == 0

    def test_empty_step(self):
        spec = RoutingSpec(2, 4, 8, 2, hidden=8)
        ranks = self.deploy(spec)
        inputs = random_inputs(np.random.default_rng(11), spec, tokens=0)
        outputs = run_ranks(ranks, inputs, scale_by_expert)
        assert all(out.shape == (0, 8) for out in outputs)

    def test_consecutive_steps(self):
        spec = RoutingSpec(4, 8, 8, 2, hidden=8)
        ranks = self.deploy(spec, MoeConfig(private_tokens=2, ranks_per_node=2))
        rng = np.random.default_rng(12)
        for _ in range(3):
            self.check_step(ranks, spec, random_inputs(rng, spec))
        assert all(rank.step == 3 for rank in ranks)
        report = phase_report(ranks)
        assert report["dispatch"]["count"] == 12
        assert report["combine"]["count"] == 12
        assert report["dispatch"]["p50"] > 0

    def test_missing_peer_times_out(self):
        spec = RoutingSpec(2, 4, 4, 2, hidden=8)
        ranks = self.deploy(spec, MoeConfig(timeout=0.2))
        x, routes, _ = random_inputs(np.random.default_rng(13), spec)[0]
        with self.assertRaises(TransferError):
            ranks[0].dispatch_send(x, routes)

    def test_token_route_mismatch(self):
        spec = RoutingSpec(2, 4, 4, 2, hidden=8)
        ranks = self.deploy(spec)
        with self.assertRaises(ValueError):
            ranks[0].dispatch_send(np.zeros((3, 8), dtype=np.float32), [[0, 1], [1, 2]])


def suite():
    test_suite = unittest.TestSuite()
    return test_suite

if __name__ == "__main__":
    unittest.main()
