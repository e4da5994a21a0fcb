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

import json
import os
import sys
import tempfile
import unittest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from XferEngine.bench import MoeBenchConfig, P2PBenchConfig, bench_moe, bench_p2p, format_moe, format_p2p
from XferEngine.cli import (
    kvdemo_main,
    moebench_main,
    parse_ints,
    parse_size,
    parse_sizes,
    wtransfer_main,
    xferbench_main,
)
from XferEngine.Common import KiB, MiB
from XferEngine.trace import Trace, is_monotone


def small_p2p(**kwargs):
    fields = dict(msg_sizes=(64 * KiB, 32 * MiB), page_sizes=(KiB, 64 * KiB), num_pages=256, iterations=1)
    fields.update(kwargs)
    return P2PBenchConfig(**fields)


def small_moe(**kwargs):
    fields = dict(ranks=2, experts=4, tokens=4, topk=2, hidden=8, warmup=1, iterations=2, pace=False)
    fields.update(kwargs)
    return MoeBenchConfig(**fields)


class TestP2PBench(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.report = bench_p2p(small_p2p())

    def test_entries(self):
        report = self.report
        assert [e["size"] for e in report["single"]] == [64 * KiB, 32 * MiB]
        assert [e["size"] for e in report["paged"]] == [KiB, 64 * KiB]
        assert report["paged"][1]["bytes"] == 256 * 64 * KiB
        for entry in report["single"] + report["paged"]:
            assert 0 < entry["fraction"] <= 1.0
            assert entry["wall_us"]["p50"] > 0

    def test_large_writes_approach_line_rate(self):
        small, large = self.report["single"]
        assert large["fraction"] > small["fraction"]
        assert large["fraction"] > 0.9

    def test_paged_close_to_single(self):
        single = self.report["single"][1]["fraction"]
        assert self.report["paged"][1]["fraction"] >= 0.9 * single
        assert self.report["paged"][0]["fraction"] < self.report["paged"][1]["fraction"]

    def test_model_is_deterministic(self):
        again = bench_p2p(small_p2p())
        for a, b in zip(self.report["single"] + self.report["paged"], again["single"] + again["paged"]):
            assert a["model_us"] == b["model_us"]

    def test_format(self):
        lines = format_p2p(self.report).splitlines()
        assert len(lines) == 5
        assert lines[1].split()[0] == "single"


class TestP2PTransports(unittest.TestCase):
    def test_socket(self):
        report = bench_p2p(small_p2p(transport="socket", msg_sizes=(64 * KiB,), page_sizes=(4 * KiB,), num_pages=8))
        assert report["rate_bps"] is None
        assert report["paged"][0]["bytes"] == 32 * KiB
        assert "model_us" not in report["single"][0]
        assert report["single"][0]["wall_us"]["p50"] > 0

    def test_unknown_transport(self):
        with self.assertRaises(ValueError):
            bench_p2p(small_p2p(transport="carrier pigeon"))


class TestMoeBench(unittest.TestCase):
    def test_single_rank_stays_local(self):
        report = bench_moe(small_moe(ranks=1))
        point = report["points"][0]
        assert point["network_writes"] == 0
        assert point["dispatch"]["count"] == 2
        assert not report["sweep"]

    def test_sweep(self):
        report = bench_moe(small_moe(sweep=(0, 4)))
        assert report["sweep"]
        assert [p["private_tokens"] for p in report["points"]] == [0, 4]
        writes = [p["network_writes"] for p in report["points"]]
        assert writes[0] > 0 and writes[0] == writes[1]
        assert report["spec"]["num_ranks"] == 2
        assert len(format_moe(report).splitlines()) == 5

    def test_trace_out(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "moe.jsonl")
            bench_moe(small_moe(iterations=1, trace_out=path))
            events = Trace.from_jsonl(path).select()
        assert is_monotone(events)
        assert any(e["kind"] == "moe_combined" for e in events)

    def test_needs_iterations(self):
        with self.assertRaises(ValueError):
            bench_moe(small_moe(iterations=0))


class TestCommandLine(unittest.TestCase):
    def test_parse_size(self):
        assert parse_size("64K") == 64 * KiB
        assert parse_size("1MiB") == MiB
        assert parse_size("1.5k") == 1536
        assert parse_size("512") == 512
        assert parse_sizes("1K, 2K,") == (KiB, 2 * KiB)
        assert parse_ints("0,8,16") == (0, 8, 16)

    def test_xferbench(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "p2p.json")
            argv = ["p2p", "--msg-sizes", "64K", "--page-sizes", "4K", "--pages", "8", "--iterations", "1"]
            assert xferbench_main(argv + ["--out", path]) == 0
            with open(path) as fp:
                report = json.load(fp)
        assert report["single"][0]["size"] == 64 * KiB
        assert report["paged"][0]["bytes"] == 32 * KiB

    def test_moebench(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "moe.json")
            argv = ["--ranks", "2", "--experts", "4", "--tokens", "4", "--hidden", "8", "--warmup", "0"]
            assert moebench_main(argv + ["--iterations", "1", "--out", path]) == 0
            with open(path) as fp:
                report = json.load(fp)
        assert report["points"][0]["combine"]["count"] == 2

    def test_kvdemo_pair(self):
        argv = ["--requests", "2", "--tokens", "40", "--head-bytes", "256", "--timeout", "20"]
        assert kvdemo_main(argv) == 0

    def test_wtransfer(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "schedule.jsonl")
            argv = ["--train-ranks", "2", "--infer-ranks", "1", "--params", "6", "--schedule-out", path]
            assert wtransfer_main(argv) == 0
            assert os.path.getsize(path) > 0


def suite():
    test_suite = unittest.TestSuite()
    return test_suite

if __name__ == "__main__":
    unittest.main()
