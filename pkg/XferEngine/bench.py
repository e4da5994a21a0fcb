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
##along with XferEngine.  If not, see <http://www.gnu.org/licenses/>

"""
Desk scale benchmarks.

bench_p2p measures single and paged writes between two engines. On the
simulated fabric every figure under "model" comes from the fabric's cost
model and is deterministic; "wall" figures are measured.

bench_moe runs dispatch and combine on in-process ranks and reports
latency percentiles per phase, optionally sweeping the private buffer size.
"""

import dataclasses
import logging
import statistics
import time
from typing import Optional, Tuple

import numpy as np

from XferEngine.Common import KiB, MiB, PRIVATE_TOKENS, TransferError, percentiles
from XferEngine.Construct import close_all, make_engine, make_region, make_sim_engines
from XferEngine.core import Pages
from XferEngine.fabric import FaultConfig, SimFabric
from XferEngine.moe import MoeConfig, RoutingSpec, make_moe_ranks, phase_report, random_inputs, run_ranks
from XferEngine.trace import Trace

logger = logging.getLogger(__name__)


@dataclasses.dataclass
class P2PBenchConfig(object):
    transport: str = "sim"
    rails: int = 1
    seed: int = 0
    msg_sizes: Tuple[int, ...] = (64 * KiB, 256 * KiB, 1 * MiB, 32 * MiB)
    page_sizes: Tuple[int, ...] = (1 * KiB, 8 * KiB, 16 * KiB, 64 * KiB)
    num_pages: int = 256
    iterations: int = 5
    rate_bps: float = 10e9
    timeout: float = 60.0
    trace_out: Optional[str] = None


@dataclasses.dataclass
class MoeBenchConfig(object):
    ranks: int = 4
    experts: int = 16
    tokens: int = 32
    topk: int = 2
    hidden: int = 256
    private_tokens: int = PRIVATE_TOKENS
    ranks_per_node: int = 1
    warmup: int = 100
    iterations: int = 1000
    seed: int = 0
    rate_bps: float = 1e9
    pace: bool = True
    route_delay: float = 0.0
    sweep: Optional[Tuple[int, ...]] = None
    timeout: float = 30.0
    trace_out: Optional[str] = None


# ===========================================================================
# POINT TO POINT
# ===========================================================================


def _finish(op, timeout, what):
    if not op.wait(timeout):
        raise TransferError("%s did not complete within %.1fs" % (what, timeout))
    if op.error is not None:
        raise op.error


def _entry(kind, size, total, costs, walls, line_rate):
    wall = statistics.median(walls)
    entry = {
        "kind": kind,
        "size": size,
        "bytes": total,
        "wall_us": percentiles([w * 1e6 for w in walls]),
        "wall_gbps": total * 8.0 / wall / 1e9 if wall > 0 else 0.0,
    }
    if costs:
        model = statistics.median(costs)
        entry["model_us"] = model * 1e6
        entry["model_gbps"] = total * 8.0 / model / 1e9
        entry["fraction"] = entry["model_gbps"] * 1e9 / line_rate
    return entry


def bench_p2p(config=None):
    """
    :return: report dict with one entry per single write size and per page size
    """
    config = config if config is not None else P2PBenchConfig()
    trace = Trace("p2p") if config.trace_out else None
    fabric = None
    if config.transport == "sim":
        fabric = SimFabric(FaultConfig(seed=config.seed, rate_bps=config.rate_bps), trace=trace)
    engines = [
        make_engine(config.transport, config.rails, fabric=fabric, trace=trace, name="bench%d" % i) for i in range(2)
    ]
    sender, receiver = engines
    line_rate = config.rate_bps * config.rails
    size = max(max(config.msg_sizes), config.num_pages * max(config.page_sizes))
    report = {
        "transport": config.transport,
        "rails": config.rails,
        "rate_bps": config.rate_bps if fabric is not None else None,
        "seed": config.seed,
        "single": [],
        "paged": [],
    }
    try:
        src, handle, _ = make_region(sender, size, seed=config.seed)
        dst, _, desc = make_region(receiver, size)

        def measure(submit, total):
            costs, walls = [], []
            for _ in range(config.iterations):
                started = time.monotonic()
                op = submit()
                _finish(op, config.timeout, "benchmark write")
                walls.append(time.monotonic() - started)
                if fabric is not None:
                    costs.append(fabric.transfer_cost(sender.id, op.transfer_id))
            return costs, walls

        for msg in config.msg_sizes:
            costs, walls = measure(lambda: sender.submit_single_write(msg, None, (handle, 0), (desc, 0)), msg)
            if not np.array_equal(dst[:msg], src[:msg]):
                raise TransferError("single write of %d bytes landed wrong data" % msg)
            report["single"].append(_entry("single", msg, msg, costs, walls, line_rate))
            logger.info("single %d bytes: %s", msg, report["single"][-1])

        for page_len in config.page_sizes:
            pages = Pages(tuple(range(config.num_pages)), page_len)
            total = page_len * config.num_pages
            dst[:] = 0
            costs, walls = measure(
                lambda: sender.submit_paged_writes(page_len, None, (handle, pages), (desc, pages)), total
            )
            if not np.array_equal(dst[:total], src[:total]):
                raise TransferError("paged writes of %d byte pages landed wrong data" % page_len)
            report["paged"].append(_entry("paged", page_len, total, costs, walls, line_rate))
            logger.info("paged %d bytes x %d: %s", page_len, config.num_pages, report["paged"][-1])
    finally:
        close_all(engines, fabric)
    if trace is not None:
        trace.to_jsonl(config.trace_out)
    return report


def format_p2p(report):
    lines = ["%-7s %10s %12s %10s %10s" % ("kind", "size", "model Gbps", "fraction", "wall p50us")]
    for entry in report["single"] + report["paged"]:
        lines.append(
            "%-7s %10d %12s %10s %10.1f"
            % (
                entry["kind"],
                entry["size"],
                "%.2f" % entry["model_gbps"] if "model_gbps" in entry else "-",
                "%.3f" % entry["fraction"] if "fraction" in entry else "-",
                entry["wall_us"]["p50"],
            )
        )
    return "\n".join(lines)


# ===========================================================================
# MIXTURE OF EXPERTS
# ===========================================================================


def _identity(batch):
    return batch.tokens


def _moe_point(config, spec, private_tokens, trace):
    fault = FaultConfig(seed=config.seed, rate_bps=config.rate_bps, pace=config.pace)
    fabric, engines = make_sim_engines(config.ranks, 1, fault, trace)
    moe_config = MoeConfig(
        private_tokens=private_tokens,
        ranks_per_node=config.ranks_per_node,
        timeout=config.timeout,
        route_delay=config.route_delay,
    )
    rng = np.random.default_rng(config.seed)
    try:
        ranks = make_moe_ranks(engines, spec, moe_config, trace)
        for i in range(config.warmup + config.iterations):
            if i == config.warmup:
                for rank in ranks:
                    rank.timings.clear()
                before = sum(e.stats().get("wrs_posted", 0) for e in engines)
            run_ranks(ranks, random_inputs(rng, spec), _identity)
        writes = sum(e.stats().get("wrs_posted", 0) for e in engines) - before
        point = phase_report(ranks)
        point["private_tokens"] = ranks[0].private
        point["network_writes"] = writes
        return point
    finally:
        close_all(engines, fabric)


def bench_moe(config=None):
    """
    :return: report dict, one point per private buffer size
    """
    config = config if config is not None else MoeBenchConfig()
    if config.iterations < 1:
        raise ValueError("need at least one benchmarked iteration")
    spec = RoutingSpec(config.ranks, config.experts, config.tokens, config.topk, config.hidden)
    trace = Trace("moe") if config.trace_out else None
    sizes = config.sweep if config.sweep else (config.private_tokens,)
    points = []
    for private_tokens in sizes:
        points.append(_moe_point(config, spec, private_tokens, trace))
        logger.info(
            "P=%d: dispatch p50 %.1fus combine p50 %.1fus",
            points[-1]["private_tokens"],
            points[-1]["dispatch"]["p50"],
            points[-1]["combine"]["p50"],
        )
    if trace is not None:
        trace.to_jsonl(config.trace_out)
    return {"spec": dataclasses.asdict(spec), "sweep": bool(config.sweep), "points": points}


def format_moe(report):
    keys = ("mean", "p01", "p25", "p50", "p75", "p95", "p99")
    lines = ["%-9s %4s " % ("phase", "P") + " ".join("%9s" % k for k in keys)]
    for point in report["points"]:
        for phase in ("dispatch", "combine"):
            lines.append(
                "%-9s %4d " % (phase, point["private_tokens"])
                + " ".join("%9.1f" % point[phase][k] for k in keys)
            )
    return "\n".join(lines)
