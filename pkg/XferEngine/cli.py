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
Console entry points: xferbench, moebench, kvdemo and wtransfer.
"""

import argparse
import json
import logging
import multiprocessing
import socket
import sys

import numpy as np

from XferEngine.Common import KiB, MiB, GiB
from XferEngine.Construct import TcpBootstrap, make_socket_engine
from XferEngine.bench import MoeBenchConfig, P2PBenchConfig, bench_moe, bench_p2p, format_moe, format_p2p
from XferEngine.core import MrDesc, NetAddr
from XferEngine.kvcache import Decoder, KvConfig, KvLayout, Prefiller, RoundRobinScheduler, ShardMap
from XferEngine.weights import (
    PipelineConfig,
    SyntheticShards,
    WeightReceiver,
    WeightSender,
    build_schedule,
    expected_shard,
    part_infos,
    random_metas,
)

logger = logging.getLogger(__name__)

_UNITS = {"": 1, "K": KiB, "M": MiB, "G": GiB}


def parse_size(text):
    """'64K' -> 65536"""
    text = text.strip().upper().rstrip("B").rstrip("I")
    unit = text[-1] if text and text[-1] in _UNITS else ""
    return int(float(text[: len(text) - len(unit)]) * _UNITS[unit])


def parse_sizes(text):
    return tuple(parse_size(t) for t in text.split(",") if t.strip())


def parse_ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _free_port(host):
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", help="write the report as JSON to this path")
    parser.add_argument("--log-level", default="WARNING")


def _setup(args):
    logging.basicConfig(
        level=getattr(logging, args.log_level.upper(), logging.WARNING),
        format="%(asctime)s %(processName)s %(name)s %(levelname)s %(message)s",
    )


def _write_report(args, report):
    if args.out:
        with open(args.out, "w") as fp:
            json.dump(report, fp, indent=2, sort_keys=True)
        logger.info("report written to %s", args.out)


# ===========================================================================
# BENCHMARKS
# ===========================================================================


def _add_p2p(parser):
    parser.add_argument("--transport", choices=("sim", "socket"), default="sim")
    parser.add_argument("--rails", type=int, default=1)
    parser.add_argument("--msg-sizes", type=parse_sizes, default=P2PBenchConfig.msg_sizes)
    parser.add_argument("--page-sizes", type=parse_sizes, default=P2PBenchConfig.page_sizes)
    parser.add_argument("--pages", type=int, default=P2PBenchConfig.num_pages)
    parser.add_argument("--iterations", type=int, default=P2PBenchConfig.iterations)
    parser.add_argument("--rate-gbps", type=float, default=P2PBenchConfig.rate_bps / 1e9)
    parser.add_argument("--trace-out")
    _add_common(parser)


def _add_moe(parser):
    parser.add_argument("--ranks", type=int, default=MoeBenchConfig.ranks)
    parser.add_argument("--experts", type=int, default=MoeBenchConfig.experts)
    parser.add_argument("--tokens", type=int, default=MoeBenchConfig.tokens)
    parser.add_argument("--topk", type=int, default=MoeBenchConfig.topk)
    parser.add_argument("--hidden", type=int, default=MoeBenchConfig.hidden)
    parser.add_argument("--private-tokens", type=int, default=MoeBenchConfig.private_tokens)
    parser.add_argument("--ranks-per-node", type=int, default=MoeBenchConfig.ranks_per_node)
    parser.add_argument("--warmup", type=int, default=MoeBenchConfig.warmup)
    parser.add_argument("--iterations", type=int, default=MoeBenchConfig.iterations)
    parser.add_argument("--rate-gbps", type=float, default=MoeBenchConfig.rate_bps / 1e9)
    parser.add_argument("--route-delay-us", type=float, default=0.0)
    parser.add_argument("--sweep", type=parse_ints, help="private buffer sizes, e.g. 0,8,16,32")
    parser.add_argument("--trace-out")
    _add_common(parser)


def _run_p2p(args):
    config = P2PBenchConfig(
        transport=args.transport,
        rails=args.rails,
        seed=args.seed,
        msg_sizes=args.msg_sizes,
        page_sizes=args.page_sizes,
        num_pages=args.pages,
        iterations=args.iterations,
        rate_bps=args.rate_gbps * 1e9,
        trace_out=args.trace_out,
    )
    report = bench_p2p(config)
    print(format_p2p(report))
    _write_report(args, report)
    return 0


def _run_moe(args):
    config = MoeBenchConfig(
        ranks=args.ranks,
        experts=args.experts,
        tokens=args.tokens,
        topk=args.topk,
        hidden=args.hidden,
        private_tokens=args.private_tokens,
        ranks_per_node=args.ranks_per_node,
        warmup=args.warmup,
        iterations=args.iterations,
        seed=args.seed,
        rate_bps=args.rate_gbps * 1e9,
        route_delay=args.route_delay_us * 1e-6,
        sweep=args.sweep,
        trace_out=args.trace_out,
    )
    report = bench_moe(config)
    print(format_moe(report))
    _write_report(args, report)
    return 0


def xferbench_main(argv=None):
    parser = argparse.ArgumentParser(prog="xferbench", description="point to point and MoE benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_p2p(sub.add_parser("p2p", help="single and paged write throughput"))
    _add_moe(sub.add_parser("moe", help="dispatch and combine latency"))
    args = parser.parse_args(argv)
    _setup(args)
    return _run_p2p(args) if args.command == "p2p" else _run_moe(args)


def moebench_main(argv=None):
    parser = argparse.ArgumentParser(prog="moebench", description="MoE dispatch and combine on in-process ranks")
    _add_moe(parser)
    args = parser.parse_args(argv)
    _setup(args)
    return _run_moe(args)


# ===========================================================================
# KV CACHE DEMO
# ===========================================================================


def _kv_setup(args):
    config = KvConfig(layers=args.layers)
    shard_map = ShardMap.gqa(args.heads, 1, 1)
    return config, shard_map


def _kv_prefiller(args):
    config, shard_map = _kv_setup(args)
    with TcpBootstrap(0, 2, args.host, args.port) as boot:
        engine = make_socket_engine(args.rails, host=args.host, name="prefill")
        layout = KvLayout(config.layers, shard_map.local_heads("prefill", 0), args.pages, args.head_bytes)
        prefiller = Prefiller(engine, layout, config, name="prefill0")
        try:
            boot.allgather(engine.main_address().encode())
            # released once the decoder is done
            boot.barrier()
        finally:
            prefiller.close()
            engine.close()
    return 0


def _kv_decoder(args):
    config, shard_map = _kv_setup(args)
    failures = 0
    with TcpBootstrap(1, 2, args.host, args.port) as boot:
        engine = make_socket_engine(args.rails, host=args.host, name="decode")
        layout = KvLayout(config.layers, shard_map.local_heads("decode", 0), args.pages, args.head_bytes)
        scheduler = RoundRobinScheduler()
        decoder = Decoder(engine, layout, config, scheduler, name="decode0")
        try:
            blobs = boot.allgather(engine.main_address().encode())
            scheduler.add([(NetAddr.decode(blobs[0]), route) for route in shard_map.sources(0)])
            for rid in range(1, args.requests + 1):
                ticket = decoder.dispatch(rid, args.tokens)
                if not ticket.wait(args.timeout):
                    logger.error("request %d did not complete", rid)
                    failures += 1
                    decoder.cancel(rid)
                    continue
                wrong = decoder.verify(ticket)
                if wrong:
                    logger.error("request %d: %d pages differ, first %s", rid, len(wrong), wrong[0])
                    failures += 1
                decoder.finish(rid)
            print("kvdemo: %d requests, %d failed" % (args.requests, failures))
            boot.barrier()
        finally:
            decoder.close()
            engine.close()
    return 1 if failures else 0


def _kv_role(role, args):
    _setup(args)
    sys.exit(_kv_prefiller(args) if role == "prefiller" else _kv_decoder(args))


def kvdemo_main(argv=None):
    parser = argparse.ArgumentParser(prog="kvdemo", description="prefiller and decoder over the socket transport")
    parser.add_argument("--role", choices=("prefiller", "decoder", "pair"), default="pair")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0, help="bootstrap port, served by the prefiller")
    parser.add_argument("--rails", type=int, default=1)
    parser.add_argument("--requests", type=int, default=4)
    parser.add_argument("--tokens", type=int, default=100)
    parser.add_argument("--layers", type=int, default=2)
    parser.add_argument("--heads", type=int, default=4)
    parser.add_argument("--pages", type=int, default=64)
    parser.add_argument("--head-bytes", type=int, default=1024)
    parser.add_argument("--timeout", type=float, default=30.0)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args(argv)
    _setup(args)
    if args.role == "prefiller":
        return _kv_prefiller(args)
    if args.role == "decoder":
        if not args.port:
            parser.error("the decoder needs --port")
        return _kv_decoder(args)
    if not args.port:
        args.port = _free_port(args.host)
    procs = [
        multiprocessing.Process(target=_kv_role, args=(role, args), name=role) for role in ("prefiller", "decoder")
    ]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    return max(abs(p.exitcode or 0) for p in procs)


# ===========================================================================
# WEIGHT TRANSFER
# ===========================================================================


def _weight_rank(rank, args):
    _setup(args)
    world = args.train_ranks + args.infer_ranks
    rng = np.random.default_rng(args.seed)
    train, infer = random_metas(rng, args.params, args.train_ranks, args.infer_ranks)
    schedule = build_schedule(train, infer)
    source = SyntheticShards(args.seed)
    code = 0
    with TcpBootstrap(rank, world, args.host, args.port) as boot:
        engine = make_socket_engine(args.rails, host=args.host, name="weights%d" % rank)
        try:
            if rank < args.train_ranks:
                blobs = boot.allgather(b"")
                descs = dict(
                    (i, MrDesc.decode(blobs[args.train_ranks + i])) for i in range(args.infer_ranks)
                )
                config = PipelineConfig(watermark=args.watermark)
                sender = WeightSender(engine, rank, schedule, source, config, barrier=boot.barrier)
                sender.bind(descs)
                elapsed, sent, peak = sender.run_step()
                mine = {"rank": rank, "role": "train", "seconds": elapsed, "bytes": sent, "peak": peak}
            else:
                receiver = WeightReceiver(engine, rank - args.train_ranks, infer)
                boot.allgather(receiver.desc.encode())
                boot.barrier()
                parts = part_infos(train)
                wrong = [
                    name
                    for name, meta in sorted(receiver.metas.items())
                    if not np.array_equal(receiver.raw(name), expected_shard(meta, source, None, parts))
                ]
                mine = {"rank": rank, "role": "infer", "wrong": wrong}
                code = 1 if wrong else 0
            reports = [json.loads(b) for b in boot.allgather(json.dumps(mine).encode())]
        finally:
            engine.close()
    if rank == 0:
        senders = [r for r in reports if r["role"] == "train"]
        bad = sum(len(r["wrong"]) for r in reports if r["role"] == "infer")
        print(
            "wtransfer: %d tasks, wall %.3fs, peak in-flight %d bytes, %d wrong shards"
            % (len(schedule.tasks), max(r["seconds"] for r in senders), max(r["peak"] for r in senders), bad)
        )
        for r in senders:
            print("  rank %d sent %d bytes" % (r["rank"], r["bytes"]))
        if args.schedule_out:
            schedule.to_jsonl(args.schedule_out)
    sys.exit(code)


def wtransfer_main(argv=None):
    parser = argparse.ArgumentParser(prog="wtransfer", description="one weight transfer step over sockets")
    parser.add_argument("--train-ranks", type=int, default=2)
    parser.add_argument("--infer-ranks", type=int, default=2)
    parser.add_argument("--params", type=int, default=16)
    parser.add_argument("--watermark", type=parse_size, default=PipelineConfig.watermark)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=0)
    parser.add_argument("--rails", type=int, default=1)
    parser.add_argument("--rank", type=int, help="run only this rank; every rank needs the same --port and --seed")
    parser.add_argument("--schedule-out", help="write the schedule as JSON lines")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--log-level", default="WARNING")
    args = parser.parse_args(argv)
    if args.train_ranks < 1 or args.infer_ranks < 1:
        parser.error("need at least one training and one inference rank")
    if args.rank is not None:
        if not args.port:
            parser.error("--rank needs --port")
        _weight_rank(args.rank, args)
    if not args.port:
        args.port = _free_port(args.host)
    world = args.train_ranks + args.infer_ranks
    procs = [
        multiprocessing.Process(target=_weight_rank, args=(rank, args), name="rank%d" % rank) for rank in range(world)
    ]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    return max(abs(p.exitcode or 0) for p in procs)


if __name__ == "__main__":
    sys.exit(xferbench_main())
