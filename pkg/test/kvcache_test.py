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

import collections
import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from XferEngine.Common import KiB, ProtocolError, RequestCancelled, ScheduleError, WireFormatError, wait_until
from XferEngine.Construct import close_all, make_region, make_sim_engines, make_socket_engine
from XferEngine.core import MrDesc, NetAddr, Pages
from XferEngine.fabric import FABRIC_MODES, FaultConfig
from XferEngine.kvcache import (
    Decoder,
    ImmAllocator,
    KvConfig,
    KvLayout,
    KvMessage,
    PageAllocator,
    PrefillRequest,
    Prefiller,
    RoundRobinScheduler,
    ShardMap,
    ShardRoute,
    context_pattern,
    decode_message,
    deploy,
    encode_message,
    writes_after_confirm,
)
from XferEngine.trace import Trace
from XferEngine.types_lut import KvMsgKind, KvState

HEAD_BYTES = 64
SEEDS = (0, 1, 2)


def sample_request():
    desc = MrDesc(0x2000, 1 << 20, ((NetAddr.sim(3, 0), 11), (NetAddr.sim(3, 1), 12)))
    ctx = MrDesc(0x9000, 4096, ((NetAddr.sim(3, 0), 13), (NetAddr.sim(3, 1), 14)))
    return PrefillRequest(
        request_id=42,
        tokens=100,
        pages=Pages((5, 1, 9), 1),
        context=(ctx, 256, 128),
        imm=77,
        expected=13,
        kv=desc,
        reply=NetAddr.sim(3, 0),
        route=ShardRoute(1, 0, 2, 0, 2),
        dst_layout=KvLayout(2, 4, 64, HEAD_BYTES),
        chunk_pages=4,
        write_context=False,
    )


class TestMessages(unittest.TestCase):
    def test_request(self):
        msg = KvMessage(KvMsgKind.REQUEST, 42, NetAddr.sim(3, 0), sample_request())
        decoded = decode_message(encode_message(msg))
        assert decoded.kind == KvMsgKind.REQUEST
        assert decoded.request == msg.request
        assert decoded.addr == NetAddr.sim(3, 0)

    def test_control(self):
        for kind in (KvMsgKind.HEARTBEAT, KvMsgKind.CANCEL, KvMsgKind.CANCEL_CONFIRM):
            msg = KvMessage(kind, 9, NetAddr.inet("127.0.0.1", 7000))
            assert decode_message(memoryview(encode_message(msg))) == msg

    def test_malformed(self):
        data = encode_message(KvMessage(KvMsgKind.REQUEST, 42, NetAddr.sim(3, 0), sample_request()))
        with self.assertRaises(WireFormatError):
            decode_message(data[:-2])
        with self.assertRaises(WireFormatError):
            decode_message(data + b"\x00")
        with self.assertRaises(WireFormatError):
            decode_message(b"\x09" + data[1:])
        with self.assertRaises(WireFormatError):
            decode_message(b"\x01")


class TestShardMap(unittest.TestCase):
    def assert_covers(self, shard_map):
        for d in range(shard_map.decode_tp):
            heads = sorted(
                h for r in shard_map.sources(d) for h in range(r.dst_head, r.dst_head + r.num_heads)
            )
            assert heads == list(range(shard_map.local_heads("decode", d)))

    def test_gqa_fan_in(self):
        shard_map = ShardMap.gqa(8, 4, 2)
        assert all(len(shard_map.sources(d)) == 2 for d in range(2))
        self.assert_covers(shard_map)
        assert shard_map.sources(1)[0] == ShardRoute(2, 1, 0, 0, 2)

    def test_gqa_fan_out(self):
        shard_map = ShardMap.gqa(8, 2, 4)
        assert all(len(shard_map.sources(d)) == 1 for d in range(4))
        self.assert_covers(shard_map)
        assert shard_map.sources(3)[0] == ShardRoute(1, 3, 2, 0, 2)
        assert shard_map.head_offset("decode", 3) == 6

    def test_gqa_uneven(self):
        with self.assertRaises(ValueError):
            ShardMap.gqa(6, 4, 2)

    def test_mla_replicas(self):
        shard_map = ShardMap.mla(4, 2, 6, np.random.default_rng(3))
        self.assert_covers(shard_map)
        for first in range(0, 6, 2):
            sources = [shard_map.sources(d)[0].prefill_rank for d in (first, first + 1)]
            assert sorted(sources) == [0, 1]
        assert shard_map.head_offset("decode", 5) == 0
        with self.assertRaises(ValueError):
            ShardMap.gqa(4, 2, 2).match_replicas()


class TestAllocators(unittest.TestCase):
    def test_pages(self):
        pages = PageAllocator(4)
        got = pages.alloc(3)
        with self.assertRaises(ProtocolError):
            pages.alloc(2)
        pages.free(got)
        assert pages.available == 4

    def test_imm_ring(self):
        imms = ImmAllocator(size=3, base=10)
        assert [imms.alloc() for _ in range(3)] == [10, 11, 12]
        with self.assertRaises(ProtocolError):
            imms.alloc()
        imms.free(11)
        assert imms.alloc() == 11
        assert len(imms) == 3

    def test_scheduler(self):
        a, b = NetAddr.sim(1, 0), NetAddr.sim(2, 0)
        route = ShardRoute(0, 0, 0, 0, 1)
        scheduler = RoundRobinScheduler([[(a, route)], [(b, route)]])
        assert [scheduler.next()[0][0] for _ in range(3)] == [a, b, a]
        scheduler.remove(a)
        assert scheduler.next()[0][0] == b
        scheduler.remove(b)
        with self.assertRaises(ScheduleError):
            scheduler.next()

    def test_expected_count(self):
        config = KvConfig(layers=2, chunk_pages=4, page_tokens=16)
        assert config.number_of_pages(129) == 9
        assert config.expected_count(9, sources=2) == 13


class KvHarness(object):
    def deploy(self, shard_map, config, pages=32, seed=0, mode="window"):
        trace = Trace("kv")
        n = shard_map.prefill_tp + shard_map.decode_tp
        fabric, engines = make_sim_engines(n, 1, FaultConfig.for_mode(mode, seed=seed), trace)
        self.addCleanup(close_all, engines, fabric)
        prefillers, decoders = deploy(
            engines[: shard_map.prefill_tp], engines[shard_map.prefill_tp :], shard_map, config, pages, HEAD_BYTES, trace
        )
        for node in prefillers + decoders:
            self.addCleanup(node.close)
        return fabric, prefillers, decoders, trace

    def run_request(self, decoder, rid, tokens, timeout=20):
        ticket = decoder.dispatch(rid, tokens)
        assert ticket.wait(timeout), "request %d never decoded" % rid
        assert ticket.on_decode.ok, ticket.on_decode.error
        assert decoder.verify(ticket) == []
        return ticket

    def assert_cancelled_cleanly(self, ticket, prefiller, decoder, trace, pages=32):
        rid = ticket.request_id
        assert ticket.wait(20)
        assert isinstance(ticket.on_decode.error, RequestCancelled)
        assert ticket.state == KvState.CONFIRMED
        assert trace.first("kv_confirmed", rid=rid) is not None
        assert wait_until(lambda: not prefiller.jobs and not prefiller.tombstones, timeout=5)
        assert writes_after_confirm(trace, rid, prefiller.engine.group().addrs) == []
        assert decoder.pages.available == pages
        assert wait_until(lambda: prefiller.pages.available == pages, timeout=5)


class TestKvTransfer(KvHarness, unittest.TestCase):
    def test_gqa_fan_in(self):
        config = KvConfig(layers=2, chunk_pages=2, page_tokens=4)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    _, prefillers, (decoder,), trace = self.deploy(
                        ShardMap.gqa(4, 2, 1), config, seed=seed, mode=mode
                    )
                    ticket = self.run_request(decoder, 1, 30)
                    assert ticket.expected == 4 * 2 * 2 + 1
                    assert len(trace.select("kv_context", rid=1)) == 1
                    decoder.finish(1)
                    assert decoder.pages.available == 32
                    assert len(decoder.imms) == 0
                    assert wait_until(lambda: all(p.completed == 1 for p in prefillers), timeout=5)
                    assert wait_until(lambda: all(p.pages.available == 32 for p in prefillers), timeout=5)

    def test_gqa_fan_out(self):
        config = KvConfig(layers=3, chunk_pages=3, page_tokens=8)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    _, _, decoders, _ = self.deploy(ShardMap.gqa(8, 2, 4), config, seed=seed, mode=mode)
                    for rank, decoder in enumerate(decoders):
                        self.run_request(decoder, 10 + rank, 50)

    def test_mla(self):
        config = KvConfig(layers=2, chunk_pages=4, page_tokens=16)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    shard_map = ShardMap.mla(2, 2, 2, np.random.default_rng(seed))
                    _, _, decoders, trace = self.deploy(shard_map, config, seed=seed, mode=mode)
                    for rank, decoder in enumerate(decoders):
                        self.run_request(decoder, 20 + rank, 100)
                    layers = collections.Counter(e["node"] for e in trace.select("kv_layer"))
                    assert sorted(layers) == ["prefill0", "prefill1"]

    def test_many_requests(self):
        config = KvConfig(layers=2, chunk_pages=2, page_tokens=4)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    _, _, (decoder,), _ = self.deploy(ShardMap.gqa(2, 1, 1), config, pages=64, seed=seed, mode=mode)
                    tickets = [decoder.dispatch(rid, 4 * (rid + 1)) for rid in range(6)]
                    for ticket in tickets:
                        assert ticket.wait(20) and ticket.on_decode.ok
                        assert decoder.verify(ticket) == []
                    for ticket in tickets:
                        decoder.finish(ticket.request_id)
                    assert decoder.pages.available == 64
                    with self.assertRaises(KeyError):
                        decoder.finish(0)

    def test_duplicate_request_id(self):
        config = KvConfig(layers=1, layer_time=0.05)
        _, _, (decoder,), _ = self.deploy(ShardMap.gqa(2, 1, 1), config)
        ticket = decoder.dispatch(5, 16)
        with self.assertRaises(ValueError):
            decoder.dispatch(5, 16)
        assert ticket.wait(20) and ticket.on_decode.ok

    def test_caller_context_region(self):
        config = KvConfig(layers=1)
        _, _, (decoder,), _ = self.deploy(ShardMap.gqa(2, 1, 1), config)
        buffer, handle, _ = make_region(decoder.engine, 512)
        ticket = decoder.dispatch(3, 20, context=(handle, 100), context_len=64)
        assert ticket.wait(20) and ticket.on_decode.ok
        assert np.array_equal(buffer[100:164], context_pattern(3, 64))
        assert decoder.verify(ticket) == []

    def test_cancel(self):
        config = KvConfig(layers=2, chunk_pages=1, page_tokens=4, layer_time=0.05)
        for mode in FABRIC_MODES:
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    _, (prefiller,), (decoder,), trace = self.deploy(
                        ShardMap.gqa(2, 1, 1), config, seed=seed, mode=mode
                    )
                    ticket = decoder.dispatch(7, 32)
                    assert wait_until(lambda: trace.first("kv_layer", rid=7) is not None, timeout=10)
                    decoder.cancel(7)
                    self.assert_cancelled_cleanly(ticket, prefiller, decoder, trace)
                    with self.assertRaises(KeyError):
                        decoder.cancel(7)

    def test_cancel_overtaking_its_request(self):
        config = KvConfig(layers=2, chunk_pages=1, page_tokens=4)
        for mode in ("reverse", "mtu"):
            for seed in SEEDS:
                with self.subTest(mode=mode, seed=seed):
                    _, (prefiller,), (decoder,), trace = self.deploy(
                        ShardMap.gqa(2, 1, 1), config, seed=seed, mode=mode
                    )
                    ticket = decoder.dispatch(7, 32)
                    decoder.cancel(7)
                    self.assert_cancelled_cleanly(ticket, prefiller, decoder, trace)

    def test_request_after_its_cancel_is_dropped(self):
        trace = Trace("kv")
        fabric, (pe, de) = make_sim_engines(2, 1, FaultConfig(), trace)
        self.addCleanup(close_all, [pe, de], fabric)
        config = KvConfig(layers=2, chunk_pages=1, page_tokens=4)
        prefiller = Prefiller(pe, KvLayout(2, 2, 32, HEAD_BYTES), config, trace)
        self.addCleanup(prefiller.close)
        replies = []
        de.submit_recvs(config.max_message, 4, lambda view: replies.append(decode_message(view)))
        assert de.wait_idle()
        layout = KvLayout(2, 2, 32, HEAD_BYTES)
        _, _, kv = make_region(de, layout.region_bytes)
        _, _, ctx = make_region(de, config.context_bytes)
        reply = de.main_address()
        request = PrefillRequest(
            request_id=9,
            tokens=32,
            pages=Pages(tuple(range(8)), 1),
            context=(ctx, 0, 64),
            imm=5,
            expected=config.expected_count(8),
            kv=kv,
            reply=reply,
            route=ShardRoute(0, 0, 0, 0, 2),
            dst_layout=layout,
            chunk_pages=config.chunk_pages,
        )
        prefiller.post(prefiller._on_message, KvMessage(KvMsgKind.CANCEL, 9, reply))
        prefiller.post(prefiller._on_message, KvMessage(KvMsgKind.REQUEST, 9, reply, request))
        assert wait_until(lambda: trace.first("kv_tombstone", rid=9) is not None, timeout=5)
        assert wait_until(lambda: len(replies) == 1, timeout=5)
        assert replies[0].kind == KvMsgKind.CANCEL_CONFIRM and replies[0].request_id == 9
        assert not prefiller.jobs and not prefiller.tombstones
        assert trace.select("kv_layer", rid=9) == []
        sources = set(pe.group().addrs)
        assert [e for e in trace.select("write") if e["src"] in sources] == []
        assert prefiller.pages.available == 32
        assert de.counter.received(5) == 0

    def test_stale_cancel_expires(self):
        trace = Trace("kv")
        fabric, (pe, de) = make_sim_engines(2, 1, FaultConfig(), trace)
        self.addCleanup(close_all, [pe, de], fabric)
        config = KvConfig(layers=1, heartbeat_interval=0.02)
        prefiller = Prefiller(pe, KvLayout(1, 1, 8, HEAD_BYTES), config, trace)
        self.addCleanup(prefiller.close)
        de.submit_recvs(config.max_message, 2, lambda view: None)
        assert de.wait_idle()
        prefiller.post(prefiller._cancel, de.main_address(), 3)
        assert wait_until(lambda: trace.first("kv_confirm", rid=3) is not None, timeout=5)
        assert wait_until(lambda: not prefiller.tombstones, timeout=5)

    def test_device_stops_before_pages_are_freed(self):
        config = KvConfig(layers=2, chunk_pages=1, page_tokens=4, layer_time=0.05)
        _, (prefiller,), (decoder,), trace = self.deploy(ShardMap.gqa(2, 1, 1), config, mode="none")
        ticket = decoder.dispatch(4, 32)
        assert wait_until(lambda: trace.first("kv_layer", rid=4) is not None, timeout=10)
        decoder.cancel(4)
        self.assert_cancelled_cleanly(ticket, prefiller, decoder, trace)
        exited = trace.first("kv_device_exit", rid=4)
        freed = trace.first("kv_pages_free", rid=4)
        assert exited is not None and freed is not None
        assert exited["t"] <= freed["t"]
        assert len(trace.select("kv_layer", rid=4)) < 2 * 8

    def test_rejected_request(self):
        trace = Trace("kv")
        fabric, (pe, de) = make_sim_engines(2, 1, FaultConfig(), trace)
        self.addCleanup(close_all, [pe, de], fabric)
        config = KvConfig(layers=2, page_tokens=4)
        prefiller = Prefiller(pe, KvLayout(2, 2, 4, HEAD_BYTES), config, trace)
        self.addCleanup(prefiller.close)
        route = ShardRoute(0, 0, 0, 0, 2)
        decoder = Decoder(
            de, KvLayout(2, 2, 32, HEAD_BYTES), config, RoundRobinScheduler([[(prefiller.address, route)]]), trace
        )
        self.addCleanup(decoder.close)
        ticket = decoder.dispatch(1, 4 * 8)
        assert ticket.wait(10)
        assert isinstance(ticket.on_decode.error, RequestCancelled)
        assert decoder.pages.available == 32
        assert not prefiller.jobs

    def test_silent_prefiller_times_out(self):
        trace = Trace("kv")
        fabric, (silent, de) = make_sim_engines(2, 1, FaultConfig(), trace)
        self.addCleanup(close_all, [silent, de], fabric)
        silent.submit_recvs(16 * 1024, 4, lambda view: None)
        assert silent.wait_idle()
        config = KvConfig(layers=1, heartbeat_interval=0.02)
        route = ShardRoute(0, 0, 0, 0, 1)
        decoder = Decoder(
            de, KvLayout(1, 1, 8, HEAD_BYTES), config, RoundRobinScheduler([[(silent.main_address(), route)]]), trace
        )
        self.addCleanup(decoder.close)
        ticket = decoder.dispatch(1, 16)
        assert ticket.wait(10)
        assert isinstance(ticket.on_decode.error, RequestCancelled)
        assert ticket.state == KvState.TIMED_OUT
        assert trace.first("kv_timeout", rid=1) is not None
        assert decoder.pages.available == 8

    def test_unreachable_prefiller(self):
        fabric, (gone, de) = make_sim_engines(2, 1)
        self.addCleanup(close_all, [gone, de], fabric)
        fabric.close_engine(gone.id)
        route = ShardRoute(0, 0, 0, 0, 1)
        decoder = Decoder(
            de, KvLayout(1, 1, 8, HEAD_BYTES), KvConfig(layers=1), RoundRobinScheduler([[(gone.main_address(), route)]])
        )
        self.addCleanup(decoder.close)
        ticket = decoder.dispatch(2, 16)
        assert ticket.wait(10)
        assert isinstance(ticket.on_decode.error, ConnectionError)
        assert ticket.state == KvState.TIMED_OUT

    def test_not_enough_pages(self):
        config = KvConfig(layers=1, page_tokens=4)
        _, _, (decoder,), _ = self.deploy(ShardMap.gqa(2, 1, 1), config, pages=4)
        with self.assertRaises(ProtocolError):
            decoder.dispatch(1, 100)
        assert decoder.pages.available == 4
        assert decoder.context_slots.available == config.context_slots


class TestKvOverSockets(unittest.TestCase):
    def test_prefill_to_decode(self):
        pe = make_socket_engine(1, name="prefill")
        de = make_socket_engine(1, name="decode")
        self.addCleanup(close_all, [pe, de])
        config = KvConfig(layers=2, chunk_pages=2, page_tokens=4)
        prefiller = Prefiller(pe, KvLayout(2, 2, 16, HEAD_BYTES), config)
        self.addCleanup(prefiller.close)
        route = ShardRoute(0, 0, 0, 0, 2)
        decoder = Decoder(
            de, KvLayout(2, 2, 16, HEAD_BYTES), config, RoundRobinScheduler([[(prefiller.address, route)]])
        )
        self.addCleanup(decoder.close)
        ticket = decoder.dispatch(1, 40)
        assert ticket.wait(20) and ticket.on_decode.ok
        assert decoder.verify(ticket) == []
        decoder.finish(1)

    def test_decode_waits_for_every_layer(self):
        trace = Trace("kv")
        pe = make_socket_engine(1, trace=trace, name="prefill")
        de = make_socket_engine(1, trace=trace, name="decode")
        self.addCleanup(close_all, [pe, de])
        page_bytes = 64 * KiB
        config = KvConfig(layers=8, chunk_pages=2, page_tokens=16)
        layout = KvLayout(8, 1, 8, page_bytes)
        prefiller = Prefiller(pe, layout, config, trace)
        self.addCleanup(prefiller.close)
        route = ShardRoute(0, 0, 0, 0, 1)
        decoder = Decoder(de, layout, config, RoundRobinScheduler([[(prefiller.address, route)]]), trace)
        self.addCleanup(decoder.close)
        ticket = decoder.dispatch(1, 8 * 16)
        assert ticket.wait(60) and ticket.on_decode.ok, ticket.on_decode.error
        assert ticket.expected == 4 * 8 + 1
        assert decoder.verify(ticket) == []
        decoded = trace.first("kv_decode", rid=1)
        imms = trace.select("imm", imm=ticket.imm)
        assert len(imms) == ticket.expected
        assert all(e["t"] <= decoded["t"] for e in imms)
        layers = trace.select("kv_layer", rid=1)
        assert len(layers) == 4 * 8
        assert layers[-1]["t"] <= decoded["t"]
        decoder.finish(1)


def suite():
    test_suite = unittest.TestSuite()
    return test_suite

if __name__ == "__main__":
    unittest.main()
