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
Prefill to decode KV cache transfer.

The decoder allocates pages and an immediate, arms an expectation for every
write it is owed and sends a REQUEST to the prefiller rank(s) serving it.
The prefiller fills one (chunk, layer) at a time on a "device" thread that
bumps a watcher; each bump turns into one paged write carrying the
request's immediate, and the context follows the last chunk.

KV regions are laid out [layer][head][page][head_bytes], heads before
pages, so a head slice of one page is a run of `head_bytes` at a stride.
"""

import collections
import dataclasses
import itertools
import logging
import queue
import struct
import threading
import time
from typing import Optional, Tuple

import numpy as np

from XferEngine.Common import (
    HEARTBEAT_INTERVAL,
    HEARTBEAT_MISSES,
    IMM_RING_SIZE,
    KiB,
    ProtocolError,
    RequestCancelled,
    ScheduleError,
    WireFormatError,
)
from XferEngine.core import MrDesc, NetAddr, OnDone, Pages
from XferEngine.trace import NullTrace
from XferEngine.types_lut import KvMsgKind, KvState, kv_state_lut

logger = logging.getLogger(__name__)

CONTEXT_LAYER = 0xFFFF
# cancels remembered for requests that have not arrived yet
CANCEL_TOMBSTONES = 4096


# ===========================================================================
# CONFIGURATION AND LAYOUT
# ===========================================================================


@dataclasses.dataclass
class KvConfig(object):
    layers: int = 2
    page_tokens: int = 16
    # whole pages per prefill chunk
    chunk_pages: int = 4
    context_bytes: int = 256
    context_slots: int = 16
    heartbeat_interval: float = HEARTBEAT_INTERVAL
    heartbeat_misses: int = HEARTBEAT_MISSES
    # simulated device time per (chunk, layer)
    layer_time: float = 0.0
    recv_buffers: int = 32
    max_message: int = 16 * KiB

    def number_of_pages(self, tokens):
        return -(-tokens // self.page_tokens)

    def number_of_chunks(self, num_pages):
        return -(-num_pages // self.chunk_pages)

    def expected_count(self, num_pages, sources=1):
        """chunks x layers per source, plus the context write"""
        return self.number_of_chunks(num_pages) * self.layers * sources + 1

    @property
    def heartbeat_timeout(self):
        return self.heartbeat_interval * self.heartbeat_misses


@dataclasses.dataclass(frozen=True)
class KvLayout(object):
    layers: int
    heads: int
    pages: int
    head_bytes: int

    @property
    def region_bytes(self):
        return self.layers * self.heads * self.pages * self.head_bytes

    def index(self, layer, head, page):
        return (layer * self.heads + head) * self.pages + page

    def offset(self, layer, head, page):
        return self.index(layer, head, page) * self.head_bytes

    def slice_pages(self, layer, first_head, num_heads, pages):
        """Pages addressing heads [first_head, first_head + num_heads) of `pages` in one layer"""
        indices = [
            self.index(layer, first_head + h, page) for h in range(num_heads) for page in pages
        ]
        return Pages(indices, self.head_bytes)


def kv_pattern(request_id, layer, head, page, nbytes):
    """deterministic stand-in for the KV bytes of one (layer, head, logical page)"""
    seed = (request_id * 1000003 + layer * 10007 + head * 101 + page * 7 + 1) & 0xFFFFFFFF
    x = np.arange(nbytes, dtype=np.uint32) * np.uint32(2654435761) + np.uint32(seed)
    return (x >> np.uint32(24)).astype(np.uint8)


def context_pattern(request_id, nbytes):
    return kv_pattern(request_id, CONTEXT_LAYER, 0, 0, nbytes)


# ===========================================================================
# SHARDING
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class ShardRoute(object):
    """heads [src_head, +num_heads) of a prefill rank land on [dst_head, +num_heads) of a decode rank"""

    prefill_rank: int
    decode_rank: int
    src_head: int
    dst_head: int
    num_heads: int


class ShardMap(object):
    """
    which prefill rank feeds which decode rank

    gqa slices heads by offset; mla replicates the whole (latent) cache on
    every rank so each decode rank is matched with exactly one prefill rank
    """

    def __init__(self, mode, heads, prefill_tp, decode_tp, routes):
        self.mode = mode
        self.heads = heads
        self.prefill_tp = prefill_tp
        self.decode_tp = decode_tp
        self.routes = tuple(routes)

    @classmethod
    def gqa(cls, heads, prefill_tp, decode_tp):
        for tp in (prefill_tp, decode_tp):
            if tp < 1 or heads % tp:
                raise ValueError("%d heads do not divide over tp %d" % (heads, tp))
        hp = heads // prefill_tp
        hd = heads // decode_tp
        routes = []
        for d in range(decode_tp):
            for p in range(prefill_tp):
                lo = max(p * hp, d * hd)
                hi = min((p + 1) * hp, (d + 1) * hd)
                if lo < hi:
                    routes.append(ShardRoute(p, d, lo - p * hp, lo - d * hd, hi - lo))
        return cls("gqa", heads, prefill_tp, decode_tp, routes)

    @classmethod
    def mla(cls, heads, prefill_tp, decode_tp, rng=None):
        """replicated layout, matched with match_replicas(rng)"""
        return cls("mla", heads, prefill_tp, decode_tp, ()).match_replicas(rng)

    def match_replicas(self, rng=None):
        """
        decode ranks are cut in replica sets of prefill_tp ranks; inside a set
        each prefill rank serves exactly one decode rank, in random order
        """
        if self.mode != "mla":
            raise ValueError("only replicated layouts are matched")
        if rng is None:
            rng = np.random.default_rng()
        routes = []
        perm = None
        for d in range(self.decode_tp):
            if d % self.prefill_tp == 0:
                perm = rng.permutation(self.prefill_tp)
            routes.append(ShardRoute(int(perm[d % self.prefill_tp]), d, 0, 0, self.heads))
        return ShardMap("mla", self.heads, self.prefill_tp, self.decode_tp, routes)

    def sources(self, decode_rank):
        return [r for r in self.routes if r.decode_rank == decode_rank]

    def local_heads(self, side, rank):
        if self.mode == "mla":
            return self.heads
        return self.heads // (self.prefill_tp if side == "prefill" else self.decode_tp)

    def head_offset(self, side, rank):
        if self.mode == "mla":
            return 0
        return rank * self.local_heads(side, rank)

    def __repr__(self):
        return "<ShardMap %s heads=%d %d->%d routes=%d>" % (
            self.mode,
            self.heads,
            self.prefill_tp,
            self.decode_tp,
            len(self.routes),
        )


# ===========================================================================
# ALLOCATORS AND SCHEDULING
# ===========================================================================


class PageAllocator(object):
    def __init__(self, capacity):
        self.capacity = capacity
        self._free = collections.deque(range(capacity))
        self._lock = threading.Lock()

    def alloc(self, count):
        with self._lock:
            if count > len(self._free):
                raise ProtocolError("%d pages requested, %d free" % (count, len(self._free)))
            return [self._free.popleft() for _ in range(count)]

    def free(self, pages):
        with self._lock:
            self._free.extend(pages)

    @property
    def available(self):
        with self._lock:
            return len(self._free)


class ImmAllocator(object):
    """hands out immediates from a ring, skipping the ones still in use"""

    def __init__(self, size=IMM_RING_SIZE, base=1):
        self.size = size
        self.base = base
        self._next = 0
        self._used = set()
        self._lock = threading.Lock()

    def alloc(self):
        with self._lock:
            if len(self._used) >= self.size:
                raise ProtocolError("all %d immediates in use" % self.size)
            while True:
                imm = self.base + self._next
                self._next = (self._next + 1) % self.size
                if imm not in self._used:
                    self._used.add(imm)
                    return imm

    def free(self, imm):
        with self._lock:
            self._used.discard(imm)

    def __len__(self):
        with self._lock:
            return len(self._used)


class RoundRobinScheduler(object):
    """
    stub of the global scheduler; an instance is the list of
    (prefiller address, ShardRoute) a decode rank pulls from
    """

    def __init__(self, instances=()):
        self.instances = [list(i) for i in instances]
        self._rr = itertools.count()
        self._lock = threading.Lock()

    def add(self, instance):
        with self._lock:
            self.instances.append(list(instance))

    def remove(self, addr):
        """drops every instance served by `addr`"""
        with self._lock:
            self.instances = [i for i in self.instances if all(a != addr for a, _ in i)]

    def next(self):
        with self._lock:
            if not self.instances:
                raise ScheduleError("no prefiller available")
            return self.instances[next(self._rr) % len(self.instances)]


# ===========================================================================
# MESSAGES
# ===========================================================================

_HEAD = struct.Struct("<BQ")
_REQUEST = struct.Struct("<IIIIIIIIIIIIIQIB")


@dataclasses.dataclass
class PrefillRequest(object):
    request_id: int
    tokens: int
    pages: Pages
    context: Tuple[MrDesc, int, int]
    imm: int
    expected: int
    kv: MrDesc
    reply: NetAddr
    route: ShardRoute
    dst_layout: KvLayout
    chunk_pages: int
    write_context: bool = True


@dataclasses.dataclass
class KvMessage(object):
    kind: KvMsgKind
    request_id: int
    addr: NetAddr
    request: Optional[PrefillRequest] = None


def encode_message(msg):
    parts = [_HEAD.pack(msg.kind, msg.request_id)]
    if msg.kind == KvMsgKind.REQUEST:
        req = msg.request
        ctx_desc, ctx_offset, ctx_len = req.context
        route = req.route
        parts.append(
            _REQUEST.pack(
                req.tokens,
                req.chunk_pages,
                req.imm,
                req.expected,
                route.prefill_rank,
                route.decode_rank,
                route.src_head,
                route.dst_head,
                route.num_heads,
                req.dst_layout.layers,
                req.dst_layout.heads,
                req.dst_layout.pages,
                req.dst_layout.head_bytes,
                ctx_offset,
                ctx_len,
                int(req.write_context),
            )
        )
        parts.append(req.reply.encode())
        parts.append(req.kv.encode())
        parts.append(ctx_desc.encode())
        parts.append(req.pages.encode())
    else:
        parts.append(msg.addr.encode())
    return b"".join(parts)


def decode_message(data):
    data = bytes(data)
    if len(data) < _HEAD.size:
        raise WireFormatError("kv message of %d bytes" % len(data))
    kind, request_id = _HEAD.unpack_from(data)
    try:
        kind = KvMsgKind(kind)
    except ValueError:
        raise WireFormatError("unknown kv message kind %d" % kind)
    offset = _HEAD.size
    if kind != KvMsgKind.REQUEST:
        addr, offset = NetAddr.read(data, offset)
        if offset != len(data):
            raise WireFormatError("%d trailing bytes" % (len(data) - offset))
        return KvMessage(kind, request_id, addr)
    if len(data) < offset + _REQUEST.size:
        raise WireFormatError("truncated kv request")
    fields = _REQUEST.unpack_from(data, offset)
    offset += _REQUEST.size
    (tokens, chunk_pages, imm, expected, p_rank, d_rank, src_head, dst_head, num_heads) = fields[:9]
    layout = KvLayout(*fields[9:13])
    ctx_offset, ctx_len, write_context = fields[13:]
    reply, offset = NetAddr.read(data, offset)
    kv, offset = MrDesc.read(data, offset)
    ctx_desc, offset = MrDesc.read(data, offset)
    pages, offset = Pages.read(data, offset)
    if offset != len(data):
        raise WireFormatError("%d trailing bytes" % (len(data) - offset))
    request = PrefillRequest(
        request_id,
        tokens,
        pages,
        (ctx_desc, ctx_offset, ctx_len),
        imm,
        expected,
        kv,
        reply,
        ShardRoute(p_rank, d_rank, src_head, dst_head, num_heads),
        layout,
        chunk_pages,
        bool(write_context),
    )
    return KvMessage(kind, request_id, reply, request)


# ===========================================================================
# PROTOCOL THREAD
# ===========================================================================


class _ProtocolNode(object):
    """
    owns one engine rank's request state machines

    engine callbacks never touch that state, they post events here
    """

    role = "node"

    def __init__(self, engine, layout, config, trace=None, name=None, head_offset=0):
        self.engine = engine
        self.layout = layout
        self.config = config
        self.trace = trace if trace is not None else NullTrace()
        self.name = name or "%s-%s" % (self.role, engine.name)
        self.head_offset = head_offset
        self.kv_buffer = np.zeros(max(layout.region_bytes, 1), dtype=np.uint8)
        self.kv_handle, self.kv_desc = engine.reg_mr(self.kv_buffer)
        self.context_buffer = np.zeros(config.context_slots * config.context_bytes, dtype=np.uint8)
        self.context_handle, self.context_desc = engine.reg_mr(self.context_buffer)
        self.pages = PageAllocator(layout.pages)
        self.context_slots = PageAllocator(config.context_slots)
        self._events = queue.Queue()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=self.name, daemon=True)
        self._thread.start()
        self._pool = engine.submit_recvs(config.max_message, config.recv_buffers, self._on_raw)
        # receive buffers must be posted before any peer learns our address
        engine.wait_idle(1.0)

    @property
    def address(self):
        return self.engine.main_address()

    def post(self, fn, *args):
        self._events.put((fn, args))

    def close(self):
        self._stop.set()
        self._events.put(None)
        if threading.current_thread() is not self._thread:
            self._thread.join(2.0)

    def _on_raw(self, view):
        try:
            msg = decode_message(view)
        except WireFormatError as err:
            logger.warning("%s: dropping malformed message: %s", self.name, err)
            return
        self.post(self._on_message, msg)

    def _send(self, addr, msg):
        def failed(error):
            logger.debug("%s: %s to %r failed: %s", self.name, msg.kind.name, addr, error)

        try:
            self.engine.submit_send(addr, encode_message(msg), OnDone(errback=failed))
        except Exception as err:
            failed(err)

    def _run(self):
        interval = self.config.heartbeat_interval
        next_tick = time.monotonic() + interval
        while not self._stop.is_set():
            try:
                item = self._events.get(timeout=max(0.0, next_tick - time.monotonic()))
            except queue.Empty:
                item = False
            if item is None:
                return
            if item:
                fn, args = item
                try:
                    fn(*args)
                except Exception:
                    logger.exception("%s: protocol event failed", self.name)
            now = time.monotonic()
            if now >= next_tick:
                next_tick = now + interval
                try:
                    self._tick(now)
                except Exception:
                    logger.exception("%s: tick failed", self.name)

    def _on_message(self, msg):
        raise NotImplementedError

    def _tick(self, now):
        pass


# ===========================================================================
# PREFILLER
# ===========================================================================


class _PrefillJob(object):
    def __init__(self, request, src_pages, context_slot, layers):
        self.request = request
        self.src_pages = src_pages
        self.context_slot = context_slot
        self.state = KvState.ACTIVE
        self.cancelled = threading.Event()
        self.watcher = None
        self.outstanding = 0
        self.issued = 0
        num_chunks = -(-len(src_pages) // request.chunk_pages)
        self.total_steps = num_chunks * layers
        self.issued_all = False
        self.error = None
        self.device_running = False
        self.released = False

    @property
    def key(self):
        return (self.request.reply, self.request.request_id)

    def chunk(self, c):
        cp = self.request.chunk_pages
        return range(c * cp, min((c + 1) * cp, len(self.src_pages)))


class Prefiller(_ProtocolNode):
    role = "prefiller"

    def __init__(self, engine, layout, config, trace=None, name=None, head_offset=0):
        self.jobs = {}
        self.completed = 0
        # (reply, request id) of cancels that overtook their request
        self.tombstones = collections.OrderedDict()
        super(Prefiller, self).__init__(engine, layout, config, trace, name, head_offset)

    def _on_message(self, msg):
        if msg.kind == KvMsgKind.REQUEST:
            self._start(msg.request)
        elif msg.kind == KvMsgKind.CANCEL:
            self._cancel(msg.addr, msg.request_id)
        else:
            logger.debug("%s: ignoring %s", self.name, msg.kind.name)

    def _reject(self, request, reason):
        logger.warning("%s: rejecting request %d: %s", self.name, request.request_id, reason)
        self._send(request.reply, KvMessage(KvMsgKind.CANCEL_CONFIRM, request.request_id, self.address))

    def _start(self, request):
        key = (request.reply, request.request_id)
        if key in self.jobs:
            logger.warning("%s: duplicate request %d", self.name, request.request_id)
            return
        if self.tombstones.pop(key, None) is not None:
            # already confirmed to the decoder, whose pages may be reused by now
            logger.info("%s: request %d was cancelled before it arrived", self.name, request.request_id)
            self.trace.record("kv_tombstone", node=self.name, rid=request.request_id)
            return
        if request.dst_layout.layers != self.layout.layers:
            return self._reject(request, "layer count mismatch")
        route = request.route
        if route.src_head + route.num_heads > self.layout.heads:
            return self._reject(request, "head slice outside local heads")
        if request.context[2] > self.config.context_bytes:
            return self._reject(request, "context too large")
        try:
            src_pages = self.pages.alloc(len(request.pages))
        except ProtocolError as err:
            return self._reject(request, str(err))
        slot = None
        if request.write_context:
            try:
                slot = self.context_slots.alloc(1)[0]
            except ProtocolError as err:
                self.pages.free(src_pages)
                return self._reject(request, str(err))
        job = _PrefillJob(request, src_pages, slot, self.layout.layers)
        self.jobs[key] = job
        logger.debug(
            "%s: request %d, %d pages, %d steps", self.name, request.request_id, len(src_pages), job.total_steps
        )
        if job.total_steps == 0:
            self._issue_context(job)
            self._maybe_finish(job)
            return
        job.watcher = self.engine.alloc_uvm_watcher(
            lambda old, new, job=job: self.post(self.on_layer, job, old, new)
        )
        job.device_running = True
        threading.Thread(
            target=self._device, args=(job,), name="%s-device" % self.name, daemon=True
        ).start()

    def _device(self, job):
        """fills each (chunk, layer) and publishes it through the watcher"""
        try:
            self._fill(job)
        finally:
            self.trace.record("kv_device_exit", node=self.name, rid=job.request.request_id)
            self.post(self._device_stopped, job)

    def _fill(self, job):
        request = job.request
        hb = self.layout.head_bytes
        for step in range(job.total_steps):
            c, layer = divmod(step, self.layout.layers)
            for k in job.chunk(c):
                if job.cancelled.is_set():
                    return
                for h in range(self.layout.heads):
                    start = self.layout.offset(layer, h, job.src_pages[k])
                    self.kv_buffer[start : start + hb] = kv_pattern(
                        request.request_id, layer, self.head_offset + h, k, hb
                    )
            if self.config.layer_time:
                time.sleep(self.config.layer_time)
            if job.cancelled.is_set():
                return
            job.watcher.increment()

    def _device_stopped(self, job):
        job.device_running = False
        if job.released:
            self._free_pages(job)

    def on_layer(self, job, old, new):
        """issues the transfers of every (chunk, layer) step in (old, new]"""
        if job.state != KvState.ACTIVE:
            return
        request = job.request
        route = request.route
        for step in range(old, min(new, job.total_steps)):
            c, layer = divmod(step, self.layout.layers)
            chunk = job.chunk(c)
            src = self.layout.slice_pages(layer, route.src_head, route.num_heads, [job.src_pages[k] for k in chunk])
            dst = request.dst_layout.slice_pages(
                layer, route.dst_head, route.num_heads, [request.pages.indices[k] for k in chunk]
            )
            job.outstanding += 1
            job.issued += 1
            self.trace.record("kv_layer", node=self.name, rid=request.request_id, chunk=c, layer=layer)
            try:
                self.engine.submit_paged_writes(
                    self.layout.head_bytes,
                    request.imm,
                    (self.kv_handle, src),
                    (request.kv, dst),
                    self._op_done(job),
                )
            except Exception as err:
                job.outstanding -= 1
                self._job_error(job, err)
                return
        if job.issued == job.total_steps and not job.issued_all:
            self._issue_context(job)
        self._maybe_finish(job)

    def _issue_context(self, job):
        request = job.request
        job.issued_all = True
        if not request.write_context:
            return
        desc, offset, length = request.context
        start = job.context_slot * self.config.context_bytes
        self.context_buffer[start : start + length] = context_pattern(request.request_id, length)
        job.outstanding += 1
        self.trace.record("kv_context", node=self.name, rid=request.request_id, length=length)
        try:
            self.engine.submit_single_write(
                length, request.imm, (self.context_handle, start), (desc, offset), self._op_done(job)
            )
        except Exception as err:
            job.outstanding -= 1
            self._job_error(job, err)

    def _op_done(self, job):
        return OnDone.with_callback(
            lambda: self.post(self._write_done, job, None),
            lambda error: self.post(self._write_done, job, error),
        )

    def _write_done(self, job, error):
        job.outstanding -= 1
        if error is not None:
            self._job_error(job, error)
        self._maybe_finish(job)

    def _job_error(self, job, error):
        if job.error is None:
            job.error = error
            logger.error("%s: request %d failed: %s", self.name, job.request.request_id, error)
        # nothing more is sent for a request whose decoder is unreachable
        job.cancelled.set()
        if job.state == KvState.ACTIVE:
            job.state = KvState.DONE
            job.issued_all = True

    def _cancel(self, reply, request_id):
        key = (reply, request_id)
        job = self.jobs.get(key)
        if job is None:
            # the request may still be in flight behind this cancel
            self.tombstones[key] = time.monotonic()
            self.tombstones.move_to_end(key)
            while len(self.tombstones) > CANCEL_TOMBSTONES:
                self.tombstones.popitem(last=False)
            self._confirm(reply, request_id)
            return
        logger.info("%s: cancelling request %d", self.name, request_id)
        job.cancelled.set()
        if job.state == KvState.ACTIVE or job.state == KvState.DONE:
            job.state = KvState.CANCEL_REQUESTED
        self._maybe_finish(job)

    def _confirm(self, reply, request_id):
        self.trace.record("kv_confirm", node=self.name, rid=request_id)
        self._send(reply, KvMessage(KvMsgKind.CANCEL_CONFIRM, request_id, self.address))

    def _maybe_finish(self, job):
        if job.outstanding:
            return
        if job.state == KvState.CANCEL_REQUESTED:
            job.state = KvState.CONFIRMED
            self._confirm(job.request.reply, job.request.request_id)
            self._release(job)
        elif job.issued_all:
            job.state = KvState.DONE
            self.completed += 1
            self._release(job)

    def _release(self, job):
        job.cancelled.set()
        if self.jobs.pop(job.key, None) is None:
            return
        job.released = True
        if job.watcher is not None:
            self.engine.free_watcher(job.watcher)
        if job.context_slot is not None:
            self.context_slots.free([job.context_slot])
        # source pages stay ours until the device thread has stopped writing them
        if not job.device_running:
            self._free_pages(job)

    def _free_pages(self, job):
        self.pages.free(job.src_pages)
        self.trace.record("kv_pages_free", node=self.name, rid=job.request.request_id)

    def _tick(self, now):
        # a request overtaken by its cancel lands well within a heartbeat timeout
        horizon = now - self.config.heartbeat_timeout
        while self.tombstones and next(iter(self.tombstones.values())) < horizon:
            self.tombstones.popitem(last=False)
        for reply in set(job.request.reply for job in self.jobs.values()):
            self._send(reply, KvMessage(KvMsgKind.HEARTBEAT, 0, self.address))


# ===========================================================================
# DECODER
# ===========================================================================


class DecodeTicket(object):
    """decoder side state of one request"""

    def __init__(self, request_id, tokens, pages, imm, expected, instance, context, context_slot):
        self.request_id = request_id
        self.tokens = tokens
        self.pages = pages
        self.imm = imm
        self.expected = expected
        self.instance = instance
        self.context = context
        self.context_slot = context_slot
        self.state = KvState.ACTIVE
        self.on_decode = OnDone.flag()
        self.dispatched_at = time.monotonic()
        self.pending_confirms = set()
        self.arrived = False
        self.released = False

    @property
    def sources(self):
        return [addr for addr, _ in self.instance]

    def wait(self, timeout=None):
        return self.on_decode.wait(timeout)

    def __repr__(self):
        return "<DecodeTicket %d %s>" % (self.request_id, kv_state_lut[self.state])


class Decoder(_ProtocolNode):
    role = "decoder"

    def __init__(self, engine, layout, config, scheduler, trace=None, name=None, head_offset=0):
        self.scheduler = scheduler
        self.imms = ImmAllocator()
        self.tickets = {}
        self._lock = threading.Lock()
        self._heard = {}
        super(Decoder, self).__init__(engine, layout, config, trace, name, head_offset)

    # -----------------------------------------------------------------------
    # user side
    # -----------------------------------------------------------------------

    def dispatch(self, request_id, tokens, context=None, context_len=None):
        """
        pre-allocates pages, arms the expectation, then sends the request

        :param context: optional (MrHandle, offset) receiving the context
        bytes, defaults to a slot of the decoder's own context region
        :return: DecodeTicket whose on_decode fires once every write landed
        """
        instance = self.scheduler.next()
        if context_len is None:
            context_len = self.config.context_bytes
        if context_len > self.config.context_bytes:
            raise ValueError("context of %d bytes exceeds %d" % (context_len, self.config.context_bytes))
        slot = None
        if context is not None:
            handle, offset = context
            desc = self.engine.describe(handle)
            if offset + context_len > handle.length:
                raise ValueError("context [%d, %d) outside region" % (offset, offset + context_len))
        else:
            slot = self.context_slots.alloc(1)[0]
            desc, offset = self.context_desc, slot * self.config.context_bytes
        num_pages = self.config.number_of_pages(tokens)
        try:
            pages = self.pages.alloc(num_pages)
        except ProtocolError:
            if slot is not None:
                self.context_slots.free([slot])
            raise
        imm = self.imms.alloc()
        expected = self.config.expected_count(num_pages, len(instance))
        ticket = DecodeTicket(request_id, tokens, pages, imm, expected, instance, (desc, offset, context_len), slot)
        with self._lock:
            if request_id in self.tickets:
                self.pages.free(pages)
                self.imms.free(imm)
                if slot is not None:
                    self.context_slots.free([slot])
                raise ValueError("request %d already in flight" % request_id)
            self.tickets[request_id] = ticket
        self.engine.expect_imm_count(
            imm, expected, OnDone.with_callback(lambda: self.post(self._arrived, ticket))
        )
        self.trace.record("kv_dispatch", node=self.name, rid=request_id, imm=imm, expected=expected)
        for i, (addr, route) in enumerate(instance):
            request = PrefillRequest(
                request_id,
                tokens,
                Pages(pages, 1),
                ticket.context,
                imm,
                expected,
                self.kv_desc,
                self.address,
                route,
                self.layout,
                self.config.chunk_pages,
                write_context=(i == 0),
            )
            self.engine.submit_send(
                addr,
                encode_message(KvMessage(KvMsgKind.REQUEST, request_id, self.address, request)),
                OnDone(errback=lambda error, ticket=ticket: self.post(self._unreachable, ticket, error)),
            )
        logger.debug("%s: request %d dispatched, expecting %d", self.name, request_id, expected)
        return ticket

    def cancel(self, request_id):
        ticket = self.tickets.get(request_id)
        if ticket is None:
            raise KeyError(request_id)
        self.post(self._cancel, ticket)
        return ticket

    def finish(self, request_id):
        """returns the pages of a decoded request to the pool"""
        with self._lock:
            ticket = self.tickets.pop(request_id, None)
        if ticket is None:
            raise KeyError(request_id)
        if ticket.state != KvState.DONE:
            raise ProtocolError("request %d is %s" % (request_id, kv_state_lut[ticket.state]))
        self._release(ticket)

    def page(self, ticket, layer, head, k):
        """bytes of logical page k of one local head"""
        start = self.layout.offset(layer, head, ticket.pages[k])
        return self.kv_buffer[start : start + self.layout.head_bytes]

    def context_bytes(self, ticket):
        desc, offset, length = ticket.context
        if ticket.context_slot is None:
            raise ValueError("context went to a caller supplied region")
        return self.context_buffer[offset : offset + length]

    def verify(self, ticket):
        """:return: list of (layer, head, page) whose bytes differ from the prefill pattern"""
        wrong = []
        for _, route in ticket.instance:
            for layer in range(self.layout.layers):
                for h in range(route.dst_head, route.dst_head + route.num_heads):
                    for k in range(len(ticket.pages)):
                        expected = kv_pattern(
                            ticket.request_id, layer, self.head_offset + h, k, self.layout.head_bytes
                        )
                        if not np.array_equal(self.page(ticket, layer, h, k), expected):
                            wrong.append((layer, h, k))
        if ticket.context_slot is not None:
            if not np.array_equal(
                self.context_bytes(ticket), context_pattern(ticket.request_id, ticket.context[2])
            ):
                wrong.append(("context", 0, 0))
        return wrong

    # -----------------------------------------------------------------------
    # protocol thread
    # -----------------------------------------------------------------------

    def _arrived(self, ticket):
        ticket.arrived = True
        if ticket.state != KvState.ACTIVE:
            return
        ticket.state = KvState.DONE
        self.trace.record("kv_decode", node=self.name, rid=ticket.request_id, imm=ticket.imm)
        ticket.on_decode.fire()

    def _cancel(self, ticket):
        if ticket.state != KvState.ACTIVE:
            return
        logger.info("%s: cancelling request %d", self.name, ticket.request_id)
        ticket.state = KvState.CANCEL_REQUESTED
        ticket.pending_confirms = set(ticket.sources)
        self.trace.record("kv_cancel", node=self.name, rid=ticket.request_id)
        for addr in ticket.sources:
            self._send(addr, KvMessage(KvMsgKind.CANCEL, ticket.request_id, self.address))

    def _on_message(self, msg):
        if msg.kind == KvMsgKind.HEARTBEAT:
            self._heard[msg.addr] = time.monotonic()
        elif msg.kind == KvMsgKind.CANCEL_CONFIRM:
            self._heard[msg.addr] = time.monotonic()
            ticket = self.tickets.get(msg.request_id)
            if ticket is None:
                return
            if ticket.state == KvState.ACTIVE:
                # turned down by one source, the others are cancelled too
                self._cancel(ticket)
            if ticket.state != KvState.CANCEL_REQUESTED:
                return
            ticket.pending_confirms.discard(msg.addr)
            if not ticket.pending_confirms:
                ticket.state = KvState.CONFIRMED
                self.trace.record("kv_confirmed", node=self.name, rid=ticket.request_id)
                self._drop(ticket, RequestCancelled("request %d cancelled" % ticket.request_id))
        else:
            logger.debug("%s: ignoring %s", self.name, msg.kind.name)

    def _unreachable(self, ticket, error):
        if ticket.state in (KvState.ACTIVE, KvState.CANCEL_REQUESTED):
            logger.warning("%s: request %d: prefiller unreachable: %s", self.name, ticket.request_id, error)
            ticket.state = KvState.TIMED_OUT
            self._drop(ticket, error)

    def _tick(self, now):
        timeout = self.config.heartbeat_timeout
        for ticket in list(self.tickets.values()):
            if ticket.state not in (KvState.ACTIVE, KvState.CANCEL_REQUESTED):
                continue
            for addr in ticket.sources:
                seen = max(ticket.dispatched_at, self._heard.get(addr, 0.0))
                if now - seen > timeout:
                    logger.warning(
                        "%s: request %d: no heartbeat from %r for %.0f ms",
                        self.name,
                        ticket.request_id,
                        addr,
                        (now - seen) * 1e3,
                    )
                    ticket.state = KvState.TIMED_OUT
                    self.trace.record("kv_timeout", node=self.name, rid=ticket.request_id)
                    self._drop(ticket, RequestCancelled("prefiller %r timed out" % (addr,)))
                    break

    def _drop(self, ticket, error):
        with self._lock:
            self.tickets.pop(ticket.request_id, None)
        self._release(ticket)
        ticket.on_decode.fire(error)

    def _release(self, ticket):
        if ticket.released:
            return
        ticket.released = True
        self.engine.counter.disarm(ticket.imm)
        self.engine.counter.retire(ticket.imm)
        self.imms.free(ticket.imm)
        self.pages.free(ticket.pages)
        if ticket.context_slot is not None:
            self.context_slots.free([ticket.context_slot])


# ===========================================================================
# DEPLOYMENT
# ===========================================================================


def deploy(prefill_engines, decode_engines, shard_map, config, pages, head_bytes, trace=None):
    """
    one Prefiller per prefill engine and one Decoder per decode engine,
    wired after `shard_map`

    :return: (prefillers, decoders)
    """
    assert len(prefill_engines) == shard_map.prefill_tp
    assert len(decode_engines) == shard_map.decode_tp
    prefillers = []
    for rank, engine in enumerate(prefill_engines):
        layout = KvLayout(config.layers, shard_map.local_heads("prefill", rank), pages, head_bytes)
        prefillers.append(
            Prefiller(
                engine,
                layout,
                config,
                trace,
                name="prefill%d" % rank,
                head_offset=shard_map.head_offset("prefill", rank),
            )
        )
    decoders = []
    for rank, engine in enumerate(decode_engines):
        instance = [(prefillers[r.prefill_rank].address, r) for r in shard_map.sources(rank)]
        layout = KvLayout(config.layers, shard_map.local_heads("decode", rank), pages, head_bytes)
        decoders.append(
            Decoder(
                engine,
                layout,
                config,
                RoundRobinScheduler([instance]),
                trace,
                name="decode%d" % rank,
                head_offset=shard_map.head_offset("decode", rank),
            )
        )
    return prefillers, decoders


def writes_after_confirm(trace, rid, sources):
    """write events from any rail in `sources` recorded after the cancellation of `rid` was confirmed"""
    confirmed = trace.first("kv_confirmed", rid=rid)
    if confirmed is None:
        return []
    sources = set(sources)
    return [
        event for event in trace.select("write") if event["t"] > confirmed["t"] and event["src"] in sources
    ]
