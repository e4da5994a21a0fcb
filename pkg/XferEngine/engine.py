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
The transfer engine.

The public API is callable from any thread. Every call is turned into work
requests and queued to the worker of the domain group owning the source
region; workers are single threaded loops that post, progress and poll.
Completions and user callbacks are handed to one callback thread per engine.

No ordering is promised between any two operations: every synchronisation
goes through the immediate counters (expect_imm_count).
"""

import collections
import dataclasses
import itertools
import logging
import os
import queue
import threading
import time
from typing import Callable, Optional, Tuple

import numpy as np

from XferEngine.Common import (
    COMMAND_QUEUE_DEPTH,
    MAX_WR_SIZE,
    SEND_QUEUE_DEPTH,
    SPLIT_THRESHOLD,
    WATCHER_BACKOFF,
    WATCHER_SPIN,
    BoundsError,
    RegistrationError,
    TransferError,
    check_u32,
)
from XferEngine.Iteration import RailRotation, shard_round_robin, split_even
from XferEngine.base import WorkRequest
from XferEngine.core import (
    MrDesc,
    MrHandle,
    NetAddr,
    as_bytes_view,
    as_ondone,
    buffer_address,
)
from XferEngine.counter import ImmCounterTable
from XferEngine.trace import NullTrace
from XferEngine.types_lut import EventKind, WrKind
from XferEngine.watcher import Watcher, WatcherPoller

logger = logging.getLogger(__name__)

_engine_ids = itertools.count(1)


@dataclasses.dataclass
class EngineConfig(object):
    split_threshold: int = SPLIT_THRESHOLD
    queue_depth: int = COMMAND_QUEUE_DEPTH
    send_queue_depth: int = SEND_QUEUE_DEPTH
    max_wr_size: int = MAX_WR_SIZE
    # seconds a worker sleeps when a loop iteration found nothing to do
    idle_wait: float = 0.0005
    poll_batch: int = 64
    watcher_spin: float = WATCHER_SPIN
    watcher_backoff: float = WATCHER_BACKOFF
    # called once on each worker thread with its DomainGroup; thread pinning goes here
    placement: Optional[Callable] = None

    @classmethod
    def from_env(cls, **overrides):
        values = {}
        for name, var, kind in (
            ("split_threshold", "XFER_SPLIT_THRESHOLD", int),
            ("queue_depth", "XFER_QUEUE_DEPTH", int),
            ("idle_wait", "XFER_IDLE_WAIT", float),
        ):
            raw = os.environ.get(var)
            if raw:
                try:
                    values[name] = kind(raw)
                except ValueError:
                    raise ValueError("%s=%r is not a valid %s" % (var, raw, kind.__name__))
        values.update(overrides)
        return cls(**values)


@dataclasses.dataclass(frozen=True)
class PeerGroupHandle(object):
    group_id: int
    addrs: Tuple[NetAddr, ...]

    def __len__(self):
        return len(self.addrs)


class RecvPool(object):
    """`count` receive buffers of `length` bytes, re-posted after each callback"""

    _n = itertools.count(1)

    def __init__(self, length, count, callback):
        self.id = next(self._n)
        self.length = length
        self.count = count
        self.callback = callback
        self.buffers = np.zeros((count, max(length, 1)), dtype=np.uint8)
        self.delivered = 0


# ===========================================================================
# CALLBACK THREAD
# ===========================================================================


class CallbackDispatcher(object):
    """the only thread that runs user callbacks for one engine"""

    def __init__(self, name="callbacks"):
        self._queue = queue.Queue()
        self.thread = threading.Thread(target=self._run, name=name, daemon=True)
        self.thread.start()

    def call(self, fn, *args):
        self._queue.put((fn, args))

    def settle(self, on_done, error=None):
        if on_done.settle(error):
            self.call(on_done.run_callback)

    def close(self, timeout=2.0):
        self._queue.put(None)
        if threading.current_thread() is not self.thread:
            self.thread.join(timeout)

    def _run(self):
        while True:
            item = self._queue.get()
            if item is None:
                return
            fn, args = item
            try:
                fn(*args)
            except Exception:
                logger.exception("callback %r raised", fn)


# ===========================================================================
# DOMAIN GROUP
# ===========================================================================


class _Transfer(object):
    """one API level operation, tracked until all its WRs complete"""

    __slots__ = ("tid", "on_done", "queued", "outstanding", "fence", "error", "posted")

    def __init__(self, tid, on_done, wrs, fence=None):
        self.tid = tid
        self.on_done = on_done
        self.queued = collections.deque(wrs)
        self.outstanding = 0
        self.fence = fence
        self.error = None
        self.posted = 0


class DomainGroup(object):
    """the rails serving one device, and the worker thread that owns them"""

    def __init__(self, engine, device, domains, config):
        assert 1 <= len(domains), "a domain group needs at least one rail"
        self.engine = engine
        self.device = device
        self.domains = list(domains)
        self.config = config
        self.inbox = queue.Queue(maxsize=config.queue_depth)
        self.pending = collections.OrderedDict()
        self.rotation = RailRotation(len(self.domains))
        self._wake = threading.Event()
        self._stop = False
        for domain in self.domains:
            domain.set_notify(self._wake.set)
        self.thread = threading.Thread(
            target=self._run, name="%s-worker-%s" % (engine.name, device), daemon=True
        )

    @property
    def num_rails(self):
        return len(self.domains)

    @property
    def addrs(self):
        return [domain.addr for domain in self.domains]

    def start(self):
        self.thread.start()

    def submit(self, command):
        # blocks the caller while the inbox is full
        self.inbox.put(command)
        self._wake.set()

    def stop(self, timeout=2.0):
        self._stop = True
        self._wake.set()
        if threading.current_thread() is not self.thread:
            self.thread.join(timeout)

    @property
    def idle(self):
        return not self.pending and not self.inbox.unfinished_tasks

    # -----------------------------------------------------------------------
    # worker loop
    # -----------------------------------------------------------------------

    def _run(self):
        if self.config.placement is not None:
            self.config.placement(self)
        trace = self.engine.trace
        logger.debug("%s: worker for device %s started", self.engine.name, self.device)
        while not self._stop:
            self._wake.clear()
            try:
                submitted = self._drain_commands()
                progressed = self._progress()
                polled = self._poll()
            except Exception:
                logger.exception("%s: worker loop failed", self.engine.name)
                continue
            if submitted or progressed or polled:
                if trace.enabled:
                    trace.record(
                        "loop",
                        engine=self.engine.id,
                        device=self.device,
                        submitted=submitted,
                        progressed=progressed,
                        polled=polled,
                    )
            else:
                self._wake.wait(self.config.idle_wait)
        logger.debug("%s: worker for device %s stopped", self.engine.name, self.device)

    def _drain_commands(self):
        count = 0
        while True:
            try:
                command = self.inbox.get_nowait()
            except queue.Empty:
                return count
            count += 1
            try:
                if isinstance(command, _Transfer):
                    self.pending[command.tid] = command
                    self._post(command, "submit")
                    self._maybe_finish(command)
                else:
                    command()
            finally:
                self.inbox.task_done()

    def _progress(self):
        count = 0
        for transfer in list(self.pending.values()):
            if transfer.queued:
                count += self._post(transfer, "progress")
            self._maybe_finish(transfer)
        return count

    def _poll(self):
        count = 0
        for domain in self.domains:
            for event in domain.poll(self.config.poll_batch):
                count += 1
                self._on_event(domain, event)
        return count

    def _post(self, transfer, phase):
        trace = self.engine.trace
        posted = 0
        while transfer.queued:
            rail, wr = transfer.queued[0]
            try:
                accepted = self.domains[rail].post(wr)
            except Exception as err:
                logger.error("%s: post of transfer %d failed: %s", self.engine.name, transfer.tid, err)
                transfer.queued.clear()
                transfer.error = transfer.error or err
                break
            if not accepted:
                break
            transfer.queued.popleft()
            transfer.outstanding += 1
            transfer.posted += 1
            posted += 1
            if trace.enabled:
                trace.record(
                    "post",
                    engine=self.engine.id,
                    tid=transfer.tid,
                    rail=rail,
                    phase=phase,
                    length=wr.length,
                    imm=wr.imm,
                )
        return posted

    def _on_event(self, domain, event):
        if event.kind == EventKind.SEND_DONE:
            transfer = self.pending.get(event.transfer_id)
            if transfer is None:
                logger.debug("completion for unknown transfer %d", event.transfer_id)
                return
            transfer.outstanding -= 1
            if event.error is not None:
                transfer.queued.clear()
                if transfer.error is None:
                    transfer.error = event.error
            self._maybe_finish(transfer)
        elif event.kind == EventKind.IMM_RECEIVED:
            self.engine._on_imm(event.imm)
        elif event.kind == EventKind.MSG_RECEIVED:
            self.engine._on_message(self, domain, event)

    def _maybe_finish(self, transfer):
        if transfer.queued or transfer.outstanding:
            return
        if transfer.fence is not None and transfer.error is None:
            transfer.queued.append(transfer.fence)
            transfer.fence = None
            self._post(transfer, "fence")
            return
        self.pending.pop(transfer.tid, None)
        self.engine._finish(transfer)


# ===========================================================================
# ENGINE
# ===========================================================================


class Engine(object):
    """
    :param groups: mapping device index -> list of rails (BaseDomain)
    """

    def __init__(self, groups, config=None, trace=None, name=None, engine_id=None):
        self.config = config if config is not None else EngineConfig()
        self.trace = trace if trace is not None else NullTrace()
        self.id = next(_engine_ids) if engine_id is None else engine_id
        self.name = name or "engine%d" % self.id
        if not groups:
            raise ValueError("an engine needs at least one domain group")
        rails = set(len(domains) for domains in groups.values())
        if len(rails) != 1:
            raise ValueError("every domain group must have the same number of rails")
        self.counter = ImmCounterTable()
        self.dispatcher = CallbackDispatcher(name="%s-callbacks" % self.name)
        self._groups = collections.OrderedDict()
        for device, domains in groups.items():
            self._groups[device] = DomainGroup(self, device, domains, self.config)
        self._regions = {}
        self._regions_lock = threading.Lock()
        self._region_ids = itertools.count(1)
        self._transfer_ids = itertools.count(1)
        self._peer_groups = {}
        self._peer_group_ids = itertools.count(1)
        self._pools = {}
        self._poller = None
        self._poller_lock = threading.Lock()
        self._counters = collections.Counter()
        self._counters_lock = threading.Lock()
        self.closed = False
        for group in self._groups.values():
            group.start()
        logger.info(
            "%s: started with %d group(s) of %d rail(s)", self.name, len(self._groups), self.num_rails
        )

    # -----------------------------------------------------------------------
    # discovery
    # -----------------------------------------------------------------------

    @property
    def num_rails(self):
        return next(iter(self._groups.values())).num_rails

    @property
    def devices(self):
        return list(self._groups)

    def group(self, device=None):
        if device is None:
            return next(iter(self._groups.values()))
        try:
            return self._groups[device]
        except KeyError:
            raise RegistrationError("unknown device %r on %s" % (device, self.name))

    def main_address(self):
        """NetAddr of the first rail, used for discovery and messaging"""
        return self.group().domains[0].addr

    def _count(self, name, amount=1):
        with self._counters_lock:
            self._counters[name] += amount

    def stats(self):
        out = collections.Counter()
        for group in self._groups.values():
            for domain in group.domains:
                out.update(domain.stats.as_dict())
        with self._counters_lock:
            out.update(self._counters)
        return dict(out)

    # -----------------------------------------------------------------------
    # memory regions
    # -----------------------------------------------------------------------

    def reg_mr(self, buffer, device=None):
        """
        registers a contiguous buffer on every rail of the device's group

        :return: (MrHandle, MrDesc)
        """
        self._check_open()
        group = self.group(device)
        view = as_bytes_view(buffer)
        base = buffer_address(view)
        length = len(view)
        with self._regions_lock:
            for handle in self._regions.values():
                if handle.device != group.device:
                    continue
                if base < handle.base + handle.length and handle.base < base + length:
                    raise RegistrationError(
                        "[%#x, %#x) overlaps region %d" % (base, base + length, handle.region_id)
                    )
            rkeys = tuple((domain.addr, domain.register(view)) for domain in group.domains)
            handle = MrHandle(
                next(self._region_ids), base, length, group.device, self.id, view, rkeys
            )
            self._regions[handle.region_id] = handle
        logger.debug("%s: region %d of %d bytes on device %s", self.name, handle.region_id, length, group.device)
        return handle, MrDesc(base, length, tuple(rkeys))

    def dereg_mr(self, handle):
        with self._regions_lock:
            if self._regions.pop(handle.region_id, None) is None:
                raise RegistrationError("region %d is not registered" % handle.region_id)
        group = self.group(handle.device)
        for domain, (_, rkey) in zip(group.domains, handle.rkeys):
            domain.deregister(rkey)

    def describe(self, handle):
        """:return: the MrDesc peers need to write into a live local region"""
        self._check_handle(handle)
        return MrDesc(handle.base, handle.length, handle.rkeys)

    def _check_handle(self, handle):
        if handle.engine_id != self.id or handle.region_id not in self._regions:
            raise RegistrationError("%r is not a live region of %s" % (handle, self.name))
        return self.group(handle.device)

    # -----------------------------------------------------------------------
    # building work requests
    # -----------------------------------------------------------------------

    def _check_open(self):
        if self.closed:
            raise TransferError("%s is closed" % self.name)

    def _new_transfer(self, on_done):
        on_done = as_ondone(on_done)
        on_done.transfer_id = next(self._transfer_ids)
        return on_done

    def _write(self, group, tid, rail, desc, handle, src_offset, length, dst_offset, imm=None, fence=False):
        peer, rkey = desc.rkeys[rail]
        return (
            rail,
            WorkRequest(
                WrKind.WRITE,
                peer,
                transfer_id=tid,
                region_id=handle.region_id,
                src_offset=src_offset,
                length=length,
                src=handle.buffer[src_offset : src_offset + length],
                remote_base=desc.base,
                rkey=rkey,
                dst_offset=dst_offset,
                imm=imm,
                fence=fence,
            ),
        )

    def _check_rails(self, group, desc):
        if desc.num_rails != group.num_rails:
            raise ValueError(
                "peer region has %d rails, local group has %d" % (desc.num_rails, group.num_rails)
            )

    def _enqueue(self, group, on_done, wrs, imm, fence_at):
        """
        an immediate rides on the only WR of a single WR operation; several
        WRs get it on a zero length fence write issued after all of them
        completed
        """
        tid = on_done.transfer_id
        fence = None
        if imm is not None:
            if len(wrs) == 1:
                wrs[0][1].imm = imm
            else:
                rail, desc, handle, dst_offset = fence_at
                fence = self._write(group, tid, rail, desc, handle, 0, 0, dst_offset, imm, fence=True)
        self._count("transfers")
        group.submit(_Transfer(tid, on_done, wrs, fence))
        return on_done

    def _finish(self, transfer):
        if transfer.error is not None:
            self._count("transfers_failed")
        self.dispatcher.settle(transfer.on_done, transfer.error)

    # -----------------------------------------------------------------------
    # one sided writes
    # -----------------------------------------------------------------------

    def submit_single_write(self, length, imm, src, dst, on_done=None):
        """
        :param src: (MrHandle, offset)
        :param dst: (MrDesc, offset)
        """
        self._check_open()
        handle, src_offset = src
        desc, dst_offset = dst
        group = self._check_handle(handle)
        self._check_rails(group, desc)
        if imm is not None:
            imm = check_u32(imm, "immediate")
        if length < 0 or src_offset < 0 or src_offset + length > handle.length:
            raise BoundsError(
                "source [%d, %d) outside region of %d bytes" % (src_offset, src_offset + length, handle.length)
            )
        if dst_offset < 0 or dst_offset + length > desc.length:
            raise BoundsError(
                "destination [%d, %d) outside region of %d bytes" % (dst_offset, dst_offset + length, desc.length)
            )
        if length == 0 and imm is None:
            raise ValueError("a zero length write must carry an immediate")
        on_done = self._new_transfer(on_done)
        tid = on_done.transfer_id
        max_wr = self.config.max_wr_size
        first = group.rotation.next()
        if length > self.config.split_threshold and group.num_rails > 1:
            shards = split_even(length, group.num_rails, max_wr)
        else:
            shards = [[] for _ in range(group.num_rails)]
            shards[first] = split_even(length, 1, max_wr)[0] or [(0, 0)]
        wrs = []
        for rail, pieces in enumerate(shards):
            for offset, size in pieces:
                wrs.append(
                    self._write(group, tid, rail, desc, handle, src_offset + offset, size, dst_offset + offset)
                )
        return self._enqueue(group, on_done, wrs, imm, (first, desc, handle, dst_offset))

    def submit_paged_writes(self, page_len, imm, src, dst, on_done=None):
        """
        page i of the source lands on page i of the destination; pages are
        dealt round robin over the rails starting at a rotating rail

        :param src: (MrHandle, Pages)
        :param dst: (MrDesc, Pages)
        """
        self._check_open()
        handle, src_pages = src
        desc, dst_pages = dst
        group = self._check_handle(handle)
        self._check_rails(group, desc)
        if imm is not None:
            imm = check_u32(imm, "immediate")
        if len(src_pages) != len(dst_pages):
            raise ValueError("%d source pages for %d destination pages" % (len(src_pages), len(dst_pages)))
        if not len(src_pages) and imm is None:
            raise ValueError("no pages and no immediate")
        if page_len <= 0 or page_len > self.config.max_wr_size:
            raise BoundsError("page length %d out of range" % page_len)
        src_pages.check(page_len, handle.length, "source page")
        dst_pages.check(page_len, desc.length, "destination page")
        on_done = self._new_transfer(on_done)
        tid = on_done.transfer_id
        start = group.rotation.next()
        src_offsets = src_pages.byte_offsets()
        dst_offsets = dst_pages.byte_offsets()
        wrs = []
        for rail, items in enumerate(shard_round_robin(len(src_pages), group.num_rails, start)):
            for i in items:
                wrs.append(self._write(group, tid, rail, desc, handle, src_offsets[i], page_len, dst_offsets[i]))
        if not wrs:
            wrs.append(self._write(group, tid, start, desc, handle, 0, 0, dst_pages.offset, imm))
            imm = None
        fence_offset = dst_offsets[0] if dst_offsets else dst_pages.offset
        return self._enqueue(group, on_done, wrs, imm, (start, desc, handle, fence_offset))

    # -----------------------------------------------------------------------
    # peer groups
    # -----------------------------------------------------------------------

    def add_peer_group(self, addrs):
        addrs = tuple(addrs)
        if not addrs:
            raise ValueError("empty peer group")
        handle = PeerGroupHandle(next(self._peer_group_ids), addrs)
        self._peer_groups[handle.group_id] = handle
        return handle

    def _peer_group(self, handle):
        if self._peer_groups.get(handle.group_id) != handle:
            raise ValueError("unknown peer group %r" % (handle,))
        return handle

    def submit_scatter(self, handle, on_done, imm, src, dsts):
        """
        one write per peer from its slice of `src`; a zero length entry sends
        only the immediate

        :param src: MrHandle
        :param dsts: list of ScatterDst, one per group member
        """
        self._check_open()
        peers = self._peer_group(handle)
        if len(dsts) != len(peers):
            raise ValueError("%d destinations for a group of %d" % (len(dsts), len(peers)))
        group = self._check_handle(src)
        if imm is not None:
            imm = check_u32(imm, "immediate")
        for addr, dst in zip(peers.addrs, dsts):
            desc, offset = dst.dst
            self._check_rails(group, desc)
            if desc.main_address != addr:
                raise ValueError("destination %r is not group member %r" % (desc.main_address, addr))
            if dst.src < 0 or dst.src + dst.length > src.length:
                raise BoundsError("scatter source [%d, %d) outside region" % (dst.src, dst.src + dst.length))
            if offset < 0 or offset + dst.length > desc.length:
                raise BoundsError("scatter destination [%d, %d) outside region" % (offset, offset + dst.length))
        on_done = self._new_transfer(on_done)
        tid = on_done.transfer_id
        start = group.rotation.next()
        wrs = []
        for i, dst in enumerate(dsts):
            if dst.length == 0 and imm is None:
                continue
            desc, offset = dst.dst
            rail = (start + i) % group.num_rails
            wrs.append(self._write(group, tid, rail, desc, src, dst.src, dst.length, offset, imm))
        if not wrs:
            self._count("transfers")
            self.dispatcher.settle(on_done)
            return on_done
        self._count("transfers")
        group.submit(_Transfer(tid, on_done, wrs))
        return on_done

    def submit_barrier(self, handle, on_done, imm, dsts):
        """a zero length immediate-only write to every member; dsts are their MrDescs"""
        self._check_open()
        peers = self._peer_group(handle)
        if len(dsts) != len(peers):
            raise ValueError("%d destinations for a group of %d" % (len(dsts), len(peers)))
        imm = check_u32(imm, "immediate")
        group = self.group()
        on_done = self._new_transfer(on_done)
        tid = on_done.transfer_id
        start = group.rotation.next()
        wrs = []
        for i, (addr, desc) in enumerate(zip(peers.addrs, dsts)):
            self._check_rails(group, desc)
            if desc.main_address != addr:
                raise ValueError("destination %r is not group member %r" % (desc.main_address, addr))
            rail = (start + i) % group.num_rails
            peer, rkey = desc.rkeys[rail]
            wrs.append(
                (
                    rail,
                    WorkRequest(
                        WrKind.WRITE, peer, transfer_id=tid, remote_base=desc.base, rkey=rkey, imm=imm
                    ),
                )
            )
        self._count("transfers")
        group.submit(_Transfer(tid, on_done, wrs))
        return on_done

    # -----------------------------------------------------------------------
    # immediate counters
    # -----------------------------------------------------------------------

    def expect_imm_count(self, imm, count, on_done=None):
        """
        fires once `count` receipts of `imm` have arrived, counting receipts
        that arrived before arming; arming an armed immediate is rejected
        """
        on_done = as_ondone(on_done)
        ready = self.counter.expect(imm, count, on_done)
        if ready is not None:
            self._count("expectations_fired")
            self.dispatcher.settle(ready)
        return on_done

    def _on_imm(self, imm):
        for on_done in self.counter.increment(imm):
            self._count("expectations_fired")
            self.dispatcher.settle(on_done)

    # -----------------------------------------------------------------------
    # messaging, on the first rail only
    # -----------------------------------------------------------------------

    def submit_send(self, addr, msg, on_done=None):
        """msg is copied before returning"""
        self._check_open()
        group = self.group()
        data = bytes(msg)
        on_done = self._new_transfer(on_done)
        wr = WorkRequest(WrKind.SEND_MSG, addr, transfer_id=on_done.transfer_id, data=data)
        self._count("transfers")
        group.submit(_Transfer(on_done.transfer_id, on_done, [(0, wr)]))
        return on_done

    def submit_recvs(self, length, count, callback):
        """
        posts `count` buffers of `length` bytes; callback(view) receives a
        zero copy memoryview that is only valid until it returns
        """
        self._check_open()
        if count < 1:
            raise ValueError("need at least one receive buffer")
        pool = RecvPool(length, count, callback)
        self._pools[pool.id] = pool
        group = self.group()
        domain = group.domains[0]
        for index in range(count):
            group.submit(
                lambda index=index: domain.post_recv(pool.buffers[index, :length], (pool.id, index))
            )
        return pool

    def _on_message(self, group, domain, event):
        pool_id, index = event.slot
        pool = self._pools.get(pool_id)
        if pool is None:
            return
        self._count("messages")
        self.dispatcher.call(self._deliver_message, group, domain, pool, index, event)

    def _deliver_message(self, group, domain, pool, index, event):
        try:
            pool.callback(event.buffer)
        finally:
            pool.delivered += 1
            if not self.closed:
                group.submit(
                    lambda: domain.post_recv(pool.buffers[index, : pool.length], (pool.id, index))
                )

    # -----------------------------------------------------------------------
    # watchers
    # -----------------------------------------------------------------------

    def alloc_uvm_watcher(self, callback):
        """callback(old, new) runs on the callback thread"""
        with self._poller_lock:
            if self._poller is None:
                self._poller = WatcherPoller(
                    self.dispatcher.call,
                    spin=self.config.watcher_spin,
                    backoff=self.config.watcher_backoff,
                    name="%s-watcher" % self.name,
                )
        return self._poller.add(Watcher(callback))

    def free_watcher(self, watcher):
        if self._poller is not None:
            self._poller.remove(watcher)

    # -----------------------------------------------------------------------
    # shutdown
    # -----------------------------------------------------------------------

    def wait_idle(self, timeout=5.0):
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if all(group.idle for group in self._groups.values()):
                return True
            time.sleep(0.001)
        return False

    def close(self, timeout=5.0):
        """
        drain then close: outstanding operations get `timeout` seconds to
        complete, later submissions are rejected
        """
        if self.closed:
            return
        drained = self.wait_idle(timeout)
        self.closed = True
        if not drained:
            logger.warning("%s: closing with operations in flight", self.name)
        for group in self._groups.values():
            group.stop()
            for transfer in list(group.pending.values()):
                self.dispatcher.settle(transfer.on_done, TransferError("engine closed"))
            for domain in group.domains:
                domain.close()
        if self._poller is not None:
            self._poller.close()
        self.dispatcher.close()
        logger.info("%s: closed", self.name)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()

    def __repr__(self):
        return "<Engine %s rails=%d>" % (self.name, self.num_rails)
