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
In-process fabric: reliable, exactly-once and deliberately unordered.

Work requests are cut into MTU sized packets, optionally shuffled, delayed
and paced, and written straight into the destination region. The immediate
of a write surfaces on the receiver only once every fragment has landed.
"""

import dataclasses
import heapq
import itertools
import logging
import threading
import time
from typing import Tuple

import numpy as np

from XferEngine.Common import DEFAULT_MTU, KiB, BoundsError, RegistrationError
from XferEngine.base import BaseDomain, CompletionEvent
from XferEngine.core import NetAddr
from XferEngine.trace import NullTrace
from XferEngine.types_lut import EventKind, ReorderMode, WrKind, reorder_lut

logger = logging.getLogger(__name__)

# fabric configurations every invariant test runs under
FABRIC_MODES = ("none", "window", "reverse", "mtu")


@dataclasses.dataclass
class FaultConfig(object):
    """
    latency is uniform in latency_us; packets submitted within batch_us of
    each other are reordered together
    """

    latency_us: Tuple[float, float] = (0.0, 0.0)
    reorder: ReorderMode = ReorderMode.NONE
    window: int = 8
    mtu: int = DEFAULT_MTU
    seed: int = 0
    batch_us: float = 0.0
    # per rail line rate in bits per second
    rate_bps: float = 100e9
    pace: bool = False
    wr_overhead_us: float = 1.0
    frag_overhead_us: float = 0.05
    rtt_us: float = 10.0

    def __post_init__(self):
        if isinstance(self.reorder, str):
            self.reorder = reorder_lut[self.reorder]
        self.reorder = ReorderMode(self.reorder)
        low, high = self.latency_us
        if not 0 <= low <= high:
            raise ValueError("latency range %r is not ordered" % (self.latency_us,))
        if self.mtu <= 0:
            raise ValueError("mtu must be positive")
        if self.window < 1:
            raise ValueError("reorder window must be at least 1")
        if self.rate_bps <= 0:
            raise ValueError("rate must be positive")

    @classmethod
    def for_mode(cls, mode, seed=0, **overrides):
        if mode == "none":
            fault = cls(seed=seed)
        elif mode == "window":
            fault = cls(reorder=ReorderMode.WINDOW, window=16, batch_us=300, seed=seed)
        elif mode == "reverse":
            fault = cls(reorder=ReorderMode.REVERSE, batch_us=300, seed=seed)
        elif mode == "mtu":
            fault = cls(
                reorder=ReorderMode.WINDOW,
                window=64,
                mtu=4 * KiB,
                latency_us=(0.0, 200.0),
                batch_us=200,
                seed=seed,
            )
        else:
            raise ValueError("unknown fabric mode %r, expected one of %s" % (mode, FABRIC_MODES))
        return dataclasses.replace(fault, **overrides)


class Packet(object):
    __slots__ = ("sender", "wr", "index", "count", "offset", "length")

    def __init__(self, sender, wr, index, count, offset, length):
        self.sender = sender
        self.wr = wr
        self.index = index
        self.count = count
        self.offset = offset
        self.length = length


def fragment(wr, mtu=DEFAULT_MTU, sender=None):
    """
    cuts a write into ceil(len / mtu) packets; a zero length write is one
    empty packet
    """
    if wr.kind != WrKind.WRITE or wr.length == 0:
        return [Packet(sender, wr, 0, 1, 0, wr.length)]
    count = -(-wr.length // mtu)
    return [
        Packet(sender, wr, i, count, i * mtu, min(mtu, wr.length - i * mtu))
        for i in range(count)
    ]


class SimDomain(BaseDomain):
    def __init__(self, fabric, engine_id, rail, **kwargs):
        super(SimDomain, self).__init__(name="sim%d/%d" % (engine_id, rail), **kwargs)
        self.fabric = fabric
        self.engine_id = engine_id
        self.rail = rail
        self._addr = NetAddr.sim(engine_id, rail)

    @property
    def addr(self):
        return self._addr

    def _post(self, wr):
        self.fabric.submit(self, wr)


class SimFabric(object):
    """
    the "wire" shared by every SimDomain of a deployment

    one fabric thread moves packets; it plays the NIC on both ends
    """

    def __init__(self, fault=None, trace=None, name="fabric"):
        self.fault = fault if fault is not None else FaultConfig()
        self.trace = trace if trace is not None else NullTrace()
        self.name = name
        self._rng = np.random.default_rng(self.fault.seed)
        self._domains = {}
        self._dead = set()
        self._engine_ids = itertools.count()
        self._cond = threading.Condition()
        self._inbox = []
        self._heap = []
        self._seq = itertools.count()
        self._assembly = {}
        self._link_free = {}
        self._costs = {}
        self._fenced = set()
        self._cost_lock = threading.Lock()
        self._stopping = False
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    # -----------------------------------------------------------------------
    # topology
    # -----------------------------------------------------------------------

    def next_engine_id(self):
        return next(self._engine_ids)

    def create_domain(self, engine_id, rail, **kwargs):
        domain = SimDomain(self, engine_id, rail, **kwargs)
        with self._cond:
            if domain.addr in self._domains:
                raise ValueError("%r already exists on %s" % (domain.addr, self.name))
            self._domains[domain.addr] = domain
        return domain

    def domain(self, addr):
        return self._domains.get(addr)

    def close_engine(self, engine_id):
        """crash an engine: every later delivery to it fails, its own traffic is dropped"""
        logger.warning("%s: engine %d is gone", self.name, engine_id)
        with self._cond:
            self._dead.add(engine_id)

    def shutdown(self):
        with self._cond:
            self._stopping = True
            self._cond.notify()
        self._thread.join(timeout=2.0)

    # -----------------------------------------------------------------------
    # cost model
    # -----------------------------------------------------------------------

    def _account(self, domain, wr, fragments):
        fault = self.fault
        seconds = (
            fault.wr_overhead_us * 1e-6
            + fragments * fault.frag_overhead_us * 1e-6
            + wr.length * 8.0 / fault.rate_bps
        )
        key = (domain.engine_id, wr.transfer_id)
        with self._cost_lock:
            rails = self._costs.setdefault(key, {})
            rails[domain.rail] = rails.get(domain.rail, 0.0) + seconds
            if wr.fence:
                self._fenced.add(key)

    def transfer_cost(self, engine_id, transfer_id):
        """
        modelled duration of one operation in seconds: the busiest rail plus
        one round trip, two when the operation ended with a fence write
        """
        key = (engine_id, transfer_id)
        with self._cost_lock:
            rails = self._costs.get(key)
            if rails is None:
                return None
            trips = 2 if key in self._fenced else 1
            return max(rails.values()) + trips * self.fault.rtt_us * 1e-6

    # -----------------------------------------------------------------------
    # data path
    # -----------------------------------------------------------------------

    def submit(self, domain, wr):
        packets = fragment(wr, self.fault.mtu, sender=domain)
        self._account(domain, wr, len(packets))
        with self._cond:
            self._inbox.extend(packets)
            self._cond.notify()

    def _run(self):
        batch_s = self.fault.batch_us * 1e-6
        while True:
            with self._cond:
                while not self._stopping and not self._inbox:
                    if self._heap:
                        delay = self._heap[0][0] - time.monotonic()
                        if delay <= 0:
                            break
                        self._cond.wait(delay)
                    else:
                        self._cond.wait()
                if self._stopping:
                    return
                if self._inbox and batch_s:
                    deadline = time.monotonic() + batch_s
                    remaining = batch_s
                    while remaining > 0 and not self._stopping:
                        self._cond.wait(remaining)
                        remaining = deadline - time.monotonic()
                batch, self._inbox = self._inbox, []
            try:
                if batch:
                    self._schedule(batch)
                self._deliver_due()
            except Exception:
                logger.exception("%s: fabric thread failed", self.name)

    def _schedule(self, batch):
        fault = self.fault
        if fault.reorder == ReorderMode.WINDOW:
            shuffled = []
            for start in range(0, len(batch), fault.window):
                piece = batch[start : start + fault.window]
                shuffled.extend(piece[i] for i in self._rng.permutation(len(piece)))
            batch = shuffled
        elif fault.reorder == ReorderMode.REVERSE:
            batch.reverse()
        low, high = fault.latency_us
        for packet in batch:
            now = time.monotonic()
            at = now
            if high > 0:
                at += self._rng.uniform(low, high) * 1e-6
            if fault.pace:
                addr = packet.sender.addr
                start = max(self._link_free.get(addr, now), now)
                done = start + packet.length * 8.0 / fault.rate_bps
                self._link_free[addr] = done
                at = max(at, done)
            heapq.heappush(self._heap, (at, next(self._seq), packet))

    def _deliver_due(self):
        now = time.monotonic()
        while self._heap and self._heap[0][0] <= now:
            _, _, packet = heapq.heappop(self._heap)
            self._deliver(packet)

    def _fail(self, packet, error):
        wr = packet.wr
        logger.warning("%s: transfer %d to %r failed: %s", self.name, wr.transfer_id, wr.peer, error)
        self.trace.record("error", src=packet.sender.addr, dst=wr.peer, tid=wr.transfer_id, error=str(error))
        packet.sender._complete(
            CompletionEvent(
                EventKind.SEND_DONE,
                transfer_id=wr.transfer_id,
                wr_id=wr.wr_id,
                error=error,
            )
        )

    def _deliver(self, packet):
        wr = packet.wr
        sender = packet.sender
        if sender.engine_id in self._dead:
            return
        key = (sender.addr, wr.wr_id)
        seen, failed = self._assembly.get(key, (0, False))
        seen += 1
        if seen < packet.count:
            self._assembly[key] = (seen, failed)
        else:
            self._assembly.pop(key, None)
        if failed:
            return

        error = None
        dest = self._domains.get(wr.peer)
        if dest is None or dest.closed or dest.engine_id in self._dead:
            error = ConnectionError("no engine reachable at %r" % (wr.peer,))
        elif wr.kind == WrKind.SEND_MSG:
            error = dest.accept_message(sender.addr, wr.data)
            if error is None:
                self.trace.record("msg", src=sender.addr, dst=wr.peer, length=len(wr.data))
                sender._complete(
                    CompletionEvent(EventKind.SEND_DONE, transfer_id=wr.transfer_id, wr_id=wr.wr_id)
                )
        else:
            error = self._land(dest, packet)
        if error is not None:
            if seen < packet.count:
                self._assembly[key] = (seen, True)
            self._fail(packet, error)
            return
        if wr.kind != WrKind.WRITE or seen < packet.count:
            return

        self.trace.record(
            "write",
            src=sender.addr,
            dst=wr.peer,
            rkey=wr.rkey,
            offset=wr.dst_offset,
            length=wr.length,
            imm=wr.imm,
            tid=wr.transfer_id,
            fence=wr.fence,
        )
        if wr.imm is not None:
            self.trace.record("imm", src=sender.addr, dst=wr.peer, imm=wr.imm, tid=wr.transfer_id)
            dest._complete(CompletionEvent(EventKind.IMM_RECEIVED, imm=wr.imm, sender=sender.addr))
        sender._complete(CompletionEvent(EventKind.SEND_DONE, transfer_id=wr.transfer_id, wr_id=wr.wr_id))

    def _land(self, dest, packet):
        wr = packet.wr
        region = dest.lookup(wr.rkey)
        if region is None:
            return RegistrationError("unknown rkey %#x at %r" % (wr.rkey, wr.peer))
        start = wr.dst_offset + packet.offset
        end = start + packet.length
        if wr.dst_offset + wr.length > len(region):
            return BoundsError(
                "write [%d, %d) outside region of %d bytes"
                % (wr.dst_offset, wr.dst_offset + wr.length, len(region))
            )
        if packet.length:
            region[start:end] = wr.src[packet.offset : packet.offset + packet.length]
        if self.trace.enabled:
            self.trace.record(
                "frag",
                src=packet.sender.addr,
                dst=wr.peer,
                tid=wr.transfer_id,
                wr=wr.wr_id,
                index=packet.index,
                count=packet.count,
            )
        return None
