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
Please note the following;
a Domain is one rail. It is owned by exactly one worker thread, which is
the only caller of post() and poll(). The "hardware" side (the simulated
fabric thread, or the socket receive path) only ever touches a domain
through register/lookup and _complete(), which are lock protected.

Sometimes a set of methods is grouped in a helper object. For instance the
counters of a rail live in:
#===========================================================================
#    DomainStats
#===========================================================================
"""

import collections
import dataclasses
import itertools
import logging
import threading
from typing import Optional

import numpy as np

from XferEngine.Common import (
    MAX_WR_SIZE,
    SEND_QUEUE_DEPTH,
    BoundsError,
    RegistrationError,
)
from XferEngine.core import NetAddr, as_bytes_view
from XferEngine.types_lut import EventKind, WrKind

logger = logging.getLogger(__name__)


# ===========================================================================
# WORK REQUESTS AND COMPLETIONS
# ===========================================================================


@dataclasses.dataclass
class WorkRequest(object):
    """
    one transport level operation

    `src` is a uint8 view of the local source bytes (region id and offset
    kept for tracing); `rkey`/`dst_offset` address the remote region
    """

    kind: WrKind
    peer: NetAddr
    transfer_id: int = 0
    wr_id: int = 0
    region_id: int = 0
    src_offset: int = 0
    length: int = 0
    src: Optional[np.ndarray] = None
    remote_base: int = 0
    rkey: Optional[int] = None
    dst_offset: int = 0
    imm: Optional[int] = None
    data: bytes = b""
    fence: bool = False

    def check(self, max_wr_size=MAX_WR_SIZE):
        if self.length > max_wr_size:
            raise BoundsError(
                "work request of %d bytes exceeds %d" % (self.length, max_wr_size)
            )
        if self.kind == WrKind.WRITE:
            if self.rkey is None:
                raise ValueError("write without a destination descriptor")
            if self.length == 0 and self.imm is None:
                raise ValueError("zero length write needs an immediate")
            if self.length and (self.src is None or len(self.src) != self.length):
                raise ValueError("write source does not match its length")
        elif self.kind == WrKind.SEND_MSG:
            if len(self.data) > max_wr_size:
                raise BoundsError("message exceeds %d bytes" % max_wr_size)


@dataclasses.dataclass
class CompletionEvent(object):
    kind: EventKind
    transfer_id: int = 0
    wr_id: int = 0
    wr_count: int = 1
    imm: Optional[int] = None
    buffer: object = None
    sender: Optional[NetAddr] = None
    slot: object = None
    error: Optional[Exception] = None


# ===========================================================================
#    DomainStats
# ===========================================================================


class DomainStats(object):
    """per rail counters, read by Engine.stats()"""

    FIELDS = (
        "wrs_posted",
        "bytes_posted",
        "backpressure",
        "send_done",
        "imm_received",
        "msgs_received",
        "errors",
        "retransmits",
        "floor_retired",
    )

    def __init__(self, domain):
        self.domain = domain
        self._lock = threading.Lock()
        self._values = dict.fromkeys(self.FIELDS, 0)

    def add(self, name, amount=1):
        with self._lock:
            self._values[name] += amount

    def __getitem__(self, name):
        return self._values[name]

    def as_dict(self):
        with self._lock:
            return dict(self._values)


# ===========================================================================
# base class
# ===========================================================================


class _Region(object):
    __slots__ = ("buffer", "valid")

    def __init__(self, buffer):
        self.buffer = buffer
        self.valid = True


class _RecvSlot(object):
    """one posted receive buffer"""

    __slots__ = ("buffer", "token")

    def __init__(self, buffer, token):
        self.buffer = buffer
        self.token = token


class BaseDomain(object):
    """base class for all rails"""

    _rkey_base = itertools.count(1)

    def __init__(self, name=None, max_wr_size=MAX_WR_SIZE, queue_depth=SEND_QUEUE_DEPTH):
        self.name = name
        self.max_wr_size = max_wr_size
        self.queue_depth = queue_depth
        self.stats = DomainStats(self)
        self.closed = False
        self._regions = {}
        self._regions_lock = threading.Lock()
        self._rkeys = itertools.count((next(self._rkey_base) << 32) | 1)
        self._cq = collections.deque()
        self._cq_lock = threading.Lock()
        self._recv_slots = collections.deque()
        self._recv_lock = threading.Lock()
        self._in_flight = 0
        self._wr_ids = itertools.count(1)
        self._notify = None

    @property
    def addr(self):
        raise NotImplementedError

    def set_notify(self, notify):
        """`notify()` is called whenever an event lands in the completion queue"""
        self._notify = notify

    # -----------------------------------------------------------------------
    # memory regions
    # -----------------------------------------------------------------------

    def register(self, buffer):
        """:return: rkey under which peers can write into `buffer`"""
        view = as_bytes_view(buffer)
        if not view.flags["WRITEABLE"]:
            raise RegistrationError("cannot register a read-only buffer")
        rkey = next(self._rkeys)
        with self._regions_lock:
            self._regions[rkey] = _Region(view)
        logger.debug("%s: registered %d bytes as rkey %#x", self, len(view), rkey)
        return rkey

    def deregister(self, rkey):
        with self._regions_lock:
            region = self._regions.pop(rkey, None)
        if region is None:
            raise RegistrationError("rkey %#x is not registered on %s" % (rkey, self))
        region.valid = False

    def lookup(self, rkey):
        """:return: the uint8 view registered under `rkey` or None"""
        with self._regions_lock:
            region = self._regions.get(rkey)
        if region is None or not region.valid:
            return None
        return region.buffer

    # -----------------------------------------------------------------------
    # data path
    # -----------------------------------------------------------------------

    def post(self, wr):
        """
        :return: True when accepted, False on backpressure (retry later)
        """
        if self.closed:
            raise ConnectionError("%s is closed" % self)
        if wr.kind == WrKind.RECV_POST:
            self.post_recv(wr.src, wr.data)
            return True
        wr.check(self.max_wr_size)
        if self._in_flight >= self.queue_depth:
            self.stats.add("backpressure")
            return False
        if not wr.wr_id:
            wr.wr_id = next(self._wr_ids)
        self._in_flight += 1
        self.stats.add("wrs_posted")
        self.stats.add("bytes_posted", wr.length)
        self._post(wr)
        return True

    def _post(self, wr):
        raise NotImplementedError

    def poll(self, max_events=64):
        self._progress()
        out = []
        with self._cq_lock:
            while self._cq and len(out) < max_events:
                out.append(self._cq.popleft())
        for event in out:
            if event.kind == EventKind.SEND_DONE:
                self._in_flight -= 1
        return out

    def _progress(self):
        """hook for rails that do protocol work on the polling thread"""

    def _complete(self, event):
        if event.error is not None:
            self.stats.add("errors")
        elif event.kind == EventKind.SEND_DONE:
            self.stats.add("send_done")
        elif event.kind == EventKind.IMM_RECEIVED:
            self.stats.add("imm_received")
        elif event.kind == EventKind.MSG_RECEIVED:
            self.stats.add("msgs_received")
        with self._cq_lock:
            self._cq.append(event)
        notify = self._notify
        if notify is not None:
            notify()

    # -----------------------------------------------------------------------
    # messaging channel
    # -----------------------------------------------------------------------

    def post_recv(self, buffer, token=None):
        with self._recv_lock:
            self._recv_slots.append(_RecvSlot(buffer, token))

    @property
    def posted_recvs(self):
        with self._recv_lock:
            return len(self._recv_slots)

    def accept_message(self, sender, data):
        """
        consumes one posted receive for an incoming message

        :return: None on success, else the error the sender gets
        """
        with self._recv_lock:
            if not self._recv_slots:
                return ConnectionError("%s has no receive posted" % self)
            if len(data) > len(self._recv_slots[0].buffer):
                return BoundsError(
                    "message of %d bytes exceeds the posted receive of %d"
                    % (len(data), len(self._recv_slots[0].buffer))
                )
            slot = self._recv_slots.popleft()
        slot.buffer[: len(data)] = np.frombuffer(data, dtype=np.uint8)
        self._complete(
            CompletionEvent(
                EventKind.MSG_RECEIVED,
                buffer=memoryview(slot.buffer[: len(data)]),
                sender=sender,
                slot=slot.token,
            )
        )
        return None

    def close(self):
        self.closed = True

    def __repr__(self):
        return "<%s %s>" % (self.__class__.__name__, self.name or self.addr)
