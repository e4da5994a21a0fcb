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
Datagram socket rail.

Reliability comes from per fragment acks, selective retransmission after a
fixed timeout and receiver side deduplication by (sender, wr sequence).
Nothing is ordered: fragments land wherever their header says. The byte
layout of every datagram is in docs/wire.md.
"""

import collections
import dataclasses
import errno
import logging
import socket
import struct
import time

import numpy as np

from XferEngine.Common import (
    RETRANSMIT_TIMEOUT,
    SOCKET_PAYLOAD,
    SOCKET_WINDOW,
    BoundsError,
    RegistrationError,
    WireFormatError,
)
from XferEngine.base import BaseDomain, CompletionEvent
from XferEngine.core import NetAddr
from XferEngine.trace import NullTrace
from XferEngine.types_lut import EventKind, NackReason, PacketKind, WrKind, nack_lut

logger = logging.getLogger(__name__)

MAGIC = 0x58464552
# after the sender address: wr seq, transfer id, dst offset, rkey,
# frag index, frag count, imm present, imm
_FIXED = struct.Struct("<QQQQIIBI")
_LEAD = struct.Struct("<IB")


@dataclasses.dataclass
class Header(object):
    kind: PacketKind
    sender: NetAddr
    seq: int = 0
    transfer_id: int = 0
    dst_offset: int = 0
    rkey: int = 0
    index: int = 0
    count: int = 1
    imm: object = None

    def encode(self, payload=b""):
        return b"".join(
            (
                _LEAD.pack(MAGIC, self.kind),
                self.sender.encode(),
                _FIXED.pack(
                    self.seq,
                    self.transfer_id,
                    self.dst_offset,
                    self.rkey,
                    self.index,
                    self.count,
                    0 if self.imm is None else 1,
                    0 if self.imm is None else self.imm,
                ),
                payload,
            )
        )


def decode_datagram(data):
    """:return: (Header, payload memoryview)"""
    if len(data) < _LEAD.size:
        raise WireFormatError("datagram of %d bytes is too short" % len(data))
    magic, kind = _LEAD.unpack_from(data)
    if magic != MAGIC:
        raise WireFormatError("bad magic %#x" % magic)
    try:
        kind = PacketKind(kind)
    except ValueError:
        raise WireFormatError("unknown packet kind %d" % kind)
    sender, offset = NetAddr.read(data, _LEAD.size)
    if len(data) < offset + _FIXED.size:
        raise WireFormatError("truncated header")
    seq, tid, dst_offset, rkey, index, count, has_imm, imm = _FIXED.unpack_from(data, offset)
    if has_imm not in (0, 1):
        raise WireFormatError("bad immediate flag %d" % has_imm)
    header = Header(
        kind, sender, seq, tid, dst_offset, rkey, index, count, imm if has_imm else None
    )
    return header, memoryview(data)[offset + _FIXED.size :]


class _Outgoing(object):
    """a posted WR waiting for the acks of all its fragments"""

    __slots__ = ("wr", "seq", "dest", "count", "unsent", "unacked", "sent_at", "retries")

    def __init__(self, wr, seq, dest, count):
        self.wr = wr
        self.seq = seq
        self.dest = dest
        self.count = count
        self.unsent = list(range(count - 1, -1, -1))
        self.unacked = set(range(count))
        self.sent_at = {}
        self.retries = 0


class ReceiveFlow(object):
    """receiver side dedup state for one sender"""

    __slots__ = ("floor", "done", "partial", "nacked")

    def __init__(self):
        self.floor = 0
        self.done = set()
        self.partial = {}
        # seq -> (reason, when)
        self.nacked = {}

    def is_done(self, seq):
        return seq <= self.floor or seq in self.done

    def mark_done(self, seq):
        self.done.add(seq)
        while self.floor + 1 in self.done:
            self.floor += 1
            self.done.discard(self.floor)

    def nack(self, seq, reason, now):
        self.partial.pop(seq, None)
        self.nacked[seq] = (reason, now)
        self.mark_done(seq)

    def ack_floor(self):
        """every seq up to the returned one landed; a NACKed seq caps it"""
        if self.nacked:
            return min(self.floor, min(self.nacked) - 1)
        return self.floor

    def prune(self, now, horizon):
        """forgets NACKs older than `horizon`, by then their sender has given up"""
        for seq in [s for s, (_, when) in self.nacked.items() if now - when > horizon]:
            del self.nacked[seq]


class SocketDomain(BaseDomain):
    """
    one UDP socket

    `drop_rate` and `duplicate_rate` lose or repeat outgoing datagrams to
    exercise retransmission
    """

    def __init__(
        self,
        host="127.0.0.1",
        port=0,
        payload=SOCKET_PAYLOAD,
        window=SOCKET_WINDOW,
        timeout=RETRANSMIT_TIMEOUT,
        max_retries=200,
        drop_rate=0.0,
        duplicate_rate=0.0,
        seed=0,
        trace=None,
        **kwargs
    ):
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        for option in (socket.SO_RCVBUF, socket.SO_SNDBUF):
            try:
                self.sock.setsockopt(socket.SOL_SOCKET, option, 8 * 1024 * 1024)
            except OSError:
                pass
        self.sock.bind((host, port))
        self.sock.setblocking(False)
        host, port = self.sock.getsockname()
        self._addr = NetAddr.inet(host, port)
        super(SocketDomain, self).__init__(name="udp:%s:%d" % (host, port), **kwargs)
        self.payload = payload
        self.window = window
        self.timeout = timeout
        self.max_retries = max_retries
        self.drop_rate = drop_rate
        self.duplicate_rate = duplicate_rate
        self.trace = trace if trace is not None else NullTrace()
        self._rng = np.random.default_rng(seed)
        self._next_seq = {}
        self._outgoing = {}
        self._queue = collections.deque()
        self._flows = {}
        # per peer, the receiver floor already retired
        self._retired = {}
        self._unacked_frags = 0
        self._next_prune = 0.0

    @property
    def addr(self):
        return self._addr

    # -----------------------------------------------------------------------
    # sender
    # -----------------------------------------------------------------------

    def _post(self, wr):
        seq = self._next_seq.get(wr.peer, 0) + 1
        self._next_seq[wr.peer] = seq
        if wr.kind == WrKind.WRITE and wr.length:
            count = -(-wr.length // self.payload)
        else:
            count = 1
        out = _Outgoing(wr, seq, wr.peer.as_inet(), count)
        self._outgoing[(wr.peer, seq)] = out
        self._queue.append(out)

    def _datagram(self, out, index):
        wr = out.wr
        if wr.kind == WrKind.SEND_MSG:
            header = Header(PacketKind.MSG, self._addr, out.seq, wr.transfer_id)
            return header.encode(wr.data)
        start = index * self.payload
        end = min(start + self.payload, wr.length)
        header = Header(
            PacketKind.DATA,
            self._addr,
            out.seq,
            wr.transfer_id,
            wr.dst_offset + start,
            wr.rkey,
            index,
            out.count,
            wr.imm,
        )
        return header.encode(wr.src[start:end].tobytes() if end > start else b"")

    def _sendto(self, data, dest):
        if self.drop_rate and self._rng.random() < self.drop_rate:
            return
        copies = 2 if self.duplicate_rate and self._rng.random() < self.duplicate_rate else 1
        for _ in range(copies):
            try:
                self.sock.sendto(data, dest)
            except OSError as err:
                if err.errno not in (errno.EAGAIN, errno.EWOULDBLOCK, errno.ENOBUFS):
                    raise
                # treated as a loss, the retransmit timer recovers it
                return

    def _transmit(self, now):
        while self._queue and self._unacked_frags < self.window:
            out = self._queue[0]
            if not out.unsent:
                self._queue.popleft()
                continue
            index = out.unsent.pop()
            out.sent_at[index] = now
            self._unacked_frags += 1
            self._sendto(self._datagram(out, index), out.dest)

    def _retransmit(self, now):
        for key, out in list(self._outgoing.items()):
            late = [i for i, at in out.sent_at.items() if now - at > self.timeout]
            if not late:
                continue
            out.retries += 1
            if out.retries > self.max_retries:
                self._fail(key, ConnectionError("no answer from %r" % (out.wr.peer,)))
                continue
            for index in late:
                out.sent_at[index] = now
                self.stats.add("retransmits")
                self._sendto(self._datagram(out, index), out.dest)
            logger.debug("%s: retransmitted %d fragment(s) of seq %d", self, len(late), out.seq)

    def _forget(self, key):
        out = self._outgoing.pop(key, None)
        if out is None:
            return None
        self._unacked_frags -= len(out.sent_at)
        out.unsent = []
        return out

    def _fail(self, key, error):
        out = self._forget(key)
        if out is None:
            return
        logger.warning("%s: seq %d to %r failed: %s", self, out.seq, out.wr.peer, error)
        self._complete(
            CompletionEvent(
                EventKind.SEND_DONE, transfer_id=out.wr.transfer_id, wr_id=out.wr.wr_id, error=error
            )
        )

    def _on_ack(self, header):
        key = (header.sender, header.seq)
        out = self._outgoing.get(key)
        if out is not None and header.index in out.unacked:
            out.unacked.discard(header.index)
            if out.sent_at.pop(header.index, None) is not None:
                self._unacked_frags -= 1
            if not out.unacked:
                self._forget(key)
                self._complete(
                    CompletionEvent(EventKind.SEND_DONE, transfer_id=out.wr.transfer_id, wr_id=out.wr.wr_id)
                )
        self._retire_through(header.sender, header.transfer_id)

    def _retire_through(self, peer, floor):
        """completes every WR to `peer` up to the floor the receiver reported, whatever acks were lost"""
        done = self._retired.get(peer, 0)
        if floor <= done:
            return
        for seq in range(done + 1, floor + 1):
            out = self._forget((peer, seq))
            if out is not None:
                self.stats.add("floor_retired")
                self._complete(
                    CompletionEvent(EventKind.SEND_DONE, transfer_id=out.wr.transfer_id, wr_id=out.wr.wr_id)
                )
        self._retired[peer] = floor

    def _on_nack(self, header):
        try:
            reason = NackReason(header.imm)
        except ValueError:
            reason = None
        if reason == NackReason.UNKNOWN_RKEY:
            error = RegistrationError("unknown rkey at %r" % (header.sender,))
        elif reason == NackReason.OUT_OF_BOUNDS:
            error = BoundsError("write outside the region at %r" % (header.sender,))
        elif reason == NackReason.MSG_TOO_LONG:
            error = BoundsError("message too long for the receive posted at %r" % (header.sender,))
        elif reason == NackReason.NO_RECV_POSTED:
            error = ConnectionError("%s at %r" % (nack_lut[reason], header.sender))
        else:
            error = ConnectionError("rejected by %r" % (header.sender,))
        self._fail((header.sender, header.seq), error)

    # -----------------------------------------------------------------------
    # receiver
    # -----------------------------------------------------------------------

    def _reply(self, kind, header, dest, reason=None):
        flow = self._flows.get(header.sender)
        reply = Header(
            kind,
            self._addr,
            header.seq,
            flow.ack_floor() if flow is not None else 0,
            index=header.index,
            count=header.count,
            imm=None if reason is None else int(reason),
        )
        self._sendto(reply.encode(), dest)

    def _on_data(self, header, payload, dest):
        flow = self._flows.setdefault(header.sender, ReceiveFlow())
        seq = header.seq
        if seq in flow.nacked:
            self._reply(PacketKind.NACK, header, dest, flow.nacked[seq][0])
            return
        if flow.is_done(seq):
            self._reply(PacketKind.ACK, header, dest)
            return
        if header.kind == PacketKind.MSG:
            error = self.accept_message(header.sender, bytes(payload))
            if error is not None:
                reason = NackReason.MSG_TOO_LONG if isinstance(error, BoundsError) else NackReason.NO_RECV_POSTED
                self._nack(flow, header, dest, reason)
                return
            flow.mark_done(seq)
            self.trace.record("msg", src=header.sender, dst=self._addr, length=len(payload))
            self._reply(PacketKind.ACK, header, dest)
            return

        region = self.lookup(header.rkey)
        if region is None:
            self._nack(flow, header, dest, NackReason.UNKNOWN_RKEY)
            return
        end = header.dst_offset + len(payload)
        if end > len(region):
            self._nack(flow, header, dest, NackReason.OUT_OF_BOUNDS)
            return
        landed = flow.partial.get(seq)
        if landed is None:
            landed = flow.partial[seq] = set()
        if header.index not in landed:
            if len(payload):
                region[header.dst_offset : end] = np.frombuffer(payload, dtype=np.uint8)
            landed.add(header.index)
        self._reply(PacketKind.ACK, header, dest)
        if len(landed) < header.count:
            return
        del flow.partial[seq]
        flow.mark_done(seq)
        self.trace.record(
            "write",
            src=header.sender,
            dst=self._addr,
            rkey=header.rkey,
            offset=header.dst_offset,
            imm=header.imm,
            tid=header.transfer_id,
        )
        if header.imm is not None:
            self.trace.record("imm", src=header.sender, dst=self._addr, imm=header.imm, tid=header.transfer_id)
            self._complete(CompletionEvent(EventKind.IMM_RECEIVED, imm=header.imm, sender=header.sender))

    def _nack(self, flow, header, dest, reason):
        logger.warning("%s: rejecting seq %d from %r: %s", self, header.seq, header.sender, nack_lut[reason])
        flow.nack(header.seq, reason, time.monotonic())
        self._reply(PacketKind.NACK, header, dest, reason)

    def _receive(self, budget=512):
        for _ in range(budget):
            try:
                data, dest = self.sock.recvfrom(65535)
            except (BlockingIOError, InterruptedError):
                return
            except OSError as err:
                if err.errno in (errno.EAGAIN, errno.EWOULDBLOCK):
                    return
                # ICMP unreachable surfaces here on some platforms
                logger.debug("%s: recvfrom failed: %s", self, err)
                continue
            try:
                header, payload = decode_datagram(data)
            except WireFormatError as err:
                logger.warning("%s: dropping datagram from %s: %s", self, dest, err)
                continue
            if header.kind == PacketKind.ACK:
                self._on_ack(header)
            elif header.kind == PacketKind.NACK:
                self._on_nack(header)
            else:
                self._on_data(header, payload, dest)

    def _progress(self):
        if self.closed:
            return
        self._receive()
        now = time.monotonic()
        self._transmit(now)
        self._retransmit(now)
        if now >= self._next_prune:
            self._next_prune = now + 1.0
            # twice the longest a sender keeps retransmitting one WR
            horizon = 2 * (self.max_retries + 1) * self.timeout
            for flow in self._flows.values():
                flow.prune(now, horizon)

    def close(self):
        super(SocketDomain, self).close()
        self.sock.close()
