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
Data types shared by the rails, the engine and the protocols.

Everything that crosses a process boundary (NetAddr, MrDesc, Pages) has a
fixed little-endian, length-prefixed encoding; see docs/wire.md.
"""

import dataclasses
import logging
import socket
import struct
import threading
from typing import Optional, Tuple

import numpy as np

from XferEngine.Common import (
    NETADDR_MAX_LEN,
    BoundsError,
    RegistrationError,
    WireFormatError,
    check_u32,
    check_u64,
)

logger = logging.getLogger(__name__)

_U8 = struct.Struct("<B")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_SIM_ADDR = struct.Struct("<IB")
_DESC_HEAD = struct.Struct("<QQB")
_PAGES_HEAD = struct.Struct("<QQI")


def _take(data, offset, size):
    end = offset + size
    if end > len(data):
        raise WireFormatError(
            "truncated input: need %d bytes at offset %d, have %d"
            % (size, offset, len(data) - offset)
        )
    return bytes(data[offset:end]), end


# ===========================================================================
# NetAddr
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class NetAddr(object):
    """opaque address of one rail of one engine instance"""

    raw: bytes

    def __post_init__(self):
        if not isinstance(self.raw, (bytes, bytearray)):
            raise TypeError("NetAddr needs bytes, got a %s" % type(self.raw))
        if len(self.raw) > NETADDR_MAX_LEN:
            raise ValueError("NetAddr longer than %d bytes" % NETADDR_MAX_LEN)
        object.__setattr__(self, "raw", bytes(self.raw))

    @classmethod
    def sim(cls, engine_id, rail):
        return cls(_SIM_ADDR.pack(check_u32(engine_id, "engine id"), rail))

    def as_sim(self):
        """:return: (engine id, rail index) of a simulated fabric address"""
        if len(self.raw) != _SIM_ADDR.size:
            raise ValueError("%r is not a simulated fabric address" % self)
        return _SIM_ADDR.unpack(self.raw)

    @classmethod
    def inet(cls, ip, port):
        return cls(socket.inet_aton(ip) + struct.pack("<H", port))

    def as_inet(self):
        """:return: (ip, port) of a socket rail address"""
        if len(self.raw) != 6:
            raise ValueError("%r is not a socket address" % self)
        return socket.inet_ntoa(self.raw[:4]), struct.unpack("<H", self.raw[4:])[0]

    def encode(self):
        return _U8.pack(len(self.raw)) + self.raw

    @classmethod
    def read(cls, data, offset=0):
        """decodes one address at `offset`, returns (NetAddr, next offset)"""
        head, offset = _take(data, offset, 1)
        size = head[0]
        if size > NETADDR_MAX_LEN:
            raise WireFormatError("NetAddr length %d exceeds %d" % (size, NETADDR_MAX_LEN))
        raw, offset = _take(data, offset, size)
        return cls(raw), offset

    @classmethod
    def decode(cls, data):
        addr, offset = cls.read(data)
        _expect_end(data, offset)
        return addr

    def __repr__(self):
        if len(self.raw) == _SIM_ADDR.size:
            return "NetAddr(sim %d/%d)" % self.as_sim()
        if len(self.raw) == 6:
            return "NetAddr(%s:%d)" % self.as_inet()
        return "NetAddr(%s)" % self.raw.hex()


def _expect_end(data, offset):
    if offset != len(data):
        raise WireFormatError("%d trailing bytes" % (len(data) - offset))


# ===========================================================================
# Memory regions
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class MrDesc(object):
    """remote view of a registered region: one (NetAddr, rkey) per rail"""

    base: int
    length: int
    rkeys: Tuple[Tuple[NetAddr, int], ...]

    def __post_init__(self):
        check_u64(self.base, "base")
        check_u64(self.length, "length")
        rkeys = tuple((addr, check_u64(key, "rkey")) for addr, key in self.rkeys)
        if not rkeys:
            raise ValueError("MrDesc needs at least one rkey")
        if len(rkeys) > 255:
            raise ValueError("too many rails in MrDesc")
        if len(set(addr for addr, _ in rkeys)) != len(rkeys):
            raise ValueError("MrDesc rail addresses must be distinct")
        object.__setattr__(self, "rkeys", rkeys)

    @property
    def num_rails(self):
        return len(self.rkeys)

    @property
    def main_address(self):
        return self.rkeys[0][0]

    def rail(self, index):
        return self.rkeys[index]

    def encode(self):
        parts = [_DESC_HEAD.pack(self.base, self.length, len(self.rkeys))]
        for addr, key in self.rkeys:
            parts.append(addr.encode())
            parts.append(_U64.pack(key))
        return b"".join(parts)

    @classmethod
    def read(cls, data, offset=0):
        head, offset = _take(data, offset, _DESC_HEAD.size)
        base, length, count = _DESC_HEAD.unpack(head)
        rkeys = []
        for _ in range(count):
            addr, offset = NetAddr.read(data, offset)
            raw, offset = _take(data, offset, _U64.size)
            rkeys.append((addr, _U64.unpack(raw)[0]))
        try:
            return cls(base, length, tuple(rkeys)), offset
        except ValueError as err:
            raise WireFormatError(str(err))

    @classmethod
    def decode(cls, data):
        desc, offset = cls.read(data)
        _expect_end(data, offset)
        return desc


@dataclasses.dataclass(frozen=True)
class MrHandle(object):
    """local view of a registered region, only valid on the issuing engine"""

    region_id: int
    base: int
    length: int
    device: Optional[int]
    engine_id: int = 0
    buffer: np.ndarray = dataclasses.field(default=None, compare=False, repr=False)
    rkeys: Tuple[Tuple[NetAddr, int], ...] = dataclasses.field(default=(), compare=False, repr=False)

    def view(self, offset=0, length=None):
        if length is None:
            length = self.length - offset
        if offset < 0 or length < 0 or offset + length > self.length:
            raise BoundsError(
                "[%d, %d) outside local region of %d bytes"
                % (offset, offset + length, self.length)
            )
        return self.buffer[offset : offset + length]


def as_bytes_view(buffer):
    """flat uint8 view over a contiguous numpy array or writable buffer"""
    if not isinstance(buffer, np.ndarray):
        buffer = np.frombuffer(buffer, dtype=np.uint8)
    if not buffer.flags["C_CONTIGUOUS"]:
        raise RegistrationError("only contiguous buffers can be registered")
    return buffer.reshape(-1).view(np.uint8)


def buffer_address(buffer):
    return int(buffer.__array_interface__["data"][0])


# ===========================================================================
# Transfer descriptors
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class Pages(object):
    """page i lives at offset + indices[i] * stride"""

    indices: Tuple[int, ...]
    stride: int
    offset: int = 0

    def __post_init__(self):
        object.__setattr__(
            self, "indices", tuple(check_u32(i, "page index") for i in self.indices)
        )
        check_u64(self.stride, "stride")
        check_u64(self.offset, "offset")

    def __len__(self):
        return len(self.indices)

    def byte_offsets(self):
        return [self.offset + i * self.stride for i in self.indices]

    def check(self, page_len, region_len, what="page"):
        for i, start in zip(self.indices, self.byte_offsets()):
            if start + page_len > region_len:
                raise BoundsError(
                    "%s %d at [%d, %d) outside region of %d bytes"
                    % (what, i, start, start + page_len, region_len)
                )

    def encode(self):
        return _PAGES_HEAD.pack(self.stride, self.offset, len(self.indices)) + struct.pack(
            "<%dI" % len(self.indices), *self.indices
        )

    @classmethod
    def read(cls, data, offset=0):
        head, offset = _take(data, offset, _PAGES_HEAD.size)
        stride, page_offset, count = _PAGES_HEAD.unpack(head)
        raw, offset = _take(data, offset, 4 * count)
        return cls(struct.unpack("<%dI" % count, raw), stride, page_offset), offset


@dataclasses.dataclass(frozen=True)
class ScatterDst(object):
    length: int
    src: int
    dst: Tuple[MrDesc, int]


class ImmValue(int):
    """32-bit immediate value"""

    def __new__(cls, value):
        return super(ImmValue, cls).__new__(cls, check_u32(value, "immediate"))


# ===========================================================================
# Completion notification
# ===========================================================================


class OnDone(object):
    """
    completion of one submitted operation, fired exactly once

    either a callback (with an optional errback receiving the exception) or
    a plain flag that can be waited on from any thread
    """

    def __init__(self, callback=None, errback=None):
        self._callback = callback
        self._errback = errback
        self._event = threading.Event()
        self._lock = threading.Lock()
        self._fired = False
        self.error = None
        self.transfer_id = None

    @classmethod
    def with_callback(cls, callback, errback=None):
        return cls(callback, errback)

    @classmethod
    def flag(cls):
        return cls()

    def settle(self, error=None):
        """
        marks the operation done without running the callback; waiters wake up

        :return: False when it had already been settled
        """
        with self._lock:
            if self._fired:
                return False
            self._fired = True
            self.error = error
        self._event.set()
        return True

    def fire(self, error=None):
        """:return: False when it had already fired"""
        if not self.settle(error):
            return False
        self.run_callback()
        return True

    def run_callback(self):
        error = self.error
        try:
            if error is None:
                if self._callback is not None:
                    self._callback()
            elif self._errback is not None:
                self._errback(error)
            else:
                logger.error("operation %s failed: %s", self.transfer_id, error)
        except Exception:
            logger.exception("completion callback raised")

    def is_done(self):
        return self._event.is_set()

    def wait(self, timeout=None):
        return self._event.wait(timeout)

    @property
    def ok(self):
        return self.is_done() and self.error is None

    def __repr__(self):
        state = "pending"
        if self.is_done():
            state = "failed" if self.error is not None else "done"
        return "<OnDone %s %s>" % (self.transfer_id, state)


def as_ondone(on_done):
    """accepts None, an OnDone or a plain callable"""
    if on_done is None:
        return OnDone.flag()
    if isinstance(on_done, OnDone):
        return on_done
    if callable(on_done):
        return OnDone.with_callback(on_done)
    raise TypeError("expected OnDone or callable, got %r" % (on_done,))


# ===========================================================================
# Serialization entry points
# ===========================================================================


def serialize(value):
    """deterministic byte encoding of a NetAddr or MrDesc"""
    if isinstance(value, (NetAddr, MrDesc, Pages)):
        return value.encode()
    raise TypeError("cannot serialize %s" % type(value).__name__)


def deserialize(kind, data):
    """inverse of serialize; `kind` is NetAddr, MrDesc or Pages"""
    if kind is Pages:
        pages, offset = Pages.read(data)
        _expect_end(data, offset)
        return pages
    return kind.decode(data)
