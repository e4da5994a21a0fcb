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

import enum


class WrKind(enum.IntEnum):
    WRITE = 1
    SEND_MSG = 2
    RECV_POST = 3


class EventKind(enum.IntEnum):
    SEND_DONE = 1
    IMM_RECEIVED = 2
    MSG_RECEIVED = 3


class ReorderMode(enum.IntEnum):
    NONE = 0
    WINDOW = 1
    REVERSE = 2


class PacketKind(enum.IntEnum):
    """kind byte of a socket rail datagram"""

    DATA = 1
    MSG = 2
    ACK = 3
    NACK = 4


class NackReason(enum.IntEnum):
    UNKNOWN_RKEY = 1
    OUT_OF_BOUNDS = 2
    NO_RECV_POSTED = 3
    MSG_TOO_LONG = 4


class Stage(enum.IntEnum):
    H2D = 0
    PREPARE = 1
    WRITE = 2
    BARRIER = 3


class KvMsgKind(enum.IntEnum):
    REQUEST = 1
    HEARTBEAT = 2
    CANCEL = 3
    CANCEL_CONFIRM = 4


class KvState(enum.IntEnum):
    ACTIVE = 0
    CANCEL_REQUESTED = 1
    CONFIRMED = 2
    DONE = 3
    TIMED_OUT = 4


class EnumLookup(object):
    """
    perform bi-directional lookup of Enums'...
    """

    def __init__(self, li_in, li_out):
        self.d = {}
        for a, b in zip(li_in, li_out):
            self.d[a] = b
            self.d[b] = a

    def __getitem__(self, item):
        return self.d[item]

    def __contains__(self, item):
        return item in self.d

    def names(self):
        return sorted(k for k in self.d if isinstance(k, str))


reorder_lut = EnumLookup(
    (ReorderMode.NONE, ReorderMode.WINDOW, ReorderMode.REVERSE),
    ("none", "window", "reverse"),
)
stage_lut = EnumLookup(
    (Stage.H2D, Stage.PREPARE, Stage.WRITE, Stage.BARRIER),
    ("h2d", "prepare", "write", "barrier"),
)
nack_lut = EnumLookup(
    tuple(NackReason),
    ("unknown rkey", "out of bounds", "no receive posted", "message too long"),
)
kv_state_lut = EnumLookup(
    tuple(KvState),
    ("active", "cancel requested", "confirmed", "done", "timed out"),
)

# element size in bytes of the modelled dtypes
dtype_size = {"bf16": 2, "fp8": 1, "fp32": 4}
