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

import logging
import time

logger = logging.getLogger(__name__)

# ===========================================================================
# CONSTANTS
# ===========================================================================

KiB = 1024
MiB = 1024 * KiB
GiB = 1024 * MiB

U32_MAX = 2**32 - 1
U64_MAX = 2**64 - 1

# largest logical work request a rail accepts
MAX_WR_SIZE = 1 * GiB
# simulated fabric fragment size
DEFAULT_MTU = 4 * KiB
# socket rail datagram payload
SOCKET_PAYLOAD = 60 * KiB
RETRANSMIT_TIMEOUT = 0.010
SOCKET_WINDOW = 64

# single writes above this are split evenly across rails
SPLIT_THRESHOLD = 1 * MiB
COMMAND_QUEUE_DEPTH = 4096
SEND_QUEUE_DEPTH = 1024
MAX_RAILS = 4
NETADDR_MAX_LEN = 64

WATCHER_SPIN = 0.001
WATCHER_BACKOFF = 5e-6

HEARTBEAT_INTERVAL = 0.100
HEARTBEAT_MISSES = 3
IMM_RING_SIZE = 2**16

FP8_E4M3_MAX = 448.0
GROUP_PAD = 8
PRIVATE_TOKENS = 32

# ===========================================================================
# EXCEPTIONS
# ===========================================================================


class TransferError(RuntimeError):
    """base class for everything the engine and its protocols raise"""


class WireFormatError(ValueError):
    pass


class RegistrationError(TransferError):
    pass


class BoundsError(TransferError, ValueError):
    pass


class ImmCounterError(TransferError):
    pass


class ProtocolError(TransferError):
    pass


class ScheduleError(TransferError, ValueError):
    pass


class WatermarkError(TransferError):
    pass


class RequestCancelled(TransferError):
    pass


class assert_isdone(object):
    """
    raises an assertion error when the operation is not done after `timeout`
    seconds, or completed with an error, with the error specified in
    error_statement

    works with anything exposing wait(timeout) and an `error` attribute,
    i.e. OnDone and watcher style flags
    """

    def __init__(self, to_check, error_statement, timeout=10.0):
        self.to_check = to_check
        self.error_statement = error_statement
        self.timeout = timeout

    def __enter__(self):
        if not self.to_check.wait(self.timeout):
            raise AssertionError("%s (timed out)" % self.error_statement)
        error = getattr(self.to_check, "error", None)
        if error is not None:
            raise AssertionError("%s: %s" % (self.error_statement, error))
        return self.to_check

    def __exit__(self, assertion_type, value, traceback):
        pass


def wait_until(predicate, timeout=5.0, interval=0.001):
    """polls `predicate` until it holds; returns its final truth value"""
    deadline = time.monotonic() + timeout
    while not predicate():
        if time.monotonic() > deadline:
            return bool(predicate())
        time.sleep(interval)
    return True


def check_u32(value, what="value"):
    if not 0 <= int(value) <= U32_MAX:
        raise ValueError("%s %r does not fit in 32 bits" % (what, value))
    return int(value)


def check_u64(value, what="value"):
    if not 0 <= int(value) <= U64_MAX:
        raise ValueError("%s %r does not fit in 64 bits" % (what, value))
    return int(value)


def percentiles(samples, points=(1, 25, 50, 75, 95, 99)):
    """nearest-rank percentiles, keys are 'p01', 'p25', ..."""
    ordered = sorted(samples)
    out = {}
    if not ordered:
        return dict(("p%02d" % p, 0.0) for p in points)
    n = len(ordered)
    for p in points:
        rank = max(1, int(-(-p * n // 100)))
        out["p%02d" % p] = ordered[min(rank, n) - 1]
    return out
