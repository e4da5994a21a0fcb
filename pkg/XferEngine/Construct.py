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
This modules makes the construction of engines less verbose, and holds
the out-of-band exchange used to swap addresses and region descriptors
"""

import logging
import socket
import struct
import time

import numpy as np

from XferEngine.Common import MAX_RAILS
from XferEngine.engine import Engine
from XferEngine.fabric import FaultConfig, SimFabric
from XferEngine.udp import SocketDomain

logger = logging.getLogger(__name__)

# ===========================================================================
# ENGINES
# ===========================================================================


def make_sim_engine(fabric, rails=1, devices=(0,), config=None, trace=None, name=None):
    assert 1 <= rails <= MAX_RAILS, "1 to %d rails per group" % MAX_RAILS
    engine_id = fabric.next_engine_id()
    groups = {}
    for d, device in enumerate(devices):
        groups[device] = [fabric.create_domain(engine_id, d * rails + r) for r in range(rails)]
    if trace is None:
        trace = fabric.trace
    return Engine(groups, config=config, trace=trace, name=name, engine_id=engine_id)


def make_sim_engines(n, rails=1, fault=None, trace=None, config=None):
    """
    :return: (fabric, list of n engines sharing it)
    """
    fabric = SimFabric(fault if fault is not None else FaultConfig(), trace=trace)
    engines = [
        make_sim_engine(fabric, rails, config=config, name="sim%d" % i) for i in range(n)
    ]
    return fabric, engines


def make_socket_engine(rails=1, host="127.0.0.1", config=None, trace=None, name=None, **domain_kwargs):
    assert 1 <= rails <= MAX_RAILS, "1 to %d rails per group" % MAX_RAILS
    domains = [SocketDomain(host=host, trace=trace, **domain_kwargs) for _ in range(rails)]
    return Engine({0: domains}, config=config, trace=trace, name=name)


def make_engine(transport="sim", rails=1, fabric=None, config=None, trace=None, name=None):
    if transport == "sim":
        if fabric is None:
            raise ValueError("a simulated engine needs a fabric")
        return make_sim_engine(fabric, rails, config=config, trace=trace, name=name)
    if transport == "socket":
        return make_socket_engine(rails, config=config, trace=trace, name=name)
    raise ValueError("unknown transport %r" % transport)


def close_all(engines, fabric=None):
    for engine in engines:
        engine.close()
    if fabric is not None:
        fabric.shutdown()


# ===========================================================================
# REGIONS
# ===========================================================================


def make_region(engine, size, device=None, fill=None, seed=None):
    """
    :return: (numpy buffer, MrHandle, MrDesc)
    """
    if seed is not None:
        buffer = np.random.default_rng(seed).integers(0, 256, size, dtype=np.uint8)
    else:
        buffer = np.zeros(size, dtype=np.uint8)
        if fill is not None:
            buffer[:] = fill
    handle, desc = engine.reg_mr(buffer, device)
    return buffer, handle, desc


# ===========================================================================
# OUT OF BAND EXCHANGE
# ===========================================================================


_LEN = struct.Struct("<I")


def _send_frame(sock, blob):
    sock.sendall(_LEN.pack(len(blob)) + blob)


def _recv_exact(sock, size):
    chunks = []
    while size:
        chunk = sock.recv(size)
        if not chunk:
            raise ConnectionError("bootstrap peer closed the connection")
        chunks.append(chunk)
        size -= len(chunk)
    return b"".join(chunks)


def _recv_frame(sock):
    (size,) = _LEN.unpack(_recv_exact(sock, _LEN.size))
    return _recv_exact(sock, size)


def _pack_blobs(blobs):
    return _LEN.pack(len(blobs)) + b"".join(_LEN.pack(len(b)) + b for b in blobs)


def _unpack_blobs(data):
    (count,) = _LEN.unpack_from(data)
    offset = _LEN.size
    out = []
    for _ in range(count):
        (size,) = _LEN.unpack_from(data, offset)
        offset += _LEN.size
        out.append(data[offset : offset + size])
        offset += size
    return out


class TcpBootstrap(object):
    """
    rank 0 serves, every other rank connects to it

    allgather gathers linearly at rank 0 and releases everybody with the
    full list; barrier() is an allgather of empty blobs
    """

    def __init__(self, rank, world, host="127.0.0.1", port=0, timeout=30.0):
        assert 0 <= rank < world, "rank %d outside world of %d" % (rank, world)
        self.rank = rank
        self.world = world
        self.timeout = timeout
        self._peers = []
        self._sock = None
        if rank == 0:
            self._server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            self._server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            self._server.bind((host, port))
            self._server.listen(max(world, 1))
            self.host, self.port = self._server.getsockname()
        else:
            self._server = None
            self.host, self.port = host, port

    def connect(self):
        if self.rank == 0:
            self._server.settimeout(self.timeout)
            by_rank = {}
            while len(by_rank) < self.world - 1:
                conn, _ = self._server.accept()
                conn.settimeout(self.timeout)
                (peer_rank,) = _LEN.unpack(_recv_exact(conn, _LEN.size))
                by_rank[peer_rank] = conn
            self._peers = [by_rank[r] for r in sorted(by_rank)]
        else:
            deadline = time.monotonic() + self.timeout
            while True:
                try:
                    self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise ConnectionError("bootstrap server %s:%d unreachable" % (self.host, self.port))
                    time.sleep(0.05)
            self._sock.sendall(_LEN.pack(self.rank))
        logger.debug("bootstrap rank %d/%d connected", self.rank, self.world)
        return self

    def allgather(self, blob):
        """:return: list of every rank's blob, by rank"""
        blob = bytes(blob)
        if self.rank == 0:
            blobs = [blob] + [_recv_frame(conn) for conn in self._peers]
            packed = _pack_blobs(blobs)
            for conn in self._peers:
                _send_frame(conn, packed)
            return blobs
        _send_frame(self._sock, blob)
        return _unpack_blobs(_recv_frame(self._sock))

    def barrier(self):
        self.allgather(b"")

    def close(self):
        for conn in self._peers:
            conn.close()
        if self._sock is not None:
            self._sock.close()
        if self._server is not None:
            self._server.close()

    def __enter__(self):
        return self.connect()

    def __exit__(self, exc_type, exc, tb):
        self.close()
