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
Mixture of experts dispatch and combine over point to point writes.

Please note the following:

* a (token, expert) pair is the unit that moves: a token routed to two
  experts of the same rank travels twice
* dispatch needs two writes per peer on another node. The first carries the
  route counts of the sender in its header and the first P pairs into the
  sender's private slot; the second lands the remaining pairs in the
  sender's span of the contiguous receive buffer once every rank's counts
  are known, or carries only the immediate
* the route counts are read only once the first round's immediate has been
  counted from every remote peer and its lane signal from every local one;
  the step number that ends the header is a sanity check, not a signal
* combine sends every result back with one scatter, into the send buffer
  the tokens left from; both barriers must have passed before that buffer
  is overwritten
* ranks of one node use the SharedMemoryLane instead of the engine
"""

import collections
import dataclasses
import logging
import threading
import time
from typing import List, Tuple

import numpy as np

from XferEngine.Common import GROUP_PAD, PRIVATE_TOKENS, TransferError, percentiles
from XferEngine.core import ScatterDst
from XferEngine.Topology import Topo, dumpTopology
from XferEngine.trace import NullTrace

logger = logging.getLogger(__name__)

IMM_ROUTES = 0x4D0001
IMM_TOKENS = 0x4D0002
IMM_BARRIER = 0x4D0003
IMM_COMBINE = 0x4D0004


# ===========================================================================
# CONFIGURATION
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class RoutingSpec(object):
    num_ranks: int
    num_experts: int
    max_tokens: int
    topk: int
    # float32 elements per token
    hidden: int = 64

    def __post_init__(self):
        if self.num_ranks < 1 or self.num_experts % self.num_ranks:
            raise ValueError("%d experts do not divide over %d ranks" % (self.num_experts, self.num_ranks))
        if not 1 <= self.topk <= self.num_experts:
            raise ValueError("topk %d with %d experts" % (self.topk, self.num_experts))

    @property
    def experts_per_rank(self):
        return self.num_experts // self.num_ranks

    @property
    def token_bytes(self):
        return self.hidden * 4

    @property
    def capacity(self):
        """receive slots of one rank, N * T * max(R, E / N)"""
        return self.num_ranks * self.max_tokens * max(self.topk, self.experts_per_rank)

    @property
    def max_pairs_per_dest(self):
        return self.max_tokens * min(self.topk, self.experts_per_rank)

    @property
    def header_bytes(self):
        # one count per expert, then the step number
        return 4 * (self.num_experts + 1)


@dataclasses.dataclass
class MoeConfig(object):
    private_tokens: int = PRIVATE_TOKENS
    pad: int = GROUP_PAD
    ranks_per_node: int = 1
    timeout: float = 10.0
    # host side delay between the route counts landing and the second round
    route_delay: float = 0.0


# ===========================================================================
# PLANNING
# ===========================================================================


@dataclasses.dataclass
class DispatchPlan(object):
    counts: np.ndarray
    # per destination rank: (k, 2) array of (token, expert) ordered by (local expert, token)
    pairs: List[np.ndarray]


def plan_dispatch(routes, spec):
    """
    pure function of one rank's routes

    :param routes: (tokens, topk) expert ids
    """
    routes = np.asarray(routes, dtype=np.int64).reshape(-1, spec.topk)
    n = routes.shape[0]
    if n > spec.max_tokens:
        raise ValueError("%d tokens, at most %d per rank" % (n, spec.max_tokens))
    if routes.size and (routes.min() < 0 or routes.max() >= spec.num_experts):
        raise ValueError("expert id out of range")
    for t in range(n):
        if len(set(routes[t].tolist())) != spec.topk:
            raise ValueError("token %d routes twice to one expert: %s" % (t, routes[t].tolist()))
    counts = np.bincount(routes.reshape(-1), minlength=spec.num_experts).astype(np.int64)
    tokens = np.repeat(np.arange(n, dtype=np.int64), spec.topk)
    experts = routes.reshape(-1)
    epr = spec.experts_per_rank
    dest = experts // epr
    order = np.lexsort((tokens, experts % epr, dest))
    tokens, experts, dest = tokens[order], experts[order], dest[order]
    bounds = np.searchsorted(dest, np.arange(spec.num_ranks + 1))
    pairs = [
        np.stack([tokens[bounds[d] : bounds[d + 1]], experts[bounds[d] : bounds[d + 1]]], axis=1)
        for d in range(spec.num_ranks)
    ]
    return DispatchPlan(counts, pairs)


@dataclasses.dataclass
class DispatchLayout(object):
    """
    n[s][d]       pairs rank s sends to rank d
    ranges[d]     ((local expert, source), start, length), packed in that order
    spans[d][s]   (start, length) in slots of the contiguous receive buffer
                  for the pairs past the private ones
    """

    n: np.ndarray
    ranges: List[Tuple]
    spans: List[Tuple]
    private_tokens: int
    capacity: int

    def pair_prefix(self, matrix, spec, source, dest, local):
        first = dest * spec.experts_per_rank
        return int(matrix[source, first : first + local].sum())

    def __eq__(self, other):
        return (
            isinstance(other, DispatchLayout)
            and np.array_equal(self.n, other.n)
            and self.ranges == other.ranges
            and self.spans == other.spans
            and self.private_tokens == other.private_tokens
        )


def compute_layout(matrix, spec, private_tokens=0):
    """
    deterministic receive layout of a complete route matrix (sources x experts)
    """
    matrix = np.asarray(matrix, dtype=np.int64)
    if matrix.shape != (spec.num_ranks, spec.num_experts):
        raise ValueError("route matrix of shape %s" % (matrix.shape,))
    limit = spec.max_tokens * spec.topk
    for s, row in enumerate(matrix):
        if row.min() < 0 or row.sum() > limit:
            raise ValueError("source %d routes %d pairs, at most %d" % (s, row.sum(), limit))
    N, epr = spec.num_ranks, spec.experts_per_rank
    n = matrix.reshape(N, N, epr).sum(axis=2)
    ranges, spans = [], []
    for d in range(N):
        sub = matrix[:, d * epr : (d + 1) * epr]
        start = 0
        dest_ranges = []
        for local in range(epr):
            for s in range(N):
                length = int(sub[s, local])
                dest_ranges.append(((local, s), start, length))
                start += length
        if start > spec.capacity:
            raise ValueError("rank %d receives %d pairs, capacity %d" % (d, start, spec.capacity))
        ranges.append(tuple(dest_ranges))
        start = 0
        dest_spans = []
        for s in range(N):
            rest = max(0, int(n[s, d]) - private_tokens)
            dest_spans.append((start, rest))
            start += rest
        spans.append(tuple(dest_spans))
    return DispatchLayout(n, ranges, spans, private_tokens, spec.capacity)


def padded(size, pad):
    return -(-size // pad) * pad if pad > 1 else size


# ===========================================================================
# SHARED MEMORY LANE
# ===========================================================================


class SharedMemoryLane(object):
    """
    intra node pushes: a copy into the peer's region followed by a release
    increment of the peer's flag; wait() acquires and consumes
    """

    def __init__(self, trace=None):
        self.trace = trace if trace is not None else NullTrace()
        self._regions = {}
        self._flags = collections.defaultdict(collections.Counter)
        self._cond = threading.Condition()

    def attach(self, rank, **regions):
        self._regions[rank] = regions

    def push(self, src, dst, imm, region=None, offset=0, data=None):
        if data is not None and len(data):
            self.trace.record("moe_lane_copy", src=src, dst=dst, imm=imm, length=len(data))
            target = self._regions[dst][region]
            target[offset : offset + len(data)] = data
        with self._cond:
            self._flags[dst][imm] += 1
            self._cond.notify_all()

    def wait(self, rank, imm, count, timeout):
        with self._cond:
            flags = self._flags[rank]
            if not self._cond.wait_for(lambda: flags[imm] >= count, timeout):
                raise TransferError(
                    "rank %d: %d of %d lane signals for %#x" % (rank, flags[imm], count, imm)
                )
            flags[imm] -= count


# ===========================================================================
# RANK
# ===========================================================================


@dataclasses.dataclass
class ExpertBatch(object):
    """tokens grouped by local expert, each group padded to the pad multiple"""

    tokens: np.ndarray
    experts: np.ndarray
    group_offsets: np.ndarray
    group_sizes: np.ndarray
    # per row (source rank, pair index at the source), -1 for padding
    index: np.ndarray

    def group(self, local):
        start = self.group_offsets[local]
        return self.tokens[start : start + self.group_sizes[local]]


class MoeRank(object):
    """
    one expert parallel rank; the calling thread plays the host proxy
    """

    def __init__(self, rank, engine, spec, config=None, topo=None, lane=None, trace=None):
        self.rank = rank
        self.engine = engine
        self.spec = spec
        self.config = config if config is not None else MoeConfig()
        self.topo = topo if topo is not None else Topo(spec.num_ranks, self.config.ranks_per_node, spec.num_experts)
        self.lane = lane if lane is not None else SharedMemoryLane()
        self.trace = trace if trace is not None else NullTrace()
        self.private = min(self.config.private_tokens, spec.max_tokens)
        tb = spec.token_bytes
        H = spec.header_bytes
        N = spec.num_ranks
        self.slot_bytes = H + self.private * tb
        self.dest_bytes = H + spec.max_pairs_per_dest * tb
        self.private_buffer = np.zeros(N * self.slot_bytes, dtype=np.uint8)
        self.staging_buffer = np.zeros(max(spec.capacity * tb, 1), dtype=np.uint8)
        self.send_buffer = np.zeros(N * self.dest_bytes, dtype=np.uint8)
        self.combine_buffer = np.zeros(max(N * spec.max_pairs_per_dest * tb, 1), dtype=np.uint8)
        self.handles = {}
        self.descs = {}
        for name in ("private", "staging", "send", "combine"):
            self.handles[name], self.descs[name] = engine.reg_mr(getattr(self, name + "_buffer"))
        self.lane.attach(rank, private=self.private_buffer, staging=self.staging_buffer, send=self.send_buffer)
        self.local_peers = sorted(self.topo.ranks_on_node(self.topo.node_of(rank)))
        self.remote_peers = sorted(self.topo.inter_node_peers(rank))
        self.peer_descs = None
        self.group = None
        self.step = 0
        self._plan = None
        self._routes = None
        self._layout = None
        self._matrix = None
        self._batch = None
        self._ops = []
        # most pairs this rank has had to receive in one step
        self.peak_received = 0
        self.timings = collections.defaultdict(list)

    @property
    def layout(self):
        """DispatchLayout of the current step"""
        return self._layout

    def connect(self, peer_descs):
        """:param peer_descs: per rank, {"private", "staging", "send"} MrDescs"""
        self.peer_descs = peer_descs
        if self.remote_peers:
            self.group = self.engine.add_peer_group(
                [peer_descs[r]["private"].main_address for r in self.remote_peers]
            )

    # -----------------------------------------------------------------------
    # transport helpers
    # -----------------------------------------------------------------------

    def _scatter(self, imm, entries):
        """entries: {peer: (src offset, length, region, dst offset)} for every remote peer"""
        if not self.remote_peers:
            return
        dsts = []
        for peer in self.remote_peers:
            src, length, region, dst = entries[peer]
            dsts.append(ScatterDst(length, src, (self.peer_descs[peer][region], dst)))
        source = self.handles["combine" if imm == IMM_COMBINE else "send"]
        self._ops.append(self.engine.submit_scatter(self.group, None, imm, source, dsts))

    def _wait(self, imm):
        """acquires one signal of `imm` from every rank"""
        flag = None
        if self.remote_peers:
            flag = self.engine.expect_imm_count(imm, len(self.remote_peers))
        self.lane.wait(self.rank, imm, len(self.local_peers), self.config.timeout)
        if flag is not None and not flag.wait(self.config.timeout):
            raise TransferError(self._diagnose(imm))

    def _diagnose(self, imm):
        received = self.engine.counter.available(imm)
        missing = self._stale_headers() if imm == IMM_ROUTES else []
        self.engine.counter.disarm(imm)
        return "rank %d: %d of %d remote signals for %#x, missing sources %s" % (
            self.rank,
            received,
            len(self.remote_peers),
            imm,
            missing or "unknown",
        )

    def _drain_ops(self):
        for op in self._ops:
            if not op.wait(self.config.timeout):
                raise TransferError("rank %d: write did not complete" % self.rank)
            if op.error is not None:
                raise TransferError("rank %d: write failed: %s" % (self.rank, op.error))
        self._ops = []

    # -----------------------------------------------------------------------
    # dispatch
    # -----------------------------------------------------------------------

    def dispatch_send(self, tokens, routes):
        spec = self.spec
        tokens = np.ascontiguousarray(tokens, dtype=np.float32).reshape(-1, spec.hidden)
        plan = plan_dispatch(routes, spec)
        if tokens.shape[0] != len(np.asarray(routes).reshape(-1, spec.topk)):
            raise ValueError("%d tokens for %d routes" % (tokens.shape[0], len(routes)))
        self.step += 1
        self._plan = plan
        self._routes = np.asarray(routes, dtype=np.int64).reshape(-1, spec.topk)
        self._started = time.monotonic()
        tb, H, P = spec.token_bytes, spec.header_bytes, self.private
        header = np.empty(spec.num_experts + 1, dtype="<u4")
        header[:-1] = plan.counts
        header[-1] = self.step & 0xFFFFFFFF
        for d in range(spec.num_ranks):
            base = d * self.dest_bytes
            pairs = plan.pairs[d]
            self.send_buffer[base : base + H] = header.view(np.uint8)
            if len(pairs):
                rows = tokens[pairs[:, 0]]
                self.send_buffer[base + H : base + H + len(pairs) * tb] = rows.reshape(-1).view(np.uint8)

        # the proxy learns the step is staged before any intra node copy
        self.trace.record("moe_signal", rank=self.rank, step=self.step)
        entries = {}
        for d in range(spec.num_ranks):
            k = min(P, len(plan.pairs[d]))
            entries[d] = (d * self.dest_bytes, H + k * tb, "private", self.rank * self.slot_bytes)
        for d in self.local_peers:
            src, length, region, dst = entries[d]
            self.lane.push(self.rank, d, IMM_ROUTES, region, dst, self.send_buffer[src : src + length])
        self._scatter(IMM_ROUTES, entries)

        self._wait(IMM_ROUTES)
        if self.config.route_delay:
            time.sleep(self.config.route_delay)
        matrix = self.route_matrix()
        layout = compute_layout(matrix, spec, P)
        self._layout = layout
        self._matrix = matrix
        self.peak_received = max(self.peak_received, int(layout.n[:, self.rank].sum()))

        entries = {}
        for d in range(spec.num_ranks):
            k = len(plan.pairs[d])
            start, rest = layout.spans[d][self.rank]
            if rest and start + rest > spec.capacity:
                raise TransferError("span [%d, %d) past capacity %d" % (start, start + rest, spec.capacity))
            entries[d] = (d * self.dest_bytes + H + min(P, k) * tb, rest * tb, "staging", start * tb)
        for d in self.local_peers:
            src, length, region, dst = entries[d]
            self.lane.push(self.rank, d, IMM_TOKENS, region, dst, self.send_buffer[src : src + length])
        self._scatter(IMM_TOKENS, entries)

    def _header_words(self):
        """(sources, experts + 1) view of the private slot headers"""
        words = self.private_buffer.view("<u4").reshape(self.spec.num_ranks, -1)
        return words[:, : self.spec.num_experts + 1]

    def _stale_headers(self):
        steps = self._header_words()[:, -1]
        return [int(s) for s in np.nonzero(steps != (self.step & 0xFFFFFFFF))[0]]

    def route_matrix(self):
        """every rank's counts, read from the headers of the private slots once IMM_ROUTES is counted"""
        stale = self._stale_headers()
        if stale:
            raise TransferError("rank %d: route headers of %s are not from step %d" % (self.rank, stale, self.step))
        return self._header_words()[:, :-1].astype(np.int64)

    def dispatch_recv(self):
        """:return: ExpertBatch of the tokens routed to this rank's experts"""
        spec = self.spec
        self._wait(IMM_TOKENS)
        layout, matrix = self._layout, self._matrix
        tb, H, P, epr = spec.token_bytes, spec.header_bytes, self.private, spec.experts_per_rank
        r = self.rank
        sizes = np.zeros(epr, dtype=np.int64)
        for (local, s), start, length in layout.ranges[r]:
            sizes[local] += length
        offsets = np.zeros(epr, dtype=np.int64)
        total = 0
        for local in range(epr):
            offsets[local] = total
            total += padded(int(sizes[local]), self.config.pad)
        out = np.zeros((total, spec.hidden), dtype=np.float32)
        experts = np.full(total, -1, dtype=np.int64)
        index = np.full((total, 2), -1, dtype=np.int64)
        private = self.private_buffer
        staging = self.staging_buffer.view(np.float32)
        fill = offsets.copy()
        for (local, s), start, length in layout.ranges[r]:
            if not length:
                continue
            prefix = layout.pair_prefix(matrix, spec, s, r, local)
            row = fill[local]
            for p in range(prefix, prefix + length):
                if p < P:
                    at = s * self.slot_bytes + H + p * tb
                    out[row] = private[at : at + tb].view(np.float32)
                else:
                    slot = layout.spans[r][s][0] + p - P
                    out[row] = staging[slot * spec.hidden : (slot + 1) * spec.hidden]
                experts[row] = r * epr + local
                index[row] = (s, p)
                row += 1
            fill[local] = row
        self._batch = ExpertBatch(out, experts, offsets, sizes, index)
        self.timings["dispatch"].append(time.monotonic() - self._started)
        self.trace.record("moe_dispatched", rank=r, step=self.step, rows=int(sizes.sum()))
        return self._batch

    # -----------------------------------------------------------------------
    # combine
    # -----------------------------------------------------------------------

    def barrier(self):
        """every rank's dispatch writes are complete: lane barrier, then engine barrier"""
        self._drain_ops()
        for d in self.local_peers:
            self.lane.push(self.rank, d, IMM_BARRIER)
        self.lane.wait(self.rank, IMM_BARRIER, len(self.local_peers), self.config.timeout)
        self.trace.record("moe_barrier", rank=self.rank, step=self.step, phase="lane")
        if self.remote_peers:
            self._ops.append(
                self.engine.submit_barrier(
                    self.group, None, IMM_BARRIER, [self.peer_descs[p]["private"] for p in self.remote_peers]
                )
            )
            flag = self.engine.expect_imm_count(IMM_BARRIER, len(self.remote_peers))
            if not flag.wait(self.config.timeout):
                raise TransferError(self._diagnose(IMM_BARRIER))
        self.trace.record("moe_barrier", rank=self.rank, step=self.step, phase="rdma")

    def combine_send(self, outputs):
        """returns every row of `outputs` (shaped like the dispatched batch) to its origin"""
        spec = self.spec
        batch = self._batch
        outputs = np.ascontiguousarray(outputs, dtype=np.float32).reshape(batch.tokens.shape)
        self._combine_started = time.monotonic()
        self.barrier()
        tb, H = spec.token_bytes, spec.header_bytes
        layout = self._layout
        r = self.rank
        starts = np.concatenate([[0], np.cumsum(layout.n[:, r])])
        combine = self.combine_buffer.view(np.float32).reshape(-1, spec.hidden)
        real = batch.index[:, 0] >= 0
        for row in np.nonzero(real)[0]:
            s, p = batch.index[row]
            combine[starts[s] + p] = outputs[row]
        self.trace.record("moe_combine_write", rank=r, step=self.step)
        entries = {}
        for s in range(spec.num_ranks):
            length = int(layout.n[s, r]) * tb
            entries[s] = (int(starts[s]) * tb, length, "send", r * self.dest_bytes + H)
        for s in self.local_peers:
            src, length, region, dst = entries[s]
            self.lane.push(r, s, IMM_COMBINE, region, dst, self.combine_buffer[src : src + length])
        self._scatter(IMM_COMBINE, entries)

    def combine_recv(self, weights):
        """:return: (tokens, hidden) float32 weighted sums of the expert outputs"""
        spec = self.spec
        self._wait(IMM_COMBINE)
        routes = self._routes
        weights = np.asarray(weights, dtype=np.float32).reshape(routes.shape)
        out = np.zeros((routes.shape[0], spec.hidden), dtype=np.float32)
        tb, H = spec.token_bytes, spec.header_bytes
        for d in range(spec.num_ranks):
            pairs = self._plan.pairs[d]
            if not len(pairs):
                continue
            base = d * self.dest_bytes + H
            results = self.send_buffer[base : base + len(pairs) * tb].view(np.float32).reshape(-1, spec.hidden)
            t, e = pairs[:, 0], pairs[:, 1]
            k = np.argmax(routes[t] == e[:, None], axis=1)
            w = weights[t, k]
            for i in range(len(pairs)):
                out[t[i]] += w[i] * results[i]
        self._drain_ops()
        self.timings["combine"].append(time.monotonic() - self._combine_started)
        self.trace.record("moe_combined", rank=self.rank, step=self.step)
        return out

    def run(self, tokens, routes, weights, expert_fn):
        """one full step; expert_fn(batch) -> outputs"""
        self.dispatch_send(tokens, routes)
        batch = self.dispatch_recv()
        self.combine_send(expert_fn(batch))
        return self.combine_recv(weights)


# ===========================================================================
# IN PROCESS CLUSTER
# ===========================================================================


def make_moe_ranks(engines, spec, config=None, trace=None):
    """wires one MoeRank per engine, sharing a lane per node"""
    config = config if config is not None else MoeConfig()
    topo = Topo(spec.num_ranks, config.ranks_per_node, spec.num_experts)
    logger.info("expert layout:\n%s", dumpTopology(topo))
    lane = SharedMemoryLane(trace)
    ranks = [MoeRank(r, engine, spec, config, topo, lane, trace) for r, engine in enumerate(engines)]
    descs = [dict(r.descs) for r in ranks]
    for r in ranks:
        r.connect(descs)
    return ranks


def run_ranks(ranks, inputs, expert_fn):
    """
    runs one step on every rank, each on its own thread

    :param inputs: per rank (tokens, routes, weights)
    :return: per rank combined outputs
    """
    outputs = [None] * len(ranks)
    errors = []

    def run(i):
        try:
            tokens, routes, weights = inputs[i]
            outputs[i] = ranks[i].run(tokens, routes, weights, expert_fn)
        except Exception as err:
            logger.exception("rank %d failed", i)
            errors.append(err)

    threads = [threading.Thread(target=run, args=(i,), name="moe-rank%d" % i) for i in range(len(ranks))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    return outputs


def random_inputs(rng, spec, tokens=None):
    """per rank (tokens, routes, weights); token values encode (rank, token) in column 0"""
    out = []
    for r in range(spec.num_ranks):
        n = spec.max_tokens if tokens is None else tokens
        x = rng.standard_normal((n, spec.hidden)).astype(np.float32)
        if n:
            x[:, 0] = r * 100000 + np.arange(n)
        routes = np.zeros((n, spec.topk), dtype=np.int64)
        for t in range(n):
            routes[t] = rng.choice(spec.num_experts, spec.topk, replace=False)
        w = rng.random((n, spec.topk)).astype(np.float32) + 0.1
        w /= w.sum(axis=1, keepdims=True)
        out.append((x, routes, w))
    return out


def alltoall_oracle(inputs, spec):
    """per rank, {global expert: sorted list of token rows as tuples}"""
    got = [collections.defaultdict(list) for _ in range(spec.num_ranks)]
    for x, routes, _ in inputs:
        for t in range(len(routes)):
            for e in routes[t]:
                got[int(e) // spec.experts_per_rank][int(e)].append(tuple(x[t].tolist()))
    return [dict((e, sorted(rows)) for e, rows in g.items()) for g in got]


def received_multiset(batch):
    got = collections.defaultdict(list)
    for row in range(len(batch.experts)):
        if batch.experts[row] >= 0:
            got[int(batch.experts[row])].append(tuple(batch.tokens[row].tolist()))
    return dict((e, sorted(rows)) for e, rows in got.items())


def combine_oracle(x, routes, weights, expert_fn_rows):
    """
    float32 reference: expert_fn_rows(expert, rows) -> outputs

    each token accumulates its experts in ascending id, the order combine_recv adds them
    """
    out = np.zeros_like(x, dtype=np.float32)
    for t in range(len(routes)):
        for k in np.argsort(routes[t], kind="stable"):
            e = int(routes[t][k])
            out[t] += np.float32(weights[t, k]) * expert_fn_rows(e, x[t : t + 1])[0]
    return out


def phase_report(ranks):
    """percentiles of every phase, aggregated over ranks, in microseconds"""
    report = {}
    for phase in ("dispatch", "combine"):
        samples = [v * 1e6 for r in ranks for v in r.timings[phase]]
        entry = percentiles(samples)
        entry["mean"] = sum(samples) / len(samples) if samples else 0.0
        entry["count"] = len(samples)
        report[phase] = entry
    return report
