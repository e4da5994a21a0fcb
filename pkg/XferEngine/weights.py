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
Training to inference weight transfer.

A static schedule says which training rank prepares which parameter and
where each inference shard of it lands. Every step, each training rank runs
its tasks through four overlapping stages:

    H2D      copy the shards of the parameter to the "device"
    Prepare  full tensor, projection fusion, dtype narrowing
    Write    one write per destination shard, zero copy from the send buffer
    Barrier  release the task's temporary memory

A task is only admitted while the temporary memory of the tasks in flight
stays under the watermark. Inference ranks only register a region and
never take part in the protocol.
"""

import collections
import dataclasses
import json
import logging
import math
import queue
import threading
import time
import zlib
from typing import Dict, Tuple

import numpy as np

from XferEngine.Common import ScheduleError, TransferError, WatermarkError
from XferEngine.quant import narrow, narrowed_size, widen
from XferEngine.trace import NullTrace
from XferEngine.types_lut import Stage, dtype_size, stage_lut

logger = logging.getLogger(__name__)


# ===========================================================================
# METADATA
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class ParamMeta(object):
    """
    one shard of a parameter held by one rank; `shape` is the full shape,
    the shard is slice shard_index of shard_count along shard_axis
    """

    name: str
    shape: Tuple[int, ...]
    dtype: str = "bf16"
    rank: int = 0
    mesh_group: int = 0
    shard_axis: int = 0
    shard_index: int = 0
    shard_count: int = 1
    offload: bool = False

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if self.dtype not in dtype_size:
            raise ValueError("unknown dtype %r" % self.dtype)
        if not 0 <= self.shard_index < self.shard_count:
            raise ValueError("%s: shard %d of %d" % (self.name, self.shard_index, self.shard_count))
        if self.shard_count > 1:
            if not 0 <= self.shard_axis < len(self.shape):
                raise ValueError("%s: shard axis %d of a %d-d tensor" % (self.name, self.shard_axis, len(self.shape)))
            if self.shape[self.shard_axis] % self.shard_count:
                raise ValueError(
                    "%s: axis of %d does not split in %d" % (self.name, self.shape[self.shard_axis], self.shard_count)
                )

    @property
    def numel(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def shard_shape(self):
        shape = list(self.shape)
        if self.shard_count > 1:
            shape[self.shard_axis] //= self.shard_count
        return tuple(shape)

    @property
    def shard_numel(self):
        return self.numel // self.shard_count

    @property
    def nbytes(self):
        return self.numel * dtype_size[self.dtype]


def shard_slice(x, axis, index, count):
    if count == 1:
        return x
    step = x.shape[axis] // count
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(index * step, (index + 1) * step)
    return x[tuple(sl)]


# ===========================================================================
# SCHEDULE
# ===========================================================================


@dataclasses.dataclass(frozen=True)
class PartInfo(object):
    """a training parameter feeding a (possibly fused) inference parameter"""

    name: str
    shape: Tuple[int, ...]
    axis: int
    count: int


@dataclasses.dataclass(frozen=True)
class Destination(object):
    rank: int
    shard_index: int
    shard_count: int
    # [offset, offset + length) of the send buffer, written at dst_offset
    offset: int
    length: int
    dst_offset: int


@dataclasses.dataclass(frozen=True)
class Task(object):
    name: str
    source: int
    mesh_group: int
    dtype: str
    shape: Tuple[int, ...]
    axis: int
    parts: Tuple[PartInfo, ...]
    destinations: Tuple[Destination, ...]
    nbytes: int

    @property
    def temp_bytes(self):
        """device memory the task holds: float32 copies of its parts plus the send buffer"""
        return sum(int(np.prod(p.shape)) * 4 for p in self.parts) + self.nbytes

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["shape"] = tuple(d["shape"])
        d["parts"] = tuple(
            PartInfo(p["name"], tuple(p["shape"]), p["axis"], p["count"]) for p in d["parts"]
        )
        d["destinations"] = tuple(Destination(**x) for x in d["destinations"])
        return cls(**d)


def inference_layout(infer_metas):
    """
    where every parameter shard lives inside each inference rank's region

    :return: {rank: {name: (offset, length)}}, {rank: region bytes}
    """
    layout = collections.defaultdict(dict)
    sizes = collections.Counter()
    for meta in sorted(infer_metas, key=lambda m: (m.rank, m.name)):
        if meta.name in layout[meta.rank]:
            raise ScheduleError("rank %d holds %s twice" % (meta.rank, meta.name))
        length = narrowed_size(meta.shard_numel, meta.dtype)
        layout[meta.rank][meta.name] = (sizes[meta.rank], length)
        sizes[meta.rank] += length
    return dict(layout), dict(sizes)


class TransferSchedule(object):
    def __init__(self, tasks):
        self.tasks = list(tasks)

    def __len__(self):
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def tasks_for(self, rank):
        return [t for t in self.tasks if t.source == rank]

    def coverage(self):
        """Counter of (inference rank, parameter) pairs"""
        out = collections.Counter()
        for task in self.tasks:
            for d in task.destinations:
                out[(d.rank, task.name)] += 1
        return out

    def segments(self):
        """mesh groups in schedule order, one entry per contiguous run"""
        out = []
        for task in self.tasks:
            if not out or out[-1] != task.mesh_group:
                out.append(task.mesh_group)
        return out

    def bytes_per_source(self):
        out = collections.Counter()
        for task in self.tasks:
            out[task.source] += task.nbytes
        return dict(out)

    def to_jsonl(self, path):
        with open(path, "w") as f:
            for task in self.tasks:
                f.write(json.dumps(task.to_dict(), sort_keys=True))
                f.write("\n")

    @classmethod
    def from_jsonl(cls, path):
        with open(path) as f:
            return cls(Task.from_dict(json.loads(line)) for line in f if line.strip())


def _training_parts(train_metas):
    by_name = collections.defaultdict(list)
    for meta in train_metas:
        by_name[meta.name].append(meta)
    parts = {}
    for name, shards in by_name.items():
        first = shards[0]
        for m in shards:
            if (m.shape, m.shard_axis, m.shard_count, m.mesh_group) != (
                first.shape,
                first.shard_axis,
                first.shard_count,
                first.mesh_group,
            ):
                raise ScheduleError("inconsistent sharding of %s" % name)
        indices = sorted(m.shard_index for m in shards)
        if indices != list(range(first.shard_count)):
            raise ScheduleError("shards of %s do not tile it: %s" % (name, indices))
        parts[name] = shards
    return parts


def build_schedule(train_metas, infer_metas, fusion=None):
    """
    maps every (inference rank, parameter) pair to exactly one task

    parameters are ordered by (mesh group, descending bytes, name) and each
    goes to the least loaded training rank holding a shard of it

    :param fusion: {fused name: [part names]} concatenated along axis 0
    """
    fusion = fusion or {}
    train = _training_parts(train_metas)
    layout, _ = inference_layout(infer_metas)
    by_name = collections.defaultdict(list)
    for meta in infer_metas:
        by_name[meta.name].append(meta)

    params = []
    for name, dests in by_name.items():
        part_names = fusion.get(name, [name])
        for part in part_names:
            if part not in train:
                raise ScheduleError("parameter %s missing from training metadata" % part)
        shapes = [train[p][0].shape for p in part_names]
        if any(s[1:] != shapes[0][1:] for s in shapes):
            raise ScheduleError("cannot fuse %s: shapes %s" % (name, shapes))
        shape = (sum(s[0] for s in shapes),) + tuple(shapes[0][1:])
        groups = set(train[p][0].mesh_group for p in part_names)
        if len(groups) != 1:
            raise ScheduleError("parts of %s span mesh groups %s" % (name, sorted(groups)))
        first = dests[0]
        for meta in dests:
            if meta.shape != shape:
                raise ScheduleError("shape mismatch for %s: %s vs %s" % (name, meta.shape, shape))
            if (meta.dtype, meta.shard_axis, meta.shard_count) != (first.dtype, first.shard_axis, first.shard_count):
                raise ScheduleError("inconsistent inference sharding of %s" % name)
        indices = sorted(m.shard_index for m in dests)
        if first.shard_count > 1 and sorted(set(indices)) != list(range(first.shard_count)):
            raise ScheduleError("inference shards of %s do not tile it" % name)
        nbytes = sum(narrowed_size(m.shard_numel, m.dtype) for m in dests)
        params.append((groups.pop(), -nbytes, name, part_names, shape, dests))

    params.sort(key=lambda p: p[:3])
    load = collections.Counter()
    tasks = []
    for group, neg_bytes, name, part_names, shape, dests in params:
        candidates = sorted(set(m.rank for p in part_names for m in train[p]))
        owner = min(candidates, key=lambda r: (load[r], r))
        load[owner] += -neg_bytes
        offset = 0
        destinations = []
        for meta in sorted(dests, key=lambda m: (m.rank, m.shard_index)):
            dst_offset, length = layout[meta.rank][name]
            destinations.append(
                Destination(meta.rank, meta.shard_index, meta.shard_count, offset, length, dst_offset)
            )
            offset += length
        parts = tuple(
            PartInfo(p, train[p][0].shape, train[p][0].shard_axis, train[p][0].shard_count) for p in part_names
        )
        tasks.append(
            Task(name, owner, group, dests[0].dtype, shape, dests[0].shard_axis, parts, tuple(destinations), offset)
        )
    logger.info("schedule of %d tasks over %d training ranks", len(tasks), len(load))
    return TransferSchedule(tasks)


def source_balance(schedule, ranks):
    """:return: max over `ranks` of bytes sent divided by the mean"""
    per = schedule.bytes_per_source()
    loads = [per.get(r, 0) for r in ranks]
    mean = sum(loads) / float(len(loads))
    return max(loads) / mean if mean else 1.0


# ===========================================================================
# SHARD SOURCES
# ===========================================================================


class InMemoryShards(object):
    """training shards of one process, keyed (name, shard index)"""

    def __init__(self, shards=None):
        self._shards = dict(shards or {})

    @classmethod
    def from_tensors(cls, tensors, train_metas):
        shards = {}
        for meta in train_metas:
            full = np.asarray(tensors[meta.name], dtype=np.float32)
            if full.shape != meta.shape:
                raise ScheduleError("tensor %s is %s, meta says %s" % (meta.name, full.shape, meta.shape))
            shards[(meta.name, meta.shard_index)] = np.ascontiguousarray(
                shard_slice(full, meta.shard_axis, meta.shard_index, meta.shard_count)
            )
        return cls(shards)

    def drop(self, name, index):
        self._shards.pop((name, index), None)

    def shard(self, part, index):
        try:
            return self._shards[(part.name, index)]
        except KeyError:
            raise ScheduleError("shard %d of %s is missing" % (index, part.name))


class SyntheticShards(object):
    """deterministic tensors every process can regenerate from the name"""

    def __init__(self, seed=0):
        self.seed = seed

    def full(self, name, shape):
        rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
        return rng.standard_normal(shape).astype(np.float32)

    def shard(self, part, index):
        return np.ascontiguousarray(shard_slice(self.full(part.name, part.shape), part.axis, index, part.count))


def full_tensor(part, source):
    """gathers every shard of one training parameter"""
    shards = [source.shard(part, i) for i in range(part.count)]
    if part.count == 1:
        return np.asarray(shards[0], dtype=np.float32)
    return np.concatenate(shards, axis=part.axis)


def prepare(task, source, parts=None):
    """
    builds the contiguous send buffer of a task: destination shards of the
    fused full tensor, each narrowed to the inference dtype

    :param parts: full tensors of the parts when already gathered
    """
    if parts is None:
        parts = [full_tensor(p, source) for p in task.parts]
    fused = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    buffer = np.empty(max(task.nbytes, 1), dtype=np.uint8)
    for d in task.destinations:
        piece = narrow(shard_slice(fused, task.axis, d.shard_index, d.shard_count), task.dtype)
        if len(piece) != d.length:
            raise ScheduleError("%s: shard of %d bytes, scheduled %d" % (task.name, len(piece), d.length))
        buffer[d.offset : d.offset + d.length] = piece
    return buffer


def expected_shard(meta, source, fusion=None, train_parts=None):
    """bytes an inference shard must hold once the step is over"""
    names = (fusion or {}).get(meta.name, [meta.name])
    parts = [full_tensor(train_parts[n], source) for n in names]
    fused = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    return narrow(shard_slice(fused, meta.shard_axis, meta.shard_index, meta.shard_count), meta.dtype)


def part_infos(train_metas):
    return dict(
        (name, PartInfo(name, shards[0].shape, shards[0].shard_axis, shards[0].shard_count))
        for name, shards in _training_parts(train_metas).items()
    )


# ===========================================================================
# PIPELINE
# ===========================================================================


@dataclasses.dataclass
class StageTimes(object):
    """simulated minimum duration of each stage, in seconds"""

    h2d: float = 0.0
    prepare: float = 0.0
    write: float = 0.0
    barrier: float = 0.0

    def of(self, stage):
        return getattr(self, stage_lut[stage])


@dataclasses.dataclass
class PipelineConfig(object):
    watermark: int = 1 << 30
    stage_times: StageTimes = dataclasses.field(default_factory=StageTimes)
    write_timeout: float = 30.0
    queue_depth: int = 2


@dataclasses.dataclass
class StepReport(object):
    wall_time: float
    bytes_per_rank: Dict[int, int]
    peak_inflight: int
    tasks: int
    watermark: int

    def to_dict(self):
        return dataclasses.asdict(self)


class _Job(object):
    __slots__ = ("index", "task", "parts", "buffer", "handle")

    def __init__(self, index, task):
        self.index = index
        self.task = task
        self.parts = None
        self.buffer = None
        self.handle = None


_DONE = object()


class WeightSender(object):
    """the executor of one training rank"""

    def __init__(self, engine, rank, schedule, source, config=None, barrier=None, trace=None):
        self.engine = engine
        self.rank = rank
        self.tasks = schedule.tasks_for(rank)
        self.source = source
        self.config = config if config is not None else PipelineConfig()
        self.barrier = barrier
        self.trace = trace if trace is not None else NullTrace()
        self.dst_descs = {}
        self._inflight = 0
        self._peak = 0
        self._cond = threading.Condition()
        self._error = None

    def bind(self, dst_descs):
        """:param dst_descs: {inference rank: MrDesc}"""
        self.dst_descs = dict(dst_descs)
        for task in self.tasks:
            for d in task.destinations:
                if d.rank not in self.dst_descs:
                    raise ScheduleError("no region for inference rank %d" % d.rank)

    # -----------------------------------------------------------------------
    # stages
    # -----------------------------------------------------------------------

    def _pace(self, stage, started):
        left = started + self.config.stage_times.of(stage) - time.monotonic()
        if left > 0:
            time.sleep(left)

    def _h2d(self, job):
        job.parts = [full_tensor(p, self.source).copy() for p in job.task.parts]

    def _prepare(self, job):
        job.buffer = prepare(job.task, self.source, job.parts)
        job.parts = None
        job.handle, _ = self.engine.reg_mr(job.buffer)

    def _write(self, job):
        ops = []
        for d in job.task.destinations:
            ops.append(
                self.engine.submit_single_write(
                    d.length, None, (job.handle, d.offset), (self.dst_descs[d.rank], d.dst_offset)
                )
            )
        for op in ops:
            if not op.wait(self.config.write_timeout):
                raise TransferError("%s: write timed out" % job.task.name)
            if op.error is not None:
                raise TransferError("%s: write failed: %s" % (job.task.name, op.error))

    def _barrier(self, job):
        self.engine.dereg_mr(job.handle)
        job.handle = None
        job.buffer = None
        with self._cond:
            self._inflight -= job.task.temp_bytes
            self.trace.record("release", rank=self.rank, task=job.index, inflight=self._inflight)
            self._cond.notify_all()

    def _lane(self, stage, inbox, outbox):
        work = {
            Stage.H2D: self._h2d,
            Stage.PREPARE: self._prepare,
            Stage.WRITE: self._write,
            Stage.BARRIER: self._barrier,
        }[stage]
        name = stage_lut[stage]
        while True:
            job = inbox.get()
            if job is _DONE:
                if outbox is not None:
                    outbox.put(_DONE)
                return
            if self._error is not None:
                if stage == Stage.BARRIER:
                    self._abandon(job)
                elif outbox is not None:
                    outbox.put(job)
                continue
            started = time.monotonic()
            self.trace.record("stage", rank=self.rank, task=job.index, stage=name, phase="start")
            try:
                work(job)
                self._pace(stage, started)
            except Exception as err:
                logger.error("rank %d: %s of %s failed: %s", self.rank, name, job.task.name, err)
                self._error = self._error or err
            self.trace.record("stage", rank=self.rank, task=job.index, stage=name, phase="end")
            if self._error is not None and stage == Stage.BARRIER:
                self._abandon(job)
            elif outbox is not None:
                outbox.put(job)

    def _abandon(self, job):
        if job.handle is not None:
            try:
                self.engine.dereg_mr(job.handle)
            except Exception:
                pass
            job.handle = None
        with self._cond:
            self._inflight -= job.task.temp_bytes
            self._cond.notify_all()

    # -----------------------------------------------------------------------
    # step
    # -----------------------------------------------------------------------

    def _admit(self, job):
        need = job.task.temp_bytes
        with self._cond:
            while self._inflight + need > self.config.watermark and self._error is None:
                self._cond.wait(0.1)
            self._inflight += need
            self._peak = max(self._peak, self._inflight)
            self.trace.record("admit", rank=self.rank, task=job.index, inflight=self._inflight)

    def run_step(self):
        """
        :return: (seconds, bytes written, peak in-flight temporary bytes)
        """
        for task in self.tasks:
            if task.temp_bytes > self.config.watermark:
                raise WatermarkError(
                    "task %s needs %d bytes, watermark is %d"
                    % (task.name, task.temp_bytes, self.config.watermark)
                )
        self._error = None
        self._peak = 0
        depth = self.config.queue_depth
        queues = [queue.Queue(maxsize=depth) for _ in range(4)]
        lanes = []
        for i, stage in enumerate(Stage):
            outbox = queues[i + 1] if i < 3 else None
            lane = threading.Thread(
                target=self._lane,
                args=(stage, queues[i], outbox),
                name="rank%d-%s" % (self.rank, stage_lut[stage]),
                daemon=True,
            )
            lane.start()
            lanes.append(lane)
        started = time.monotonic()
        for index, task in enumerate(self.tasks):
            job = _Job(index, task)
            self._admit(job)
            if self._error is not None:
                self._abandon(job)
                break
            queues[0].put(job)
        queues[0].put(_DONE)
        for lane in lanes:
            lane.join()
        if self._error is not None:
            raise self._error
        # every rank's full tensors are done before anyone moves on
        if self.barrier is not None:
            self.barrier()
        elapsed = time.monotonic() - started
        sent = sum(task.nbytes for task in self.tasks)
        logger.info(
            "rank %d: %d tasks, %d bytes in %.1f ms, peak %d bytes",
            self.rank,
            len(self.tasks),
            sent,
            elapsed * 1e3,
            self._peak,
        )
        return elapsed, sent, self._peak


class WeightReceiver(object):
    """an inference rank: one registered region, no protocol"""

    def __init__(self, engine, rank, infer_metas):
        self.engine = engine
        self.rank = rank
        layout, sizes = inference_layout([m for m in infer_metas if m.rank == rank])
        self.layout = layout.get(rank, {})
        self.metas = dict((m.name, m) for m in infer_metas if m.rank == rank)
        self.buffer = np.zeros(max(sizes.get(rank, 0), 1), dtype=np.uint8)
        self.handle, self.desc = engine.reg_mr(self.buffer)

    def raw(self, name):
        offset, length = self.layout[name]
        return self.buffer[offset : offset + length]

    def read(self, name):
        meta = self.metas[name]
        return widen(self.raw(name), meta.dtype, meta.shard_shape)


def run_step(senders, barrier_timeout=60.0):
    """
    runs one step on every in-process sender at once; they meet at a
    thread barrier once all their tasks are written

    :return: StepReport
    """
    results = {}
    errors = []
    shared = threading.Barrier(max(len(senders), 1))
    for sender in senders:
        sender.barrier = lambda: shared.wait(barrier_timeout)

    def run(sender):
        try:
            results[sender.rank] = sender.run_step()
        except Exception as err:
            errors.append(err)
            shared.abort()

    started = time.monotonic()
    threads = [threading.Thread(target=run, args=(s,), name="sender%d" % s.rank) for s in senders]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    wall = time.monotonic() - started
    return StepReport(
        wall,
        dict((rank, r[1]) for rank, r in results.items()),
        max([r[2] for r in results.values()] or [0]),
        sum(len(s.tasks) for s in senders),
        max([s.config.watermark for s in senders] or [0]),
    )


def random_metas(rng, num_params, train_ranks, infer_ranks, mesh_groups=1, max_dim=8, dtypes=("bf16", "fp8")):
    """random but consistent (training, inference) meta sets for coverage checks"""
    train, infer = [], []
    group_ranks = np.array_split(np.arange(train_ranks), mesh_groups)
    for i in range(num_params):
        name = "p%03d" % i
        group = int(rng.integers(mesh_groups))
        ranks = [int(r) for r in group_ranks[group]]
        t_count = int(rng.choice([c for c in (1, 2, 4, 8) if c <= len(ranks)]))
        i_count = int(rng.choice([c for c in (1, 2, 4) if c <= infer_ranks]))
        rows = int(rng.integers(1, max_dim + 1)) * math.lcm(t_count, i_count)
        shape = (rows, int(rng.integers(1, max_dim + 1)))
        owners = rng.choice(ranks, size=t_count, replace=False)
        for index, rank in enumerate(owners):
            train.append(ParamMeta(name, shape, "bf16", int(rank), group, 0, index, t_count))
        dtype = str(rng.choice(list(dtypes)))
        if i_count == 1:
            for rank in range(infer_ranks):
                infer.append(ParamMeta(name, shape, dtype, rank))
        else:
            for rank in range(infer_ranks):
                infer.append(ParamMeta(name, shape, dtype, rank, 0, 0, rank % i_count, i_count))
    return train, infer
