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
Event recorder shared by the fabric, the socket rail, the engine loop and
the protocols. The event schema is in docs/trace.md.
"""

import json
import logging
import threading
import time

logger = logging.getLogger(__name__)


class Trace(object):
    enabled = True

    def __init__(self, name=None):
        self.name = name
        self._events = []
        self._lock = threading.Lock()

    def record(self, kind, **fields):
        with self._lock:
            # stamped under the lock so list order is timestamp order
            event = {"t": time.monotonic_ns(), "kind": kind}
            event.update(fields)
            self._events.append(event)

    def select(self, kind=None, **match):
        with self._lock:
            events = list(self._events)
        out = []
        for event in events:
            if kind is not None and event["kind"] != kind:
                continue
            if all(event.get(k) == v for k, v in match.items()):
                out.append(event)
        return out

    def first(self, kind=None, **match):
        found = self.select(kind, **match)
        return found[0] if found else None

    def last(self, kind=None, **match):
        found = self.select(kind, **match)
        return found[-1] if found else None

    def clear(self):
        with self._lock:
            del self._events[:]

    def __len__(self):
        return len(self._events)

    def to_jsonl(self, path):
        with self._lock:
            events = list(self._events)
        with open(path, "w") as fp:
            for event in events:
                fp.write(json.dumps(event, sort_keys=True, default=_jsonable))
                fp.write("\n")
        logger.info("wrote %d trace events to %s", len(events), path)
        return len(events)

    @classmethod
    def from_jsonl(cls, path):
        trace = cls(name=path)
        with open(path) as fp:
            for line in fp:
                line = line.strip()
                if line:
                    trace._events.append(json.loads(line))
        return trace


def _jsonable(value):
    if isinstance(value, bytes):
        return value.hex()
    if hasattr(value, "raw"):
        return value.raw.hex()
    if hasattr(value, "item"):
        return value.item()
    return repr(value)


def is_monotone(events):
    stamps = [e["t"] for e in events]
    return all(a <= b for a, b in zip(stamps, stamps[1:]))


class NullTrace(object):
    """drop-in for Trace when nothing should be recorded"""

    name = None
    enabled = False

    def record(self, kind, **fields):
        pass

    def select(self, kind=None, **match):
        return []

    def __len__(self):
        return 0
