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

import itertools
import logging
import threading
import time

import numpy as np

from XferEngine.Common import WATCHER_BACKOFF, WATCHER_SPIN

logger = logging.getLogger(__name__)


class Watcher(object):
    """
    wraps a shared 64-bit word

    the application ("device") side stores progress through `value`; the
    poller thread of the engine reads it and calls cb(old, new)
    """

    _n = itertools.count()

    def __init__(self, callback):
        self.id = next(self._n)
        self.callback = callback
        self._word = np.zeros(1, dtype=np.uint64)
        self.last = 0
        self.active = True

    @property
    def value(self):
        return int(self._word[0])

    @value.setter
    def value(self, val):
        self._word[0] = val

    def increment(self, amount=1):
        """only safe from the single writer of this word"""
        self._word[0] += np.uint64(amount)

    @property
    def word(self):
        return self._word

    def __repr__(self):
        return "<Watcher #%d value=%d last=%d>" % (self.id, self.value, self.last)


class WatcherPoller(object):
    """
    one thread polling every live watcher

    callbacks see a strictly increasing sequence of values; intermediate
    values written between two polls are skipped
    """

    def __init__(self, dispatch, spin=WATCHER_SPIN, backoff=WATCHER_BACKOFF, name="watcher"):
        self.dispatch = dispatch
        self.spin = spin
        self.backoff = backoff
        self._watchers = {}
        self._lock = threading.Lock()
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, name=name, daemon=True)
        self._thread.start()

    def add(self, watcher):
        with self._lock:
            self._watchers[watcher.id] = watcher
        return watcher

    def remove(self, watcher):
        watcher.active = False
        with self._lock:
            self._watchers.pop(watcher.id, None)

    def close(self):
        self._stop.set()
        self._thread.join(timeout=2.0)

    def poll_once(self):
        """:return: number of changes found"""
        with self._lock:
            watchers = list(self._watchers.values())
        changed = 0
        for watcher in watchers:
            new = watcher.value
            if new > watcher.last:
                old, watcher.last = watcher.last, new
                changed += 1
                self.dispatch(watcher.callback, old, new)
        return changed

    def _run(self):
        idle_since = time.monotonic()
        while not self._stop.is_set():
            try:
                changed = self.poll_once()
            except Exception:
                logger.exception("watcher poll failed")
                changed = 0
            now = time.monotonic()
            if changed:
                idle_since = now
            elif now - idle_since > self.spin:
                time.sleep(self.backoff)
            else:
                # let the writer thread run between spins
                time.sleep(0)
