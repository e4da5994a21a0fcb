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
import threading

from XferEngine.Common import ImmCounterError, check_u32

logger = logging.getLogger(__name__)


class _Slot(object):
    __slots__ = ("received", "consumed", "threshold", "on_done")

    def __init__(self):
        self.received = 0
        self.consumed = 0
        self.threshold = None
        self.on_done = None

    @property
    def available(self):
        return self.received - self.consumed


class ImmCounterTable(object):
    """
    receipt counters per immediate value

    `received` never decreases. An armed expectation fires once when the
    receipts not yet consumed by an earlier expectation reach its threshold;
    firing consumes exactly `threshold` receipts so the value can be re-armed.
    """

    def __init__(self):
        self._slots = {}
        self._lock = threading.Lock()

    def _slot(self, imm):
        slot = self._slots.get(imm)
        if slot is None:
            slot = self._slots[imm] = _Slot()
        return slot

    def expect(self, imm, count, on_done):
        """
        :return: on_done when it is already satisfied (caller fires it), else None
        """
        imm = check_u32(imm, "immediate")
        count = check_u32(count, "expected count")
        with self._lock:
            slot = self._slot(imm)
            if slot.on_done is not None:
                raise ImmCounterError("immediate %d is already armed" % imm)
            if slot.available >= count:
                slot.consumed += count
                return on_done
            slot.threshold = count
            slot.on_done = on_done
        return None

    def increment(self, imm, amount=1):
        """:return: list of expectations that became satisfied"""
        with self._lock:
            slot = self._slot(imm)
            slot.received += amount
            if slot.on_done is not None and slot.available >= slot.threshold:
                fired = slot.on_done
                slot.consumed += slot.threshold
                slot.threshold = None
                slot.on_done = None
                return [fired]
        return []

    def disarm(self, imm):
        """drops a pending expectation without firing it"""
        with self._lock:
            slot = self._slots.get(imm)
            if slot is None or slot.on_done is None:
                return None
            on_done = slot.on_done
            slot.threshold = None
            slot.on_done = None
            return on_done

    def retire(self, imm):
        """forgets every receipt of `imm`, used when an imm value is recycled"""
        with self._lock:
            slot = self._slots.pop(imm, None)
        if slot is not None and slot.on_done is not None:
            logger.warning("retiring immediate %d while it is armed", imm)
        return slot

    def received(self, imm):
        with self._lock:
            slot = self._slots.get(imm)
            return 0 if slot is None else slot.received

    def available(self, imm):
        with self._lock:
            slot = self._slots.get(imm)
            return 0 if slot is None else slot.available

    def armed(self):
        with self._lock:
            return dict(
                (imm, (slot.threshold, slot.available))
                for imm, slot in self._slots.items()
                if slot.on_done is not None
            )
