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
##along with XferEngine.  If not, see <http://www.gnu.org/licenses/>.

"""
This module helps looping over rails when sharding transfers
"""
import threading


class RailRotation(object):
    """
    endless, thread safe iterator over rail indices

    every call to next() returns the rail the next transfer starts on,
    so that consecutive transfers rotate across the domain group
    """

    def __init__(self, number_of_rails):
        assert number_of_rails >= 1, "need at least one rail"
        self.number_of_rails = number_of_rails
        self.index = 0
        self._lock = threading.Lock()

    def next(self):
        with self._lock:
            rail = self.index
            self.index = (self.index + 1) % self.number_of_rails
            return rail

    __next__ = next

    def __iter__(self):
        return self


def shard_round_robin(number_of_items, number_of_rails, start=0):
    """
    assigns item i to rail (start + i) % number_of_rails

    :return: list with, per rail, the item indices it carries
    per-rail counts never differ by more than one
    """
    assert number_of_rails >= 1, "need at least one rail"
    shards = [[] for _ in range(number_of_rails)]
    for i in range(number_of_items):
        shards[(start + i) % number_of_rails].append(i)
    return shards


def split_even(length, parts, max_piece=None):
    """
    splits [0, length) into `parts` contiguous pieces whose sizes differ by
    at most one byte, each further cut at max_piece

    :return: list (one per part) of lists of (offset, length)
    """
    assert parts >= 1
    base, extra = divmod(length, parts)
    out = []
    offset = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        pieces = []
        if max_piece is None or size <= max_piece:
            if size:
                pieces.append((offset, size))
        else:
            done = 0
            while done < size:
                step = min(max_piece, size - done)
                pieces.append((offset + done, step))
                done += step
        out.append(pieces)
        offset += size
    return out
