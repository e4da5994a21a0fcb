#!/usr/bin/env python

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

import os
import sys
import threading
import unittest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from XferEngine.Construct import (
    TcpBootstrap,
    close_all,
    make_engine,
    make_region,
    make_sim_engines,
)
from XferEngine.core import MrDesc, NetAddr
from XferEngine.fabric import SimFabric


class TestMakeEngine(unittest.TestCase):
    def test_sim(self):
        fabric = SimFabric()
        engine = make_engine("sim", 2, fabric=fabric, name="one")
        self.addCleanup(close_all, [engine], fabric)
        assert engine.group().num_rails == 2

    def test_socket(self):
        engine = make_engine("socket")
        self.addCleanup(close_all, [engine])
        assert engine.main_address().as_inet()[0] == "127.0.0.1"

    def test_errors(self):
        with self.assertRaises(ValueError):
            make_engine("sim")
        with self.assertRaises(ValueError):
            make_engine("carrier pigeon")

    def test_region_fill(self):
        fabric, (engine,) = make_sim_engines(1)
        self.addCleanup(close_all, [engine], fabric)
        buf, _, desc = make_region(engine, 16, fill=7)
        assert (buf == 7).all()
        assert desc.length == 16


class TestTcpBootstrap(unittest.TestCase):
    def test_allgather_and_barrier(self):
        world = 3
        server = TcpBootstrap(0, world, timeout=10)
        boots = [server] + [TcpBootstrap(r, world, port=server.port, timeout=10) for r in range(1, world)]
        results = {}
        errors = []

        def run(boot):
            try:
                with boot:
                    blob = MrDesc(boot.rank * 4096, 64, [(NetAddr.sim(boot.rank, 0), boot.rank + 1)]).encode()
                    results[boot.rank] = boot.allgather(blob)
                    boot.barrier()
            except Exception as err:
                errors.append(err)

        threads = [threading.Thread(target=run, args=(b,)) for b in boots]
        for t in threads:
            t.start()
        for t in threads:
            t.join(30)
        assert not errors, errors
        assert len(results) == world
        for rank in range(world):
            descs = [MrDesc.decode(blob) for blob in results[rank]]
            assert [d.base for d in descs] == [0, 4096, 8192]
            assert results[rank] == results[0]


def suite():
    test_suite = unittest.TestSuite()
    return test_suite

if __name__ == "__main__":
    unittest.main()
