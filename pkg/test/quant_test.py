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
import unittest

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), '..'))

from XferEngine.quant import (
    dequantize_fp8,
    e4m3_decode_scalar,
    e4m3_encode_scalar,
    fp8_scale,
    from_bf16,
    narrow,
    narrowed_size,
    quantize_fp8,
    quantize_fp8_reference,
    to_bf16,
    widen,
)


class TestE4M3(unittest.TestCase):
    def test_known_codes(self):
        assert e4m3_encode_scalar(1.0) == 0x38
        assert e4m3_encode_scalar(-2.0) == 0xC0
        assert e4m3_encode_scalar(2.0**-9) == 0x01
        assert e4m3_encode_scalar(448.0) == 0x7E
        assert e4m3_decode_scalar(0x7E) == 448.0

    def test_saturation_and_nan(self):
        assert e4m3_encode_scalar(1e6) == 0x7E
        assert e4m3_encode_scalar(-1e6) == 0xFE
        assert e4m3_encode_scalar(float("nan")) == 0x7F
        assert np.isnan(e4m3_decode_scalar(0xFF))

    def test_finite_codes_are_fixed_points(self):
        for code in range(256):
            if code & 0x7F == 0x7F:
                continue
            assert e4m3_encode_scalar(e4m3_decode_scalar(code)) == code, hex(code)

    def test_ties_round_to_even(self):
        # halfway between 1.0 (m=0) and 1.125 (m=1)
        assert e4m3_encode_scalar(1.0625) == 0x38
        # halfway between 1.125 (m=1) and 1.25 (m=2)
        assert e4m3_encode_scalar(1.1875) == 0x3A


class TestFp8Kernel(unittest.TestCase):
    def test_matches_reference(self):
        rng = np.random.default_rng(7)
        for scale in (1e-3, 1.0, 300.0):
            x = (rng.standard_normal(3000) * scale).astype(np.float32)
            x[:4] = (0.0, -0.0, x.max() * 1.0, -np.abs(x).max())
            codes, s = quantize_fp8(x)
            ref_codes, ref_s = quantize_fp8_reference(x)
            assert s == ref_s
            assert np.array_equal(codes, ref_codes)

    def test_zero_tensor(self):
        codes, scale = quantize_fp8(np.zeros(16, dtype=np.float32))
        assert scale == np.float32(1.0)
        assert not codes.any()

    def test_error_bound(self):
        x = np.random.default_rng(8).standard_normal(4096).astype(np.float32)
        codes, scale = quantize_fp8(x)
        back = dequantize_fp8(codes, scale)
        assert np.all(np.abs(back - x) <= np.abs(x) * (2.0**-4 + 1e-6) + float(scale) * 2.0**-10)
        assert fp8_scale(x) == scale


class TestBf16(unittest.TestCase):
    def test_rounding(self):
        values = np.array([1.0, 1.0 + 2.0**-8, 1.0 + 3 * 2.0**-8, -2.5, np.nan], dtype=np.float32)
        assert list(to_bf16(values)) == [0x3F80, 0x3F80, 0x3F82, 0xC020, 0x7FC0]
        assert from_bf16(np.array([0x3F80], dtype=np.uint16))[0] == 1.0


class TestNarrowing(unittest.TestCase):
    def test_sizes(self):
        x = np.arange(12, dtype=np.float32).reshape(3, 4)
        for dtype in ("fp32", "bf16", "fp8"):
            data = narrow(x, dtype)
            assert data.dtype == np.uint8
            assert len(data) == narrowed_size(12, dtype)
        assert narrowed_size(10, "fp8") == 14

    def test_widen(self):
        x = np.linspace(-4, 4, 24, dtype=np.float32).reshape(4, 6)
        assert np.array_equal(widen(narrow(x, "fp32"), "fp32", (4, 6)), x)
        assert np.allclose(widen(narrow(x, "bf16"), "bf16", (4, 6)), x, rtol=2.0**-8)
        assert np.allclose(widen(narrow(x, "fp8"), "fp8", (4, 6)), x, rtol=2.0**-4, atol=4.0 / 448 * 2.0**-9)

    def test_unknown_dtype(self):
        with self.assertRaises(ValueError):
            narrow(np.zeros(2, dtype=np.float32), "int4")
        with self.assertRaises(ValueError):
            widen(np.zeros(2, dtype=np.uint8), "int4", (2,))


def suite():
    test_suite = unittest.TestSuite()
    return test_suite

if __name__ == "__main__":
    unittest.main()
