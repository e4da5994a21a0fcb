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
Dtype narrowing for the prepare stage of weight transfer.

fp8 is e4m3fn (no infinities, 0x7f/0xff are NaN, largest finite 448)
rounded to nearest even after division by a per-tensor scale
amax / 448; a prepared fp8 tensor is its codes followed by the scale as a
little-endian float32. bf16 is the upper half of the float32 bit pattern,
rounded to nearest even.
"""

import logging
import math

import numba
import numpy as np

from XferEngine.Common import FP8_E4M3_MAX
from XferEngine.types_lut import dtype_size

logger = logging.getLogger(__name__)

_NAN = 0x7F
_MAX_CODE = 0x7E
_MIN_NORMAL = 2.0**-6
_SUBNORMAL_STEP = 2.0**-9


# ===========================================================================
# SCALAR REFERENCE
# ===========================================================================


def e4m3_encode_scalar(value):
    """reference encoder of one already scaled value; saturates at +-448"""
    value = float(value)
    if value != value:
        return _NAN
    sign = 0x80 if math.copysign(1.0, value) < 0 else 0
    a = abs(value)
    if a >= FP8_E4M3_MAX:
        return sign | _MAX_CODE
    if a < _MIN_NORMAL:
        m = int(round(a / _SUBNORMAL_STEP))
        # m == 8 is the smallest normal, whose code is 0x08 as well
        return sign | m
    frac, exp = math.frexp(a)
    e = exp - 1
    m = int(round((frac * 2.0 - 1.0) * 8.0))
    if m == 8:
        e += 1
        m = 0
    return sign | ((e + 7) << 3) | m


def e4m3_decode_scalar(code):
    code = int(code)
    sign = -1.0 if code & 0x80 else 1.0
    e = (code >> 3) & 0xF
    m = code & 0x7
    if e == 0xF and m == 0x7:
        return float("nan")
    if e == 0:
        return sign * m * _SUBNORMAL_STEP
    return sign * (1.0 + m / 8.0) * 2.0 ** (e - 7)


def fp8_scale(x):
    amax = float(np.max(np.abs(x))) if x.size else 0.0
    if amax == 0.0 or not math.isfinite(amax):
        return np.float32(1.0)
    return np.float32(amax / FP8_E4M3_MAX)


def quantize_fp8_reference(x):
    """element by element, for checking the kernel"""
    x = np.asarray(x, dtype=np.float32).reshape(-1)
    scale = fp8_scale(x)
    codes = np.empty(x.size, dtype=np.uint8)
    for i in range(x.size):
        codes[i] = e4m3_encode_scalar(float(x[i]) / float(scale))
    return codes, scale


# ===========================================================================
# KERNEL
# ===========================================================================


@numba.njit(cache=False)
def _e4m3_encode(src, scale, out):
    for i in range(src.shape[0]):
        v = np.float64(src[i]) / scale
        if v != v:
            out[i] = 0x7F
            continue
        sign = 0
        if math.copysign(1.0, v) < 0:
            sign = 0x80
        a = abs(v)
        if a >= 448.0:
            out[i] = sign | 0x7E
        elif a < 0.015625:
            out[i] = sign | np.int64(np.rint(a / 0.001953125))
        else:
            frac, exp = math.frexp(a)
            e = exp - 1
            m = np.int64(np.rint((frac * 2.0 - 1.0) * 8.0))
            if m == 8:
                e += 1
                m = 0
            out[i] = sign | ((e + 7) << 3) | m


_DECODE_TABLE = np.array([e4m3_decode_scalar(c) for c in range(256)], dtype=np.float32)


def quantize_fp8(x):
    """:return: (uint8 codes, float32 scale)"""
    x = np.ascontiguousarray(x, dtype=np.float32).reshape(-1)
    scale = fp8_scale(x)
    codes = np.empty(x.size, dtype=np.uint8)
    _e4m3_encode(x, np.float64(scale), codes)
    return codes, scale


def dequantize_fp8(codes, scale):
    return _DECODE_TABLE[np.asarray(codes, dtype=np.uint8)] * np.float32(scale)


def pack_fp8(codes, scale):
    return np.concatenate([codes.view(np.uint8), np.array([scale], dtype="<f4").view(np.uint8)])


def unpack_fp8(data):
    data = np.asarray(data, dtype=np.uint8)
    return data[:-4], data[-4:].copy().view("<f4")[0]


# ===========================================================================
# BF16
# ===========================================================================


def to_bf16(x):
    """float32 -> uint16 bit patterns, round to nearest even, NaN kept quiet"""
    x = np.ascontiguousarray(x, dtype=np.float32)
    bits = x.view(np.uint32).astype(np.uint64)
    out = ((bits + 0x7FFF + ((bits >> 16) & 1)) >> 16).astype(np.uint16)
    out[np.isnan(x)] = 0x7FC0
    return out


def from_bf16(bits):
    return (np.asarray(bits, dtype=np.uint16).astype(np.uint32) << 16).view(np.float32)


# ===========================================================================
# NARROWING
# ===========================================================================


def narrow(x, dtype):
    """
    casts a float32 tensor to the bytes of `dtype` ('fp32', 'bf16', 'fp8')

    :return: flat uint8 array
    """
    x = np.ascontiguousarray(x, dtype=np.float32)
    if dtype == "fp32":
        return x.reshape(-1).view(np.uint8).copy()
    if dtype == "bf16":
        return to_bf16(x).reshape(-1).view(np.uint8)
    if dtype == "fp8":
        codes, scale = quantize_fp8(x)
        return pack_fp8(codes, scale)
    raise ValueError("unknown dtype %r" % dtype)


def widen(data, dtype, shape):
    """inverse of narrow, up to rounding"""
    data = np.asarray(data, dtype=np.uint8)
    if dtype == "fp32":
        return data.copy().view(np.float32).reshape(shape)
    if dtype == "bf16":
        return from_bf16(data.copy().view(np.uint16)).reshape(shape)
    if dtype == "fp8":
        codes, scale = unpack_fp8(data)
        return dequantize_fp8(codes, scale).reshape(shape)
    raise ValueError("unknown dtype %r" % dtype)


def narrowed_size(count, dtype):
    """bytes of `count` elements once narrowed"""
    return count * dtype_size[dtype] + (4 if dtype == "fp8" else 0)
