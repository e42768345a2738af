"""
FP8 E4M3 codec and per-tensor scaled quantization.

E4M3 bytes hold 1 sign bit, 4 exponent bits (bias 7) and 3 mantissa bits.
There are no infinities: the all-ones exponent and mantissa pattern is NaN,
leaving 448 as the largest finite magnitude. Encoding rounds to nearest
(ties to even) and saturates out-of-range magnitudes to +/-448.

A tensor is quantized with one scale, ``s = max|x| / 448``, so that its
largest element lands on the largest finite code::

    codes = encode(x / s)
    x'    = decode(codes) * s
"""

from typing import Union

import struct

from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from uspsim.tensor import Tensor4, check_tensor4


FP8_MAX = 448.0

MAX_FINITE_CODE = 0x7E
NAN_CODE = 0x7F
SIGN_BIT = 0x80

HEADER_FORMAT = "<4I"
SCALE_FORMAT = "<f"


class NonFiniteError(ValueError):
    """
    Thrown when asked to quantize a tensor containing NaN or infinite
    values (which have no meaningful scale).
    """


def _build_decode_table() -> npt.NDArray[np.float32]:
    codes = np.arange(256)
    sign = np.where(codes & SIGN_BIT, -1.0, 1.0)
    exponent = (codes >> 3) & 0xF
    mantissa = codes & 0x7
    magnitude = np.where(
        exponent == 0,
        mantissa * 2.0 ** -9,  # Subnormal: 0.m * 2^(1 - 7)
        (1.0 + mantissa / 8.0) * 2.0 ** (exponent - 7.0),
    )
    values = sign * magnitude
    values[(exponent == 0xF) & (mantissa == 0x7)] = np.nan
    return values.astype(np.float32)


DECODE_TABLE = _build_decode_table()
"""The value of every byte code, NaN for the two NaN patterns."""

# Non-negative finite values (codes 0x00 to 0x7E) are strictly increasing
# so encoding is a search over the midpoints between neighbouring values.
_POSITIVE_VALUES = DECODE_TABLE[:MAX_FINITE_CODE + 1].astype(np.float64)
_MIDPOINTS = (_POSITIVE_VALUES[:-1] + _POSITIVE_VALUES[1:]) / 2.0


def encode_e4m3_array(x: npt.ArrayLike) -> npt.NDArray[np.uint8]:
    """
    Elementwise round-to-nearest-even cast of float values to E4M3 codes.
    """
    x = np.asarray(x, dtype=np.float32)
    magnitude = np.abs(x).astype(np.float64)

    nan = np.isnan(magnitude)
    magnitude = np.where(nan, 0.0, magnitude)

    # Number of midpoints strictly below the magnitude: the nearest code,
    # or the lower code of a tie. Values beyond the last midpoint saturate.
    codes = np.searchsorted(_MIDPOINTS, magnitude, side="left")
    tie = (codes < MAX_FINITE_CODE) & (codes % 2 == 1)
    tie &= magnitude == _MIDPOINTS[np.minimum(codes, MAX_FINITE_CODE - 1)]
    codes = np.where(tie, codes + 1, codes)

    codes = np.where(np.signbit(x), codes | SIGN_BIT, codes)
    codes = np.where(nan, NAN_CODE, codes)
    return codes.astype(np.uint8)


def encode_e4m3(x: float) -> int:
    """Encode a single float as an E4M3 byte."""
    return int(encode_e4m3_array(np.float32(x)))


def decode_e4m3(code: int) -> float:
    """Decode a single E4M3 byte."""
    if not 0 <= code <= 0xFF:
        raise ValueError(f"{code} is not a byte")
    return float(DECODE_TABLE[code])


def is_nan_code(code: int) -> bool:
    return (code & ~SIGN_BIT) == NAN_CODE


@dataclass(frozen=True)
class QuantizedTensor:
    """
    A tensor quantized to E4M3 codes with a single scale.
    """

    shape: tuple[int, int, int, int]
    codes: npt.NDArray[np.uint8]
    """Flat, row-major codes."""
    scale: float
    """Always strictly positive (1.0 for an all-zero tensor)."""

    def __post_init__(self) -> None:
        if self.codes.size != int(np.prod(self.shape)):
            raise ValueError(f"{self.codes.size} codes given for shape {self.shape}")
        if not self.scale > 0:
            raise ValueError(f"Scale must be positive, got {self.scale}")

    def payload(self) -> bytes:
        """
        The form sent inside protocol messages: 4-byte scale then the codes.
        The receiver knows the shape from the collective it is part of.
        """
        return struct.pack(SCALE_FORMAT, self.scale) + self.codes.tobytes()

    @classmethod
    def from_payload(cls, shape: tuple[int, int, int, int], payload: Union[bytes, memoryview]) -> "QuantizedTensor":
        (scale,) = struct.unpack_from(SCALE_FORMAT, payload)
        codes = np.frombuffer(payload, dtype=np.uint8, offset=struct.calcsize(SCALE_FORMAT))
        return cls(shape=tuple(shape), codes=codes, scale=scale)

    def to_bytes(self) -> bytes:
        """Self-describing form: 16-byte shape header, scale, codes."""
        return struct.pack(HEADER_FORMAT, *self.shape) + self.payload()

    @classmethod
    def from_bytes(cls, data: Union[bytes, memoryview]) -> "QuantizedTensor":
        shape = struct.unpack_from(HEADER_FORMAT, data)
        return cls.from_payload(shape, memoryview(data)[struct.calcsize(HEADER_FORMAT):])

    @staticmethod
    def payload_size(n_elements: int) -> int:
        return struct.calcsize(SCALE_FORMAT) + n_elements


def quantize(x: Tensor4) -> QuantizedTensor:
    """
    Quantize ``x`` with ``scale = max|x| / FP8_MAX``.
    """
    check_tensor4(x)
    if not np.all(np.isfinite(x)):
        raise NonFiniteError("Cannot quantize a tensor containing NaN or infinite values")

    x = x.astype(np.float32, copy=False)
    amax = np.float32(np.max(np.abs(x))) if x.size else np.float32(0)
    if amax == 0:
        scale = np.float32(1.0)
    else:
        scale = max(np.float32(amax / np.float32(FP8_MAX)), np.finfo(np.float32).smallest_subnormal)

    codes = encode_e4m3_array(x / scale).reshape(-1)
    return QuantizedTensor(shape=tuple(x.shape), codes=codes, scale=float(scale))


def dequantize(q: QuantizedTensor) -> Tensor4:
    """
    Decode and rescale. The product is formed in 64-bit (where it is exact)
    and then rounded once to 32-bit.
    """
    values = DECODE_TABLE[q.codes].astype(np.float64) * float(np.float32(q.scale))
    return values.astype(np.float32).reshape(q.shape)


def relative_error(approx: npt.ArrayLike, exact: npt.ArrayLike) -> float:
    """
    Frobenius-norm relative error ``||approx - exact|| / ||exact||`` (0 when
    both are zero).
    """
    approx = np.asarray(approx, dtype=np.float64)
    exact = np.asarray(exact, dtype=np.float64)
    norm = np.linalg.norm(exact)
    error = np.linalg.norm(approx - exact)
    if norm == 0:
        return 0.0 if error == 0 else float("inf")
    return float(error / norm)
