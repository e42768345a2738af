import pytest

import json

import math

from pathlib import Path

import numpy as np

from uspsim.fp8 import (
    DECODE_TABLE,
    FP8_MAX,
    MAX_FINITE_CODE,
    NAN_CODE,
    NonFiniteError,
    QuantizedTensor,
    decode_e4m3,
    dequantize,
    encode_e4m3,
    encode_e4m3_array,
    is_nan_code,
    quantize,
    relative_error,
)

from uspsim.tensor import random_qkv, seeded_generator


FIXTURES = Path(__file__).parent / "fixtures"


def load_codes() -> list[dict]:
    with (FIXTURES / "e4m3_codes.json").open() as f:
        return json.load(f)


class TestCodec:

    @pytest.mark.parametrize("case", load_codes(), ids=lambda c: repr(c["value"]))
    def test_known_codes(self, case: dict) -> None:
        assert encode_e4m3(case["value"]) == case["code"]

    def test_decode_known_values(self) -> None:
        assert decode_e4m3(0x00) == 0.0
        assert decode_e4m3(0x38) == 1.0
        assert decode_e4m3(0x01) == 2.0 ** -9
        assert decode_e4m3(0x08) == 2.0 ** -6
        assert decode_e4m3(0x07) == 7 * 2.0 ** -9
        assert decode_e4m3(0x7E) == 448.0
        assert decode_e4m3(0xFE) == -448.0
        assert math.copysign(1.0, decode_e4m3(0x80)) == -1.0

    def test_nan_codes(self) -> None:
        assert math.isnan(decode_e4m3(0x7F))
        assert math.isnan(decode_e4m3(0xFF))
        assert is_nan_code(0x7F) and is_nan_code(0xFF)
        assert not is_nan_code(0x7E)
        assert encode_e4m3(float("nan")) == NAN_CODE
        # Exactly two NaN patterns and no infinities
        assert int(np.sum(np.isnan(DECODE_TABLE))) == 2
        assert not np.any(np.isinf(DECODE_TABLE))

    def test_decode_rejects_non_bytes(self) -> None:
        with pytest.raises(ValueError):
            decode_e4m3(256)
        with pytest.raises(ValueError):
            decode_e4m3(-1)

    @pytest.mark.parametrize("code", range(256))
    def test_roundtrip_every_code(self, code: int) -> None:
        if is_nan_code(code):
            assert is_nan_code(encode_e4m3(decode_e4m3(code)))
        else:
            assert encode_e4m3(decode_e4m3(code)) == code

    def test_max_finite_magnitude(self) -> None:
        finite = DECODE_TABLE[~np.isnan(DECODE_TABLE)]
        assert float(np.max(np.abs(finite))) == FP8_MAX
        assert decode_e4m3(MAX_FINITE_CODE) == FP8_MAX

    @pytest.mark.parametrize("value", [449.0, 480.0, 1e6, float("inf")])
    def test_saturation(self, value: float) -> None:
        assert encode_e4m3(value) == MAX_FINITE_CODE
        assert encode_e4m3(-value) == MAX_FINITE_CODE | 0x80

    def test_sign_symmetry(self) -> None:
        x = seeded_generator(0).uniform(-500, 500, size=10_000).astype(np.float32)
        assert np.array_equal(encode_e4m3_array(-x), encode_e4m3_array(x) ^ np.uint8(0x80))

    def test_round_to_nearest(self) -> None:
        # Every positive finite value rounds to its nearest representable value
        x = seeded_generator(1).uniform(0, 448, size=10_000).astype(np.float32)
        decoded = DECODE_TABLE[encode_e4m3_array(x)].astype(np.float64)
        finite = DECODE_TABLE[:MAX_FINITE_CODE + 1].astype(np.float64)
        nearest = np.min(np.abs(x.astype(np.float64)[:, None] - finite[None, :]), axis=1)
        assert np.array_equal(np.abs(decoded - x), nearest)


class TestQuantize:

    def test_max_element_maps_to_max_code(self) -> None:
        # amax / 448 is exact here so the max element is reproduced exactly
        x = np.array([[[[0.5, -1.75, 3.5, 0.0]]]], dtype=np.float32)
        q = quantize(x)
        assert q.scale == 3.5 / 448
        assert q.codes[2] == MAX_FINITE_CODE
        assert dequantize(q)[0, 0, 0, 2] == 3.5

    def test_max_element_within_one_ulp(self) -> None:
        x, _k, _v = random_qkv(1, 2, 8, 4, seed=3)
        q = quantize(x)
        flat = x.reshape(-1)
        i = int(np.argmax(np.abs(flat)))
        assert abs(q.codes[i] & 0x7F) == MAX_FINITE_CODE
        assert abs(dequantize(q).reshape(-1)[i] - flat[i]) <= np.spacing(np.abs(flat[i]))

    def test_all_zero(self) -> None:
        x = np.zeros((1, 2, 3, 4), dtype=np.float32)
        q = quantize(x)
        assert q.scale == 1.0
        assert np.all(q.codes == 0)
        assert np.array_equal(dequantize(q), x)

    @pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
    def test_non_finite_rejected(self, bad: float) -> None:
        x = np.ones((1, 1, 2, 2), dtype=np.float32)
        x[0, 0, 1, 1] = bad
        with pytest.raises(NonFiniteError):
            quantize(x)

    def test_gaussian_error(self) -> None:
        x = seeded_generator(4).standard_normal((2, 4, 64, 16)).astype(np.float32)
        assert relative_error(dequantize(quantize(x)), x) <= 0.03

    def test_dequantize_shape_and_dtype(self) -> None:
        x, _k, _v = random_qkv(2, 3, 4, 5, seed=5)
        out = dequantize(quantize(x))
        assert out.shape == x.shape
        assert out.dtype == np.float32

    def test_requantizing_is_stable(self) -> None:
        x, _k, _v = random_qkv(1, 2, 8, 4, seed=6)
        once = dequantize(quantize(x))
        twice = dequantize(quantize(once))
        assert relative_error(twice, once) <= 1e-6


class TestQuantizedTensorBytes:

    def test_to_bytes_layout(self) -> None:
        x = np.array([[[[1.0, -2.0]]]], dtype=np.float32)
        q = quantize(x)
        data = q.to_bytes()
        # 16 byte shape header, 4 byte scale, one byte per element
        assert len(data) == 16 + 4 + 2
        assert data[:16] == bytes([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0])

        decoded = QuantizedTensor.from_bytes(data)
        assert decoded.shape == (1, 1, 1, 2)
        assert decoded.scale == q.scale
        assert np.array_equal(decoded.codes, q.codes)

    def test_payload(self) -> None:
        x, _k, _v = random_qkv(1, 2, 3, 4, seed=7)
        q = quantize(x)
        payload = q.payload()
        assert len(payload) == QuantizedTensor.payload_size(x.size) == x.size + 4
        assert np.array_equal(dequantize(QuantizedTensor.from_payload(x.shape, payload)), dequantize(q))

    def test_invalid(self) -> None:
        with pytest.raises(ValueError):
            QuantizedTensor((1, 1, 1, 2), np.zeros(3, dtype=np.uint8), 1.0)
        with pytest.raises(ValueError):
            QuantizedTensor((1, 1, 1, 2), np.zeros(2, dtype=np.uint8), 0.0)


class TestRelativeError:

    def test_exact(self) -> None:
        x = np.ones((1, 1, 2, 2))
        assert relative_error(x, x) == 0.0

    def test_value(self) -> None:
        exact = np.array([3.0, 4.0])
        assert relative_error(exact + np.array([0.0, 0.5]), exact) == pytest.approx(0.1)

    def test_zero_reference(self) -> None:
        zero = np.zeros(3)
        assert relative_error(zero, zero) == 0.0
        assert relative_error(np.ones(3), zero) == float("inf")
