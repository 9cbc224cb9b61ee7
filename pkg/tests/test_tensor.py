import numpy as np
import pytest

from exray.errors import CalibrationError, NonFiniteError, QuantizationError, TensorFormatError
from exray.models import DType, QuantScheme
from exray.tensor import (
    Tensor,
    affine_params,
    calibrate,
    decode_tensor,
    dequantize,
    dequantize_affine,
    encode_tensor,
    load_tensor,
    quantize_affine,
    quantize_symmetric,
    round_half_away,
    save_tensor,
)


def test_round_half_away_from_zero():
    assert round_half_away(np.array([0.5, 1.5, 2.5, -0.5, -1.5, 0.49])).tolist() == [1, 2, 3, -1, -2, 0]


@pytest.mark.parametrize("x, expected", [(0.0, 0), (1.0, 255), (0.5, 128)])
def test_quantize_affine_bounds_and_midpoint(x, expected):
    q = quantize_affine(Tensor.f32([x]), affine_params(0.0, 1.0))
    assert q.dtype == DType.U8
    assert int(q.array[0]) == expected


def test_quantize_affine_clips_out_of_range():
    q = quantize_affine(Tensor.f32([-3.0, 7.0]), affine_params(-1.0, 1.0))
    assert q.array.tolist() == [0, 255]


def test_quantize_affine_rejects_non_finite():
    with pytest.raises(NonFiniteError) as info:
        quantize_affine(Tensor.f32([[0.0, 1.0], [np.nan, 0.5]]), affine_params(0.0, 1.0))
    assert info.value.index == (1, 0)


def test_affine_params_reject_empty_range():
    with pytest.raises(CalibrationError):
        affine_params(1.0, 1.0)


def test_dequantize_affine_examples():
    qp = affine_params(-1.0, 1.0)
    q = Tensor(DType.U8, np.array([0, 255], dtype=np.uint8), qp)
    assert dequantize_affine(q).array.tolist() == pytest.approx([-1.0, 1.0])

    q = Tensor(DType.U8, np.array([128], dtype=np.uint8), affine_params(0.0, 1.0))
    assert float(dequantize_affine(q).array[0]) == pytest.approx(128 / 255, abs=1e-6)


def test_affine_round_trip_bound(rng):
    for _ in range(200):
        lo = rng.uniform(-10, 0)
        hi = lo + rng.uniform(1e-3, 20)
        x = rng.uniform(lo, hi, 64)
        qp = affine_params(lo, hi)
        back = dequantize_affine(quantize_affine(Tensor.f32(x), qp)).array.astype(np.float64)
        x32 = np.clip(x.astype(np.float32).astype(np.float64), lo, hi)
        # float32 storage of the input and output adds a few ulps on top of the half step
        assert np.all(np.abs(back - x32) <= (hi - lo) / 510 + 1e-5 * max(abs(lo), abs(hi), 1.0))


def test_symmetric_full_scale_and_zero():
    q = quantize_symmetric(Tensor.f32([1.0, 0.0, -0.5]))
    assert q.dtype == DType.I8
    assert q.array.tolist() == [127, 0, -64]
    assert q.quant.scheme == QuantScheme.PER_TENSOR_SYMMETRIC
    assert q.quant.zero_point == 0


def test_symmetric_per_tensor_squashes_small_channel(rng):
    w = np.stack([rng.uniform(-1, 1, 16), rng.uniform(-0.001, 0.001, 16)])
    w[0, 0] = 1.0
    per_tensor = quantize_symmetric(Tensor.f32(w))
    assert per_tensor.quant.scale[0] == pytest.approx(1 / 127)
    assert np.all(per_tensor.array[1] == 0)

    per_channel = quantize_symmetric(Tensor.f32(w), per_channel=True, channel_axis=0)
    assert per_channel.quant.scale[1] == pytest.approx(np.abs(w[1]).max() / 127)
    restored = dequantize(per_channel).array[1]
    assert np.any(restored != 0)
    assert np.all(np.abs(restored - w[1]) <= per_channel.quant.scale[1] / 2 + 1e-9)


def test_symmetric_all_zero_is_degenerate_but_valid():
    q = quantize_symmetric(Tensor.f32(np.zeros(4)))
    assert q.quant.scale == [1.0]
    assert q.warnings
    assert np.all(q.array == 0)


def test_symmetric_rejects_empty_and_bad_axis():
    with pytest.raises(QuantizationError):
        quantize_symmetric(Tensor.f32(np.zeros((0,))))
    with pytest.raises(QuantizationError):
        quantize_symmetric(Tensor.f32(np.ones((2, 2))), per_channel=True, channel_axis=5)


def test_calibrate_running_extremes():
    assert calibrate([Tensor.f32([0.0, 1.0])]) == (0.0, 1.0)
    assert calibrate([Tensor.f32([-2.0, 1.0]), Tensor.f32([0.0, 3.0])]) == (-2.0, 3.0)


def test_calibrate_outlier_inflates_resolution(rng):
    values = rng.uniform(-1, 1, 100)
    values[17] = 100.0
    lo, hi = calibrate([Tensor.f32(values)])
    assert hi == 100.0
    assert (hi - lo) / 255 == pytest.approx(0.396, abs=1e-3)


def test_calibrate_per_channel_and_empty():
    lo, hi = calibrate([Tensor.f32([[0.0, -1.0], [2.0, 4.0]])], per_channel=True, channel_axis=1)
    assert lo.tolist() == [0.0, -1.0]
    assert hi.tolist() == [2.0, 4.0]
    with pytest.raises(CalibrationError):
        calibrate([])


def test_int8_tensor_requires_quant_params():
    with pytest.raises(QuantizationError):
        Tensor(DType.I8, np.zeros(3, dtype=np.int8))
    with pytest.raises(QuantizationError):
        Tensor(DType.F32, np.zeros(3), affine_params(0.0, 1.0))


def test_tensor_arrays_are_read_only():
    t = Tensor.f32([1.0, 2.0])
    with pytest.raises(ValueError):
        t.array[0] = 5.0


def test_ten_file_round_trip(tmp_path, rng):
    tensors = [
        Tensor.f32(rng.normal(size=(3, 4, 2))),
        Tensor.i32(rng.integers(-1000, 1000, (5,))),
        quantize_symmetric(Tensor.f32(rng.normal(size=(2, 3))), per_channel=True, channel_axis=1),
        quantize_affine(Tensor.f32(rng.uniform(0, 1, (4, 4))), affine_params(0.0, 1.0)),
    ]
    for i, tensor in enumerate(tensors):
        save_tensor(tmp_path / f"{i}.ten", tensor)
        assert load_tensor(tmp_path / f"{i}.ten") == tensor


def test_ten_file_header_layout():
    buffer = encode_tensor(Tensor.f32(np.zeros((2, 3))))
    assert buffer[:4] == b"TEN0"
    assert buffer[4] == 0 and buffer[5] == 2
    assert len(buffer) == 8 + 8 + 24


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + b"\x09" + b[5:],
        lambda b: b[:-1],
        lambda b: b + b"\x00",
        lambda b: b[:6] + b"\x01" + b[7:],
    ],
)
def test_decode_tensor_rejects_malformed(mutate):
    buffer = encode_tensor(Tensor.f32(np.arange(6).reshape(2, 3)))
    with pytest.raises(TensorFormatError):
        decode_tensor(mutate(buffer))


def test_decode_rejects_quantized_without_trailer():
    q = quantize_symmetric(Tensor.f32([1.0, -1.0]))
    buffer = encode_tensor(q)
    with pytest.raises(TensorFormatError):
        decode_tensor(buffer[: 8 + 4 + 2])
