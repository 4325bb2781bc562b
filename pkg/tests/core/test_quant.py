from fractions import (
    Fraction,
)
import math

from hypothesis import (
    given,
    settings,
)
import numpy as np
import pytest

from canids.exceptions import (
    BiasOverflow,
    CalibrationError,
    ValidationError,
)
from canids.nn import (
    ModelSpec,
    TrainConfig,
    fold_batchnorm,
    init_model,
    predict_proba,
)
from canids.quant import (
    CalibrationSet,
    LayerScales,
    QuantLayer,
    TensorQuant,
    calibrate,
    calibration_set,
    evaluate_quantized,
    fake_quant_forward,
    finetune_qat,
    fraction_bits_for,
    qforward,
    qforward_batch,
    quantize,
    quantized_dense,
    saturation_report,
    scales_summary,
    validate_scale_chain,
)
from canids.tools.builder import (
    small_spec,
    toy_quant_model,
    trained_toy_model,
    two_cluster_arrays,
)
from canids.tools.strategies import (
    quant_layers,
)
from canids.utils.provenance import (
    model_hash,
)


@pytest.mark.parametrize(
    "max_abs, expected",
    (
        (0.5, 7),
        (2.0, 5),
        (0.0, 7),
        (127.0, 0),
        (127.5, -1),
        (1.0, 6),
        (0.99, 7),
        (1e-3, 16),
    ),
)
def test_fraction_bits_for(max_abs, expected):
    bits = fraction_bits_for(max_abs)
    assert bits == expected
    if max_abs:
        assert max_abs * 2.0**bits <= 127 < max_abs * 2.0 ** (bits + 1)


@pytest.mark.parametrize("max_abs", (math.inf, math.nan, -1.0))
def test_fraction_bits_for_rejects_bad_ranges(max_abs):
    with pytest.raises(CalibrationError):
        fraction_bits_for(max_abs)


def test_tensor_quant_rounds_half_to_even_and_clamps():
    codes = TensorQuant(7).quantize(np.array([0.5, 1.5, 2.0**-8, 3 * 2.0**-8, -2.0]))
    assert codes.dtype == np.int8
    assert codes.tolist() == [64, 127, 0, 2, -128]
    assert TensorQuant(7).dequantize(np.array([64], np.int8)).tolist() == [0.5]


@settings(max_examples=1000, deadline=None)
@given(quant_layers())
def test_quantized_dense_matches_exact_arithmetic(layer_and_inputs):
    layer, inputs = layer_and_inputs
    shift = layer.scales.requantize_shift
    expected = []
    for row in inputs.tolist():
        outputs = []
        for weights, bias in zip(layer.weight.tolist(), layer.bias.tolist()):
            accumulator = sum(w * x for w, x in zip(weights, row)) + bias
            code = round(Fraction(accumulator) * Fraction(2) ** shift)
            outputs.append(max(0, min(127, max(-128, code))))
        expected.append(outputs)

    result = quantized_dense(layer, inputs)
    assert result.dtype == np.int8
    assert result.tolist() == expected


def _exact_logit(qmodel, row):
    hidden = list(row)
    for layer in qmodel.layers[:-1]:
        shift = Fraction(2) ** layer.scales.requantize_shift
        codes = []
        for weights, bias in zip(layer.weight.tolist(), layer.bias.tolist()):
            accumulator = sum(map(int.__mul__, weights, hidden)) + bias
            codes.append(max(0, min(127, round(accumulator * shift))))
        hidden = codes
    final = qmodel.layers[-1]
    accumulator = sum(map(int.__mul__, final.weight.tolist()[0], hidden))
    accumulator += final.bias.tolist()[0]
    return Fraction(accumulator) * Fraction(2) ** -final.scales.output.fraction_bits


@pytest.mark.parametrize("seed", range(4))
def test_qforward_matches_exact_arithmetic(seed):
    qmodel = toy_quant_model(seed=seed)
    features = two_cluster_arrays(40, seed=seed).features
    scores = qforward_batch(qmodel, features)
    for row, score in zip(features.tolist(), scores.tolist()):
        logit = float(_exact_logit(qmodel, row))
        assert score == pytest.approx(1 / (1 + math.exp(-logit)), rel=1e-12)
        assert qforward(qmodel, np.array(row, dtype=np.int8)) == score


def test_quantized_dense_rejects_non_int8():
    layer = QuantLayer(
        np.ones((2, 3), np.int8),
        np.zeros(2, np.int32),
        LayerScales(TensorQuant(0), TensorQuant(0), TensorQuant(0)),
    )
    with pytest.raises(ValidationError):
        quantized_dense(layer, np.ones((1, 3), np.int16))


def test_quant_layer_validates_dtypes_and_freezes():
    scales = LayerScales(TensorQuant(0), TensorQuant(0), TensorQuant(0))
    with pytest.raises(ValidationError):
        QuantLayer(np.ones((2, 3)), np.zeros(2, np.int32), scales)
    layer = QuantLayer(np.ones((2, 3), np.int8), np.zeros(2, np.int32), scales)
    with pytest.raises(ValueError):
        layer.weight[0, 0] = 3


def test_calibration_set_sampling():
    arrays = two_cluster_arrays(100)
    whole = calibration_set(arrays, size=500)
    assert whole.size == 100

    sample = calibration_set(arrays, size=10, seed=3)
    assert sample.size == 10
    rows = {row.tobytes(): index for index, row in enumerate(arrays.features)}
    positions = [rows[row.tobytes()] for row in sample.features]
    assert positions == sorted(positions)
    assert np.array_equal(
        calibration_set(arrays, size=10, seed=3).features, sample.features
    )

    with pytest.raises(CalibrationError):
        calibration_set(arrays.features[:0], size=10)


def test_calibration_builds_a_consistent_chain():
    model = init_model(small_spec(batchnorm=False), seed=0)
    scales = calibrate(model, calibration_set(two_cluster_arrays(200), 64))
    validate_scale_chain(scales)
    assert scales[0].input.fraction_bits == 0
    assert scales[-1].output == scales[-1].bias
    for layer_scales, layer in zip(scales, model.dense):
        max_abs = float(np.max(np.abs(layer.weight)))
        assert max_abs * layer_scales.weight.scale**-1 <= 127
    assert set(scales_summary(scales)) == {
        f"layer.{index}.{kind}"
        for index in range(3)
        for kind in ("input", "weight", "output")
    }


def test_calibration_needs_folded_model_and_data():
    calib = CalibrationSet(np.zeros((4, 40), np.int8))
    with pytest.raises(ValidationError):
        calibrate(init_model(small_spec(), 0), calib)
    with pytest.raises(CalibrationError):
        calibrate(
            init_model(small_spec(batchnorm=False), 0),
            CalibrationSet(np.zeros((0, 40), np.int8)),
        )


@pytest.mark.parametrize(
    "scales",
    (
        (),
        # inputs must arrive at f = 0
        (LayerScales(TensorQuant(1), TensorQuant(2), TensorQuant(3)),),
        # the second layer must read what the first writes
        (
            LayerScales(TensorQuant(0), TensorQuant(2), TensorQuant(4)),
            LayerScales(TensorQuant(5), TensorQuant(2), TensorQuant(7)),
        ),
        # the final layer dequantizes its accumulator
        (LayerScales(TensorQuant(0), TensorQuant(2), TensorQuant(3)),),
    ),
)
def test_broken_scale_chains(scales):
    with pytest.raises(CalibrationError):
        validate_scale_chain(scales)


def test_all_zero_model_scores_one_half():
    spec = small_spec(batchnorm=False)
    model = init_model(spec, 0)
    model = model.with_parameters(
        {name: np.zeros_like(tensor) for name, tensor in model.tensors().items()}
    )
    scales = calibrate(model, calibration_set(two_cluster_arrays(32), 32))
    assert all(layer_scales.weight.fraction_bits == 7 for layer_scales in scales)
    qmodel = quantize(model, scales)
    features = two_cluster_arrays(5).features
    assert qforward_batch(qmodel, features).tolist() == [0.5] * 5


def test_bias_overflow():
    spec = ModelSpec(layer_units=(4, 3, 1), batchnorm=False)
    model = init_model(spec, 0)
    model = model.with_parameters(
        {"dense.0.bias": np.array([2.0**31, 0, 0], dtype=np.float32)}
    )
    scales = (
        LayerScales(TensorQuant(0), TensorQuant(0), TensorQuant(0)),
        LayerScales(TensorQuant(0), TensorQuant(3), TensorQuant(3)),
    )
    with pytest.raises(BiasOverflow) as excinfo:
        quantize(model, scales)
    assert excinfo.value.layer_index == 0


def test_quantize_records_source_and_freezes():
    model = init_model(small_spec(batchnorm=False), seed=3)
    scales = calibrate(model, calibration_set(two_cluster_arrays(64), 64))
    qmodel = quantize(model, scales)
    assert qmodel.source_hash == model_hash(model)
    assert qmodel.layer_units == (40, 16, 8, 1)
    assert qmodel.scales == scales
    assert qmodel == quantize(model, scales)
    for layer in qmodel.layers:
        assert layer.weight.dtype == np.int8 and layer.bias.dtype == np.int32
        assert not layer.weight.flags.writeable


def test_quantize_requires_folding():
    with pytest.raises(ValidationError):
        quantize(init_model(small_spec(), 0), ())


def test_single_and_batch_paths_are_bit_identical():
    qmodel = toy_quant_model(seed=5)
    features = two_cluster_arrays(50, seed=5).features
    batch = qforward_batch(qmodel, features)
    singles = [qforward(qmodel, row) for row in features]
    assert batch.tolist() == singles
    assert all(0 <= score <= 1 for score in singles)


def test_qforward_rejects_float_inputs():
    qmodel = toy_quant_model()
    with pytest.raises(ValidationError):
        qforward_batch(qmodel, np.zeros((1, 40), np.float32))


def test_fine_grid_fake_quant_tracks_float_model():
    model = init_model(small_spec(batchnorm=False), seed=1)
    fine = (
        LayerScales(TensorQuant(0), TensorQuant(16), TensorQuant(16)),
        LayerScales(TensorQuant(16), TensorQuant(16), TensorQuant(16)),
        LayerScales(TensorQuant(16), TensorQuant(16), TensorQuant(32)),
    )
    features = two_cluster_arrays(64, seed=1).features
    snapped = fake_quant_forward(model, fine, features, saturate=False)
    assert np.max(np.abs(snapped - predict_proba(model, features))) <= 0.01


def test_fake_quant_matches_integer_path():
    model = init_model(small_spec(batchnorm=False), seed=2)
    calib = calibration_set(two_cluster_arrays(128, seed=2), 128)
    scales = calibrate(model, calib)
    qmodel = quantize(model, scales)
    features = calib.features
    snapped = fake_quant_forward(model, scales, features)
    assert np.max(np.abs(snapped - qforward_batch(qmodel, features))) <= 1e-3


def test_saturation_report():
    model = init_model(small_spec(batchnorm=False), seed=0)
    calib = calibration_set(two_cluster_arrays(64), 64)
    qmodel = quantize(model, calibrate(model, calib))
    report = saturation_report(qmodel, calib)
    assert set(report) == {"layer.0.output", "layer.1.output"}
    assert report["layer.0.output"].total == 64 * 16
    assert report["layer.1.output"].total == 64 * 8
    for count in report.values():
        assert 0 <= count.saturated <= count.total
        assert count.rate == count.saturated / count.total


def test_trained_model_survives_quantization():
    model, _, train_arrays, val_arrays = trained_toy_model(seed=0)
    folded = fold_batchnorm(model)
    scales = calibrate(folded, calibration_set(train_arrays, 256))
    report = evaluate_quantized(quantize(folded, scales), val_arrays)
    assert report.accuracy >= 90


def test_finetune_without_epochs_is_plain_quantization():
    model, _, train_arrays, val_arrays = trained_toy_model(seed=1, epochs=1)
    folded = fold_batchnorm(model)
    scales = calibrate(folded, calibration_set(train_arrays, 128))
    plain = quantize(folded, scales)
    assert finetune_qat(folded, scales, train_arrays, val_arrays, epochs=0) == plain


def _key(report):
    return (report.accuracy, -1 if report.f1 is None else report.f1)


def test_finetune_never_loses_to_plain_quantization():
    model, _, train_arrays, val_arrays = trained_toy_model(seed=3, epochs=1)
    folded = fold_batchnorm(model)
    scales = calibrate(folded, calibration_set(train_arrays, 128))
    plain = evaluate_quantized(quantize(folded, scales), val_arrays)

    cfg = TrainConfig(learning_rate=1e-4, epochs=2, batch_size=32, seed=3)
    tuned_model = finetune_qat(folded, scales, train_arrays, val_arrays, cfg)
    tuned = evaluate_quantized(tuned_model, val_arrays)
    assert tuned_model.scales == scales
    assert tuned.accuracy >= plain.accuracy
    assert _key(tuned)[1] >= _key(plain)[1]
