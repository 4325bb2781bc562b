"""
INT8 post-training quantization of a folded detector network, the integer
inference kernels that run it, and quantization-aware fine-tuning.

Every tensor uses a symmetric power-of-two scale: an int8 code q stands for
q * 2**-f, where f is the tensor's fraction bits. Dense layers accumulate
exact integer products plus an int32 bias held at fraction bits
f_in + f_w, then requantize to the next layer's input scale with a pure
rounding shift. Only the final logit is dequantized, and the sigmoid is the
single floating-point step.

The kernels carry their integer values in float64 arrays so that matrix
products can use BLAS. Every accumulator is bounded far below 2**53, and
scaling by a power of two is exact, so each operation yields exactly the
integer that int32 arithmetic would.
"""
from dataclasses import (
    dataclass,
    field,
    replace,
)
import math
from typing import (
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

from eth_utils import (
    get_extended_debug_logger,
    to_dict,
    to_tuple,
)
from hexbytes import (
    HexBytes,
)
import numpy as np

from canids.constants import (
    DEFAULT_CALIBRATION_SIZE,
    DEFAULT_THRESHOLD,
    INPUT_FRACTION_BITS,
    INT8_MAX,
    INT8_MIN,
    INT32_MAX,
    INT32_MIN,
    MAX_SATURATION_RATE,
    ZERO_TENSOR_FRACTION_BITS,
)
from canids.exceptions import (
    BiasOverflow,
    CalibrationError,
    DimensionMismatch,
    EmptyDatasetError,
    ValidationError,
)
from canids.metrics import (
    MetricsReport,
    evaluate_scores,
)
from canids.nn import (
    PREDICT_CHUNK,
    ForwardHooks,
    MlpModel,
    TrainConfig,
    _forward,
    run_epochs,
    sigmoid,
)
from canids.typing import (
    Dataset,
    Mode,
)
from canids.utils.provenance import (
    model_hash,
)
from canids.utils.rounding import (
    quantize_to_grid,
    shift_round,
)
from canids.window import (
    as_arrays,
)

logger = get_extended_debug_logger("canids.quant")

INT8_BOUNDS = (INT8_MIN, INT8_MAX)


class TensorQuant(NamedTuple):
    fraction_bits: int
    """
    A code q represents the real value q * 2**-fraction_bits
    """

    @property
    def scale(self) -> float:
        return 2.0**-self.fraction_bits

    def quantize(self, values: np.ndarray) -> np.ndarray:
        codes = quantize_to_grid(values, self.fraction_bits, INT8_BOUNDS)
        return codes.astype(np.int8)

    def dequantize(self, codes: np.ndarray) -> np.ndarray:
        return np.asarray(codes, dtype=np.float64) * self.scale


class LayerScales(NamedTuple):
    input: TensorQuant
    weight: TensorQuant
    output: TensorQuant
    """
    Scale of the requantized activations this layer feeds to the next one.
    For the final layer, the accumulator scale that is dequantized to a logit.
    """

    @property
    def bias(self) -> TensorQuant:
        return TensorQuant(self.input.fraction_bits + self.weight.fraction_bits)

    @property
    def requantize_shift(self) -> int:
        return self.output.fraction_bits - self.bias.fraction_bits


QuantScales = Tuple[LayerScales, ...]


class CalibrationSet(NamedTuple):
    features: np.ndarray
    """
    int8 feature matrix; labels are never consulted
    """

    @property
    def size(self) -> int:
        return len(self.features)


def calibration_set(
    dataset: Dataset, size: int = DEFAULT_CALIBRATION_SIZE, seed: int = 0
) -> CalibrationSet:
    """
    Sample up to ``size`` windows, without replacement and in their original
    order, from a dataset.
    """
    arrays = as_arrays(dataset)
    if arrays.size == 0 or size < 1:
        raise CalibrationError("The calibration set must not be empty")
    if size >= arrays.size:
        return CalibrationSet(arrays.features)
    rng = np.random.default_rng(seed)
    picks = np.sort(rng.choice(arrays.size, size=size, replace=False))
    return CalibrationSet(arrays.features[picks])


#
# Calibration
#
def fraction_bits_for(max_abs: float) -> int:
    """
    The largest f with max_abs * 2**f <= 127. An all-zero tensor gets f = 7.
    """
    if max_abs == 0:
        return ZERO_TENSOR_FRACTION_BITS
    if not math.isfinite(max_abs) or max_abs < 0:
        raise CalibrationError(f"Cannot pick a scale for max-abs {max_abs!r}")
    bits = math.floor(math.log2(INT8_MAX / max_abs))
    # log2 may land one off near exact powers of two
    while max_abs * 2.0 ** (bits + 1) <= INT8_MAX:
        bits += 1
    while max_abs * 2.0**bits > INT8_MAX:
        bits -= 1
    return bits


def _require_folded(model: MlpModel) -> None:
    if model.norms or model.spec.batchnorm:
        raise ValidationError(
            "Quantization needs a batch-norm-free model; fold the model first"
        )


def calibrate(model: MlpModel, calib: CalibrationSet) -> QuantScales:
    """
    Choose fraction bits for every weight and activation tensor of a folded
    model. Activation ranges are measured by running the calibration windows
    through the float network.

    :raises CalibrationError: if the calibration set is empty
    """
    _require_folded(model)
    if calib.size == 0:
        raise CalibrationError("The calibration set must not be empty")
    features = np.asarray(calib.features)
    if features.ndim != 2 or features.shape[1] != model.spec.input_width:
        raise DimensionMismatch((-1, model.spec.input_width), features.shape)

    hidden = features.astype(np.float64)
    input_quant = TensorQuant(INPUT_FRACTION_BITS)
    last_index = len(model.dense) - 1
    scales = []
    for index, (weight, bias) in enumerate(model.dense):
        weight_quant = TensorQuant(fraction_bits_for(float(np.max(np.abs(weight)))))
        if index == last_index:
            accumulator = TensorQuant(
                input_quant.fraction_bits + weight_quant.fraction_bits
            )
            scales.append(LayerScales(input_quant, weight_quant, accumulator))
            break

        hidden = np.maximum(
            hidden @ weight.astype(np.float64).T + bias.astype(np.float64), 0
        )
        output_quant = TensorQuant(fraction_bits_for(float(np.max(hidden))))
        logger.debug(
            "layer %d: weight f=%d, activation max %.6g -> f=%d",
            index,
            weight_quant.fraction_bits,
            float(np.max(hidden)),
            output_quant.fraction_bits,
        )
        scales.append(LayerScales(input_quant, weight_quant, output_quant))
        input_quant = output_quant

    result = tuple(scales)
    validate_scale_chain(result)
    return result


def validate_scale_chain(scales: Sequence[LayerScales]) -> None:
    """
    The first layer reads raw signed bytes (f = 0), and every later layer
    reads at exactly the scale its producer writes.
    """
    if len(scales) == 0:
        raise CalibrationError("A quantized model needs at least one layer")
    if scales[0].input.fraction_bits != INPUT_FRACTION_BITS:
        raise CalibrationError(
            f"The first layer must read inputs at f={INPUT_FRACTION_BITS}, "
            f"got f={scales[0].input.fraction_bits}"
        )
    for index, (producer, consumer) in enumerate(zip(scales, scales[1:])):
        if producer.output != consumer.input:
            raise CalibrationError(
                f"Layer {index + 1} reads f={consumer.input.fraction_bits} but "
                f"layer {index} writes f={producer.output.fraction_bits}"
            )
    final = scales[-1]
    if final.output != final.bias:
        raise CalibrationError(
            "The final layer must dequantize its accumulator at f_in + f_w"
        )


#
# Quantized model
#
@dataclass(frozen=True, eq=False)
class QuantLayer:
    weight: np.ndarray
    """
    int8 (out, in) matrix
    """

    bias: np.ndarray
    """
    int32 vector at the accumulator scale
    """

    scales: LayerScales

    _exact_weight: np.ndarray = field(init=False, repr=False)
    _exact_bias: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.weight.dtype != np.int8 or self.bias.dtype != np.int32:
            raise ValidationError(
                f"Expected int8 weights and int32 biases, got "
                f"{self.weight.dtype}/{self.bias.dtype}"
            )
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise DimensionMismatch((self.weight.shape[0],), self.bias.shape)
        for array in (self.weight, self.bias):
            array.flags.writeable = False
        # float64 views of the integer tensors, for the BLAS kernels
        object.__setattr__(self, "_exact_weight", self.weight.astype(np.float64).T)
        object.__setattr__(self, "_exact_bias", self.bias.astype(np.float64))

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantLayer):
            return NotImplemented
        return (
            self.scales == other.scales
            and np.array_equal(self.weight, other.weight)
            and np.array_equal(self.bias, other.bias)
        )

    __hash__ = None  # type: ignore

    @property
    def fan_in(self) -> int:
        return self.weight.shape[1]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True, eq=False)
class QuantModel:
    """
    Immutable integer detector; safe to run from several threads at once.
    """

    layers: Tuple[QuantLayer, ...]
    source_hash: HexBytes
    """
    Hash of the folded float model this was quantized from
    """

    def __post_init__(self) -> None:
        validate_scale_chain(self.scales)
        for producer, consumer in zip(self.layers, self.layers[1:]):
            if producer.fan_out != consumer.fan_in:
                raise DimensionMismatch((producer.fan_out,), (consumer.fan_in,))
        if self.layers[-1].fan_out != 1:
            raise ValidationError("The final layer must have exactly one output")

    def __repr__(self) -> str:
        source = self.source_hash.hex()[:10]
        return f"QuantModel<units={self.layer_units}, source={source}>"

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantModel):
            return NotImplemented
        return self.source_hash == other.source_hash and self.layers == other.layers

    __hash__ = None  # type: ignore

    @property
    def scales(self) -> QuantScales:
        return tuple(layer.scales for layer in self.layers)

    @property
    def input_width(self) -> int:
        return self.layers[0].fan_in

    @property
    def layer_units(self) -> Tuple[int, ...]:
        return (self.input_width,) + tuple(layer.fan_out for layer in self.layers)


def _check_accumulator_range(index: int, weight: np.ndarray, bias: np.ndarray) -> None:
    # worst case |sum w*x| over int8 inputs, per output row
    row_bound = np.abs(weight.astype(np.int64)).sum(axis=1) * -INT8_MIN
    worst = int(np.max(row_bound + np.abs(bias.astype(np.int64))))
    if worst > INT32_MAX:
        raise BiasOverflow(index, worst)


def quantize(model: MlpModel, scales: QuantScales) -> QuantModel:
    """
    Quantize a folded model at fixed scales. Weights round half to even and
    clamp to int8; biases round to int32 at the accumulator scale without
    clamping.

    :raises BiasOverflow: when a bias, or a worst-case accumulator, leaves
        the int32 range
    """
    _require_folded(model)
    validate_scale_chain(scales)
    if len(scales) != len(model.dense):
        raise DimensionMismatch((len(model.dense),), (len(scales),))

    layers = []
    for index, ((weight, bias), layer_scales) in enumerate(zip(model.dense, scales)):
        weight_codes = layer_scales.weight.quantize(weight)
        bias_codes = quantize_to_grid(bias, layer_scales.bias.fraction_bits)
        if bias_codes.size and (
            bias_codes.max() > INT32_MAX or bias_codes.min() < INT32_MIN
        ):
            raise BiasOverflow(index, int(np.max(np.abs(bias_codes))))
        bias_codes = bias_codes.astype(np.int32)
        _check_accumulator_range(index, weight_codes, bias_codes)
        layers.append(QuantLayer(weight_codes, bias_codes, layer_scales))

    return QuantModel(tuple(layers), model_hash(model))


#
# Integer kernels
#
def _accumulate(layer: QuantLayer, inputs: np.ndarray) -> np.ndarray:
    return inputs @ layer._exact_weight + layer._exact_bias


def _requantize(layer: QuantLayer, accumulators: np.ndarray) -> np.ndarray:
    shifted = shift_round(accumulators, layer.scales.requantize_shift)
    codes = np.clip(shifted, *INT8_BOUNDS)
    return np.maximum(codes, 0)


def quantized_dense(layer: QuantLayer, inputs: np.ndarray) -> np.ndarray:
    """
    One hidden layer in integer arithmetic: int8 codes in, ReLU'd int8 codes
    at the layer's output scale out.
    """
    codes = np.asarray(inputs)
    if codes.dtype != np.int8:
        raise ValidationError(f"Quantized inputs must be int8, got {codes.dtype}")
    if codes.shape[-1] != layer.fan_in:
        raise DimensionMismatch((layer.fan_in,), codes.shape)
    outputs = _requantize(layer, _accumulate(layer, codes.astype(np.float64)))
    return outputs.astype(np.int8)


def _logits(qmodel: QuantModel, features: np.ndarray) -> np.ndarray:
    hidden = features.astype(np.float64)
    for layer in qmodel.layers[:-1]:
        hidden = _requantize(layer, _accumulate(layer, hidden))
    final = qmodel.layers[-1]
    return _accumulate(final, hidden)[:, 0] * final.scales.output.scale


def qforward_batch(qmodel: QuantModel, features: np.ndarray) -> np.ndarray:
    """
    Probabilities for every row of an int8 feature matrix. Row results are
    bit-identical to :func:`qforward` on that row.
    """
    matrix = np.asarray(features)
    if matrix.ndim != 2 or matrix.shape[1] != qmodel.input_width:
        raise DimensionMismatch((-1, qmodel.input_width), matrix.shape)
    if matrix.dtype != np.int8:
        raise ValidationError(f"Quantized inputs must be int8, got {matrix.dtype}")
    if len(matrix) == 0:
        return np.zeros(0, dtype=np.float64)
    chunks = [
        sigmoid(_logits(qmodel, matrix[start : start + PREDICT_CHUNK]))
        for start in range(0, len(matrix), PREDICT_CHUNK)
    ]
    return np.concatenate(chunks)


def qforward(qmodel: QuantModel, x: np.ndarray) -> float:
    """
    Probability that the window ``x`` (int8, width 40) ends in an injected
    message, computed on the integer path.
    """
    vector = np.asarray(x)
    if vector.shape != (qmodel.input_width,):
        raise DimensionMismatch((qmodel.input_width,), vector.shape)
    return float(qforward_batch(qmodel, vector[None, :])[0])


def evaluate_quantized(
    qmodel: QuantModel, dataset: Dataset, threshold: float = DEFAULT_THRESHOLD
) -> MetricsReport:
    arrays = as_arrays(dataset)
    if arrays.size == 0:
        raise EmptyDatasetError("Cannot evaluate on an empty dataset")
    return evaluate_scores(
        qforward_batch(qmodel, arrays.features), arrays.labels, threshold
    )


class SaturationCount(NamedTuple):
    saturated: int
    total: int

    @property
    def rate(self) -> float:
        return self.saturated / self.total if self.total else 0.0


@to_dict
def saturation_report(qmodel: QuantModel, calib: CalibrationSet):
    """
    How many requantized activations of each hidden layer hit the int8
    clamp on the calibration windows. Layers over the 0.1% limit are
    logged as warnings.
    """
    hidden = np.asarray(calib.features).astype(np.float64)
    for index, layer in enumerate(qmodel.layers[:-1]):
        accumulators = _accumulate(layer, hidden)
        unclamped = shift_round(accumulators, layer.scales.requantize_shift)
        saturated = int(np.sum((unclamped > INT8_MAX) | (unclamped < INT8_MIN)))
        count = SaturationCount(saturated, unclamped.size)
        if count.rate > MAX_SATURATION_RATE:
            logger.warning(
                "Layer %d saturates %.3f%% of its activations on calibration data",
                index,
                100 * count.rate,
            )
        yield f"layer.{index}.output", count
        hidden = np.maximum(np.clip(unclamped, *INT8_BOUNDS), 0)


#
# Quantization-aware fine-tuning
#
def fake_quant_hooks(scales: QuantScales, *, saturate: bool = True) -> ForwardHooks:
    """
    Quantize-then-dequantize weights, biases and hidden activations at fixed
    scales. The weight transform is treated as the identity by backprop; the
    activation transform passes gradients only where the value was not
    clamped. With ``saturate=False`` nothing is clamped.
    """
    bounds = INT8_BOUNDS if saturate else None

    def weights(index: int, weight: np.ndarray, bias: np.ndarray):
        layer_scales = scales[index]
        weight_bits = layer_scales.weight.fraction_bits
        weight_codes = quantize_to_grid(weight, weight_bits, bounds)
        bias_codes = quantize_to_grid(bias, layer_scales.bias.fraction_bits)
        return (
            (weight_codes * layer_scales.weight.scale).astype(weight.dtype),
            (bias_codes * layer_scales.bias.scale).astype(bias.dtype),
        )

    def activations(index: int, activated: np.ndarray):
        output = scales[index].output
        codes = quantize_to_grid(activated, output.fraction_bits)
        mask = None
        if saturate:
            mask = (codes <= INT8_MAX).astype(activated.dtype)
            codes = np.minimum(codes, INT8_MAX)
        return (codes * output.scale).astype(activated.dtype), mask

    return ForwardHooks(weights, activations)


def fake_quant_forward(
    model: MlpModel,
    scales: QuantScales,
    features: np.ndarray,
    *,
    saturate: bool = True,
) -> np.ndarray:
    """
    Infer-mode probabilities of the float model with every tensor snapped to
    its quantization grid.
    """
    _require_folded(model)
    logits, _ = _forward(
        model,
        np.asarray(features),
        Mode.INFER,
        hooks=fake_quant_hooks(scales, saturate=saturate),
    )
    return sigmoid(logits)


def _selection_key(report: MetricsReport) -> Tuple:
    f1 = report.f1 if report.f1 is not None else -1
    accuracy = report.accuracy if report.accuracy is not None else -1
    return (accuracy, f1)


def finetune_qat(
    model: MlpModel,
    scales: QuantScales,
    train_windows: Dataset,
    val_windows: Dataset,
    cfg: TrainConfig = TrainConfig(),
    *,
    epochs: Optional[int] = None,
) -> QuantModel:
    """
    Continue training a folded model with fake quantization in the forward
    pass, then quantize it at the same scales.

    The plain quantization of the starting model is always a candidate. A
    fine-tuned epoch replaces it only if its quantized validation accuracy
    and F1 both match or beat the plain ones, so the result never scores
    worse than plain quantization on the validation set.
    """
    plain = quantize(model, scales)
    if epochs == 0:
        return plain
    if epochs is not None:
        cfg = replace(cfg, epochs=epochs)

    val_arrays = as_arrays(val_windows)
    plain_key = _selection_key(evaluate_quantized(plain, val_arrays))

    @to_tuple
    def select(candidate: MlpModel):
        try:
            quantized = quantize(candidate, scales)
        except BiasOverflow as exc:
            logger.warning("Skipping a fine-tuned epoch: %s", exc)
            yield False
            return
        key = _selection_key(evaluate_quantized(quantized, val_arrays))
        yield all(ours >= theirs for ours, theirs in zip(key, plain_key))
        yield from key

    tuned, history = run_epochs(
        model,
        as_arrays(train_windows),
        val_arrays,
        cfg,
        hooks=fake_quant_hooks(scales),
        dropout=False,
        select=select,
    )
    tuned_key = select(tuned)
    if tuned_key[0] and tuple(tuned_key[1:]) > plain_key:
        logger.info(
            "Fine-tuned epoch %d improves quantized (accuracy, F1) from %s to %s",
            history.best_epoch,
            tuple(float(value) for value in plain_key),
            tuple(float(value) for value in tuned_key[1:]),
        )
        return quantize(tuned, scales)

    logger.info("Fine-tuning did not beat plain quantization; keeping it")
    return plain


@to_dict
def scales_summary(scales: QuantScales):
    for index, layer_scales in enumerate(scales):
        yield f"layer.{index}.input", layer_scales.input.fraction_bits
        yield f"layer.{index}.weight", layer_scales.weight.fraction_bits
        yield f"layer.{index}.output", layer_scales.output.fraction_bits
