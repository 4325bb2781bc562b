"""
Floating-point detector network: dense layers with batch normalization, ReLU
and dropout between them, and a single sigmoid output unit estimating the
probability that the newest message of a window is an injected one.
"""
from dataclasses import (
    dataclass,
    field,
    replace,
)
import math
from typing import (
    Callable,
    Dict,
    List,
    NamedTuple,
    Optional,
    Tuple,
)

from eth_utils import (
    get_extended_debug_logger,
    to_dict,
)
from eth_utils.toolz import (
    partition_all,
)
import numpy as np

from canids.canlog import (
    split_dataset,
)
from canids.constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPSILON,
    DEFAULT_BATCH_SIZE,
    DEFAULT_BN_EPSILON,
    DEFAULT_BN_MOMENTUM,
    DEFAULT_DROPOUT_RATE,
    DEFAULT_EARLY_STOP_DROP,
    DEFAULT_EARLY_STOP_PATIENCE,
    DEFAULT_EPOCHS,
    DEFAULT_LAYER_UNITS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_THRESHOLD,
    FINITE_DIFFERENCE_STEP,
    PROBABILITY_CLAMP,
    RELATIVE_ERROR_FLOOR,
)
from canids.exceptions import (
    DimensionMismatch,
    EmptyDatasetError,
    NonFiniteLossError,
    ValidationError,
)
from canids.metrics import (
    MetricsReport,
    evaluate_scores,
)
from canids.typing import (
    Dataset,
    LabeledArrays,
    Mode,
)
from canids.window import (
    as_arrays,
    concat_datasets,
)

logger = get_extended_debug_logger("canids.nn")

PREDICT_CHUNK = 8192


#
# Model definition
#
@dataclass(frozen=True)
class ModelSpec:
    layer_units: Tuple[int, ...] = DEFAULT_LAYER_UNITS
    dropout_rate: float = DEFAULT_DROPOUT_RATE
    batchnorm: bool = True
    bn_epsilon: float = DEFAULT_BN_EPSILON
    bn_momentum: float = DEFAULT_BN_MOMENTUM
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    @property
    def input_width(self) -> int:
        return self.layer_units[0]

    @property
    def layer_count(self) -> int:
        return len(self.layer_units) - 1

    @property
    def hidden_count(self) -> int:
        return len(self.layer_units) - 2


def validate_model_spec(spec: ModelSpec) -> None:
    units = tuple(spec.layer_units)
    if len(units) < 2:
        raise ValidationError(f"Need an input and an output width, got {units}")
    if any(not isinstance(width, int) or width < 1 for width in units):
        raise ValidationError(f"Layer widths must be positive integers, got {units}")
    if units[-1] != 1:
        raise ValidationError(f"The output layer must have 1 unit, got {units[-1]}")
    if not 0 <= spec.dropout_rate < 1:
        raise ValidationError(
            f"Dropout rate must be in [0, 1), got {spec.dropout_rate}"
        )
    if spec.bn_epsilon < 0:
        raise ValidationError(f"Batch-norm epsilon must be >= 0, got {spec.bn_epsilon}")
    if not 0 <= spec.bn_momentum <= 1:
        raise ValidationError(
            f"Batch-norm momentum must be in [0, 1], got {spec.bn_momentum}"
        )
    if spec.hidden_activation != "relu" or spec.output_activation != "sigmoid":
        raise ValidationError(
            "Only ReLU hidden units and a sigmoid output are supported, got "
            f"{spec.hidden_activation}/{spec.output_activation}"
        )


class DenseParams(NamedTuple):
    weight: np.ndarray
    """
    (out, in) matrix
    """

    bias: np.ndarray


class BatchNormParams(NamedTuple):
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


@dataclass(frozen=True, eq=False)
class MlpModel:
    """
    Immutable parameter set. Training produces new instances rather than
    mutating arrays in place.
    """

    spec: ModelSpec
    dense: Tuple[DenseParams, ...]
    norms: Tuple[BatchNormParams, ...] = field(default=())
    """
    One entry per hidden layer when the ModelSpec enables batch normalization,
    otherwise empty (including after folding).
    """

    def __repr__(self) -> str:
        return f"MlpModel<units={self.spec.layer_units}, norms={bool(self.norms)}>"

    @property
    def dtype(self) -> np.dtype:
        return self.dense[0].weight.dtype

    @to_dict
    def parameters(self):
        """
        Trainable tensors, by name, in a fixed order.
        """
        for index, layer in enumerate(self.dense):
            yield f"dense.{index}.weight", layer.weight
            yield f"dense.{index}.bias", layer.bias
        for index, norm in enumerate(self.norms):
            yield f"norm.{index}.gamma", norm.gamma
            yield f"norm.{index}.beta", norm.beta

    @to_dict
    def buffers(self):
        """
        Non-trainable tensors: batch-norm running statistics.
        """
        for index, norm in enumerate(self.norms):
            yield f"norm.{index}.running_mean", norm.running_mean
            yield f"norm.{index}.running_var", norm.running_var

    def tensors(self) -> Dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    @classmethod
    def from_tensors(
        cls, spec: ModelSpec, tensors: Dict[str, np.ndarray]
    ) -> "MlpModel":
        dense = tuple(
            DenseParams(
                tensors[f"dense.{index}.weight"], tensors[f"dense.{index}.bias"]
            )
            for index in range(spec.layer_count)
        )
        norms = tuple(
            BatchNormParams(
                tensors[f"norm.{index}.gamma"],
                tensors[f"norm.{index}.beta"],
                tensors[f"norm.{index}.running_mean"],
                tensors[f"norm.{index}.running_var"],
            )
            for index in range(spec.hidden_count if spec.batchnorm else 0)
        )
        model = cls(spec, dense, norms)
        validate_model(model)
        return model

    def with_parameters(self, updates: Dict[str, np.ndarray]) -> "MlpModel":
        return MlpModel.from_tensors(self.spec, {**self.tensors(), **updates})

    def astype(self, dtype) -> "MlpModel":
        return MlpModel.from_tensors(
            self.spec,
            {name: tensor.astype(dtype) for name, tensor in self.tensors().items()},
        )

    @property
    def dense_parameter_count(self) -> int:
        return sum(layer.weight.size + layer.bias.size for layer in self.dense)

    @property
    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.tensors().values())


def validate_model(model: MlpModel) -> None:
    spec = model.spec
    validate_model_spec(spec)
    if len(model.dense) != spec.layer_count:
        raise ValidationError(
            f"Spec has {spec.layer_count} dense layers, model has {len(model.dense)}"
        )
    for index, (fan_in, fan_out) in enumerate(
        zip(spec.layer_units[:-1], spec.layer_units[1:])
    ):
        layer = model.dense[index]
        if layer.weight.shape != (fan_out, fan_in) or layer.bias.shape != (fan_out,):
            raise DimensionMismatch(
                (fan_out, fan_in), layer.weight.shape + layer.bias.shape
            )
    expected_norms = spec.hidden_count if spec.batchnorm else 0
    if len(model.norms) != expected_norms:
        raise ValidationError(
            f"Expected {expected_norms} batch-norm blocks, got {len(model.norms)}"
        )
    for norm, width in zip(model.norms, spec.layer_units[1:-1]):
        if any(tensor.shape != (width,) for tensor in norm):
            raise DimensionMismatch((width,), norm.gamma.shape)
        if np.any(norm.running_var < 0):
            raise ValidationError("Batch-norm running variance must be non-negative")


def init_model(spec: ModelSpec = ModelSpec(), seed: int = 0) -> MlpModel:
    """
    Fresh float32 model. Weights are drawn from U(-limit, limit) with
    limit = sqrt(6 / fan_in); biases start at zero and batch-norm blocks start
    as the identity (gamma 1, beta 0, running mean 0, running variance 1).
    """
    validate_model_spec(spec)
    rng = np.random.default_rng(seed)
    dense = []
    for fan_in, fan_out in zip(spec.layer_units[:-1], spec.layer_units[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in)).astype(np.float32)
        dense.append(DenseParams(weight, np.zeros(fan_out, dtype=np.float32)))

    norms = ()
    if spec.batchnorm:
        norms = tuple(
            BatchNormParams(
                np.ones(width, dtype=np.float32),
                np.zeros(width, dtype=np.float32),
                np.zeros(width, dtype=np.float32),
                np.ones(width, dtype=np.float32),
            )
            for width in spec.layer_units[1:-1]
        )
    return MlpModel(spec, tuple(dense), norms)


#
# Forward and backward passes
#
def sigmoid(logits: np.ndarray) -> np.ndarray:
    decay = np.exp(-np.abs(logits))
    return np.where(logits >= 0, 1 / (1 + decay), decay / (1 + decay))


def binary_cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    clipped = np.clip(probabilities, PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP)
    losses = -(labels * np.log(clipped) + (1 - labels) * np.log(1 - clipped))
    return float(np.mean(losses))


class ForwardHooks(NamedTuple):
    """
    Transformations spliced into the forward pass, used for fake quantization.
    Gradients pass straight through the weight transform; the activation
    transform returns an optional mask applied to the incoming gradient.
    """

    weights: Callable[[int, np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]
    activations: Callable[[int, np.ndarray], Tuple[np.ndarray, Optional[np.ndarray]]]


class _LayerCache(NamedTuple):
    inputs: np.ndarray
    weight: np.ndarray
    normalized: Optional[np.ndarray]
    inv_std: Optional[np.ndarray]
    batch_mean: Optional[np.ndarray]
    batch_var: Optional[np.ndarray]
    pre_activation: Optional[np.ndarray]
    activation_mask: Optional[np.ndarray]
    dropout_mask: Optional[np.ndarray]


def _forward(
    model: MlpModel,
    features: np.ndarray,
    mode: Mode,
    rng: Optional[np.random.Generator] = None,
    *,
    dropout: Optional[bool] = None,
    hooks: Optional[ForwardHooks] = None,
) -> Tuple[np.ndarray, List[_LayerCache]]:
    """
    :return: (logits of shape (batch,), per-layer values needed by backprop)
    """
    if features.ndim != 2 or features.shape[1] != model.spec.input_width:
        raise DimensionMismatch((-1, model.spec.input_width), features.shape)

    dtype = model.dtype
    use_dropout = (mode is Mode.TRAIN) if dropout is None else dropout
    rate = model.spec.dropout_rate
    if use_dropout and rate > 0 and rng is None:
        rng = np.random.default_rng()

    hidden = features.astype(dtype)
    caches: List[_LayerCache] = []
    last_index = len(model.dense) - 1

    for index, (weight, bias) in enumerate(model.dense):
        if hooks is not None:
            weight, bias = hooks.weights(index, weight, bias)
        outputs = hidden @ weight.T + bias

        if index == last_index:
            caches.append(
                _LayerCache(hidden, weight, None, None, None, None, None, None, None)
            )
            return outputs[:, 0], caches

        normalized = inv_std = batch_mean = batch_var = None
        if model.norms:
            norm = model.norms[index]
            if mode is Mode.TRAIN:
                batch_mean = outputs.mean(axis=0)
                batch_var = outputs.var(axis=0)
                mean, var = batch_mean, batch_var
            else:
                mean, var = norm.running_mean, norm.running_var
            inv_std = (1 / np.sqrt(var + model.spec.bn_epsilon)).astype(dtype)
            normalized = (outputs - mean) * inv_std
            pre_activation = norm.gamma * normalized + norm.beta
        else:
            pre_activation = outputs

        activated = np.maximum(pre_activation, 0)
        activation_mask = None
        if hooks is not None:
            activated, activation_mask = hooks.activations(index, activated)

        dropout_mask = None
        if use_dropout and rate > 0:
            keep = rng.random(activated.shape) >= rate
            dropout_mask = (keep / (1 - rate)).astype(dtype)
            activated = activated * dropout_mask

        caches.append(
            _LayerCache(
                hidden,
                weight,
                normalized,
                inv_std,
                batch_mean,
                batch_var,
                pre_activation,
                activation_mask,
                dropout_mask,
            )
        )
        hidden = activated

    raise Exception("Invariant: the output layer always returns")


def _backward(
    model: MlpModel, caches: List[_LayerCache], dlogits: np.ndarray, mode: Mode
) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}
    upstream = dlogits[:, None]
    last_index = len(caches) - 1

    for index in range(last_index, -1, -1):
        cache = caches[index]
        if index != last_index:
            if cache.dropout_mask is not None:
                upstream = upstream * cache.dropout_mask
            if cache.activation_mask is not None:
                upstream = upstream * cache.activation_mask
            upstream = upstream * (cache.pre_activation > 0)

            if model.norms:
                norm = model.norms[index]
                grads[f"norm.{index}.gamma"] = (upstream * cache.normalized).sum(axis=0)
                grads[f"norm.{index}.beta"] = upstream.sum(axis=0)
                dnormalized = upstream * norm.gamma
                if mode is Mode.TRAIN:
                    count = upstream.shape[0]
                    projection = (dnormalized * cache.normalized).sum(axis=0)
                    upstream = (cache.inv_std / count) * (
                        count * dnormalized
                        - dnormalized.sum(axis=0)
                        - cache.normalized * projection
                    )
                else:
                    upstream = dnormalized * cache.inv_std

        grads[f"dense.{index}.weight"] = upstream.T @ cache.inputs
        grads[f"dense.{index}.bias"] = upstream.sum(axis=0)
        upstream = upstream @ cache.weight

    return grads


def loss_and_gradients(
    model: MlpModel,
    features: np.ndarray,
    labels: np.ndarray,
    mode: Mode = Mode.TRAIN,
    rng: Optional[np.random.Generator] = None,
    *,
    dropout: Optional[bool] = None,
    hooks: Optional[ForwardHooks] = None,
) -> Tuple[float, Dict[str, np.ndarray], List[_LayerCache]]:
    """
    Mean binary cross-entropy of a batch and its gradient for every trainable
    tensor. The loss clamps probabilities to [1e-7, 1 - 1e-7]; the gradient
    is that of the unclamped loss, (p - y) / batch at the logit, which agrees
    with it wherever the clamp is inactive.
    """
    logits, caches = _forward(model, features, mode, rng, dropout=dropout, hooks=hooks)
    probabilities = sigmoid(logits)
    targets = labels.astype(model.dtype)
    loss = binary_cross_entropy(probabilities, targets)
    dlogits = (probabilities - targets) / len(targets)
    grads = _backward(model, caches, dlogits.astype(model.dtype), mode)
    return loss, grads, caches


def forward(
    model: MlpModel,
    x: np.ndarray,
    mode: Mode = Mode.INFER,
    seed: Optional[int] = None,
) -> float:
    """
    Probability that the window ``x`` ends in an injected message.

    Infer mode uses the running batch-norm statistics and no dropout, and is a
    pure function of (model, x).
    """
    vector = np.asarray(x)
    if vector.shape != (model.spec.input_width,):
        raise DimensionMismatch((model.spec.input_width,), vector.shape)
    rng = np.random.default_rng(seed) if mode is Mode.TRAIN else None
    logits, _ = _forward(model, vector[None, :], mode, rng)
    return float(sigmoid(logits)[0])


def predict_proba(model: MlpModel, features: np.ndarray) -> np.ndarray:
    """
    Infer-mode probabilities for every row of ``features``.
    """
    if len(features) == 0:
        return np.zeros(0, dtype=np.float64)
    chunks = [
        sigmoid(_forward(model, features[start : start + PREDICT_CHUNK], Mode.INFER)[0])
        for start in range(0, len(features), PREDICT_CHUNK)
    ]
    return np.concatenate(chunks).astype(np.float64)


def evaluate(
    model: MlpModel, dataset: Dataset, threshold: float = DEFAULT_THRESHOLD
) -> MetricsReport:
    arrays = as_arrays(dataset)
    if arrays.size == 0:
        raise EmptyDatasetError("Cannot evaluate on an empty dataset")
    scores = predict_proba(model, arrays.features)
    return evaluate_scores(scores, arrays.labels, threshold)


#
# Batch-norm folding
#
def fold_batchnorm(model: MlpModel) -> MlpModel:
    """
    Absorb each inference-mode batch-norm block into the dense layer before it:

        W' = diag(gamma / sqrt(var + eps)) W
        b' = gamma (b - mean) / sqrt(var + eps) + beta

    The result has no batch-norm blocks and the same Infer-mode outputs.
    """
    if not model.norms:
        return model

    dtype = model.dtype
    dense = list(model.dense)
    for index, norm in enumerate(model.norms):
        weight, bias = dense[index]
        scale = norm.gamma.astype(np.float64) / np.sqrt(
            norm.running_var.astype(np.float64) + model.spec.bn_epsilon
        )
        folded_weight = scale[:, None] * weight.astype(np.float64)
        folded_bias = scale * (bias - norm.running_mean.astype(np.float64)) + norm.beta
        dense[index] = DenseParams(
            folded_weight.astype(dtype), folded_bias.astype(dtype)
        )

    spec = replace(model.spec, batchnorm=False)
    return MlpModel(spec, tuple(dense), ())


#
# Gradient verification
#
def gradient_check(
    model: MlpModel,
    batch: Dataset,
    *,
    mode: Mode = Mode.TRAIN,
    step: float = FINITE_DIFFERENCE_STEP,
    floor: float = RELATIVE_ERROR_FLOOR,
) -> float:
    """
    Compare backprop gradients against central finite differences, in
    float64 with dropout off.

    The relative error of one entry is |a - n| / max(|a| + |n|, floor); the
    floor keeps entries whose true gradient is ~0 from dividing noise by noise.

    :return: the largest relative error over every trainable entry
    """
    arrays = as_arrays(batch)
    exact = model.astype(np.float64)
    features = arrays.features.astype(np.float64)
    labels = arrays.labels.astype(np.float64)

    def batch_loss(candidate: MlpModel) -> float:
        logits, _ = _forward(candidate, features, mode, dropout=False)
        return binary_cross_entropy(sigmoid(logits), labels)

    _, analytic, _ = loss_and_gradients(exact, features, labels, mode, dropout=False)

    worst = 0.0
    for name, tensor in exact.parameters().items():
        for position in np.ndindex(tensor.shape):
            shifted_up = tensor.copy()
            shifted_up[position] += step
            shifted_down = tensor.copy()
            shifted_down[position] -= step
            numeric = (
                batch_loss(exact.with_parameters({name: shifted_up}))
                - batch_loss(exact.with_parameters({name: shifted_down}))
            ) / (2 * step)
            computed = float(analytic[name][position])
            error = abs(computed - numeric) / max(abs(computed) + abs(numeric), floor)
            worst = max(worst, error)
    return worst


#
# Training
#
@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = DEFAULT_LEARNING_RATE
    epochs: int = DEFAULT_EPOCHS
    batch_size: int = DEFAULT_BATCH_SIZE
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    adam_epsilon: float = ADAM_EPSILON
    checkpoint_every_epoch: bool = True
    early_stop_drop: float = DEFAULT_EARLY_STOP_DROP
    """
    Validation-accuracy drop below the running best (as a fraction) that
    counts an epoch as degraded
    """

    early_stop_patience: int = DEFAULT_EARLY_STOP_PATIENCE
    seed: int = 0


def validate_train_config(cfg: TrainConfig) -> None:
    if not cfg.learning_rate > 0:
        raise ValidationError(
            f"Learning rate must be positive, got {cfg.learning_rate}"
        )
    if cfg.epochs < 1:
        raise ValidationError(f"Need at least one epoch, got {cfg.epochs}")
    if cfg.batch_size < 1:
        raise ValidationError(f"Batch size must be at least 1, got {cfg.batch_size}")
    if cfg.early_stop_patience < 1:
        raise ValidationError(
            f"Early-stop patience must be at least 1, got {cfg.early_stop_patience}"
        )


class EpochRecord(NamedTuple):
    epoch: int
    """
    1-based
    """

    train_loss: float
    val_loss: float
    val_accuracy: float
    checkpoint: Optional[str]


@dataclass(frozen=True, eq=False)
class TrainHistory:
    records: Tuple[EpochRecord, ...]
    best_epoch: int
    stopped_early: bool
    checkpoints: Dict[int, MlpModel] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)


CheckpointCallback = Callable[[EpochRecord, MlpModel], Optional[str]]


class AdamOptimizer:
    """
    Adam with bias-corrected first and second moment estimates.
    """

    def __init__(self, params: Dict[str, np.ndarray], cfg: TrainConfig) -> None:
        self.cfg = cfg
        self.step = 0
        self.first_moment = {
            name: np.zeros_like(value) for name, value in params.items()
        }
        self.second_moment = {
            name: np.zeros_like(value) for name, value in params.items()
        }

    def update(
        self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]
    ) -> Dict[str, np.ndarray]:
        cfg = self.cfg
        self.step += 1
        first_correction = 1 - cfg.beta1**self.step
        second_correction = 1 - cfg.beta2**self.step

        updated = {}
        for name, value in params.items():
            grad = grads[name]
            first = cfg.beta1 * self.first_moment[name] + (1 - cfg.beta1) * grad
            second = (
                cfg.beta2 * self.second_moment[name] + (1 - cfg.beta2) * grad * grad
            )
            self.first_moment[name] = first
            self.second_moment[name] = second
            step = (
                cfg.learning_rate
                * (first / first_correction)
                / (np.sqrt(second / second_correction) + cfg.adam_epsilon)
            )
            updated[name] = (value - step).astype(value.dtype)
        return updated


def _update_running_stats(
    model: MlpModel, caches: List[_LayerCache]
) -> Dict[str, np.ndarray]:
    momentum = model.spec.bn_momentum
    updates = {}
    for index, norm in enumerate(model.norms):
        cache = caches[index]
        updates[f"norm.{index}.running_mean"] = (
            momentum * norm.running_mean + (1 - momentum) * cache.batch_mean
        ).astype(norm.running_mean.dtype)
        updates[f"norm.{index}.running_var"] = (
            momentum * norm.running_var + (1 - momentum) * cache.batch_var
        ).astype(norm.running_var.dtype)
    return updates


def _check_dataset(arrays: LabeledArrays, model: MlpModel, name: str) -> None:
    if arrays.size == 0:
        raise EmptyDatasetError(f"The {name} set is empty")
    if arrays.features.ndim != 2 or arrays.features.shape[1] != model.spec.input_width:
        raise DimensionMismatch((-1, model.spec.input_width), arrays.features.shape)
    if not np.isin(arrays.labels, (0, 1)).all():
        raise ValidationError(f"The {name} set has labels outside {{0, 1}}")


def validation_summary(model: MlpModel, arrays: LabeledArrays) -> Tuple[float, float]:
    """
    :return: (Infer-mode loss, accuracy at the 0.5 threshold)
    """
    probabilities = predict_proba(model, arrays.features)
    loss = binary_cross_entropy(probabilities, arrays.labels.astype(np.float64))
    predictions = probabilities >= DEFAULT_THRESHOLD
    accuracy = float(np.mean(predictions == arrays.labels.astype(bool)))
    return loss, accuracy


def run_epochs(
    model: MlpModel,
    train_arrays: LabeledArrays,
    val_arrays: LabeledArrays,
    cfg: TrainConfig,
    *,
    on_epoch_end: Optional[CheckpointCallback] = None,
    hooks: Optional[ForwardHooks] = None,
    dropout: Optional[bool] = None,
    select: Optional[Callable[[MlpModel], Tuple]] = None,
) -> Tuple[MlpModel, TrainHistory]:
    """
    Shared mini-batch Adam loop for training, transfer learning and
    quantization-aware fine-tuning. Keeps the best epoch by validation
    accuracy, breaking ties on lower validation loss, unless ``select`` gives
    another ranking key (higher is better).
    """
    validate_train_config(cfg)
    _check_dataset(train_arrays, model, "training")
    _check_dataset(val_arrays, model, "validation")

    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    optimizer = AdamOptimizer(params, cfg)

    records: List[EpochRecord] = []
    checkpoints: Dict[int, MlpModel] = {}
    best_model, best_key, best_epoch = model, None, 0
    best_accuracy = -math.inf
    degraded_epochs = 0
    stopped_early = False

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(train_arrays.size)
        batch_losses = []
        for batch_index, batch in enumerate(partition_all(cfg.batch_size, order)):
            indices = np.fromiter(batch, dtype=np.int64)
            loss, grads, caches = loss_and_gradients(
                model,
                train_arrays.features[indices],
                train_arrays.labels[indices],
                Mode.TRAIN,
                rng,
                dropout=dropout,
                hooks=hooks,
            )
            if not math.isfinite(loss):
                raise NonFiniteLossError(epoch, batch_index, loss)
            params = optimizer.update(params, grads)
            running_stats = _update_running_stats(model, caches)
            model = model.with_parameters({**params, **running_stats})
            batch_losses.append(loss)
            logger.debug2("epoch %d batch %d loss %.6f", epoch, batch_index, loss)

        val_loss, val_accuracy = validation_summary(model, val_arrays)
        if not math.isfinite(val_loss):
            raise NonFiniteLossError(epoch, -1, val_loss)

        reference = None
        if cfg.checkpoint_every_epoch:
            checkpoints[epoch] = model
            reference = f"memory:{epoch}"
        record = EpochRecord(
            epoch, float(np.mean(batch_losses)), val_loss, val_accuracy, reference
        )
        if on_epoch_end is not None:
            external_reference = on_epoch_end(record, model)
            if external_reference is not None:
                record = record._replace(checkpoint=external_reference)
        records.append(record)
        logger.debug(
            "epoch %d: train loss %.6f, val loss %.6f, val accuracy %.4f",
            epoch,
            record.train_loss,
            val_loss,
            val_accuracy,
        )

        key = select(model) if select is not None else (val_accuracy, -val_loss)
        if best_key is None or key > best_key:
            best_model, best_key, best_epoch = model, key, epoch

        best_accuracy = max(best_accuracy, val_accuracy)
        if best_accuracy - val_accuracy > cfg.early_stop_drop:
            degraded_epochs += 1
        else:
            degraded_epochs = 0
        if degraded_epochs >= cfg.early_stop_patience:
            logger.warning(
                "Stopping early at epoch %d: validation accuracy %.4f has stayed "
                "more than %.2f below its best %.4f for %d epochs",
                epoch,
                val_accuracy,
                cfg.early_stop_drop,
                best_accuracy,
                degraded_epochs,
            )
            stopped_early = True
            break

    history = TrainHistory(tuple(records), best_epoch, stopped_early, checkpoints)
    return best_model, history


def train(
    model: MlpModel,
    train_windows: Dataset,
    val_windows: Dataset,
    cfg: TrainConfig = TrainConfig(),
    *,
    on_epoch_end: Optional[CheckpointCallback] = None,
) -> Tuple[MlpModel, TrainHistory]:
    """
    Train with Adam on the mean binary cross-entropy, validating after every
    epoch, and return the best checkpoint with the full history.

    :raises EmptyDatasetError: if either dataset is empty
    :raises NonFiniteLossError: if any batch loss stops being finite
    """
    best_model, history = run_epochs(
        model,
        as_arrays(train_windows),
        as_arrays(val_windows),
        cfg,
        on_epoch_end=on_epoch_end,
    )
    best = history.records[history.best_epoch - 1]
    logger.info(
        "Trained %d epochs; best epoch %d with val accuracy %.4f",
        len(history),
        history.best_epoch,
        best.val_accuracy,
    )
    return best_model, history


def transfer_train(
    model: MlpModel,
    second_dataset: Dataset,
    cfg: TrainConfig = TrainConfig(),
    *,
    validation: Optional[Dataset] = None,
    retain: Optional[Dataset] = None,
    epochs: Optional[int] = None,
    on_epoch_end: Optional[CheckpointCallback] = None,
) -> MlpModel:
    """
    Continue training an already-trained model on a second attack's data,
    keeping its topology and starting from its weights. The caller is
    expected to evaluate the result on both attacks.

    Without an explicit ``validation`` set the second dataset is split
    chronologically and its first two blocks are used for training and
    validation.

    ``retain`` holds windows of the attack the model was first trained on.
    Its chronological train and validation blocks are mixed into the second
    attack's, so every epoch keeps rehearsing the first attack and the best
    epoch is picked on both.
    """
    if epochs == 0:
        return model

    if validation is None:
        train_part, validation, _ = split_dataset(as_arrays(second_dataset))
    else:
        train_part = second_dataset
    if retain is not None:
        retain_train, retain_val, _ = split_dataset(as_arrays(retain))
        train_part = concat_datasets(train_part, retain_train)
        validation = concat_datasets(validation, retain_val)
        logger.debug(
            "Rehearsing %d first-attack windows during transfer", retain_train.size
        )
    if epochs is not None:
        cfg = replace(cfg, epochs=epochs)

    transferred, history = train(
        model, train_part, validation, cfg, on_epoch_end=on_epoch_end
    )
    logger.info("Transfer training finished after %d epochs", len(history))
    return transferred
