from dataclasses import (
    replace,
)

from eth_hash.auto import (
    keccak,
)
import numpy as np
import rlp

from canids.canlog import (
    default_synthetic_config,
    generate_synthetic_log,
)
from canids.engine import (
    DetectorPair,
)
from canids.nn import (
    ModelSpec,
    TrainConfig,
    init_model,
    train,
)
from canids.quant import (
    calibrate,
    calibration_set,
    quantize,
)
from canids.typing import (
    AttackKind,
    LabeledArrays,
)
from canids.utils.codec import (
    Envelope,
    ModelContainer,
    TensorRecord,
)


def two_cluster_arrays(count, width=40, seed=0, attack_share=0.3, spread=12.0):
    """
    Windows drawn around two well separated centers: normal rows near -40,
    attack rows near +40. A small network separates them within an epoch.
    """
    rng = np.random.default_rng(seed)
    labels = (rng.random(count) < attack_share).astype(np.uint8)
    centers = np.where(labels == 1, 40.0, -40.0)[:, None]
    noise = rng.normal(0.0, spread, size=(count, width))
    features = np.clip(np.rint(centers + noise), -128, 127).astype(np.int8)
    return LabeledArrays(features, labels)


def small_spec(width=40, hidden=(16, 8), batchnorm=True):
    return ModelSpec(layer_units=(width,) + tuple(hidden) + (1,), batchnorm=batchnorm)


def trained_toy_model(seed=0, epochs=3, batchnorm=True):
    """
    Float model trained on two-cluster data, with its train/val arrays.
    """
    train_arrays = two_cluster_arrays(1200, seed=seed)
    val_arrays = two_cluster_arrays(200, seed=seed + 1000)
    model = init_model(small_spec(batchnorm=batchnorm), seed)
    cfg = TrainConfig(learning_rate=1e-2, epochs=epochs, batch_size=16, seed=seed)
    best, history = train(model, train_arrays, val_arrays, cfg)
    return best, history, train_arrays, val_arrays


def toy_quant_model(seed=0, hidden=(16, 8)):
    """
    INT8 model quantized straight from a freshly initialized float model.
    """
    model = init_model(small_spec(hidden=hidden, batchnorm=False), seed)
    calib = calibration_set(two_cluster_arrays(256, seed=seed), size=128, seed=seed)
    return quantize(model, calibrate(model, calib))


def toy_detector_pair(seed=0):
    return DetectorPair(toy_quant_model(seed), toy_quant_model(seed + 1))


def short_log(kind=AttackKind.DOS, duration=1.0, seed=0, **overrides):
    cfg = default_synthetic_config(kind, duration=duration, seed=seed)
    return generate_synthetic_log(replace(cfg, **overrides))


def resealed(encoded, rewrite):
    """
    Apply ``rewrite`` to the container inside a model file and sign the
    result again, so only the records themselves are wrong.
    """
    envelope = rlp.decode(encoded, Envelope)
    container = rewrite(rlp.decode(envelope.body, ModelContainer))
    body = rlp.encode(container)
    return rlp.encode(Envelope(body, keccak(body)))


def with_tensor(container, name, tensor):
    """
    Swap the named tensor record of a container for ``tensor``.
    """
    record = TensorRecord(
        name=name.encode("utf-8"),
        dtype=tensor.dtype.str.encode("ascii"),
        shape=tuple(tensor.shape),
        data=tensor.tobytes(),
    )
    tensors = tuple(
        record if existing.name == record.name else existing
        for existing in container.tensors
    )
    return container.copy(tensors=tensors)
