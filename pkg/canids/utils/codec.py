"""
Self-describing model files. A float checkpoint and a quantized model share
one RLP layout:

    envelope = [body, keccak(body)]
    body     = [magic, version, kind, spec, tensors, metadata]
    tensor   = [name, dtype, shape, little-endian row-major bytes]

Loading re-hashes the body and refuses files whose digest does not match.
"""
from pathlib import (
    Path,
)
from typing import (
    Dict,
    Mapping,
    Optional,
    Tuple,
    Union,
)

from eth_hash.auto import (
    keccak,
)
from eth_utils import (
    to_dict,
    to_tuple,
)
from hexbytes import (
    HexBytes,
)
import numpy as np
import rlp
from rlp.exceptions import (
    DecodingError,
    DeserializationError,
)
from rlp.sedes import (
    Binary,
    CountableList,
    big_endian_int,
    binary,
    boolean,
)

from canids.constants import (
    MODEL_FILE_MAGIC,
    MODEL_FILE_VERSION,
    MODEL_KIND_FLOAT,
    MODEL_KIND_QUANT,
)
from canids.exceptions import (
    CalibrationError,
    CorruptModelFile,
    DimensionMismatch,
    ValidationError,
)
from canids.nn import (
    MlpModel,
    ModelSpec,
)
from canids.quant import (
    LayerScales,
    QuantLayer,
    QuantModel,
    TensorQuant,
)

PathLike = Union[str, Path]
Metadata = Mapping[str, Union[bytes, str]]

SOURCE_HASH_KEY = "source_hash"
FRACTION_BITS_TENSOR = "fraction_bits"

# raised while rebuilding a model from records that decoded cleanly
MALFORMED_RECORD_ERRORS = (
    CalibrationError,
    DimensionMismatch,
    IndexError,
    TypeError,
    ValidationError,
    ValueError,
)


class TensorRecord(rlp.Serializable):
    fields = [
        ("name", binary),
        ("dtype", binary),
        ("shape", CountableList(big_endian_int)),
        ("data", binary),
    ]


class MetadataEntry(rlp.Serializable):
    fields = [
        ("key", binary),
        ("value", binary),
    ]


class SpecRecord(rlp.Serializable):
    """
    Floats are stored as their exact ``float.hex`` text.
    """

    fields = [
        ("layer_units", CountableList(big_endian_int)),
        ("dropout_rate", binary),
        ("batchnorm", boolean),
        ("bn_epsilon", binary),
        ("bn_momentum", binary),
    ]


class ModelContainer(rlp.Serializable):
    fields = [
        ("magic", binary),
        ("version", big_endian_int),
        ("kind", binary),
        ("spec", SpecRecord),
        ("tensors", CountableList(TensorRecord)),
        ("metadata", CountableList(MetadataEntry)),
    ]


class Envelope(rlp.Serializable):
    fields = [
        ("body", binary),
        ("digest", Binary.fixed_length(32)),
    ]


#
# Records
#
def _encode_float(value: float) -> bytes:
    return float(value).hex().encode("ascii")


def _decode_float(raw: bytes) -> float:
    return float.fromhex(raw.decode("ascii"))


def _spec_record(spec: ModelSpec) -> SpecRecord:
    return SpecRecord(
        layer_units=tuple(spec.layer_units),
        dropout_rate=_encode_float(spec.dropout_rate),
        batchnorm=spec.batchnorm,
        bn_epsilon=_encode_float(spec.bn_epsilon),
        bn_momentum=_encode_float(spec.bn_momentum),
    )


def _spec_from_record(record: SpecRecord) -> ModelSpec:
    return ModelSpec(
        layer_units=tuple(record.layer_units),
        dropout_rate=_decode_float(record.dropout_rate),
        batchnorm=record.batchnorm,
        bn_epsilon=_decode_float(record.bn_epsilon),
        bn_momentum=_decode_float(record.bn_momentum),
    )


def _tensor_record(name: str, tensor: np.ndarray) -> TensorRecord:
    little_endian = np.ascontiguousarray(tensor).astype(
        tensor.dtype.newbyteorder("<"), copy=False
    )
    return TensorRecord(
        name=name.encode("utf-8"),
        dtype=little_endian.dtype.str.encode("ascii"),
        shape=tuple(tensor.shape),
        data=little_endian.tobytes(),
    )


def _tensor_from_record(record: TensorRecord) -> Tuple[str, np.ndarray]:
    dtype = np.dtype(record.dtype.decode("ascii"))
    shape = tuple(record.shape)
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(record.data) != expected:
        raise CorruptModelFile(
            f"Tensor {record.name!r} holds {len(record.data)} bytes, "
            f"expected {expected} for {dtype} {shape}"
        )
    tensor = np.frombuffer(record.data, dtype=dtype).reshape(shape)
    return record.name.decode("utf-8"), tensor.astype(dtype.newbyteorder("="))


@to_tuple
def _metadata_entries(metadata: Optional[Metadata]):
    for key, value in sorted((metadata or {}).items()):
        if isinstance(value, str):
            value = value.encode("utf-8")
        yield MetadataEntry(key.encode("utf-8"), bytes(value))


@to_dict
def _metadata_from_entries(entries):
    for entry in entries:
        yield entry.key.decode("utf-8"), entry.value


def _seal(container: ModelContainer) -> bytes:
    body = rlp.encode(container)
    return rlp.encode(Envelope(body, keccak(body)))


def _open(data: bytes, kind: bytes) -> ModelContainer:
    try:
        envelope = rlp.decode(data, sedes=Envelope)
    except (DecodingError, DeserializationError) as exc:
        raise CorruptModelFile(f"Not a model file: {exc}") from exc
    if keccak(envelope.body) != envelope.digest:
        raise CorruptModelFile(
            f"Model body hashes to {HexBytes(keccak(envelope.body)).hex()}, "
            f"file records {HexBytes(envelope.digest).hex()}"
        )
    try:
        container = rlp.decode(envelope.body, sedes=ModelContainer)
    except (DecodingError, DeserializationError) as exc:
        raise CorruptModelFile(f"Cannot decode model body: {exc}") from exc

    if container.magic != MODEL_FILE_MAGIC:
        raise CorruptModelFile(f"Bad magic {container.magic!r}")
    if container.version != MODEL_FILE_VERSION:
        raise CorruptModelFile(f"Unsupported model file version {container.version}")
    if container.kind != kind:
        raise CorruptModelFile(
            f"Expected a {kind.decode()} model, found {container.kind.decode()}"
        )
    return container


#
# Float models
#
def encode_model(model: MlpModel, metadata: Optional[Metadata] = None) -> bytes:
    container = ModelContainer(
        magic=MODEL_FILE_MAGIC,
        version=MODEL_FILE_VERSION,
        kind=MODEL_KIND_FLOAT,
        spec=_spec_record(model.spec),
        tensors=tuple(
            _tensor_record(name, tensor) for name, tensor in model.tensors().items()
        ),
        metadata=_metadata_entries(metadata),
    )
    return _seal(container)


def decode_model(data: bytes) -> Tuple[MlpModel, Dict[str, bytes]]:
    container = _open(data, MODEL_KIND_FLOAT)
    try:
        spec = _spec_from_record(container.spec)
        tensors = dict(_tensor_from_record(record) for record in container.tensors)
        model = MlpModel.from_tensors(spec, tensors)
        metadata = _metadata_from_entries(container.metadata)
    except KeyError as exc:
        raise CorruptModelFile(f"Model file is missing tensor {exc}") from exc
    except MALFORMED_RECORD_ERRORS as exc:
        raise CorruptModelFile(f"Malformed model file: {exc}") from exc
    return model, metadata


#
# Quantized models
#
def encode_quant_model(
    qmodel: QuantModel, metadata: Optional[Metadata] = None
) -> bytes:
    fraction_bits = np.array(
        [
            tuple(tensor_quant.fraction_bits for tensor_quant in scales)
            for scales in qmodel.scales
        ],
        dtype=np.int16,
    )
    tensors = [_tensor_record(FRACTION_BITS_TENSOR, fraction_bits)]
    for index, layer in enumerate(qmodel.layers):
        tensors.append(_tensor_record(f"layer.{index}.weight", layer.weight))
        tensors.append(_tensor_record(f"layer.{index}.bias", layer.bias))

    container = ModelContainer(
        magic=MODEL_FILE_MAGIC,
        version=MODEL_FILE_VERSION,
        kind=MODEL_KIND_QUANT,
        spec=_spec_record(ModelSpec(layer_units=qmodel.layer_units, batchnorm=False)),
        tensors=tuple(tensors),
        metadata=_metadata_entries(
            {**(metadata or {}), SOURCE_HASH_KEY: bytes(qmodel.source_hash)}
        ),
    )
    return _seal(container)


def decode_quant_model(data: bytes) -> Tuple[QuantModel, Dict[str, bytes]]:
    container = _open(data, MODEL_KIND_QUANT)
    try:
        tensors = dict(_tensor_from_record(record) for record in container.tensors)
        metadata = _metadata_from_entries(container.metadata)
        fraction_bits = tensors[FRACTION_BITS_TENSOR]
        layers = tuple(
            QuantLayer(
                tensors[f"layer.{index}.weight"],
                tensors[f"layer.{index}.bias"],
                LayerScales(*(TensorQuant(int(bits)) for bits in fraction_bits[index])),
            )
            for index in range(len(fraction_bits))
        )
        qmodel = QuantModel(layers, HexBytes(metadata.pop(SOURCE_HASH_KEY)))
    except KeyError as exc:
        raise CorruptModelFile(f"Quantized model file is missing {exc}") from exc
    except MALFORMED_RECORD_ERRORS as exc:
        raise CorruptModelFile(f"Malformed quantized model file: {exc}") from exc
    return qmodel, metadata


#
# Files
#
def save_model(
    model: MlpModel, path: PathLike, metadata: Optional[Metadata] = None
) -> HexBytes:
    """
    :return: keccak of the written file
    """
    encoded = encode_model(model, metadata)
    Path(path).write_bytes(encoded)
    return HexBytes(keccak(encoded))


def load_model(path: PathLike) -> Tuple[MlpModel, Dict[str, bytes]]:
    return decode_model(Path(path).read_bytes())


def save_quant_model(
    qmodel: QuantModel, path: PathLike, metadata: Optional[Metadata] = None
) -> HexBytes:
    encoded = encode_quant_model(qmodel, metadata)
    Path(path).write_bytes(encoded)
    return HexBytes(keccak(encoded))


def load_quant_model(path: PathLike) -> Tuple[QuantModel, Dict[str, bytes]]:
    return decode_quant_model(Path(path).read_bytes())
