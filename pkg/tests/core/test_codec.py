from eth_hash.auto import (
    keccak,
)
import numpy as np
import pytest
import rlp

from canids.constants import (
    MODEL_FILE_VERSION,
)
from canids.exceptions import (
    CorruptModelFile,
)
from canids.nn import (
    init_model,
    predict_proba,
)
from canids.quant import (
    qforward_batch,
)
from canids.tools.builder import (
    resealed,
    small_spec,
    toy_quant_model,
    two_cluster_arrays,
    with_tensor,
)
from canids.utils.codec import (
    Envelope,
    ModelContainer,
    decode_model,
    decode_quant_model,
    encode_model,
    encode_quant_model,
    load_model,
    load_quant_model,
    save_model,
    save_quant_model,
)
from canids.utils.provenance import (
    file_checksum,
    model_hash,
    tensors_digest,
)


def test_float_model_file(tmp_path):
    model = init_model(small_spec(), seed=6)
    path = tmp_path / "model.ckpt"
    checksum = save_model(model, path, {"epoch": "3", "raw": b"\x00\xff"})
    assert checksum == file_checksum(path)

    loaded, metadata = load_model(path)
    assert metadata == {"epoch": b"3", "raw": b"\x00\xff"}
    assert loaded.spec == model.spec
    assert model_hash(loaded) == model_hash(model)
    features = two_cluster_arrays(8).features
    assert np.array_equal(
        predict_proba(loaded, features), predict_proba(model, features)
    )


def test_quant_model_file(tmp_path):
    qmodel = toy_quant_model(seed=2)
    path = tmp_path / "model.qmodel"
    save_quant_model(qmodel, path, {"note": "bf"})

    loaded, metadata = load_quant_model(path)
    assert loaded == qmodel
    assert loaded.scales == qmodel.scales
    assert loaded.source_hash == qmodel.source_hash
    assert metadata == {"note": b"bf"}
    features = two_cluster_arrays(8).features
    assert qforward_batch(loaded, features).tolist() == (
        qforward_batch(qmodel, features).tolist()
    )


def test_encoding_is_deterministic():
    model = init_model(small_spec(), seed=1)
    assert encode_model(model, {"b": "2", "a": "1"}) == encode_model(
        model, {"a": "1", "b": "2"}
    )


def test_flipped_byte_is_detected():
    encoded = bytearray(encode_model(init_model(small_spec(), seed=0)))
    encoded[len(encoded) // 2] ^= 0x01
    with pytest.raises(CorruptModelFile):
        decode_model(bytes(encoded))


def test_resealed_container_with_wrong_version():
    encoded = encode_model(init_model(small_spec(), seed=0))
    envelope = rlp.decode(encoded, Envelope)
    container = rlp.decode(envelope.body, ModelContainer)
    body = rlp.encode(container.copy(version=MODEL_FILE_VERSION + 1))
    with pytest.raises(CorruptModelFile):
        decode_model(rlp.encode(Envelope(body, keccak(body))))


def test_digest_must_cover_the_body():
    envelope = rlp.decode(encode_model(init_model(small_spec(), seed=0)), Envelope)
    forged = rlp.encode(Envelope(envelope.body + b"\x00", envelope.digest))
    with pytest.raises(CorruptModelFile):
        decode_model(forged)


@pytest.mark.parametrize("junk", (b"\x00", b"not a model at all"))
def test_junk_is_rejected(junk):
    with pytest.raises(CorruptModelFile):
        decode_model(junk)


def test_kinds_do_not_mix():
    with pytest.raises(CorruptModelFile):
        decode_quant_model(encode_model(init_model(small_spec(), seed=0)))
    with pytest.raises(CorruptModelFile):
        decode_model(encode_quant_model(toy_quant_model()))


def _shifted_first_input(container):
    scales = toy_quant_model().scales
    bits = np.array([[q.fraction_bits for q in layer] for layer in scales])
    bits[0, 0] += 1
    return with_tensor(container, "fraction_bits", bits.astype("<i2"))


@pytest.mark.parametrize(
    "rewrite",
    (
        # the first layer no longer reads raw bytes
        _shifted_first_input,
        lambda container: with_tensor(
            container, "layer.0.weight", np.ones((16, 40), "<f4")
        ),
        lambda container: with_tensor(
            container, "fraction_bits", np.zeros((3, 2), "<i2")
        ),
        lambda container: with_tensor(
            container, "fraction_bits", np.zeros((0, 3), "<i2")
        ),
    ),
)
def test_sealed_but_malformed_quant_model(rewrite):
    encoded = resealed(encode_quant_model(toy_quant_model()), rewrite)
    with pytest.raises(CorruptModelFile):
        decode_quant_model(encoded)


@pytest.mark.parametrize(
    "rewrite",
    (
        lambda container: container.copy(
            spec=container.spec.copy(layer_units=(40, 3, 1))
        ),
        lambda container: container.copy(
            spec=container.spec.copy(dropout_rate=b"lots")
        ),
        lambda container: container.copy(
            tensors=tuple(
                record.copy(dtype=b"not-a-dtype") for record in container.tensors
            )
        ),
    ),
)
def test_sealed_but_malformed_float_model(rewrite):
    encoded = resealed(encode_model(init_model(small_spec(), seed=0)), rewrite)
    with pytest.raises(CorruptModelFile):
        decode_model(encoded)


def test_tensors_digest_covers_names_dtypes_and_shapes():
    weight = np.arange(6, dtype=np.float32).reshape(2, 3)
    bias = np.zeros(2, dtype=np.float32)
    digest = tensors_digest({"weight": weight, "bias": bias})
    assert digest == tensors_digest({"bias": bias, "weight": weight})
    assert digest == tensors_digest({"weight": weight.astype(">f4"), "bias": bias})

    altered = (
        {"weights": weight, "bias": bias},
        {"weight": weight.astype(np.float64), "bias": bias},
        {"weight": weight.reshape(3, 2), "bias": bias},
        {"weight": weight + 1, "bias": bias},
        {"weight": weight},
    )
    assert len({digest, *(tensors_digest(tensors) for tensors in altered)}) == 6
