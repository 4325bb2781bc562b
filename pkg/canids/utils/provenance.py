"""
Keccak fingerprints that tie every artifact to the inputs it was built from.
"""
from pathlib import (
    Path,
)
from typing import (
    Mapping,
    Union,
)

from eth_hash.auto import (
    keccak,
)
from hexbytes import (
    HexBytes,
)
import numpy as np
import yaml


def file_checksum(path: Union[str, Path]) -> HexBytes:
    return HexBytes(keccak(Path(path).read_bytes()))


def config_digest(resolved: Mapping) -> HexBytes:
    """
    Digest of a fully resolved config mapping, independent of key order.
    """
    text = yaml.safe_dump(dict(resolved), sort_keys=True, default_flow_style=False)
    return HexBytes(keccak(text.encode("utf-8")))


def tensors_digest(tensors: Mapping[str, np.ndarray]) -> HexBytes:
    """
    Hash of named tensors: each name, dtype, shape and little-endian
    row-major contents, in name order.
    """
    parts = []
    for name in sorted(tensors):
        tensor = np.ascontiguousarray(tensors[name])
        little_endian = tensor.astype(tensor.dtype.newbyteorder("<"), copy=False)
        header = f"{name}:{tensor.dtype.str.lstrip('<>|=')}:{tensor.shape}".encode()
        parts.append(keccak(header) + keccak(little_endian.tobytes()))
    return HexBytes(keccak(b"".join(parts)))


def model_hash(model) -> HexBytes:
    """
    Identity of a float model: its topology and every tensor, including the
    batch-norm running statistics.
    """
    topology = ",".join(str(width) for width in model.spec.layer_units).encode()
    return HexBytes(keccak(topology + tensors_digest(model.tensors())))
