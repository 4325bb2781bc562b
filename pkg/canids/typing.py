import enum
from typing import (
    NamedTuple,
    Sequence,
    Union,
)

import numpy as np


class Label(enum.IntEnum):
    NORMAL = 0
    ATTACK = 1

    def __repr__(self) -> str:
        return f"Label.{self.name}"


class AttackKind(enum.Enum):
    DOS = "DoS"
    FUZZY = "Fuzzy"
    SPOOF_RPM = "SpoofRpm"
    SPOOF_GEAR = "SpoofGear"

    @classmethod
    def from_name(cls, name: str) -> "AttackKind":
        lowered = name.lower()
        for kind in cls:
            if kind.value.lower() == lowered or kind.name.lower() == lowered:
                return kind
        raise ValueError(f"Unknown attack kind {name!r}")


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


class ReplayMode(enum.Enum):
    MAX_RATE = "max-rate"
    TIMESTAMPED = "timestamped"


class LabeledFrame(NamedTuple):
    """
    One base-format CAN message, as logged, plus its ground-truth label.
    """

    timestamp: float
    """
    Seconds; non-decreasing within a log.
    """

    can_id: int
    """
    11-bit identifier, 0..=0x7FF
    """

    dlc: int
    """
    Payload length in bytes, 0..=8
    """

    payload: bytes
    """
    Exactly ``dlc`` bytes
    """

    label: Label


class WindowFeature(NamedTuple):
    values: np.ndarray
    """
    Read-only int8 vector of width ``10 * depth``: the packed bytes of the
    window's frames, oldest first, each shifted by -128.
    """

    label: Label
    """
    Label of the newest frame in the window
    """

    newest_timestamp: float


class LabeledArrays(NamedTuple):
    """
    A whole dataset as two aligned arrays, which is the shape the training and
    evaluation loops work on.
    """

    features: np.ndarray
    """
    int8 matrix, one window per row
    """

    labels: np.ndarray
    """
    uint8 vector of 0 (normal) / 1 (attack)
    """

    @property
    def size(self) -> int:
        return len(self.labels)


Dataset = Union[LabeledArrays, Sequence[WindowFeature]]
