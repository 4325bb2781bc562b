from collections import (
    deque,
)
from dataclasses import (
    dataclass,
)
from typing import (
    Deque,
    Optional,
    Sequence,
    Tuple,
)

from eth_utils import (
    to_tuple,
)
import numpy as np

from canids.canlog import (
    default_synthetic_config,
    encode_frame_bytes,
    encode_frames,
    generate_synthetic_log,
)
from canids.constants import (
    BYTE_ZERO_POINT,
    BYTES_PER_MESSAGE,
    DEFAULT_WINDOW_DEPTH,
)
from canids.exceptions import (
    ValidationError,
)
from canids.typing import (
    AttackKind,
    Dataset,
    Label,
    LabeledArrays,
    LabeledFrame,
    WindowFeature,
)


@dataclass(frozen=True)
class WindowConfig:
    depth: int = DEFAULT_WINDOW_DEPTH
    bytes_per_message: int = BYTES_PER_MESSAGE

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValidationError(f"Window depth must be at least 1, got {self.depth}")
        if self.bytes_per_message != BYTES_PER_MESSAGE:
            raise ValidationError(
                f"Frames pack into {BYTES_PER_MESSAGE} bytes, "
                f"got {self.bytes_per_message}"
            )

    @property
    def width(self) -> int:
        return self.depth * self.bytes_per_message


def to_signed(packed: np.ndarray) -> np.ndarray:
    """
    Map unsigned bytes b to b - 128 as int8. Flipping the top bit and
    reinterpreting is exactly that subtraction.
    """
    return (packed ^ np.uint8(BYTE_ZERO_POINT)).view(np.int8)


def to_unsigned(values: np.ndarray) -> np.ndarray:
    return values.view(np.uint8) ^ np.uint8(BYTE_ZERO_POINT)


class FrameWindow:
    """
    FIFO of the most recent ``depth`` frames. Every push after the buffer has
    filled emits the feature for the window ending at the pushed frame.

    Single writer: only the ingest path may push.
    """

    __slots__ = ("config", "_packed", "_pushed")

    def __init__(self, config: WindowConfig = WindowConfig()) -> None:
        self.config = config
        self._packed: Deque[bytes] = deque(maxlen=config.depth)
        self._pushed = 0

    def __repr__(self) -> str:
        return f"FrameWindow<depth={self.config.depth}, pushed={self._pushed}>"

    @property
    def pushed(self) -> int:
        return self._pushed

    @property
    def is_warm(self) -> bool:
        return len(self._packed) == self.config.depth

    def push(self, frame: LabeledFrame) -> Optional[WindowFeature]:
        self._packed.append(encode_frame_bytes(frame))
        self._pushed += 1
        if not self.is_warm:
            return None

        packed = np.frombuffer(b"".join(self._packed), dtype=np.uint8)
        values = to_signed(packed)
        values.flags.writeable = False
        return WindowFeature(values, Label(frame.label), frame.timestamp)


def window_arrays(
    log: Sequence[LabeledFrame], config: WindowConfig = WindowConfig()
) -> LabeledArrays:
    """
    All stride-1 windows of a log as one int8 feature matrix plus labels.
    Produces max(0, len(log) - depth + 1) rows.
    """
    window_count = max(0, len(log) - config.depth + 1)
    if window_count == 0:
        return LabeledArrays(
            np.zeros((0, config.width), dtype=np.int8), np.zeros(0, dtype=np.uint8)
        )

    packed = encode_frames(log)
    windows = np.lib.stride_tricks.sliding_window_view(
        packed, (config.depth, BYTES_PER_MESSAGE)
    ).reshape(window_count, config.width)
    features = to_signed(np.ascontiguousarray(windows))

    labels = np.fromiter(
        (int(frame.label) for frame in log[config.depth - 1 :]),
        dtype=np.uint8,
        count=window_count,
    )
    return LabeledArrays(features, labels)


@to_tuple
def windows_of(log: Sequence[LabeledFrame], config: WindowConfig = WindowConfig()):
    """
    Batch counterpart of :meth:`FrameWindow.push`: one feature per message
    once the window is full, identical to pushing the log frame by frame.
    """
    arrays = window_arrays(log, config)
    newest_frames = log[config.depth - 1 :]
    for row, label, frame in zip(arrays.features, arrays.labels, newest_frames):
        row.flags.writeable = False
        yield WindowFeature(row, Label(int(label)), frame.timestamp)


def as_arrays(dataset: Dataset) -> LabeledArrays:
    if isinstance(dataset, LabeledArrays):
        return dataset
    elif len(dataset) == 0:
        return LabeledArrays(np.zeros((0, 0), dtype=np.int8), np.zeros(0, np.uint8))
    else:
        return LabeledArrays(
            np.stack([feature.values for feature in dataset]),
            np.array([int(feature.label) for feature in dataset], dtype=np.uint8),
        )


def concat_datasets(*datasets: Dataset) -> LabeledArrays:
    """
    Rows of every dataset, in argument order. Empty datasets are skipped.
    """
    parts = [as_arrays(dataset) for dataset in datasets]
    parts = [part for part in parts if part.size > 0]
    if not parts:
        return as_arrays(())
    return LabeledArrays(
        np.concatenate([part.features for part in parts]),
        np.concatenate([part.labels for part in parts]),
    )


def unpack_feature(feature: WindowFeature) -> Tuple[bytes, ...]:
    """
    Recover the raw 10-byte frame encodings of a window, oldest first.
    """
    raw = to_unsigned(np.asarray(feature.values)).tobytes()
    return tuple(
        raw[offset : offset + BYTES_PER_MESSAGE]
        for offset in range(0, len(raw), BYTES_PER_MESSAGE)
    )


# Attacks each detector is trained on, in transfer order
DETECTOR_ATTACKS = (
    (AttackKind.DOS, AttackKind.FUZZY),
    (AttackKind.SPOOF_RPM, AttackKind.SPOOF_GEAR),
)


def attack_windows_for(
    kind: AttackKind,
    config: WindowConfig = WindowConfig(),
    *,
    duration: float = 60.0,
    seed: int = 0,
) -> LabeledArrays:
    """
    Windows of a standard synthetic log for one attack kind.
    """
    log = generate_synthetic_log(
        default_synthetic_config(kind, duration=duration, seed=seed)
    )
    return window_arrays(log, config)
