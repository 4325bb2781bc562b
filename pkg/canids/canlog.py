"""
CAN frames as they appear in Car-Hacking-format logs: parsing, canonical
serialization, the 10-byte feature packing, synthetic attack traffic and the
chronological dataset split.
"""
from collections import (
    Counter,
)
from dataclasses import (
    dataclass,
    field,
)
import math
from pathlib import (
    Path,
)
import re
from typing import (
    Dict,
    Iterable,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    TypeVar,
    Union,
)

from eth_utils import (
    get_extended_debug_logger,
    to_tuple,
)
import numpy as np

from canids.constants import (
    BYTES_PER_MESSAGE,
    CAN_ID_BYTES,
    DEFAULT_ATTACK_BURSTS,
    DEFAULT_JITTER_PROBABILITY,
    DEFAULT_NORMAL_IDS,
    DEFAULT_SPLIT,
    DOS_CAN_ID,
    FLAG_ATTACK,
    FLAG_NORMAL,
    GEAR_CAN_ID,
    GEAR_SPOOF_TEMPLATE,
    MAX_BASE_CAN_ID,
    MAX_DLC,
    RPM_CAN_ID,
    RPM_SPOOF_TEMPLATE,
    SPLIT_TOLERANCE,
    SPOOF_COUNTER_SPAN,
    VEHICLE_TEMPLATE_SEED,
)
from canids.exceptions import (
    ConfigError,
    FrameParseError,
    ValidationError,
)
from canids.typing import (
    AttackKind,
    Label,
    LabeledArrays,
    LabeledFrame,
)
from canids.validation import (
    validate_fraction,
    validate_frame,
    validate_positive,
)

logger = get_extended_debug_logger("canids.canlog")

T = TypeVar("T")

_FLAG_TO_LABEL = {FLAG_NORMAL: Label.NORMAL, FLAG_ATTACK: Label.ATTACK}
_LABEL_TO_FLAG = {label: flag for flag, label in _FLAG_TO_LABEL.items()}

# plain digits only: no sign, underscore or 0x prefix
_HEX_FIELD = re.compile(r"[0-9A-Fa-f]+")
_DECIMAL_FIELD = re.compile(r"[0-9]+")


def _strict_int(text: str, pattern: "re.Pattern[str]", base: int) -> int:
    if not pattern.fullmatch(text):
        raise ValueError(text)
    return int(text, base)


#
# Parsing and serialization
#
def _parse_hex_byte(text: str, line_number: int, field_name: str, line: str) -> int:
    stripped = text.strip()
    try:
        value = _strict_int(stripped, _HEX_FIELD, 16)
    except ValueError:
        raise FrameParseError(
            line_number, field_name, line, f"invalid hex {stripped!r}"
        ) from None
    if not 0 <= value <= 0xFF:
        raise FrameParseError(
            line_number, field_name, line, f"{stripped!r} does not fit in one byte"
        )
    return value


def parse_frame_record(line: str, line_number: int = 1) -> LabeledFrame:
    """
    Decode one comma-separated log record:
    ``timestamp,hex id,decimal dlc,<dlc hex bytes>[,R|T]``

    The flag column is optional; records without one are normal traffic.

    :raises FrameParseError: naming the first field that could not be decoded
    """
    fields = [column.strip() for column in line.strip().split(",")]
    if len(fields) < 3:
        raise FrameParseError(
            line_number,
            "record",
            line,
            f"expected at least 3 fields, got {len(fields)}",
        )
    raw_timestamp, raw_id, raw_dlc, *rest = fields

    try:
        timestamp = float(raw_timestamp)
    except ValueError:
        raise FrameParseError(
            line_number, "timestamp", line, f"not a number: {raw_timestamp!r}"
        ) from None
    if not math.isfinite(timestamp):
        raise FrameParseError(line_number, "timestamp", line, "must be finite")

    try:
        can_id = _strict_int(raw_id, _HEX_FIELD, 16)
    except ValueError:
        raise FrameParseError(
            line_number, "can_id", line, f"invalid hex {raw_id!r}"
        ) from None
    if not 0 <= can_id <= MAX_BASE_CAN_ID:
        raise FrameParseError(
            line_number, "can_id", line, f"{raw_id!r} exceeds the 11-bit base ID range"
        )

    try:
        dlc = _strict_int(raw_dlc, _DECIMAL_FIELD, 10)
    except ValueError:
        raise FrameParseError(
            line_number, "dlc", line, f"not a decimal integer: {raw_dlc!r}"
        ) from None
    if not 0 <= dlc <= MAX_DLC:
        raise FrameParseError(line_number, "dlc", line, f"{dlc} is outside 0..8")

    if len(rest) == dlc + 1:
        *raw_bytes, raw_flag = rest
        label = _FLAG_TO_LABEL.get(raw_flag.upper())
        if label is None:
            raise FrameParseError(
                line_number, "flag", line, f"expected R or T, got {raw_flag!r}"
            )
    elif len(rest) == dlc:
        raw_bytes = rest
        label = Label.NORMAL
    else:
        raise FrameParseError(
            line_number,
            "payload",
            line,
            f"DLC is {dlc} but the record carries {len(rest)} trailing fields",
        )

    payload = bytes(
        _parse_hex_byte(raw_byte, line_number, f"payload[{index}]", line)
        for index, raw_byte in enumerate(raw_bytes)
    )
    return LabeledFrame(timestamp, can_id, dlc, payload, label)


def serialize_frame(frame: LabeledFrame) -> str:
    """
    Canonical record for a frame: microsecond timestamp, 4-digit lower-case
    hex ID, decimal DLC, 2-digit hex bytes, then the R/T flag.
    """
    columns = [f"{frame.timestamp:.6f}", f"{frame.can_id:04x}", str(frame.dlc)]
    columns.extend(f"{byte:02x}" for byte in frame.payload)
    columns.append(_LABEL_TO_FLAG[Label(frame.label)])
    return ",".join(columns)


def encode_frame_bytes(frame: LabeledFrame) -> bytes:
    """
    Pack a frame into its 10 feature bytes: the CAN ID as a big-endian 16-bit
    value followed by the payload, zero-padded on the right to 8 bytes.
    """
    return frame.can_id.to_bytes(CAN_ID_BYTES, "big") + frame.payload.ljust(
        MAX_DLC, b"\x00"
    )


def encode_frames(frames: Sequence[LabeledFrame]) -> np.ndarray:
    """
    :return: uint8 matrix of shape (len(frames), 10), one packed frame per row
    """
    packed = b"".join(encode_frame_bytes(frame) for frame in frames)
    return np.frombuffer(packed, dtype=np.uint8).reshape(len(frames), BYTES_PER_MESSAGE)


@to_tuple
def iter_log_lines(lines: Iterable[str]) -> Iterable[LabeledFrame]:
    previous_timestamp = -math.inf
    for line_number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        frame = parse_frame_record(line, line_number)
        if frame.timestamp < previous_timestamp:
            raise FrameParseError(
                line_number,
                "timestamp",
                line,
                f"decreases from {previous_timestamp!r} to {frame.timestamp!r}",
            )
        previous_timestamp = frame.timestamp
        yield frame


def load_car_hacking_log(path: Union[str, Path]) -> Tuple[LabeledFrame, ...]:
    """
    Read a whole log in the open Car-Hacking dataset layout.

    :raises FrameParseError: on the first malformed or out-of-order record
    """
    with open(path) as log_file:
        frames = iter_log_lines(log_file)
    counts = label_counts(frames)
    logger.info(
        "Loaded %d frames from %s (%d normal, %d attack)",
        len(frames),
        path,
        counts[Label.NORMAL],
        counts[Label.ATTACK],
    )
    return frames


def write_log(frames: Iterable[LabeledFrame], path: Union[str, Path]) -> None:
    with open(path, "w") as log_file:
        for frame in frames:
            log_file.write(serialize_frame(frame))
            log_file.write("\n")


def label_counts(frames: Iterable[LabeledFrame]) -> Dict[Label, int]:
    counts = Counter(Label(frame.label) for frame in frames)
    return {label: counts.get(label, 0) for label in Label}


def attack_fraction(frames: Sequence[LabeledFrame]) -> float:
    if not frames:
        return 0.0
    return label_counts(frames)[Label.ATTACK] / len(frames)


#
# Synthetic traffic
#
class NormalIdSpec(NamedTuple):
    """
    One periodic sender on the simulated bus. Its payload is a per-ID constant
    template in which the last byte is a wrapping counter; with probability
    ``jitter_probability`` one other byte of a message is nudged by +/-1.
    """

    can_id: int
    period: float
    dlc: int = MAX_DLC
    jitter_probability: float = DEFAULT_JITTER_PROBABILITY
    template: Optional[bytes] = None
    """
    Payload template; ``None`` means :func:`vehicle_template` for this ID
    """


def vehicle_template(can_id: int, dlc: int = MAX_DLC) -> bytes:
    """
    The fixed payload template one ECU sends under ``can_id``. It depends only
    on the ID, so logs generated with different seeds describe the same car.
    """
    rng = np.random.default_rng((VEHICLE_TEMPLATE_SEED, can_id))
    return bytes(rng.integers(0, 256, size=dlc, dtype=np.int64).astype(np.uint8))


def default_normal_ids() -> Tuple[NormalIdSpec, ...]:
    return tuple(
        NormalIdSpec(can_id, period, dlc) for can_id, period, dlc in DEFAULT_NORMAL_IDS
    )


@dataclass(frozen=True)
class SyntheticConfig:
    attack_kind: AttackKind
    attack_rate: float
    duration: float
    attack_fraction_target: float
    seed: int
    normal_ids: Tuple[NormalIdSpec, ...] = field(default_factory=default_normal_ids)
    attack_bursts: int = DEFAULT_ATTACK_BURSTS
    start_time: float = 0.0


# Injection rates and attack shares resembling the open dataset's captures
_DEFAULT_ATTACK_RATES = {
    AttackKind.DOS: 1 / 0.0003,
    AttackKind.FUZZY: 1 / 0.0005,
    AttackKind.SPOOF_RPM: 1 / 0.001,
    AttackKind.SPOOF_GEAR: 1 / 0.001,
}
_DEFAULT_ATTACK_FRACTIONS = {
    AttackKind.DOS: 0.33,
    AttackKind.FUZZY: 0.22,
    AttackKind.SPOOF_RPM: 0.20,
    AttackKind.SPOOF_GEAR: 0.17,
}


def default_synthetic_config(
    kind: AttackKind,
    *,
    duration: float = 60.0,
    seed: int = 0,
    attack_fraction_target: Optional[float] = None,
    attack_rate: Optional[float] = None,
) -> SyntheticConfig:
    return SyntheticConfig(
        attack_kind=kind,
        attack_rate=attack_rate or _DEFAULT_ATTACK_RATES[kind],
        duration=duration,
        attack_fraction_target=(
            attack_fraction_target or _DEFAULT_ATTACK_FRACTIONS[kind]
        ),
        seed=seed,
    )


def validate_synthetic_config(cfg: SyntheticConfig) -> None:
    try:
        validate_fraction(cfg.attack_fraction_target, "attack_fraction_target")
        validate_positive(cfg.duration, "duration")
        validate_positive(cfg.attack_rate, "attack_rate")
        validate_positive(cfg.attack_bursts, "attack_bursts")
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc

    if not cfg.normal_ids:
        raise ConfigError("At least one normal CAN ID is required")
    for spec in cfg.normal_ids:
        if not 0 <= spec.can_id <= MAX_BASE_CAN_ID:
            raise ConfigError(f"Normal ID {spec.can_id:#x} is not a base-format ID")
        if not 0 <= spec.dlc <= MAX_DLC:
            raise ConfigError(f"Normal ID {spec.can_id:#x} has DLC {spec.dlc}")
        if not spec.period > 0:
            raise ConfigError(f"Normal ID {spec.can_id:#x} has period {spec.period}")
        if not 0 <= spec.jitter_probability <= 1:
            raise ConfigError(
                f"Normal ID {spec.can_id:#x} has jitter {spec.jitter_probability}"
            )
        if spec.template is not None and len(spec.template) != spec.dlc:
            raise ConfigError(
                f"Normal ID {spec.can_id:#x} has a {len(spec.template)}-byte "
                f"template but DLC {spec.dlc}"
            )


def _normal_traffic(
    spec: NormalIdSpec, cfg: SyntheticConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    :return: (timestamps, payload matrix) for every message one sender emits
    """
    phase = rng.uniform(0, spec.period)
    count = max(0, math.ceil((cfg.duration - phase) / spec.period))
    timestamps = phase + spec.period * np.arange(count)

    raw_template = spec.template
    if raw_template is None:
        raw_template = vehicle_template(spec.can_id, spec.dlc)
    template = np.frombuffer(raw_template, dtype=np.uint8).astype(np.int64)
    payloads = np.tile(template, (count, 1))
    if spec.dlc == 0:
        return timestamps, payloads

    counter_index = spec.dlc - 1
    counter_start = rng.integers(0, 256)
    payloads[:, counter_index] = (counter_start + np.arange(count)) % 256

    jittered = rng.random(count) < spec.jitter_probability
    if spec.dlc > 1:
        rows = np.flatnonzero(jittered)
        columns = rng.integers(0, counter_index, size=len(rows))
        nudges = rng.choice(np.array([-1, 1]), size=len(rows))
        payloads[rows, columns] = (payloads[rows, columns] + nudges) % 256
    return timestamps, payloads


def _attack_timestamps(cfg: SyntheticConfig, attack_count: int) -> np.ndarray:
    """
    Spread ``attack_count`` injections over equal-length cycles, one burst
    centered in each cycle, spaced at the configured attack rate.
    """
    cycle = cfg.duration / cfg.attack_bursts
    per_burst = np.full(cfg.attack_bursts, attack_count // cfg.attack_bursts)
    per_burst[: attack_count % cfg.attack_bursts] += 1

    bursts: List[np.ndarray] = []
    for burst_index, count in enumerate(per_burst):
        burst_length = count / cfg.attack_rate
        if burst_length > cycle:
            raise ConfigError(
                f"attack_rate {cfg.attack_rate} is too low to inject {attack_count} "
                f"frames within {cfg.duration}s"
            )
        start = burst_index * cycle + (cycle - burst_length) / 2
        bursts.append(start + np.arange(count) / cfg.attack_rate)
    return np.concatenate(bursts) if bursts else np.zeros(0)


def _attack_traffic(
    cfg: SyntheticConfig, count: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    :return: (can ids, payload matrix) for ``count`` injected frames
    """
    kind = cfg.attack_kind
    if kind is AttackKind.DOS:
        can_ids = np.full(count, DOS_CAN_ID)
        payloads = np.zeros((count, MAX_DLC), dtype=np.int64)
    elif kind is AttackKind.FUZZY:
        can_ids = rng.integers(0, MAX_BASE_CAN_ID + 1, size=count)
        payloads = rng.integers(0, 256, size=(count, MAX_DLC), dtype=np.int64)
    elif kind in (AttackKind.SPOOF_RPM, AttackKind.SPOOF_GEAR):
        if kind is AttackKind.SPOOF_RPM:
            can_id, template = RPM_CAN_ID, RPM_SPOOF_TEMPLATE
        else:
            can_id, template = GEAR_CAN_ID, GEAR_SPOOF_TEMPLATE
        can_ids = np.full(count, can_id)
        payloads = np.tile(np.frombuffer(template, dtype=np.uint8), (count, 1)).astype(
            np.int64
        )
        counters = np.arange(count) % SPOOF_COUNTER_SPAN
        payloads[:, -1] = (payloads[:, -1] + counters) % 256
    else:
        raise Exception(f"Invariant: unhandled attack kind {kind!r}")
    return can_ids, payloads


def generate_synthetic_log(cfg: SyntheticConfig) -> Tuple[LabeledFrame, ...]:
    """
    Build a time-ordered, labeled log of periodic normal traffic with attack
    frames injected in bursts. The number of injected frames is chosen so the
    attack share of the log matches ``cfg.attack_fraction_target``.

    The result depends only on ``cfg``: the same seed yields the same log.
    """
    validate_synthetic_config(cfg)
    rng = np.random.default_rng(cfg.seed)

    timestamps: List[np.ndarray] = []
    can_ids: List[np.ndarray] = []
    payload_rows: List[bytes] = []
    dlcs: List[np.ndarray] = []

    for spec in cfg.normal_ids:
        sender_times, sender_payloads = _normal_traffic(spec, cfg, rng)
        timestamps.append(sender_times)
        can_ids.append(np.full(len(sender_times), spec.can_id))
        dlcs.append(np.full(len(sender_times), spec.dlc))
        payload_rows.extend(bytes(row.astype(np.uint8)) for row in sender_payloads)

    normal_count = sum(len(sender_times) for sender_times in timestamps)
    fraction = cfg.attack_fraction_target
    attack_count = round(fraction * normal_count / (1 - fraction))

    attack_times = _attack_timestamps(cfg, attack_count)
    attack_ids, attack_payloads = _attack_traffic(cfg, attack_count, rng)
    timestamps.append(attack_times)
    can_ids.append(attack_ids)
    dlcs.append(np.full(attack_count, MAX_DLC))
    payload_rows.extend(bytes(row.astype(np.uint8)) for row in attack_payloads)

    all_times = np.round(cfg.start_time + np.concatenate(timestamps), 6)
    all_ids = np.concatenate(can_ids)
    all_dlcs = np.concatenate(dlcs)
    labels = np.concatenate(
        [np.zeros(normal_count, dtype=np.uint8), np.ones(attack_count, dtype=np.uint8)]
    )
    order = np.argsort(all_times, kind="stable")

    frames = tuple(
        LabeledFrame(
            float(all_times[index]),
            int(all_ids[index]),
            int(all_dlcs[index]),
            payload_rows[index],
            Label(int(labels[index])),
        )
        for index in order
    )
    logger.debug(
        "Generated %d frames (%d injected %s) over %.1fs",
        len(frames),
        attack_count,
        cfg.attack_kind.value,
        cfg.duration,
    )
    return frames


#
# Dataset split
#
def _split_sizes(total: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3:
        raise ValidationError(f"Expected (train, val, test) ratios, got {ratios!r}")
    if any(ratio < 0 for ratio in ratios):
        raise ValidationError(f"Split ratios must be non-negative, got {ratios!r}")
    if abs(sum(ratios) - 1) > SPLIT_TOLERANCE:
        raise ValidationError(f"Split ratios must sum to 1, got {ratios!r}")

    train_ratio, val_ratio, _ = ratios
    train_size = min(total, round(total * train_ratio))
    val_size = min(total - train_size, round(total * val_ratio))
    return train_size, val_size, total - train_size - val_size


def split_dataset(
    items: Union[Sequence[T], LabeledArrays],
    ratios: Sequence[float] = DEFAULT_SPLIT,
) -> Tuple[Union[Sequence[T], LabeledArrays], ...]:
    """
    Split windows into contiguous train/validation/test blocks, in
    chronological order. Nothing is shuffled, so temporal patterns inside the
    windows never leak across blocks.
    """
    if isinstance(items, LabeledArrays):
        total = items.size
    else:
        total = len(items)
    train_size, val_size, _ = _split_sizes(total, ratios)
    bounds = ((0, train_size), (train_size, train_size + val_size))
    bounds += ((train_size + val_size, total),)

    if isinstance(items, LabeledArrays):
        return tuple(
            LabeledArrays(items.features[start:stop], items.labels[start:stop])
            for start, stop in bounds
        )
    else:
        return tuple(items[start:stop] for start, stop in bounds)


def validate_log(frames: Sequence[LabeledFrame]) -> None:
    previous = -math.inf
    for frame in frames:
        validate_frame(frame)
        if frame.timestamp < previous:
            raise ValidationError(
                f"Timestamps decrease from {previous!r} to {frame.timestamp!r}"
            )
        previous = frame.timestamp
