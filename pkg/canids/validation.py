import math

from canids.constants import (
    MAX_BASE_CAN_ID,
    MAX_DLC,
)
from canids.exceptions import (
    ValidationError,
)


def validate_is_bytes(value):
    if not isinstance(value, (bytes, bytearray)):
        raise ValidationError(f"Value is not of type `bytes`: got '{type(value)}'")


def validate_length(value, length):
    if len(value) != length:
        raise ValidationError(f"Value is of length {len(value)}.  Must be {length}")


def validate_can_id(can_id):
    if not isinstance(can_id, int) or not 0 <= can_id <= MAX_BASE_CAN_ID:
        raise ValidationError(
            f"CAN ID must be an integer in [0, {MAX_BASE_CAN_ID:#x}], got {can_id!r}"
        )


def validate_dlc(dlc):
    if not isinstance(dlc, int) or not 0 <= dlc <= MAX_DLC:
        raise ValidationError(f"DLC must be an integer in [0, {MAX_DLC}], got {dlc!r}")


def validate_frame(frame):
    validate_can_id(frame.can_id)
    validate_dlc(frame.dlc)
    validate_is_bytes(frame.payload)
    validate_length(frame.payload, frame.dlc)
    if not math.isfinite(frame.timestamp):
        raise ValidationError(f"Timestamp must be finite, got {frame.timestamp!r}")


def validate_positive(value, name):
    if not value > 0:
        raise ValidationError(f"{name} must be positive, got {value!r}")


def validate_fraction(value, name, *, closed_low=False):
    """
    Check that ``value`` lies in (0, 1), or [0, 1) with ``closed_low``.
    """
    lower_ok = value >= 0 if closed_low else value > 0
    if not (lower_ok and value < 1):
        bracket = "[" if closed_low else "("
        raise ValidationError(f"{name} must be in {bracket}0, 1), got {value!r}")


def validate_same_length(left, right, left_name, right_name):
    if len(left) != len(right):
        raise ValidationError(
            f"{left_name} has {len(left)} entries but {right_name} has {len(right)}"
        )


def validate_not_empty(value, name):
    if len(value) == 0:
        raise ValidationError(f"{name} must not be empty")
