from decimal import (
    Decimal,
)
from fractions import (
    Fraction,
)
import math
from typing import (
    Optional,
    Tuple,
)

import numpy as np


def round_half_away(value: Fraction, places: int = 2) -> Decimal:
    """
    Round an exact value to ``places`` decimals, ties away from zero.
    """
    scaled = value * 10**places
    magnitude = math.floor(abs(scaled) + Fraction(1, 2))
    rounded = Decimal(magnitude if scaled >= 0 else -magnitude).scaleb(-places)
    return rounded.quantize(Decimal(1).scaleb(-places))


def quantize_to_grid(
    values: np.ndarray,
    fraction_bits: int,
    bounds: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """
    Integer codes round_half_to_even(values * 2**fraction_bits), optionally
    clamped to ``bounds``. Returned as float64 holding exact integers.
    """
    codes = np.rint(np.asarray(values, dtype=np.float64) * 2.0**fraction_bits)
    if bounds is not None:
        codes = np.clip(codes, *bounds)
    return codes


def shift_round(accumulators: np.ndarray, shift: int) -> np.ndarray:
    """
    round_half_to_even(acc * 2**shift) for integer-valued float64 input.
    Scaling by a power of two is exact, so this is the exact requantization.
    """
    return np.rint(accumulators * 2.0**shift)
