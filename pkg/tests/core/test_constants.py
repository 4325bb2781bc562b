import math

from canids.constants import (
    BYTES_PER_MESSAGE,
    DEFAULT_LAYER_UNITS,
    DEFAULT_NORMAL_IDS,
    DEFAULT_SPLIT,
    DEFAULT_WINDOW_DEPTH,
    GEAR_CAN_ID,
    INT8_MAX,
    INT8_MIN,
    INT32_MAX,
    INT32_MIN,
    MAX_BASE_CAN_ID,
    MAX_DLC,
    RPM_CAN_ID,
    ZERO_TENSOR_FRACTION_BITS,
)


def test_window_fills_the_model_input():
    assert BYTES_PER_MESSAGE == 10
    assert DEFAULT_WINDOW_DEPTH * BYTES_PER_MESSAGE == DEFAULT_LAYER_UNITS[0]
    assert DEFAULT_LAYER_UNITS[-1] == 1


def test_default_dense_parameter_count():
    units = DEFAULT_LAYER_UNITS
    count = sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(units, units[1:]))
    assert count == 53761


def test_integer_ranges():
    assert (INT8_MIN, INT8_MAX) == (-(2**7), 2**7 - 1)
    assert (INT32_MIN, INT32_MAX) == (-(2**31), 2**31 - 1)
    # a tensor of zeros gets the finest scale that still holds +-0.99
    assert 0.99 * 2**ZERO_TENSOR_FRACTION_BITS <= INT8_MAX


def test_split_covers_everything():
    assert math.isclose(sum(DEFAULT_SPLIT), 1.0)


def test_normal_traffic_is_base_format():
    ids = [can_id for can_id, _, _ in DEFAULT_NORMAL_IDS]
    assert len(set(ids)) == len(ids)
    assert RPM_CAN_ID in ids and GEAR_CAN_ID in ids
    for can_id, period, dlc in DEFAULT_NORMAL_IDS:
        assert 0 <= can_id <= MAX_BASE_CAN_ID
        assert 0 <= dlc <= MAX_DLC
        assert period > 0
