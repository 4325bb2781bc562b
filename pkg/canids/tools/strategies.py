from hypothesis import (
    strategies as st,
)
from hypothesis.extra.numpy import (
    arrays,
)
import numpy as np

from canids.constants import (
    MAX_BASE_CAN_ID,
    MAX_DLC,
)
from canids.quant import (
    LayerScales,
    QuantLayer,
    TensorQuant,
)
from canids.typing import (
    Label,
    LabeledFrame,
)


@st.composite
def labeled_frames(draw, timestamp_us=None):
    """
    A valid base-format frame. Timestamps are whole microseconds so they
    survive the 6-decimal log format exactly.
    """
    if timestamp_us is None:
        timestamp_us = draw(st.integers(min_value=0, max_value=10**12))
    dlc = draw(st.integers(min_value=0, max_value=MAX_DLC))
    return LabeledFrame(
        timestamp_us / 10**6,
        draw(st.integers(min_value=0, max_value=MAX_BASE_CAN_ID)),
        dlc,
        draw(st.binary(min_size=dlc, max_size=dlc)),
        draw(st.sampled_from(Label)),
    )


@st.composite
def frame_logs(draw, min_size=0, max_size=64):
    """
    A time-ordered log; equal timestamps are allowed.
    """
    start = draw(st.integers(min_value=0, max_value=10**9))
    gaps = draw(
        st.lists(
            st.integers(min_value=0, max_value=10**5),
            min_size=min_size,
            max_size=max_size,
        )
    )
    frames = []
    timestamp_us = start
    for gap in gaps:
        timestamp_us += gap
        frames.append(draw(labeled_frames(timestamp_us)))
    return tuple(frames)


@st.composite
def quant_layers(draw, max_fan_in=12, max_fan_out=12):
    """
    A hidden integer layer with arbitrary int8 weights, a modest int32 bias
    and unrelated fraction bits, plus a batch of int8 inputs for it.
    """
    fan_in = draw(st.integers(min_value=1, max_value=max_fan_in))
    fan_out = draw(st.integers(min_value=1, max_value=max_fan_out))
    weight = draw(
        arrays(np.int8, (fan_out, fan_in), elements=st.integers(-128, 127))
    )
    bias = draw(
        arrays(np.int32, (fan_out,), elements=st.integers(-(2**20), 2**20))
    )
    scales = LayerScales(
        TensorQuant(draw(st.integers(min_value=0, max_value=7))),
        TensorQuant(draw(st.integers(min_value=0, max_value=9))),
        TensorQuant(draw(st.integers(min_value=-2, max_value=9))),
    )
    batch = draw(st.integers(min_value=1, max_value=4))
    inputs = draw(arrays(np.int8, (batch, fan_in), elements=st.integers(-128, 127)))
    return QuantLayer(weight, bias, scales), inputs


def score_label_lists(min_size=1, max_size=200):
    """
    Parallel (scores, labels) lists, scores drawn from a coarse grid so ties
    are common.
    """
    pairs = st.lists(
        st.tuples(
            st.integers(min_value=0, max_value=20).map(lambda step: step / 20),
            st.integers(min_value=0, max_value=1),
        ),
        min_size=min_size,
        max_size=max_size,
    )
    return pairs.map(lambda items: tuple(map(list, zip(*items))))
