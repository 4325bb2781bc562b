from typing import (
    Tuple,
)


class ValidationError(Exception):
    pass


class ConfigError(Exception):
    pass


class EmptyDatasetError(Exception):
    pass


class CalibrationError(Exception):
    pass


class CorruptModelFile(Exception):
    pass


class PipelineShutDown(Exception):
    pass


class SingleClassError(Exception):
    pass


class FrameParseError(Exception):
    """
    Raised when a line of a CAN log cannot be decoded into a frame.
    """

    def __init__(
        self, line_number: int, field: str, line: str, reason: str, *args
    ) -> None:
        if not isinstance(line_number, int):
            raise TypeError(f"Line number must be an int, was: {line_number!r}")
        super().__init__(line_number, field, line, reason, *args)

    def __repr__(self) -> str:
        return (
            f"FrameParseError({self.line_number!r}, {self.field!r}, "
            f"{self.line!r}, {self.reason!r})"
        )

    def __str__(self) -> str:
        return (
            f"Cannot parse field {self.field!r} on line {self.line_number}: "
            f"{self.reason} (line was {self.line!r})"
        )

    @property
    def line_number(self) -> int:
        """
        1-based position of the offending line in its log
        """
        return self.args[0]

    @property
    def field(self) -> str:
        return self.args[1]

    @property
    def line(self) -> str:
        return self.args[2]

    @property
    def reason(self) -> str:
        return self.args[3]


class DimensionMismatch(Exception):
    """
    Raised when a tensor handed to a model does not have the shape the model
    was built for.
    """

    def __init__(self, expected: Tuple[int, ...], actual: Tuple[int, ...], *args):
        super().__init__(tuple(expected), tuple(actual), *args)

    def __str__(self) -> str:
        return f"Expected shape {self.expected}, got {self.actual}"

    @property
    def expected(self) -> Tuple[int, ...]:
        return self.args[0]

    @property
    def actual(self) -> Tuple[int, ...]:
        return self.args[1]


class NonFiniteLossError(Exception):
    """
    Raised when a training batch produces a NaN or infinite loss. Training is
    aborted; the offending epoch and batch are kept for diagnosis.
    """

    def __init__(self, epoch: int, batch_index: int, loss: float, *args) -> None:
        super().__init__(epoch, batch_index, loss, *args)

    def __str__(self) -> str:
        return (
            f"Loss became {self.loss!r} at epoch {self.epoch}, "
            f"batch {self.batch_index}"
        )

    @property
    def epoch(self) -> int:
        return self.args[0]

    @property
    def batch_index(self) -> int:
        return self.args[1]

    @property
    def loss(self) -> float:
        return self.args[2]


class BiasOverflow(Exception):
    """
    Raised when a quantized bias does not fit in a signed 32-bit integer at the
    scale implied by its layer's input and weight fraction bits. This signals a
    calibration failure, not a rounding detail.
    """

    def __init__(self, layer_index: int, max_abs: int, *args) -> None:
        super().__init__(layer_index, max_abs, *args)

    def __str__(self) -> str:
        return (
            f"Bias of layer {self.layer_index} needs {self.max_abs}, "
            "beyond the int32 range"
        )

    @property
    def layer_index(self) -> int:
        return self.args[0]

    @property
    def max_abs(self) -> int:
        return self.args[1]
