from importlib.metadata import (
    version as __version,
)

from .engine import (
    DetectionPipeline,
    DetectorPair,
)
from .nn import (
    MlpModel,
)
from .quant import (
    QuantModel,
)

__version__ = __version("canids")
