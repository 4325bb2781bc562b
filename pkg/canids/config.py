"""
The run configuration: one YAML document that drives every CLI stage.

Every field has a default. The fully resolved document is written next to
every artifact, and its digest is embedded in every model and report.
"""
from dataclasses import (
    asdict,
    dataclass,
    field,
    fields,
    replace,
)
import enum
from pathlib import (
    Path,
)
from typing import (
    Any,
    Dict,
    Mapping,
    Optional,
    Union,
)

from hexbytes import (
    HexBytes,
)
import yaml

from canids.canlog import (
    SyntheticConfig,
    default_synthetic_config,
    validate_synthetic_config,
)
from canids.constants import (
    DEFAULT_ATTACK_BURSTS,
    DEFAULT_CALIBRATION_SIZE,
    DEFAULT_QUEUE_DEPTH,
    DEFAULT_THRESHOLD,
)
from canids.exceptions import (
    ConfigError,
    ValidationError,
)
from canids.nn import (
    ModelSpec,
    TrainConfig,
    validate_model_spec,
    validate_train_config,
)
from canids.typing import (
    AttackKind,
    ReplayMode,
)
from canids.utils.provenance import (
    config_digest,
)
from canids.window import (
    WindowConfig,
)

RESOLVED_CONFIG_NAME = "resolved-config.yaml"


@dataclass(frozen=True)
class SyntheticOptions:
    attack: str = AttackKind.DOS.value
    duration: float = 60.0
    attack_rate: Optional[float] = None
    """
    Injected frames per second during a burst; per-attack default when unset
    """

    attack_fraction: Optional[float] = None
    attack_bursts: int = DEFAULT_ATTACK_BURSTS


@dataclass(frozen=True)
class QuantOptions:
    calibration_size: int = DEFAULT_CALIBRATION_SIZE
    qat_epochs: int = 5
    qat_learning_rate: float = 1e-5
    threshold: float = DEFAULT_THRESHOLD


@dataclass(frozen=True)
class ReplayOptions:
    mode: str = ReplayMode.MAX_RATE.value
    queue_depth: int = DEFAULT_QUEUE_DEPTH
    speed: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    synthetic: SyntheticOptions = field(default_factory=SyntheticOptions)
    window: WindowConfig = field(default_factory=WindowConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant: QuantOptions = field(default_factory=QuantOptions)
    replay: ReplayOptions = field(default_factory=ReplayOptions)
    output_dir: str = "canids-out"
    seed: int = 0
    """
    Seeds data generation, initialization, shuffling and calibration sampling
    """

    @property
    def attack_kind(self) -> AttackKind:
        return AttackKind.from_name(self.synthetic.attack)

    @property
    def replay_mode(self) -> ReplayMode:
        return ReplayMode(self.replay.mode)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def qat_config(self) -> TrainConfig:
        return replace(
            self.train,
            seed=self.seed,
            epochs=max(1, self.quant.qat_epochs),
            learning_rate=self.quant.qat_learning_rate,
        )

    def synthetic_config(self, kind: Optional[AttackKind] = None) -> SyntheticConfig:
        synthetic = self.synthetic
        cfg = default_synthetic_config(
            kind or self.attack_kind,
            duration=synthetic.duration,
            seed=self.seed,
            attack_fraction_target=synthetic.attack_fraction,
            attack_rate=synthetic.attack_rate,
        )
        return replace(cfg, attack_bursts=synthetic.attack_bursts)

    def resolve(self) -> Dict[str, Any]:
        """
        Every field, defaulted ones included, as plain YAML-safe values.
        """
        resolved = _plain(asdict(self))
        # the top-level seed is the only seed
        del resolved["train"]["seed"]
        return resolved

    def digest(self) -> HexBytes:
        return config_digest(self.resolve())

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.resolve(), sort_keys=True, default_flow_style=False)

    def override(self, changes: Mapping[str, Any]) -> "RunConfig":
        """
        Apply ``{"seed": 3, "train.epochs": 1, ...}``; ``None`` values are
        ignored, so unset CLI flags can be passed straight through.
        """
        document = self.resolve()
        for dotted, value in changes.items():
            if value is None:
                continue
            *sections, name = dotted.split(".")
            target = document
            for section in sections:
                if not isinstance(target.get(section), dict):
                    raise ConfigError(f"Unknown config section in {dotted!r}")
                target = target[section]
            if name not in target:
                raise ConfigError(f"Unknown config field {dotted!r}")
            target[name] = _plain(value)
        return config_from_mapping(document)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    elif isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    elif isinstance(value, enum.Enum):
        return value.value
    else:
        return value


_SECTIONS = {
    "synthetic": SyntheticOptions,
    "window": WindowConfig,
    "model": ModelSpec,
    "train": TrainConfig,
    "quant": QuantOptions,
    "replay": ReplayOptions,
}
_EXCLUDED = {"train": {"seed"}}


def _coerce(section: str, name: str, value: Any, default: Any) -> Any:
    where = f"{section}.{name}"
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where} must be a list, got {value!r}")
        return tuple(value)
    elif isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
    elif isinstance(default, float) or default is None:
        if value is not None and (
            isinstance(value, bool) or not isinstance(value, (int, float))
        ):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return None if value is None else float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _build_section(section: str, cls: type, mapping: Any) -> Any:
    if mapping is None:
        return cls()
    if not isinstance(mapping, dict):
        raise ConfigError(f"Config section {section!r} must be a mapping")

    defaults = cls()
    allowed = {
        item.name
        for item in fields(cls)
        if item.init and item.name not in _EXCLUDED.get(section, ())
    }
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        listed = ", ".join(map(str, unknown))
        raise ConfigError(f"Unknown keys in {section!r}: {listed}")

    values = {
        name: _coerce(section, name, value, getattr(defaults, name))
        for name, value in mapping.items()
    }
    try:
        return cls(**values)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"Invalid {section!r} section: {exc}") from exc


def validate_run_config(cfg: RunConfig) -> None:
    try:
        validate_model_spec(cfg.model)
        # zero epochs is allowed here: training then only saves the initial model
        validate_train_config(replace(cfg.train, epochs=max(1, cfg.train.epochs)))
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.model.input_width != cfg.window.width:
        raise ConfigError(
            f"The model reads {cfg.model.input_width} inputs but windows are "
            f"{cfg.window.width} wide"
        )
    try:
        kind = cfg.attack_kind
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    validate_synthetic_config(cfg.synthetic_config(kind))
    try:
        cfg.replay_mode
    except ValueError as exc:
        raise ConfigError(f"Unknown replay mode {cfg.replay.mode!r}") from exc
    if cfg.replay.queue_depth < 1 or not cfg.replay.speed > 0:
        raise ConfigError("Replay needs a queue depth >= 1 and a positive speed")
    if cfg.quant.calibration_size < 1 or cfg.quant.qat_epochs < 0:
        raise ConfigError(
            "Quantization needs a calibration size >= 1 and qat_epochs >= 0"
        )
    if cfg.train.epochs < 0:
        raise ConfigError(f"train.epochs must be >= 0, got {cfg.train.epochs}")
    if not 0 <= cfg.quant.threshold <= 1:
        raise ConfigError(f"Threshold must be in [0, 1], got {cfg.quant.threshold}")


def config_from_mapping(document: Optional[Mapping[str, Any]]) -> RunConfig:
    document = dict(document or {})
    top_level = {"output_dir", "seed"}
    unknown = sorted(set(document) - set(_SECTIONS) - top_level)
    if unknown:
        raise ConfigError(f"Unknown config keys: {', '.join(map(str, unknown))}")

    sections = {
        name: _build_section(name, cls, document.get(name))
        for name, cls in _SECTIONS.items()
    }
    seed = document.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    output_dir = document.get("output_dir", "canids-out")
    if not isinstance(output_dir, str):
        raise ConfigError(f"output_dir must be a string, got {output_dir!r}")

    cfg = RunConfig(**sections, output_dir=output_dir, seed=seed)
    validate_run_config(cfg)
    return cfg


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Read a RunConfig from YAML; no path means all defaults.

    :raises ConfigError: on unreadable YAML, unknown keys or invalid values
    """
    if path is None:
        return config_from_mapping({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Config {path} is not valid YAML: {exc}") from exc
    if document is not None and not isinstance(document, dict):
        raise ConfigError(f"Config {path} must hold a mapping at the top level")
    return config_from_mapping(document)


def write_resolved_config(cfg: RunConfig, directory: Union[str, Path]) -> Path:
    target = Path(directory) / RESOLVED_CONFIG_NAME
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_text(cfg.to_yaml())
    return target
