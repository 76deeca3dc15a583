"""
Configuration management for calseg
"""

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .datagen import DomainSpec, ShiftSpec, check_class_targets, default_palette
from .errors import ConfigError
from .utils.rng import RngStreams


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    """Synthetic two-domain benchmark"""
    height: int = Field(default=64, ge=16, description="Image height in pixels")
    width: int = Field(default=64, ge=16, description="Image width in pixels")
    num_classes: int = Field(default=5, ge=2, description="Number of semantic classes C")
    class_freq_targets: List[float] = Field(
        default=[0.55, 0.25, 0.12, 0.06, 0.02],
        description="Expected pixel share per class, head first",
    )
    palette_noise: float = Field(default=0.06, ge=0.0, description="Per-shape color jitter σ")
    source_images: int = Field(default=240, ge=2, description="Source pool size (train + val)")
    source_val_fraction: float = Field(
        default=1 / 6, gt=0.0, lt=1.0, description="Share of the source pool held out for selection"
    )
    target_images: int = Field(default=300, ge=2, description="Target pool size (train + test)")
    target_test_fraction: float = Field(
        default=1 / 3, gt=0.0, lt=1.0, description="Share of the target pool held out for evaluation"
    )
    flip_probability: float = Field(default=0.5, ge=0.0, le=1.0, description="Horizontal flip probability")
    shift: ShiftSpec = Field(
        default_factory=lambda: ShiftSpec(hue=0.15, brightness=0.1, noise=0.05),
        description="Covariate shift applied to the target domain",
    )

    @model_validator(mode="after")
    def _check_targets(self) -> "DataConfig":
        check_class_targets(self.class_freq_targets, self.num_classes)
        return self

    def domain_spec(self, domain: Literal["source", "target"], seed: int) -> DomainSpec:
        """DomainSpec for one domain; the two differ only in shift and derived seed."""
        n = self.source_images if domain == "source" else self.target_images
        key = 0 if domain == "source" else 1
        derived = int(RngStreams(seed).seed_sequence("datagen", key).generate_state(1)[0])
        return DomainSpec(
            n_images=n,
            height=self.height,
            width=self.width,
            num_classes=self.num_classes,
            class_freq_targets=list(self.class_freq_targets),
            palette_mean=default_palette(self.num_classes),
            palette_noise=self.palette_noise,
            shift=self.shift if domain == "target" else ShiftSpec(),
            seed=derived,
        )


class CalibConfig(_Section):
    """Calibration measurement and the differentiable ECE term"""
    bins: int = Field(default=10, ge=1, description="Reliability bins M")
    temperature: float = Field(default=1e-5, gt=0.0, description="LogSumExp temperature t")
    alpha: float = Field(default=1.0, ge=0.0, description="Weight α of the differentiable ECE loss")


class ModelConfig(_Section):
    """Network architecture"""
    channels: List[int] = Field(default=[16, 32, 32, 32], description="Conv block widths")
    kernel_size: int = Field(default=3, ge=1, description="Conv kernel size (odd)")
    tap_layer: int = Field(default=3, ge=1, description="1-based block whose output feeds the value net")
    value_channels: List[int] = Field(default=[32, 16], description="Value net conv block widths")

    @model_validator(mode="after")
    def _check_tap(self) -> "ModelConfig":
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.tap_layer > len(self.channels):
            raise ValueError(f"tap_layer {self.tap_layer} exceeds {len(self.channels)} blocks")
        return self


class _OptimConfig(_Section):
    batch_size: int = Field(default=4, ge=2, description="Mini-batch size (BN needs at least 2)")
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0, description="SGD momentum")
    weight_decay: float = Field(default=5e-4, ge=0.0, description="L2 weight decay")
    poly_power: float = Field(default=0.9, gt=0.0, description="Polynomial LR decay power")


class SourceConfig(_OptimConfig):
    """Source pre-training and model selection"""
    epochs: int = Field(default=20, ge=1, description="Source epochs E")
    # 5e-4 assumes a pre-trained backbone; the desk-scale network starts from scratch
    lr: float = Field(default=0.05, gt=0.0, description="Initial learning rate")
    ece_warmup_epochs: int = Field(default=2, ge=0, description="Cross-entropy-only epochs before the ECE term joins")
    ece_loss: bool = Field(default=True, description="Add the differentiable ECE term (ablation switch)")
    criterion: Literal["ece", "source_miou", "target_miou"] = Field(
        default="ece", description="Checkpoint selection rule; target_miou is an oracle upper bound"
    )


class ValueNetConfig(_OptimConfig):
    """Value net regression"""
    epochs: int = Field(default=10, ge=1, description="Maximum value net epochs")
    lr: float = Field(default=0.01, gt=0.0, description="Initial learning rate")
    patience: int = Field(default=4, ge=1, description="Epochs without val improvement before stopping")


class TargetConfig(_OptimConfig):
    """Source-free adaptation"""
    delta: float = Field(default=0.15, gt=0.0, le=1.0, description="Pseudo-label ratio δ")
    epsilon: float = Field(default=0.1, ge=0.0, description="Weight ε of the weighted CE inside SCE")
    eta: float = Field(default=0.005, ge=0.0, description="Weight η of the entropy regulariser")
    rounds: int = Field(default=3, ge=0, description="Self-training rounds R")
    epochs_per_round: int = Field(default=2, ge=0, description="Adaptation epochs after each warm-up epoch")
    lr: float = Field(default=0.005, gt=0.0, description="Initial learning rate")
    warmup_lr: Optional[float] = Field(default=None, ge=0.0, description="Statistic warm-up LR (defaults to lr)")
    entropy_mode: Literal["eval", "train"] = Field(default="eval", description="How per-epoch entropy is measured")
    statistic_warmup: bool = Field(default=True, description="Run a BN statistic warm-up epoch each round")
    ece_guided: bool = Field(default=True, description="Adjust pseudo-label confidence by the predicted ECE")
    symmetric: bool = Field(default=True, description="Symmetric CE (wSCE); false trains on weighted CE alone")

    @model_validator(mode="after")
    def _check_epochs(self) -> "TargetConfig":
        if not self.statistic_warmup and self.rounds > 0 and self.epochs_per_round < 1:
            raise ValueError("epochs_per_round must be at least 1 without the statistic warm-up")
        return self


class LoggingConfig(_Section):
    """Logging configuration"""
    level: Optional[str] = Field(default=None, description="Logging level (falls back to CALSEG_LOG_LEVEL)")
    format: str = Field(
        default="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        description="Log format string",
    )
    file: Optional[str] = Field(default="logs/calseg.log", description="Log file, relative to the run dir")
    max_bytes: int = Field(default=10485760, description="Max log file size")
    backup_count: int = Field(default=3, description="Number of backup files")
    use_rich: bool = Field(default=True, description="Rich console handler")


class SystemConfig(_Section):
    """System configuration"""
    threads: Optional[int] = Field(
        default=None, ge=0, description="Worker threads for per-image work (0 = one per CPU)"
    )


class Settings(BaseSettings):
    """Resolved configuration for one run"""

    model_config = SettingsConfigDict(
        env_prefix="CALSEG_",
        case_sensitive=False,
        extra="forbid",
    )

    # Direct environment variables
    seed: int = Field(default=0, description="Root seed for every random stream")
    run_dir: str = Field(default="runs/default", description="Run directory")
    threads: int = Field(default=1, ge=0, description="Worker threads when [system] leaves it unset")
    log_level: str = Field(default="INFO", description="Logging level when [logging] leaves it unset")

    # Configuration sections (loaded from TOML)
    data: DataConfig = Field(default_factory=DataConfig)
    calib: CalibConfig = Field(default_factory=CalibConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    source: SourceConfig = Field(default_factory=SourceConfig)
    valuenet: ValueNetConfig = Field(default_factory=ValueNetConfig)
    target: TargetConfig = Field(default_factory=TargetConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    system: SystemConfig = Field(default_factory=SystemConfig)

    @field_validator("log_level")
    @classmethod
    def _upper(cls, v: str) -> str:
        return v.upper()

    @property
    def effective_threads(self) -> int:
        return self.system.threads if self.system.threads is not None else self.threads

    @property
    def effective_log_level(self) -> str:
        return (self.logging.level or self.log_level).upper()

    @property
    def run_path(self) -> Path:
        return Path(self.run_dir)

    def streams(self) -> RngStreams:
        return RngStreams(self.seed)

    def to_toml_dict(self) -> Dict[str, Any]:
        return _drop_none(self.model_dump(mode="json"))

    def dump_toml(self, path: Union[str, Path]) -> Path:
        """Write the fully resolved configuration"""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            toml.dump(self.to_toml_dict(), f)
        return path


def _drop_none(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _drop_none(v) for k, v in value.items() if v is not None}
    return value


def load_toml_config(config_path: Union[str, Path]) -> dict:
    """Load configuration from TOML file"""
    config_path = Path(config_path)
    if not config_path.exists():
        return {}

    try:
        return toml.load(config_path)
    except Exception as e:
        raise ConfigError(f"Failed to load TOML config from {config_path}: {e}") from e


def merge_configs(base_config: dict, override_config: dict) -> dict:
    """Merge configuration dictionaries recursively"""
    result = base_config.copy()

    for key, value in override_config.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = merge_configs(result[key], value)
        else:
            result[key] = value

    return result


def parse_overrides(assignments: Sequence[str]) -> dict:
    """
    Turn ["source.epochs=3", "target.entropy_mode=train"] into a nested dict.

    Values are parsed as TOML literals; anything that does not parse is kept as a
    string, so `--set target.entropy_mode=train` needs no quoting.
    """
    result: dict = {}
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not of the form section.key=value")
        try:
            value = toml.loads(f"v = {raw.strip()}")["v"]
        except Exception:
            value = raw.strip()
        node = result
        parts = [p.strip() for p in key.split(".")]
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return result


def build_settings(
    config_file: Optional[Union[str, Path]] = None,
    overrides: Optional[dict] = None,
) -> Settings:
    """
    Resolve settings: defaults < CALSEG_* environment < TOML file < overrides.

    Raises:
        ConfigError: unreadable TOML, unknown keys or invalid values
    """
    if config_file and not Path(config_file).exists():
        raise ConfigError(f"config file not found: {config_file}")
    toml_config = load_toml_config(config_file) if config_file else {}
    merged = merge_configs(toml_config, overrides or {})
    try:
        return Settings(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


_settings_instance: Optional[Settings] = None


def get_settings(config_file: Optional[Union[str, Path]] = None) -> Settings:
    """
    Get settings (singleton pattern)

    Args:
        config_file: Optional path to TOML config file

    Returns:
        Settings instance
    """
    global _settings_instance

    if _settings_instance is not None:
        return _settings_instance

    config_paths = [Path("config/settings.toml")]
    if config_file:
        config_paths.insert(0, Path(config_file))

    chosen = next((p for p in config_paths if p.exists()), None)
    _settings_instance = build_settings(chosen)
    return _settings_instance


def reset_settings() -> None:
    """Reset settings instance (useful for testing)"""
    global _settings_instance
    _settings_instance = None

