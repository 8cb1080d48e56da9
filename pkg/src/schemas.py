from pathlib import Path
from dataclasses import dataclass
from typing import Any, ClassVar, Literal
import json
import os

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from loguru import logger


@dataclass(eq=False)
class DestinError(Exception):
    """base error; `name` says where it happened, `exit_code` what the CLI returns"""

    name: str
    message: str

    exit_code: ClassVar[int] = 1

    def __str__(self) -> str:
        return f"{self.name}: {self.message}"

    def __reduce__(self):
        return (self.__class__, (self.name, self.message))


class ConfigError(DestinError):
    exit_code = 2


class InputError(DestinError, ValueError):
    """contract violation on an operation's arguments"""

    exit_code = 2


class DataError(DestinError):
    exit_code = 3


class IdxFormatError(DataError):
    pass


class IdxLengthError(DataError):
    pass


class IdxConsistencyError(DataError):
    pass


class SnapshotFormatError(DataError):
    pass


class MissingStageError(DataError):
    pass


class DivergenceError(DestinError):
    exit_code = 4


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NodeConfig(_Section):
    """
    Params:
        K: centroid count
        spatial_dim: length of the external observation
        alpha, beta, gamma: mean / variance / starvation learning rates
        dim_weights: per-dimension weights for winner selection, length spatial_dim + K;
            None means all ones
        mean_update_mode: "convex" (EMA) or "literal" (coefficients summing to alpha)
        variance_update_mode: "literal" (absolute-difference form) or "standard_ema"
        seed_patience: observations without a new distinct seed before jittered seeding
    """

    K: int = Field(ge=2)
    spatial_dim: int = Field(ge=0)
    alpha: float = Field(default=0.99, gt=0.0, lt=1.0)
    beta: float = Field(default=0.99, gt=0.0, lt=1.0)
    gamma: float = Field(default=0.99, gt=0.0, lt=1.0)
    dim_weights: list[float] | None = None
    belief_epsilon: float = Field(default=1e-9, gt=0.0)
    variance_floor: float = Field(default=1e-6, gt=0.0)
    init_variance: float = Field(default=1.0, gt=0.0)
    mean_update_mode: Literal["convex", "literal"] = "convex"
    variance_update_mode: Literal["literal", "standard_ema"] = "literal"
    seed_patience: int = Field(default=10, ge=1)
    seed_jitter: float = Field(default=0.01, ge=0.0)

    @property
    def D(self) -> int:
        return self.spatial_dim + self.K

    @model_validator(mode="after")
    def _check_weights(self):
        if self.dim_weights is not None:
            if len(self.dim_weights) != self.D:
                raise ValueError(
                    f"dim_weights has length {len(self.dim_weights)}, expected {self.D}"
                )
            if any(w < 0 for w in self.dim_weights):
                raise ValueError("dim_weights must be nonnegative")
            if not any(w > 0 for w in self.dim_weights):
                raise ValueError("at least one dim_weight must be positive")
        return self


class NodeDefaults(_Section):
    """node hyperparameters shared by every node of a hierarchy or benchmark"""

    alpha: float = Field(default=0.99, gt=0.0, lt=1.0)
    beta: float = Field(default=0.99, gt=0.0, lt=1.0)
    gamma: float = Field(default=0.99, gt=0.0, lt=1.0)
    belief_epsilon: float = Field(default=1e-9, gt=0.0)
    variance_floor: float = Field(default=1e-6, gt=0.0)
    init_variance: float = Field(default=1.0, gt=0.0)
    mean_update_mode: Literal["convex", "literal"] = "convex"
    variance_update_mode: Literal["literal", "standard_ema"] = "literal"
    seed_patience: int = Field(default=10, ge=1)
    seed_jitter: float = Field(default=0.01, ge=0.0)
    spatial_weight: float = Field(default=1.0, ge=0.0)
    belief_weight: float = Field(default=1.0, ge=0.0)

    def node_config(self, K: int, spatial_dim: int) -> NodeConfig:
        """expand the spatial/belief weight pair into a full dim_weights vector"""
        fields = self.model_dump(exclude={"spatial_weight", "belief_weight"})
        dim_weights = None
        if self.spatial_weight != 1.0 or self.belief_weight != 1.0:
            dim_weights = [self.spatial_weight] * spatial_dim + [self.belief_weight] * K
        return NodeConfig(K=K, spatial_dim=spatial_dim, dim_weights=dim_weights, **fields)


class LayerSpec(_Section):
    grid: tuple[int, int]
    centroids_per_node: int = Field(ge=2)
    fan_in: int = Field(default=4, ge=1)


class HierarchySection(_Section):
    patch: tuple[int, int] = (4, 4)
    layers: list[LayerSpec] = Field(
        min_length=1,
        default_factory=lambda: [
            LayerSpec(grid=(4, 4), centroids_per_node=32, fan_in=16),
            LayerSpec(grid=(2, 2), centroids_per_node=24),
            LayerSpec(grid=(1, 1), centroids_per_node=32),
        ]
    )


class ScanSection(_Section):
    window: tuple[int, int] = (16, 16)
    stride: int = Field(default=1, ge=1)
    sample_interval: int = Field(default=12, ge=1)
    order: Literal["raster", "zigzag"] = "raster"


class MlpSpec(_Section):
    """
    Params:
        layer_sizes: (input, hidden..., output); input may be 0 to mean "infer from data"
        lr_decay: learning rate at epoch e is learning_rate / (1 + lr_decay * e)
    """

    layer_sizes: list[int] = Field(default_factory=lambda: [0, 128, 64, 10])
    learning_rate: float = Field(default=0.01, ge=0.0)
    lr_decay: float = Field(default=0.01, ge=0.0)
    epochs: int = Field(default=30, ge=0)
    batch_size: int = Field(default=32, ge=1)
    seed: int = 0

    @field_validator("layer_sizes")
    @classmethod
    def _check_sizes(cls, v: list[int]) -> list[int]:
        if len(v) < 3:
            raise ValueError("layer_sizes needs input, at least one hidden and an output")
        if any(n < 1 for n in v[1:]):
            raise ValueError("hidden and output sizes must be positive")
        return v


class EnsembleSpec(_Section):
    n_members: int = Field(default=3, ge=1)
    ncl_lambda: float = Field(default=0.5, ge=0.0)
    member: MlpSpec = Field(default_factory=MlpSpec)


class SeqBenchSection(_Section):
    L_values: list[int] = Field(default_factory=lambda: [1, 2, 3, 4, 5, 6, 7, 8])
    K_values: list[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    repetitions: int = Field(default=10, ge=1)
    n_train: int = Field(default=2000, ge=1)
    n_test: int = Field(default=1000, ge=1)
    presentation_prob: float = Field(default=0.5, gt=0.0, lt=1.0)
    train_features: Literal["online", "frozen"] = "online"
    label_shuffle: bool = False
    classifier: MlpSpec = Field(
        default_factory=lambda: MlpSpec(
            layer_sizes=[0, 16, 2], learning_rate=0.1, epochs=30
        )
    )

    @field_validator("L_values", "K_values")
    @classmethod
    def _check_grid(cls, v: list[int]) -> list[int]:
        if not v:
            raise ValueError("grid must not be empty")
        if any(n < 1 for n in v):
            raise ValueError(f"grid values must be positive, got {v}")
        return v


class PipelineSection(_Section):
    n_hierarchy_train: int = Field(default=2000, ge=1)
    n_classifier_train: int = Field(default=5000, ge=0)
    n_test: int = Field(default=1000, ge=0)
    passes: int = Field(default=1, ge=0)
    feature_format: Literal["parquet", "csv"] = "parquet"


class RunConfig(_Section):
    """resolved run document; every section rejects unknown keys"""

    seed: int = 0
    jobs: int | None = None
    node: NodeDefaults = Field(default_factory=NodeDefaults)
    hierarchy: HierarchySection = Field(default_factory=HierarchySection)
    scan: ScanSection = Field(default_factory=ScanSection)
    classifier: EnsembleSpec = Field(default_factory=EnsembleSpec)
    seqbench: SeqBenchSection = Field(default_factory=SeqBenchSection)
    pipeline: PipelineSection = Field(default_factory=PipelineSection)

    settings_dir: ClassVar[Path] = Path(__file__).parent / "settings"
    default_settings_file: ClassVar[Path] = settings_dir / "default_settings.json"
    DATA_DIR_ENV: ClassVar[str] = "DESTIN_DATA_DIR"

    @model_validator(mode="after")
    def _check_window(self):
        if not self.hierarchy.layers:
            raise ValueError("hierarchy.layers must not be empty")
        rows, cols = self.hierarchy.layers[0].grid
        expected = (rows * self.hierarchy.patch[0], cols * self.hierarchy.patch[1])
        if tuple(self.scan.window) != expected:
            raise ValueError(
                f"scan.window {tuple(self.scan.window)} must equal layer-0 grid x patch {expected}"
            )
        return self

    def hashed_dump(self) -> dict[str, Any]:
        """the part of the config that determines outputs"""
        return self.model_dump(mode="json", exclude={"jobs"})

    @classmethod
    def profile_file(cls, profile: str) -> Path:
        return cls.settings_dir / f"{profile}_profile.json"

    @classmethod
    def load(
        cls,
        config_file: Path | None = None,
        profile: str = "desk",
        overrides: dict[str, Any] | None = None,
    ) -> "RunConfig":
        """defaults, then profile, then user file, then flag overrides"""
        doc = _read_json(cls.default_settings_file)
        if profile != "desk":
            profile_path = cls.profile_file(profile)
            if not profile_path.exists():
                raise ConfigError("profile", f"unknown profile '{profile}'")
            doc = deep_merge(doc, _read_json(profile_path))
        if config_file is not None:
            doc = deep_merge(doc, _read_json(Path(config_file)))
        if overrides:
            doc = deep_merge(doc, overrides)
        logger.debug(f"Resolved config document: {doc}")
        return cls.model_validate(doc)

    @classmethod
    def data_dir(cls, flag: str | None) -> Path | None:
        value = flag or os.environ.get(cls.DATA_DIR_ENV)
        return Path(value) if value else None


def _read_json(path: Path) -> dict[str, Any]:
    if not path.exists():
        raise ConfigError("config", f"config file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError("config", f"{path} is not valid JSON ({e})") from e


def deep_merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    """nested dicts merge key by key; anything else in `extra` replaces"""
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def parse_override(item: str) -> dict[str, Any]:
    """`section.key=value` -> nested dict; value parsed as JSON when possible"""
    if "=" not in item:
        raise ConfigError("--set", f"expected section.key=value, got '{item}'")
    dotted, raw = item.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    result: dict[str, Any] = {}
    cursor = result
    keys = dotted.strip().split(".")
    for key in keys[:-1]:
        cursor = cursor.setdefault(key, {})
    cursor[keys[-1]] = value
    return result
