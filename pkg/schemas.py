import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

import numpy as np
import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import (
    DEFAULT_LISTEN,
    ENHANCER_CHANNELS,
    EPOCHS_CONSTANT,
    EPOCHS_DECAY,
    EVAL_ARMS,
    GRID_PHI,
    GRID_THETA,
    LR_ENHANCER_PRETRAIN,
    LR_LABELED,
    LR_PRETRAIN,
    LR_UNLABELED,
    MATERIAL_CHANNELS,
    MATERIAL_EXTENT,
    REGION_COUNT,
    RENDER_EXTENT,
    RENDER_VIEWS,
    SEG_CHANNELS,
    ROUND_TIMEOUT_S,
    SHAPE_HIDDEN,
    SSM_MODES,
)
from errors import ConfigError

# =============================================================================
# Imaging Geometry
# =============================================================================


class Geometry(BaseModel):
    """Acquisition geometry; hashable so operators can be cached per geometry."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    mode: Literal["parallel2d", "conebeam3d"]
    n_views: int = Field(ge=1)
    volume_shape: Tuple[int, int, int] = Field(description="D x H x W voxels; parallel2d uses D=1.")
    spacing: float = Field(default=1.0, gt=0, description="Isotropic voxel spacing in mm.")
    detector_shape: Tuple[int, int] = Field(description="rows x cols; parallel2d uses one row.")
    pixel_pitch: float = Field(gt=0, description="Detector pixel pitch in mm.")
    source_to_iso: float = Field(default=0.0, ge=0)
    source_to_detector: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check_geometry(self):
        if min(self.volume_shape) < 1 or min(self.detector_shape) < 1:
            raise ValueError("volume and detector extents must be positive")
        if self.mode == "parallel2d":
            if self.volume_shape[0] != 1 or self.detector_shape[0] != 1:
                raise ValueError("parallel2d needs a single slice and a single detector row")
        else:
            if not self.source_to_detector > self.source_to_iso > self.half_diagonal:
                raise ValueError(
                    "conebeam3d needs source_to_detector > source_to_iso > half the volume diagonal")
        return self

    @property
    def half_diagonal(self) -> float:
        d, h, w = self.volume_shape
        return 0.5 * self.spacing * math.sqrt(d * d + h * h + w * w)

    @property
    def angles(self) -> np.ndarray:
        span = math.pi if self.mode == "parallel2d" else 2.0 * math.pi
        return span * np.arange(self.n_views) / self.n_views

    @property
    def sinogram_shape(self) -> Tuple[int, int, int]:
        return (self.n_views,) + tuple(self.detector_shape)


# =============================================================================
# Phantom Families and Datasets
# =============================================================================


class PhantomFamily(BaseModel):
    """Procedural 'hospital': shape statistics plus an attenuation profile."""
    model_config = ConfigDict(extra="forbid")

    name: str
    n_regions: int = Field(ge=1)
    semi_axes: List[Tuple[float, float, float]] = Field(
        description="Per-region ellipsoid semi-axes as fractions of the volume half-width.")
    axis_sigma: float = Field(default=0.04, ge=0)
    center_sigma: float = Field(default=0.03, ge=0)
    bump_sigma: float = Field(default=0.05, ge=0)
    mu_mean: List[float]
    mu_sigma: float = Field(default=0.001, ge=0)
    mu_offset: float = 0.0
    background_mu: float = Field(default=0.004, ge=0)
    noise_photons: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check_regions(self):
        if len(self.semi_axes) != self.n_regions or len(self.mu_mean) != self.n_regions:
            raise ValueError("semi_axes and mu_mean need one entry per region")
        if any(a <= 0 for axes in self.semi_axes for a in axes):
            raise ValueError("semi-axes must be positive")
        return self


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sample_id: str
    volume_path: str
    label_path: Optional[str] = None
    split: Literal["train", "val", "test", "unassigned"] = "unassigned"
    labeled: bool = True

    @model_validator(mode="after")
    def _eval_splits_are_labeled(self):
        if self.split in ("val", "test") and not (self.labeled and self.label_path):
            raise ValueError(f"{self.sample_id}: validation and test samples must be labeled")
        if self.labeled and not self.label_path:
            raise ValueError(f"{self.sample_id}: labeled sample without a label path")
        return self


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    family: str
    seed: int
    resolution: int
    entries: List[ManifestEntry] = []
    root: Optional[str] = None

    @field_validator("entries")
    @classmethod
    def _unique_ids(cls, entries):
        ids = [e.sample_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids must be unique")
        return entries

    def by_split(self, split: str) -> List[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def resolve(self, relative: str) -> Path:
        return Path(self.root or ".") / relative


class SiteConfig(BaseModel):
    """One federated site: private data and a local enhancer."""
    model_config = ConfigDict(extra="forbid")

    site_id: str
    data: str = Field(description="Path to the site's dataset manifest.")
    enhancer_checkpoint: Optional[str] = None
    seed: int = 0
    phase: Literal["pretrain", "semi_supervised"] = "pretrain"


# =============================================================================
# Run Configuration
# =============================================================================


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class RenderSection(_Section):
    resolution: int = Field(default=RENDER_EXTENT, ge=4)
    views: int = Field(default=RENDER_VIEWS, ge=2)
    material: int = Field(default=MATERIAL_EXTENT, ge=1)
    window: Literal["ramlak", "hann"] = "ramlak"
    noise_photons: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _material_divides_render(self):
        if self.resolution % self.material:
            raise ValueError("material resolution must divide the render resolution")
        return self


class SsmSection(_Section):
    modes: int = Field(default=SSM_MODES, ge=1)
    regions: int = Field(default=REGION_COUNT, ge=1)
    grid_theta: int = Field(default=GRID_THETA, ge=2)
    grid_phi: int = Field(default=GRID_PHI, ge=3)


class TrainSection(_Section):
    seed: int = 0
    epochs_pretrain: int = Field(default=200, ge=0)
    epochs_enhancer: int = Field(default=20, ge=0)
    epochs_constant: int = Field(default=EPOCHS_CONSTANT, ge=0)
    epochs_decay: int = Field(default=EPOCHS_DECAY, ge=0)
    lr_pretrain: float = Field(default=LR_PRETRAIN, ge=0)
    lr_enhancer: float = Field(default=LR_ENHANCER_PRETRAIN, ge=0)
    lr_labeled: Tuple[float, float] = LR_LABELED
    lr_unlabeled: Tuple[float, float] = LR_UNLABELED
    label_size: int = Field(default=4, ge=0)
    soft_voxelize: bool = True
    freeze_enhancer: bool = False
    project_latents: bool = False


class NetworkSection(_Section):
    shape_hidden: Tuple[int, int] = SHAPE_HIDDEN
    material_channels: Tuple[int, int] = MATERIAL_CHANNELS
    enhancer_channels: int = Field(default=ENHANCER_CHANNELS, ge=2)


class FederatedSection(_Section):
    rounds: int = Field(default=100, ge=0)
    transport: Literal["inproc", "tcp"] = "inproc"
    listen: str = DEFAULT_LISTEN
    timeout: float = Field(default=ROUND_TIMEOUT_S, gt=0)
    server_optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(default=LR_PRETRAIN, ge=0)


class EvalSection(_Section):
    epochs: int = Field(default=50, ge=0)
    finetune_epochs: int = Field(default=50, ge=0)
    lr: float = Field(default=1e-3, gt=0)
    n_synthetic: int = Field(default=20, ge=0)
    seeds: List[int] = [0, 1, 2]
    threshold: float = Field(default=0.5, gt=0, lt=1)
    arms: List[str] = list(EVAL_ARMS)
    seg_channels: int = Field(default=SEG_CHANNELS, ge=1)

    @field_validator("arms")
    @classmethod
    def _known_arms(cls, arms):
        unknown = [a for a in arms if a not in EVAL_ARMS]
        if unknown:
            raise ValueError(f"unknown arms {unknown}; expected a subset of {list(EVAL_ARMS)}")
        return arms


class PathsSection(_Section):
    data: str = "data"
    ssm: str = "ssm.fsct"
    out: str = "runs/latest"
    sites: List[str] = []
    pre_checkpoint: Optional[str] = None
    full_checkpoint: Optional[str] = None


class RunConfig(_Section):
    """Declarative configuration shared by every CLI workflow."""
    seed: int = 0
    threads: int = Field(default=0, ge=0)
    render: RenderSection = RenderSection()
    ssm: SsmSection = SsmSection()
    train: TrainSection = TrainSection()
    networks: NetworkSection = NetworkSection()
    federated: FederatedSection = FederatedSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    @classmethod
    def from_toml(cls, text: str) -> "RunConfig":
        try:
            raw = toml.loads(text)
        except toml.TomlDecodeError as exc:
            raise ConfigError(f"Invalid TOML: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            return cls.model_validate(raw)
        except ValidationError as exc:
            first = exc.errors()[0]
            key_path = ".".join(str(part) for part in first["loc"])
            raise ConfigError(first["msg"], key_path=key_path) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        return cls.from_toml(path.read_text(encoding="utf-8"))

    def to_toml(self) -> str:
        """Canonical text: sections in declaration order, None values omitted."""
        return toml.dumps(self.model_dump(mode="json", exclude_none=True))
