"""Run configuration: dataclasses plus the published JSON schema."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_res: int = 64
    latent_res: int = 16
    triplane_res: int = 16
    feature_dim: int = 7  # channel 0 is the density logit
    latent_dim: int = 32  # encoder width d
    heads: int = 2
    mlp_ratio: int = 2
    blocks: tuple[str, ...] = ("self", "cross", "self", "cross")
    samples_per_ray: int = 32
    radius: float = 2.2
    window: int = 4
    shift: int = 2
    unet_channels: tuple[int, int, int] = (32, 48, 64)
    time_dim: int = 32
    timesteps: int = 100

    def __post_init__(self):
        if self.latent_res % self.window:
            raise ConfigError(f"window {self.window} does not divide latent resolution {self.latent_res}")
        if not 0 <= self.shift < self.window:
            raise ConfigError("shift must lie in [0, window)")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim must leave at least one latent channel after the density channel")

    @property
    def latent_channels(self) -> int:
        return self.feature_dim - 1

    @property
    def near(self) -> float:
        return self.radius - 1.0

    @property
    def far(self) -> float:
        return self.radius + 1.0


PAPER_SCALE = ModelConfig(
    image_res=256, latent_res=32, triplane_res=32, feature_dim=33, latent_dim=192, heads=4, samples_per_ray=64
)


@dataclass(frozen=True)
class Ablations:
    no_recon_loss: bool = False
    no_view_conditioning: bool = False
    trainable_unet: bool = False


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 1
    steps: int = 2000
    batch: int = 2
    lr: float = 1e-3
    lr_schedule: str = "cosine"
    lambda_lift: float = 1.0
    freeze_base: bool = True
    train_lifting: bool = True
    ablations: Ablations = field(default_factory=Ablations)
    seed: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.lambda_lift < 0:
            raise ConfigError("lambda_lift must be >= 0")
        if self.steps <= 0:
            raise ConfigError("steps must be > 0")

    def effective(self) -> "TrainConfig":
        """Fold ablation switches into the fields they override."""
        cfg = self
        if cfg.ablations.no_recon_loss:
            cfg = replace(cfg, lambda_lift=0.0)
        if cfg.ablations.trainable_unet:
            cfg = replace(cfg, freeze_base=False)
        return cfg


@dataclass(frozen=True)
class DataConfig:
    scenes: int = 8
    views: int = 12
    resolution: int = 64
    seed: int = 0
    elevations_deg: tuple[float, ...] | None = None


@dataclass(frozen=True)
class EvalConfig:
    view_counts: tuple[int, ...] = (2, 4, 6)
    elevations_deg: tuple[float, ...] = (0.0, 15.0, 30.0)
    scenes: int = 20
    views: int = 24
    seed: int = 1


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))

    def hash(self) -> str:
        """Digest of the data+model sections; training knobs may change on resume."""
        d = self.to_dict()
        payload = json.dumps({"data": d["data"], "model": d["model"]}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def schema(name: str = "run_config") -> dict:
    text = resources.files("mvcond.schemas").joinpath(f"{name}.schema.json").read_text()
    return json.loads(text)


def _build(cls, values: dict):
    kwargs = {}
    names = {f.name for f in fields(cls)}
    for key, value in values.items():
        if key not in names:
            raise ConfigError(f"unknown key '{key}' for {cls.__name__}")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def parse_run_config(doc: dict) -> RunConfig:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config does not match schema: {exc.message}") from exc
    train = dict(doc.get("train", {}))
    abl = _build(Ablations, train.pop("ablations", {}))
    try:
        return RunConfig(
            data=_build(DataConfig, doc.get("data", {})),
            model=_build(ModelConfig, doc.get("model", {})),
            train=_build(TrainConfig, {**train, "ablations": abl}),
            eval=_build(EvalConfig, doc.get("eval", {})),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return parse_run_config(doc)
