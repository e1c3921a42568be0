"""Run configuration: one JSON document covering every pipeline stage."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .bo import BOConfig
from .embed import NetConfig
from .errors import ConfigError, FabricPhysError
from .materials import Material, material_table
from .scene import SceneConfig

CONFIG_ENV = "FABRICPHYS_CONFIG"


@dataclass(frozen=True)
class DatasetSettings:
    n_combos: int = 30
    frames: int = 60
    cameras: int = 6
    workers: int = 1


@dataclass(frozen=True)
class TrainSettings:
    triplets_per_epoch: int | None = None  # None: one triplet per training sample
    holdout_camera: int | None = None


def _strict(cls, d, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(extra))}")
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


@dataclass(frozen=True)
class RunConfig:
    materials: dict = field(default_factory=dict)  # overrides applied to the built-in table
    scene: SceneConfig = field(default_factory=SceneConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    bo: BOConfig = field(default_factory=BOConfig)
    seed: int = 0

    def __post_init__(self):
        self.material_table()  # validates every range and matrix

    def material_table(self) -> dict[str, Material]:
        return material_table(self.materials)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_seed(self, seed: int) -> "RunConfig":
        """Same config with ``seed`` driving data, network init and BO alike."""
        return replace(self, seed=seed, net=replace(self.net, seed=seed),
                       bo=replace(self.bo, seed=seed))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(_strict(cls, d, "config"))
        try:
            scene = d.pop("scene", None)
            scene = SceneConfig.from_dict(scene) if scene is not None else SceneConfig()
            net = NetConfig(**_strict(NetConfig, d.pop("net", {}), "net"))
            train = TrainSettings(**_strict(TrainSettings, d.pop("train", {}), "train"))
            data = DatasetSettings(**_strict(DatasetSettings, d.pop("dataset", {}), "dataset"))
            bo = d.pop("bo", None)
            bo = BOConfig.from_dict(bo) if bo is not None else BOConfig()
            return cls(scene=scene, net=net, train=train, dataset=data, bo=bo, **d)
        except FabricPhysError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n")


def resolve_config(path=None) -> RunConfig:
    """Explicit path, else ``$FABRICPHYS_CONFIG``, else built-in defaults."""
    path = path or os.environ.get(CONFIG_ENV)
    return RunConfig.load(path) if path else RunConfig()
