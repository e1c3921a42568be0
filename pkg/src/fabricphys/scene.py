"""The forward model shared by corpus generation and estimation:
parameters -> simulated cloth -> depth frames per camera."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .materials import Material
from .render import CameraPose, RenderConfig, aim_camera, normalize_depth, render_mesh, sample_camera_pose
from .sim import MaterialParams, SimConfig, WindSpec, build_grid_mesh, simulate


@dataclass(frozen=True)
class SceneConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    render: RenderConfig = field(default_factory=RenderConfig)
    stretch_stiffness: float = 5000.0
    damping: float = 0.5
    reparam_max: float = 50.0
    wind_direction: tuple = (-1.0, 0.0, 0.0)
    air_density: float = 1.225
    quadratic_wind: bool = False
    pinned_edge: str = "top"

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        sim = SimConfig(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in d.pop("sim", {}).items()})
        render = RenderConfig(**{k: tuple(v) if isinstance(v, list) else v
                                 for k, v in d.pop("render", {}).items()})
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(sim=sim, render=render, **d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def with_frames(self, frames: int) -> "SceneConfig":
        return replace(self, sim=self.sim.with_frames(frames))


def material_params(material: Material, stiffness_scale, area_weight,
                    scene: SceneConfig) -> MaterialParams:
    return MaterialParams.for_material(
        material, float(stiffness_scale), float(area_weight),
        stretch_stiffness=scene.stretch_stiffness, damping=scene.damping,
        reparam_max=scene.reparam_max)


def wind_spec(speed, scene: SceneConfig) -> WindSpec:
    return WindSpec(float(speed), tuple(scene.wind_direction), scene.air_density,
                    scene.quadratic_wind)


def simulate_params(material: Material, stiffness_scale, wind_speed, area_weight,
                    scene: SceneConfig):
    mesh = build_grid_mesh(scene.sim.grid_n, scene.sim.size, float(area_weight),
                           scene.pinned_edge)
    return simulate(mesh, material_params(material, stiffness_scale, area_weight, scene),
                    wind_spec(wind_speed, scene), scene.sim)


def sample_cameras(rng: np.random.Generator, count: int, render: RenderConfig) -> list[CameraPose]:
    poses = [sample_camera_pose(rng, render.fov) for _ in range(count)]
    if render.aim:
        poses = [aim_camera(p, render.target) for p in poses]
    return poses


def render_sequence(snapshots, camera: CameraPose, render: RenderConfig):
    return [render_mesh(m, camera, render.resolution, k) for k, m in enumerate(snapshots)]


def normalized_sequence(frames, render: RenderConfig) -> np.ndarray:
    """Stack of normalised depth images, shape (T, H, W), float32."""
    return np.stack([normalize_depth(f, render.near, render.far) for f in frames]).astype(np.float32)
