"""Labelled depth corpora: combination sampling, generation, manifests, triplets."""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, FabricPhysError, InvalidInputError, SamplingError
from .materials import STIFFNESS_SCALE_RANGE, WIND_SPEED_RANGE, Material, get_material
from .render import CameraPose, normalize_depth, read_frame, write_frame
from .scene import SceneConfig, render_sequence, sample_cameras, simulate_params

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class Combination:
    id: int
    stiffness_scale: float
    wind_speed: float
    area_weight: float
    material: str

    def params(self) -> tuple[float, float, float]:
        return self.stiffness_scale, self.wind_speed, self.area_weight


@dataclass(frozen=True)
class Sample:
    path: str  # relative to the manifest directory
    combo_id: int
    frame_index: int
    camera_index: int


@dataclass
class Manifest:
    material: str
    combinations: list[Combination]
    samples: list[Sample]
    cameras: list[CameraPose]
    seed: int
    scene: dict
    kind: str = "train"
    failures: list[dict] = field(default_factory=list)
    format_version: int = FORMAT_VERSION
    root: Path | None = None  # directory holding the manifest, not serialised

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.combo_id for s in self.samples], dtype=np.int64)

    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.scene)

    def sample_path(self, index: int) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / self.samples[index].path

    def subset(self, keep) -> "Manifest":
        samples = [s for s in self.samples if keep(s)]
        return Manifest(self.material, self.combinations, samples, self.cameras, self.seed,
                        self.scene, self.kind, self.failures, self.format_version, self.root)

    def to_dict(self) -> dict:
        return {
            "format_version": self.format_version,
            "kind": self.kind,
            "material": self.material,
            "seed": self.seed,
            "scene": self.scene,
            "config_digest": SceneConfig.from_dict(self.scene).digest(),
            "cameras": [c.to_dict() for c in self.cameras],
            "combinations": [asdict(c) for c in self.combinations],
            "failures": self.failures,
            "samples": [[s.path, s.combo_id, s.frame_index, s.camera_index] for s in self.samples],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidInputError(f"cannot read manifest {path}: {exc}") from exc
        if d.get("format_version") != FORMAT_VERSION:
            raise InvalidInputError(f"{path}: unsupported manifest version {d.get('format_version')}")
        return cls(
            material=d["material"],
            combinations=[Combination(**c) for c in d["combinations"]],
            samples=[Sample(p, int(c), int(f), int(k)) for p, c, f, k in d["samples"]],
            cameras=[CameraPose.from_dict(c) for c in d["cameras"]],
            seed=int(d["seed"]),
            scene=d["scene"],
            kind=d.get("kind", "train"),
            failures=d.get("failures", []),
            format_version=d["format_version"],
            root=path.parent,
        )


def _resolve_material(material, table=None) -> Material:
    return material if isinstance(material, Material) else get_material(material, table)


def sample_combinations(material, n: int, rng: np.random.Generator, table=None) -> list[Combination]:
    """``n`` i.i.d. uniform draws over (stiffness scale, wind speed, area weight)."""
    mat = _resolve_material(material, table)
    if n < 2:
        raise ConfigError("need at least 2 combinations")
    lo = np.array([STIFFNESS_SCALE_RANGE[0], WIND_SPEED_RANGE[0], mat.area_weight_range[0]])
    hi = np.array([STIFFNESS_SCALE_RANGE[1], WIND_SPEED_RANGE[1], mat.area_weight_range[1]])
    draws = rng.uniform(lo, hi, size=(n, 3))
    return [Combination(i, float(s), float(w), float(a), mat.name)
            for i, (s, w, a) in enumerate(draws)]


def sample_relpath(material: str, combo_id: int, camera: int, frame: int) -> str:
    return f"{material}/{combo_id}/{camera}/{frame:03d}.d256"


def enumerate_samples(material: str, combo_ids, frames: int, cameras: int) -> list[Sample]:
    """Canonical (combo, frame, camera) ordering of every sample in a corpus."""
    return [Sample(sample_relpath(material, c, k, f), c, f, k)
            for c in combo_ids for f in range(frames) for k in range(cameras)]


def _generate_combo(job):
    combo, mat, cams, scene, root = job
    try:
        snaps = simulate_params(mat, *combo.params(), scene)
        for k, cam in enumerate(cams):
            for frame in render_sequence(snaps, cam, scene.render):
                write_frame(frame, Path(root) / sample_relpath(
                    mat.name, combo.id, k, frame.frame_index))
    except FabricPhysError as exc:
        return combo.id, str(exc)
    return combo.id, None


def generate_dataset(material, root, n_combos: int = 30, frames: int = 60, cameras: int = 6,
                     seed: int = 0, scene: SceneConfig | None = None, workers: int = 1,
                     combinations: list[Combination] | None = None, table=None) -> Manifest:
    """Simulate and render every combination from every camera, then write the manifest.

    The manifest goes to ``<root>/manifest.json`` with frames under
    ``<root>/<material>/<combo>/<camera>/<frame>.d256``. Unstable combinations
    are logged, listed under ``failures`` and left out of ``samples``.
    """
    mat = _resolve_material(material, table)
    scene = (scene or SceneConfig()).with_frames(frames)
    rng = np.random.default_rng(seed)
    combos = combinations if combinations is not None else sample_combinations(mat, n_combos, rng)
    if len(combos) < 2:
        raise ConfigError("need at least 2 combinations")
    cams = sample_cameras(rng, cameras, scene.render)
    root = Path(root)
    jobs = [(c, mat, cams, scene, str(root)) for c in combos]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_generate_combo, jobs))
    else:
        results = [_generate_combo(j) for j in jobs]
    failures = []
    for cid, err in sorted(results, key=lambda r: r[0]):
        if err is not None:
            log.warning("combination %d failed: %s", cid, err)
            failures.append({"combo_id": cid, "error": err})
    failed = {f["combo_id"] for f in failures}
    ok_ids = [c.id for c in combos if c.id not in failed]
    manifest = Manifest(mat.name, list(combos), enumerate_samples(mat.name, ok_ids, frames, cameras),
                        cams, seed, scene.to_dict(), failures=failures, root=root)
    manifest.write(root / MANIFEST_NAME)
    return manifest


def make_target(material, params, root, seed: int = 1000, scene: SceneConfig | None = None,
                camera: CameraPose | None = None, table=None) -> Manifest:
    """Pseudo-real target: one hidden-parameter sequence seen from one held-out camera."""
    mat = _resolve_material(material, table)
    scene = scene or SceneConfig()
    if camera is None:
        camera = sample_cameras(np.random.default_rng(seed), 1, scene.render)[0]
    combo = Combination(0, *map(float, params), mat.name)
    root = Path(root)
    snaps = simulate_params(mat, *combo.params(), scene)
    for frame in render_sequence(snaps, camera, scene.render):
        write_frame(frame, root / sample_relpath(mat.name, 0, 0, frame.frame_index))
    manifest = Manifest(mat.name, [combo], enumerate_samples(mat.name, [0], scene.sim.n_frames, 1),
                        [camera], seed, scene.to_dict(), kind="target", root=root)
    manifest.write(root / MANIFEST_NAME)
    return manifest


def ingest_capture(capture_dir, material, out_root, scene: SceneConfig | None = None,
                   table=None) -> Manifest:
    """Wrap a directory of ``.d256`` frames plus ``meta.json`` as a target manifest.

    ``meta.json`` holds measured ``wind_speed`` (m/s) and ``area_weight`` (kg/m^2);
    optional ``camera`` (pose dict) and ``stiffness_scale``. Frames are taken in
    sorted filename order.
    """
    mat = _resolve_material(material, table)
    capture_dir = Path(capture_dir)
    try:
        meta = json.loads((capture_dir / "meta.json").read_text())
        wind, aw = float(meta["wind_speed"]), float(meta["area_weight"])
    except (OSError, KeyError, ValueError) as exc:
        raise InvalidInputError(f"{capture_dir}: meta.json needs wind_speed and area_weight ({exc})") from exc
    files = sorted(capture_dir.glob("*.d256"))
    if not files:
        raise InvalidInputError(f"{capture_dir}: no .d256 frames")
    scene = (scene or SceneConfig()).with_frames(len(files))
    frames = [read_frame(p) for p in files]
    camera = CameraPose.from_dict(meta["camera"]) if "camera" in meta else (
        frames[0].camera or CameraPose((3.0, 0.5, -0.1)))
    out_root = Path(out_root)
    for k, frame in enumerate(frames):
        frame.frame_index, frame.camera = k, camera
        write_frame(frame, out_root / sample_relpath(mat.name, 0, 0, k))
    combo = Combination(0, float(meta.get("stiffness_scale", 1.0)), wind, aw, mat.name)
    manifest = Manifest(mat.name, [combo], enumerate_samples(mat.name, [0], len(files), 1),
                        [camera], 0, scene.to_dict(), kind="target", root=out_root)
    manifest.write(out_root / MANIFEST_NAME)
    return manifest


@dataclass(frozen=True)
class Triplet:
    anchor: int
    positive: int
    negative: int


class TripletSampler:
    """Random triplets over sample indices grouped by combination label."""

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)
        uniq = np.unique(self.labels)
        if len(uniq) < 2:
            raise SamplingError("triplets need at least two combinations")
        self.groups = {int(u): np.flatnonzero(self.labels == u) for u in uniq}
        lonely = [u for u, g in self.groups.items() if len(g) < 2]
        if lonely:
            raise SamplingError(f"combination {lonely[0]} has a single sample; no positive exists")
        self.others = {u: np.flatnonzero(self.labels != u) for u in self.groups}

    def sample(self, rng: np.random.Generator) -> Triplet:
        a = int(rng.integers(len(self.labels)))
        lab = int(self.labels[a])
        group, others = self.groups[lab], self.others[lab]
        # uniform over the group minus the anchor: draw from len-1 slots, skip the anchor
        slot = int(rng.integers(len(group) - 1))
        where = int(np.searchsorted(group, a))
        p = int(group[slot + (slot >= where)])
        n = int(others[rng.integers(len(others))])
        return Triplet(a, p, n)

    def batch(self, rng, size: int) -> np.ndarray:
        return np.array([[t.anchor, t.positive, t.negative]
                         for t in (self.sample(rng) for _ in range(size))], dtype=np.int64)


def sample_triplet(manifest: Manifest, rng: np.random.Generator) -> Triplet:
    return TripletSampler(manifest.labels).sample(rng)


class ImageStore:
    """Normalised images for a manifest, loaded lazily and memoised."""

    def __init__(self, manifest: Manifest, cache_size: int = 20000):
        self.manifest = manifest
        render = manifest.scene_config().render
        self.near, self.far = render.near, render.far
        self._load = lru_cache(maxsize=cache_size)(self._read)

    def _read(self, index: int) -> np.ndarray:
        frame = read_frame(self.manifest.sample_path(index))
        return normalize_depth(frame, self.near, self.far).astype(np.float32)

    def __getitem__(self, index) -> np.ndarray:
        return self._load(int(index))

    def stack(self, indices) -> np.ndarray:
        return np.stack([self[i] for i in indices])

    def __len__(self):
        return len(self.manifest.samples)

