"""Pinhole depth rendering of cloth snapshots.

Camera convention follows Blender: XYZ Euler angles in degrees, the camera
looks down its local -Z axis with local +Y up. Depth is the Euclidean
distance from the camera centre along each pixel's view ray; pixels that
hit nothing hold 0.0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

IMAGE_SIZE = 256
CAMERA_X_RANGE = (1.0, 6.0)
CAMERA_Z_RANGE = (-0.5, 0.3)
CAMERA_Y = 0.5
CAMERA_ROT_Z_RANGE = (-260.0, 280.0)


@dataclass(frozen=True)
class CameraPose:
    position: tuple
    rotation: tuple = (90.0, 0.0, 90.0)  # XYZ Euler, degrees
    fov: float = 60.0  # vertical, degrees

    def rotation_matrix(self) -> np.ndarray:
        """Camera-to-world rotation R = Rz @ Ry @ Rx."""
        ax, ay, az = np.deg2rad(self.rotation)
        cx, sx, cy, sy, cz, sz = (math.cos(ax), math.sin(ax), math.cos(ay), math.sin(ay),
                                  math.cos(az), math.sin(az))
        rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
        ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
        rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
        return rz @ ry @ rx

    def to_dict(self) -> dict:
        return {"position": list(map(float, self.position)),
                "rotation": list(map(float, self.rotation)), "fov": float(self.fov)}

    @classmethod
    def from_dict(cls, d) -> "CameraPose":
        return cls(tuple(map(float, d["position"])), tuple(map(float, d["rotation"])),
                   float(d.get("fov", 60.0)))


@dataclass
class DepthFrame:
    depth: np.ndarray  # (H, W) metres, 0.0 = background
    camera: CameraPose
    frame_index: int = 0

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass(frozen=True)
class RenderConfig:
    resolution: int = IMAGE_SIZE
    fov: float = 60.0
    near: float = 0.2  # normalisation bounds, metres
    far: float = 8.0
    aim: bool = True  # turn sampled cameras to face the cloth centre
    target: tuple = field(default=(0.0, 0.5, -0.5))


def sample_camera_pose(rng: np.random.Generator, fov: float = 60.0) -> CameraPose:
    """Uniform pose over the data-collection ranges (x, z translation and z rotation)."""
    x = rng.uniform(*CAMERA_X_RANGE)
    z = rng.uniform(*CAMERA_Z_RANGE)
    rz = rng.uniform(*CAMERA_ROT_Z_RANGE)
    return CameraPose((x, CAMERA_Y, z), (90.0, 0.0, rz), fov)


def aim_camera(pose: CameraPose, target) -> CameraPose:
    """Keep position and level (x=90, y=0) rotation, choose z rotation to face ``target``."""
    d = np.asarray(target, dtype=float) - np.asarray(pose.position, dtype=float)
    # with x=90 the view direction is (-sin rz, cos rz, 0)
    rz = math.degrees(math.atan2(-d[0], d[1]))
    return CameraPose(pose.position, (90.0, 0.0, rz), pose.fov)


def _intrinsics(resolution, fov):
    f = 0.5 * resolution / math.tan(math.radians(fov) / 2)
    c = 0.5 * resolution
    return f, c


def pixel_rays(camera: CameraPose, resolution: int) -> np.ndarray:
    """World-space unit ray directions for every pixel centre, shape (H, W, 3)."""
    f, c = _intrinsics(resolution, camera.fov)
    cols, rows = np.meshgrid(np.arange(resolution) + 0.5, np.arange(resolution) + 0.5)
    local = np.stack([(cols - c) / f, -(rows - c) / f, -np.ones_like(cols)], axis=-1)
    world = local @ camera.rotation_matrix().T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def render_depth(positions, faces, camera: CameraPose, resolution: int = IMAGE_SIZE,
                 frame_index: int = 0) -> DepthFrame:
    """Z-buffer rasterisation with perspective-correct depth.

    ``positions``/``faces`` may be empty arrays for an empty scene; ``None``
    positions raise.
    """
    if positions is None or faces is None:
        raise InvalidInputError("mesh is empty")
    positions = np.asarray(positions, dtype=float).reshape(-1, 3)
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    depth = np.full((resolution, resolution), np.inf)
    f, c = _intrinsics(resolution, camera.fov)
    if len(faces):
        cam = (positions - np.asarray(camera.position, dtype=float)) @ camera.rotation_matrix()
        zview = -cam[:, 2]  # positive in front of the camera
        safe = np.where(zview > 1e-9, zview, np.nan)
        u = c + f * cam[:, 0] / safe
        v = c - f * cam[:, 1] / safe
        for tri in faces:
            zt = zview[tri]
            if np.any(zt <= 1e-9):
                continue  # behind or straddling the camera plane
            ut, vt = u[tri], v[tri]
            area = (ut[1] - ut[0]) * (vt[2] - vt[0]) - (ut[2] - ut[0]) * (vt[1] - vt[0])
            if abs(area) < 1e-12:
                continue
            c0 = max(int(math.floor(ut.min() - 0.5)), 0)
            c1 = min(int(math.ceil(ut.max() - 0.5)), resolution - 1)
            r0 = max(int(math.floor(vt.min() - 0.5)), 0)
            r1 = min(int(math.ceil(vt.max() - 0.5)), resolution - 1)
            if c0 > c1 or r0 > r1:
                continue
            px, py = np.meshgrid(np.arange(c0, c1 + 1) + 0.5, np.arange(r0, r1 + 1) + 0.5)
            w0 = ((ut[1] - px) * (vt[2] - py) - (ut[2] - px) * (vt[1] - py)) / area
            w1 = ((ut[2] - px) * (vt[0] - py) - (ut[0] - px) * (vt[2] - py)) / area
            w2 = 1.0 - w0 - w1
            inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
            if not inside.any():
                continue
            inv_z = w0 / zt[0] + w1 / zt[1] + w2 / zt[2]
            z = 1.0 / inv_z
            ray_len = np.sqrt(1.0 + ((px - c) / f) ** 2 + ((py - c) / f) ** 2)
            dist = np.where(inside, z * ray_len, np.inf)
            block = depth[r0:r1 + 1, c0:c1 + 1]
            np.minimum(block, dist, out=block)
    depth[~np.isfinite(depth)] = 0.0
    return DepthFrame(depth, camera, frame_index)


def render_mesh(mesh, camera: CameraPose, resolution: int = IMAGE_SIZE,
                frame_index: int = 0) -> DepthFrame:
    if mesh is None or mesh.n_vertices == 0 or len(mesh.faces) == 0:
        raise InvalidInputError("mesh is empty")
    lo, hi = mesh.positions.min(axis=0), mesh.positions.max(axis=0)
    if np.all((np.asarray(camera.position) > lo) & (np.asarray(camera.position) < hi)):
        raise InvalidInputError("camera lies inside the mesh bounding box")
    return render_depth(mesh.positions, mesh.faces, camera, resolution, frame_index)


def normalize_depth(frame, near: float = 0.2, far: float = 8.0) -> np.ndarray:
    """Map foreground depth affinely onto (0, 1] (near -> 0+, far -> 1); background stays 0."""
    depth = frame.depth if isinstance(frame, DepthFrame) else np.asarray(frame, dtype=float)
    fg = depth > 0
    out = np.zeros_like(depth, dtype=float)
    out[fg] = np.clip((depth[fg] - near) / (far - near), np.finfo(np.float32).tiny, 1.0)
    return out


def write_frame(frame: DepthFrame, path) -> None:
    """Raw little-endian float32, row-major, plus ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(frame.depth, dtype="<f4").tobytes())
    meta = {"camera": frame.camera.to_dict(), "frame_index": int(frame.frame_index),
            "width": frame.width, "height": frame.height}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def read_frame(path) -> DepthFrame:
    path = Path(path)
    sidecar = path.with_suffix(path.suffix + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
        h, w = meta.get("height", IMAGE_SIZE), meta.get("width", IMAGE_SIZE)
        camera = CameraPose.from_dict(meta["camera"]) if "camera" in meta else None
        index = int(meta.get("frame_index", 0))
    else:
        h = w = IMAGE_SIZE
        camera, index = None, 0
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != h * w:
        raise InvalidInputError(f"{path}: expected {h * w} floats, found {data.size}")
    depth = data.reshape(h, w).astype(float)
    if not np.all(np.isfinite(depth)) or np.any(depth < 0):
        raise InvalidInputError(f"{path}: depth values must be finite and non-negative")
    return DepthFrame(depth, camera, index)

