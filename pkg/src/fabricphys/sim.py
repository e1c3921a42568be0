"""Triangle-mesh cloth dynamics.

Stretching is modelled with edge springs, bending with the discrete hinge
force whose magnitude is ``k_e sin(theta/2) |E| / (h1 + h2)`` distributed
over the four hinge vertices along the dihedral-angle gradient. The
integrator is semi-implicit (symplectic) Euler.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (ConfigError, DegenerateGeometryError, InvalidMeshError,
                     SimulationInstability)
from .materials import STIFFNESS_SCALE_RANGE, Material

_DEGENERATE_AREA = 1e-14
ANGLE_BREAKPOINTS = np.deg2rad([0.0, 45.0, 90.0])


@dataclass(frozen=True)
class MaterialParams:
    bend_matrix: np.ndarray
    stiffness_scale: float = 1.0
    area_weight: float = 0.185
    stretch_stiffness: float = 5000.0  # N/m per edge spring
    damping: float = 0.5  # kg/s, whole-cloth coefficient shared out by mass
    reparam_max: float = 50.0  # 1/m, last column breakpoint of bend_matrix

    def __post_init__(self):
        bm = np.asarray(self.bend_matrix, dtype=float)
        if bm.shape != (3, 5) or np.any(bm < 0) or not np.all(np.isfinite(bm)):
            raise ConfigError("bend_matrix must be a finite non-negative 3x5 matrix")
        object.__setattr__(self, "bend_matrix", bm)
        lo, hi = STIFFNESS_SCALE_RANGE
        if not lo <= self.stiffness_scale <= hi:
            raise ConfigError(f"stiffness_scale {self.stiffness_scale} outside [{lo}, {hi}]")
        if self.area_weight <= 0:
            raise ConfigError("area_weight must be positive")
        if self.stretch_stiffness < 0 or self.damping < 0 or self.reparam_max <= 0:
            raise ConfigError("stretch_stiffness/damping must be >= 0 and reparam_max > 0")

    @classmethod
    def for_material(cls, material: Material, stiffness_scale: float, area_weight: float,
                     **kwargs) -> "MaterialParams":
        lo, hi = material.area_weight_range
        if not lo - 1e-12 <= area_weight <= hi + 1e-12:
            raise ConfigError(
                f"area weight {area_weight} outside {material.name} range [{lo}, {hi}]")
        return cls(material.bend_array(), stiffness_scale, area_weight, **kwargs)

    def effective_bend_matrix(self) -> np.ndarray:
        return self.stiffness_scale * self.bend_matrix


@dataclass(frozen=True)
class WindSpec:
    speed: float
    direction: tuple = (-1.0, 0.0, 0.0)
    air_density: float = 1.225
    quadratic: bool = False  # use 0.5*rho*A*v^2 instead of the linear form

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=float)
        if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ConfigError("wind direction must be a unit 3-vector")
        if self.speed < 0:
            raise ConfigError("wind speed must be non-negative")
        if self.air_density <= 0:
            raise ConfigError("air density must be positive")

    @property
    def unit(self) -> np.ndarray:
        return np.asarray(self.direction, dtype=float)


@dataclass(frozen=True)
class SimConfig:
    dt: float | None = None  # None: largest stable substep dividing the frame interval
    duration: float = 3.0
    sample_rate: float = 20.0
    gravity: tuple = (0.0, 0.0, -9.81)
    seed: int = 0
    perturbation: float = 0.0  # m, seeded initial position noise on free vertices
    grid_n: int = 16
    size: float = 1.0

    def __post_init__(self):
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.duration <= 0 or self.sample_rate <= 0:
            raise ConfigError("duration and sample_rate must be positive")
        frames = self.duration * self.sample_rate
        if abs(frames - round(frames)) > 1e-9 or round(frames) < 1:
            raise ConfigError(f"duration*sample_rate must be a positive integer, got {frames}")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.sample_rate))

    @property
    def frame_interval(self) -> float:
        return 1.0 / self.sample_rate

    def with_frames(self, frames: int) -> "SimConfig":
        return replace(self, duration=frames / self.sample_rate)


@dataclass
class TriMesh:
    positions: np.ndarray
    velocities: np.ndarray
    masses: np.ndarray
    faces: np.ndarray
    hinges: np.ndarray  # (H, 4): edge a, edge b, opposite in face 1, opposite in face 2
    hinge_faces: np.ndarray  # (H, 2)
    hinge_rest_length: np.ndarray
    hinge_rest_angle: np.ndarray
    edges: np.ndarray  # (E, 2) unique undirected edges, used as stretch springs
    edge_rest_length: np.ndarray
    pinned: frozenset = field(default_factory=frozenset)

    @property
    def n_vertices(self) -> int:
        return len(self.positions)

    @property
    def pinned_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        if self.pinned:
            mask[sorted(self.pinned)] = True
        return mask

    def with_state(self, positions, velocities) -> "TriMesh":
        return replace(self, positions=positions, velocities=velocities)

    def total_area(self) -> float:
        return float(face_areas(self.positions, self.faces).sum())

    def boundary_edges(self) -> np.ndarray:
        interior = {tuple(sorted(h[:2])) for h in self.hinges.tolist()}
        return np.array([e for e in self.edges.tolist() if tuple(e) not in interior])


def face_normals(positions, faces) -> np.ndarray:
    """Unnormalised normals (length = twice the face area)."""
    p0, p1, p2 = (positions[faces[:, k]] for k in range(3))
    return np.cross(p1 - p0, p2 - p0)


def face_areas(positions, faces) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(positions, faces), axis=1)


def mesh_from_faces(positions, faces, area_weight: float, pinned=()) -> TriMesh:
    """Build topology (hinges, springs, lumped masses) for an oriented triangle mesh."""
    positions = np.asarray(positions, dtype=float)
    faces = np.asarray(faces, dtype=np.int64)
    if positions.ndim != 2 or positions.shape[1] != 3 or len(positions) == 0:
        raise InvalidMeshError("positions must be a non-empty (N, 3) array")
    if faces.ndim != 2 or faces.shape[1] != 3 or len(faces) == 0:
        raise InvalidMeshError("faces must be a non-empty (F, 3) array")
    if faces.min() < 0 or faces.max() >= len(positions):
        raise InvalidMeshError("face index out of range")
    areas = face_areas(positions, faces)
    if np.any(areas <= _DEGENERATE_AREA):
        raise InvalidMeshError("mesh contains zero-area faces")
    if area_weight <= 0:
        raise InvalidMeshError("area_weight must be positive")

    # directed edge (u, v) -> (face, opposite vertex)
    directed: dict[tuple[int, int], tuple[int, int]] = {}
    for f, (i, j, k) in enumerate(faces.tolist()):
        for u, v, w in ((i, j, k), (j, k, i), (k, i, j)):
            if (u, v) in directed:
                raise InvalidMeshError(f"edge ({u}, {v}) used twice with the same orientation")
            directed[(u, v)] = (f, w)

    edges, hinges, hinge_faces = [], [], []
    for (u, v), (f1, c) in sorted(directed.items()):
        twin = directed.get((v, u))
        if twin is None:
            edges.append((min(u, v), max(u, v)))
        elif u < v:
            edges.append((u, v))
            f2, d = twin
            hinges.append((u, v, c, d))
            hinge_faces.append((f1, f2))
    edges = np.array(sorted(set(edges)), dtype=np.int64)
    hinges = np.array(hinges, dtype=np.int64).reshape(-1, 4)
    hinge_faces = np.array(hinge_faces, dtype=np.int64).reshape(-1, 2)

    masses = np.zeros(len(positions))
    np.add.at(masses, faces.ravel(), np.repeat(areas * area_weight / 3.0, 3))
    if np.any(masses <= 0):
        raise InvalidMeshError("every vertex must belong to a face")

    edge_rest = np.linalg.norm(positions[edges[:, 1]] - positions[edges[:, 0]], axis=1)
    mesh = TriMesh(
        positions=positions.copy(),
        velocities=np.zeros_like(positions),
        masses=masses,
        faces=faces,
        hinges=hinges,
        hinge_faces=hinge_faces,
        hinge_rest_length=np.linalg.norm(
            positions[hinges[:, 1]] - positions[hinges[:, 0]], axis=1),
        hinge_rest_angle=np.zeros(len(hinges)),
        edges=edges,
        edge_rest_length=edge_rest,
        pinned=frozenset(int(i) for i in pinned),
    )
    if len(hinges):
        mesh.hinge_rest_angle = hinge_geometry(positions, hinges)["theta"]
    return mesh


def build_grid_mesh(n: int, size: float = 1.0, area_weight: float = 0.185,
                    pinned_edge: str | None = "top") -> TriMesh:
    """Square cloth in the x=0 plane, y in [0, size], z in [-size, 0].

    Faces are wound so every normal points along +x. ``pinned_edge`` is one
    of "top", "bottom", "left", "right" or None.
    """
    if n < 2:
        raise InvalidMeshError(f"grid needs n >= 2 subdivisions, got {n}")
    if size <= 0:
        raise InvalidMeshError("size must be positive")
    ii, jj = np.meshgrid(np.arange(n + 1), np.arange(n + 1))  # ii along y, jj down z
    positions = np.stack([np.zeros(ii.size), size * ii.ravel() / n, -size * jj.ravel() / n],
                         axis=1)

    def vid(i, j):
        return j * (n + 1) + i

    faces = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = vid(i, j), vid(i + 1, j), vid(i, j + 1), vid(i + 1, j + 1)
            faces.append((a, c, b))
            faces.append((b, c, d))
    edge_sel = {
        "top": jj.ravel() == 0,
        "bottom": jj.ravel() == n,
        "left": ii.ravel() == 0,
        "right": ii.ravel() == n,
        None: np.zeros(ii.size, dtype=bool),
    }
    if pinned_edge not in edge_sel:
        raise InvalidMeshError(f"unknown pinned_edge {pinned_edge!r}")
    pinned = np.flatnonzero(edge_sel[pinned_edge])
    return mesh_from_faces(positions, faces, area_weight, pinned)


def hinge_geometry(positions, hinges) -> dict[str, np.ndarray]:
    """Vectorised hinge quantities: theta, heights, edge length and dtheta/dx."""
    xa, xb, xc, xd = (positions[hinges[:, k]] for k in range(4))
    e = xb - xa
    elen = np.linalg.norm(e, axis=1)
    n1 = np.cross(e, xc - xa)
    n2 = np.cross(xa - xb, xd - xb)
    n1sq = np.einsum("ij,ij->i", n1, n1)
    n2sq = np.einsum("ij,ij->i", n2, n2)
    bad = (n1sq <= (2 * _DEGENERATE_AREA) ** 2) | (n2sq <= (2 * _DEGENERATE_AREA) ** 2) | (elen <= 0)
    if np.any(bad):
        raise DegenerateGeometryError(
            f"degenerate face adjacent to hinge {int(np.flatnonzero(bad)[0])}")
    n1len, n2len = np.sqrt(n1sq), np.sqrt(n2sq)
    ehat = e / elen[:, None]
    m1, m2 = n1 / n1len[:, None], n2 / n2len[:, None]
    theta = np.arctan2(np.einsum("ij,ij->i", np.cross(m1, m2), ehat),
                       np.einsum("ij,ij->i", m1, m2))
    g1 = n1 / n1sq[:, None]
    g2 = n2 / n2sq[:, None]
    # gradient of theta w.r.t. (a, b, c, d); sums to zero and carries zero torque
    grad_c = -elen[:, None] * g1
    grad_d = -elen[:, None] * g2
    grad_a = -(np.einsum("ij,ij->i", xc - xb, ehat)[:, None] * g1
               + np.einsum("ij,ij->i", xd - xb, ehat)[:, None] * g2)
    grad_b = (np.einsum("ij,ij->i", xc - xa, ehat)[:, None] * g1
              + np.einsum("ij,ij->i", xd - xa, ehat)[:, None] * g2)
    return {
        "theta": theta,
        "h1": n1len / elen,
        "h2": n2len / elen,
        "edge_length": elen,
        "grad": np.stack([grad_a, grad_b, grad_c, grad_d], axis=1),
    }


def dihedral_angle(mesh: TriMesh, hinge: int) -> float:
    """Signed angle between the two face normals about the shared edge, in (-pi, pi]."""
    theta = hinge_geometry(mesh.positions, mesh.hinges[hinge:hinge + 1])["theta"][0]
    return math.pi if theta == -math.pi else float(theta)


def bending_stiffness_lookup(material: MaterialParams, theta, reparam):
    """Bilinear lookup of the scaled 3x5 bend matrix.

    Rows are bend angles {0, 45, 90} degrees (|theta| clamped to [0, 90]);
    columns are 5 uniform reparametrisation breakpoints over
    [0, material.reparam_max], clamped at both ends. Accepts scalars or arrays.
    """
    theta = np.abs(np.asarray(theta, dtype=float))
    reparam = np.asarray(reparam, dtype=float)
    row = np.clip(theta, 0.0, ANGLE_BREAKPOINTS[-1]) / ANGLE_BREAKPOINTS[1]
    col = np.clip(reparam, 0.0, material.reparam_max) / material.reparam_max * 4.0
    r0 = np.minimum(np.floor(row).astype(int), 1)
    c0 = np.minimum(np.floor(col).astype(int), 3)
    tr, tc = row - r0, col - c0
    m = material.effective_bend_matrix()
    k = ((1 - tr) * (1 - tc) * m[r0, c0] + (1 - tr) * tc * m[r0, c0 + 1]
         + tr * (1 - tc) * m[r0 + 1, c0] + tr * tc * m[r0 + 1, c0 + 1])
    return float(k) if k.ndim == 0 else k


def bending_terms(positions, mesh: TriMesh, material: MaterialParams) -> dict[str, np.ndarray]:
    """Per-hinge stiffness, force coefficient and the (H, 4, 3) stencil forces."""
    geo = hinge_geometry(positions, mesh.hinges)
    theta, h1, h2, elen = geo["theta"], geo["h1"], geo["h2"], geo["edge_length"]
    reparam = np.abs(np.sin(theta / 2)) / (h1 + h2)
    k_e = bending_stiffness_lookup(material, theta, reparam)
    k_e = np.broadcast_to(k_e, theta.shape)
    coef = k_e * (np.sin(theta / 2) - np.sin(mesh.hinge_rest_angle / 2)) * elen / (h1 + h2)
    forces = -coef[:, None, None] * geo["grad"]
    return dict(geo, k_e=k_e, coefficient=coef, forces=forces)


def bending_force(mesh: TriMesh, hinge: int, material: MaterialParams) -> np.ndarray:
    """Forces (4, 3) on vertices (edge a, edge b, opposite c, opposite d) of one hinge."""
    sub = replace(mesh, hinges=mesh.hinges[hinge:hinge + 1],
                  hinge_rest_angle=mesh.hinge_rest_angle[hinge:hinge + 1])
    return bending_terms(mesh.positions, sub, material)["forces"][0]


def wind_force_total(area: float, wind: WindSpec) -> float:
    """0.5 * A * rho * v (or v**2 when ``wind.quadratic``)."""
    if area <= 0:
        raise ConfigError("area must be positive")
    v = wind.speed ** 2 if wind.quadratic else wind.speed
    return 0.5 * area * wind.air_density * v


def _face_wind(positions, faces, wind: WindSpec) -> np.ndarray:
    n = face_normals(positions, faces)
    twice_area = np.linalg.norm(n, axis=1)
    d = wind.unit
    v = wind.speed ** 2 if wind.quadratic else wind.speed
    # 0.5 * rho * area * v * |n_hat . d| == 0.25 * rho * v * |n . d|
    mag = 0.25 * wind.air_density * v * np.abs(n @ d)
    mag = np.where(twice_area > 0, mag, 0.0)
    return mag[:, None] * d[None, :]


def face_wind_force(face_positions, wind: WindSpec) -> np.ndarray:
    """Total wind force on one triangle given its (3, 3) vertex positions.

    Each vertex receives a third of the returned vector.
    """
    p = np.asarray(face_positions, dtype=float)
    return _face_wind(p, np.array([[0, 1, 2]]), wind)[0]


def _scatter(n, index, values) -> np.ndarray:
    out = np.empty((n, 3))
    for k in range(3):
        out[:, k] = np.bincount(index, weights=values[:, k], minlength=n)
    return out


def stretch_forces(positions, mesh: TriMesh, material: MaterialParams) -> np.ndarray:
    a, b = mesh.edges[:, 0], mesh.edges[:, 1]
    d = positions[b] - positions[a]
    length = np.linalg.norm(d, axis=1)
    f = (material.stretch_stiffness * (length - mesh.edge_rest_length) / length)[:, None] * d
    return _scatter(mesh.n_vertices, np.concatenate([a, b]), np.concatenate([f, -f]))


def bend_forces(positions, mesh: TriMesh, material: MaterialParams) -> np.ndarray:
    if len(mesh.hinges) == 0:
        return np.zeros_like(positions)
    f = bending_terms(positions, mesh, material)["forces"]
    return _scatter(mesh.n_vertices, mesh.hinges.T.ravel(), f.transpose(1, 0, 2).reshape(-1, 3))


def internal_forces(positions, mesh: TriMesh, material: MaterialParams) -> np.ndarray:
    return stretch_forces(positions, mesh, material) + bend_forces(positions, mesh, material)


def wind_forces(positions, mesh: TriMesh, wind: WindSpec) -> np.ndarray:
    fw = _face_wind(positions, mesh.faces, wind) / 3.0
    return _scatter(mesh.n_vertices, mesh.faces.T.ravel(), np.tile(fw, (3, 1)))


def total_forces(positions, velocities, mesh: TriMesh, material: MaterialParams,
                 wind: WindSpec, gravity) -> np.ndarray:
    f = internal_forces(positions, mesh, material)
    f += mesh.masses[:, None] * np.asarray(gravity, dtype=float)[None, :]
    if wind.speed:
        f += wind_forces(positions, mesh, wind)
    if material.damping:
        share = mesh.masses / mesh.masses.sum()
        f -= (material.damping * share)[:, None] * velocities
    return f


def stable_dt(mesh: TriMesh, material: MaterialParams) -> float:
    """Conservative explicit step bound 1/omega_max from spring stiffness per vertex."""
    if material.stretch_stiffness == 0 or len(mesh.edges) == 0:
        return math.inf
    ksum = np.bincount(mesh.edges.ravel(), minlength=mesh.n_vertices) * material.stretch_stiffness
    omega_sq = 2.0 * ksum / mesh.masses
    return 1.0 / math.sqrt(omega_sq.max())


def substep_plan(mesh: TriMesh, material: MaterialParams, config: SimConfig) -> tuple[float, int]:
    """(dt, substeps per output frame)."""
    frame_dt = config.frame_interval
    dt_max = config.dt if config.dt is not None else stable_dt(mesh, material)
    substeps = max(1, int(math.ceil(frame_dt / dt_max - 1e-9)))
    return frame_dt / substeps, substeps


class _Stepper:
    def __init__(self, mesh, material, wind, config, dt):
        self.mesh, self.material, self.wind, self.dt = mesh, material, wind, dt
        self.gravity = np.asarray(config.gravity, dtype=float)
        self.inv_mass = 1.0 / mesh.masses
        self.free = ~mesh.pinned_mask

    def __call__(self, x, v, step_index=None):
        try:
            f = total_forces(x, v, self.mesh, self.material, self.wind, self.gravity)
        except DegenerateGeometryError as exc:
            raise SimulationInstability(self.dt, step_index, str(exc)) from exc
        v = v + self.dt * f * self.inv_mass[:, None]
        v[~self.free] = 0.0
        x = x + self.dt * v
        return x, v


def _check_finite(x, v, dt, step_index):
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise SimulationInstability(dt, step_index, "non-finite state")


def step(mesh: TriMesh, material: MaterialParams, wind: WindSpec, config: SimConfig) -> TriMesh:
    """Advance one substep of length ``config.dt`` (or the automatic stable dt)."""
    dt = config.dt if config.dt is not None else substep_plan(mesh, material, config)[0]
    x, v = _Stepper(mesh, material, wind, config, dt)(mesh.positions, mesh.velocities)
    _check_finite(x, v, dt, None)
    return mesh.with_state(x, v)


def simulate(mesh: TriMesh, material: MaterialParams, wind: WindSpec,
             config: SimConfig) -> list[TriMesh]:
    """Run for ``config.duration`` seconds and return one snapshot per output frame.

    Snapshots are taken after each frame interval, so frame k is the state at
    time (k + 1) / sample_rate. The substep loop runs in a compiled kernel that
    reproduces ``total_forces`` + ``step``.
    """
    from . import _kernels

    dt, substeps = substep_plan(mesh, material, config)
    x = np.ascontiguousarray(mesh.positions, dtype=float).copy()
    v = np.ascontiguousarray(mesh.velocities, dtype=float).copy()
    if config.perturbation > 0:
        rng = np.random.default_rng(config.seed)
        noise = config.perturbation * rng.standard_normal(x.shape)
        noise[mesh.pinned_mask] = 0.0
        x += noise
    v_eff = wind.speed ** 2 if wind.quadratic else wind.speed
    args = (
        np.ascontiguousarray(mesh.masses, dtype=float),
        ~mesh.pinned_mask,
        material.damping * mesh.masses / mesh.masses.sum(),
        np.ascontiguousarray(mesh.edges, dtype=np.int64),
        np.ascontiguousarray(mesh.edge_rest_length, dtype=float),
        float(material.stretch_stiffness),
        np.ascontiguousarray(mesh.hinges, dtype=np.int64),
        np.sin(mesh.hinge_rest_angle / 2),
        np.ascontiguousarray(material.effective_bend_matrix()),
        float(material.reparam_max),
        np.ascontiguousarray(mesh.faces, dtype=np.int64),
        wind.unit,
        0.25 * wind.air_density * v_eff,
        np.asarray(config.gravity, dtype=float),
        float(dt),
    )
    frames = []
    for k in range(config.n_frames):
        status = _kernels.integrate(x, v, *args, substeps)
        if status == _kernels.DEGENERATE:
            raise SimulationInstability(dt, (k + 1) * substeps, "hinge face collapsed")
        if status == _kernels.NONFINITE or np.abs(x).max() > 1e3:
            raise SimulationInstability(dt, (k + 1) * substeps, "non-finite or runaway state")
        frames.append(mesh.with_state(x.copy(), v.copy()))
    return frames


def kinetic_energy(mesh: TriMesh) -> float:
    return 0.5 * float(np.sum(mesh.masses * np.einsum("ij,ij->i", mesh.velocities, mesh.velocities)))


def stretch_energy(mesh: TriMesh, material: MaterialParams) -> float:
    d = mesh.positions[mesh.edges[:, 1]] - mesh.positions[mesh.edges[:, 0]]
    ext = np.linalg.norm(d, axis=1) - mesh.edge_rest_length
    return 0.5 * material.stretch_stiffness * float(np.sum(ext ** 2))


def write_mesh_text(mesh: TriMesh, path) -> None:
    """``verts N faces M`` header, N ``x y z`` lines, M ``i j k`` lines (0-based)."""
    lines = [f"verts {mesh.n_vertices} faces {len(mesh.faces)}"]
    lines += [f"{x!r} {y!r} {z!r}" for x, y, z in mesh.positions.tolist()]
    lines += [f"{i} {j} {k}" for i, j, k in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_mesh_text(path) -> tuple[np.ndarray, np.ndarray]:
    rows = Path(path).read_text().split("\n")
    head = rows[0].split()
    if len(head) != 4 or head[0] != "verts" or head[2] != "faces":
        raise InvalidMeshError(f"{path}: bad mesh header {rows[0]!r}")
    nv, nf = int(head[1]), int(head[3])
    verts = np.array([[float(t) for t in r.split()] for r in rows[1:1 + nv]]).reshape(nv, 3)
    faces = np.array([[int(t) for t in r.split()] for r in rows[1 + nv:1 + nv + nf]],
                     dtype=np.int64).reshape(nf, 3)
    return verts, faces
