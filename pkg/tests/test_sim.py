import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fabricphys.errors import InvalidMeshError, SimulationInstability
from fabricphys.materials import get_material
from fabricphys.sim import (MaterialParams, SimConfig, WindSpec, bend_forces, bending_force,
                            bending_stiffness_lookup, bending_terms, build_grid_mesh,
                            dihedral_angle, face_wind_force, internal_forces, kinetic_energy,
                            mesh_from_faces, read_mesh_text, simulate, step, stretch_energy,
                            substep_plan, wind_force_total, wind_forces, write_mesh_text)

GRAY = get_material("gray_interlock")


def material(scale=1.0, aw=0.2, **kw):
    return MaterialParams.for_material(GRAY, scale, aw, **kw)


def varied_material(scale=1.0):
    m = np.arange(1, 16, dtype=float).reshape(3, 5) * 1e-5
    return MaterialParams(m, scale, 0.2)


def two_triangles(fold_deg=0.0):
    """Flat-at-rest pair sharing edge (0,0,0)-(0,1,0), then folded about the y axis."""
    phi = math.radians(fold_deg)
    flat = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.5, 0.0], [-1.0, 0.5, 0.0]])
    mesh = mesh_from_faces(flat, [[0, 1, 2], [1, 0, 3]], 0.1)
    mesh.positions = flat.copy()
    mesh.positions[3] = [-math.cos(phi), 0.5, math.sin(phi)]
    return mesh


def explicit_normal_angle(pos, hinge):
    """Independent oracle: unsigned angle between face normals via arccos."""
    a, b, c, d = (pos[i] for i in hinge)
    n1 = np.cross(b - a, c - a)
    n2 = np.cross(a - b, d - b)
    cosang = np.dot(n1, n2) / (np.linalg.norm(n1) * np.linalg.norm(n2))
    ang = math.acos(max(-1.0, min(1.0, cosang)))
    sign = np.sign(np.dot(np.cross(n1, n2), b - a))
    return ang if sign >= 0 else -ang, n1, n2


# ---------------------------------------------------------------- mesh

def test_grid_n2_counts_and_mass():
    mesh = build_grid_mesh(2, 1.0, 0.1)
    assert mesh.n_vertices == 9
    assert len(mesh.faces) == 8
    assert mesh.masses.sum() == pytest.approx(0.1, rel=1e-12)


def test_grid_n10_hinges_match_bruteforce_adjacency():
    mesh = build_grid_mesh(10, 1.0, 0.2)
    assert mesh.n_vertices == 121 and len(mesh.faces) == 200
    counts = Counter()
    for f in mesh.faces.tolist():
        for i in range(3):
            counts[tuple(sorted((f[i], f[(i + 1) % 3])))] += 1
    assert set(counts.values()) <= {1, 2}
    interior = sum(1 for c in counts.values() if c == 2)
    boundary = sum(1 for c in counts.values() if c == 1)
    assert len(mesh.hinges) == interior
    assert len(mesh.boundary_edges()) == boundary == 40
    assert len(mesh.edges) == len(counts)


def test_grid_rejects_n1():
    with pytest.raises(InvalidMeshError):
        build_grid_mesh(1)


@pytest.mark.parametrize("n,aw", [(2, 0.1), (5, 0.37), (16, 0.15)])
def test_mass_invariants(n, aw):
    mesh = build_grid_mesh(n, 1.3, aw)
    assert np.all(mesh.masses > 0)
    assert mesh.masses.sum() == pytest.approx(aw * mesh.total_area(), rel=1e-9)
    assert mesh.total_area() == pytest.approx(1.69, rel=1e-12)


def test_top_edge_is_pinned():
    mesh = build_grid_mesh(4)
    top = {i for i, p in enumerate(mesh.positions) if p[2] == 0.0}
    assert mesh.pinned == top and len(top) == 5


def test_mesh_text_roundtrip(tmp_path):
    mesh = build_grid_mesh(3)
    mesh.positions[4] += [0.1234567890123, -1e-9, 3.0]
    write_mesh_text(mesh, tmp_path / "m.txt")
    assert (tmp_path / "m.txt").read_text().splitlines()[0] == "verts 16 faces 18"
    verts, faces = read_mesh_text(tmp_path / "m.txt")
    np.testing.assert_array_equal(verts, mesh.positions)
    np.testing.assert_array_equal(faces, mesh.faces)


# ---------------------------------------------------------------- dihedral angle

def test_flat_grid_dihedral_zero():
    mesh = build_grid_mesh(4)
    assert all(dihedral_angle(mesh, h) == 0.0 for h in range(len(mesh.hinges)))


def test_ninety_degree_fold():
    mesh = two_triangles(0.0)
    mesh.positions[3] = [0.0, 0.5, 1.0]
    assert abs(dihedral_angle(mesh, 0)) == pytest.approx(math.pi / 2, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-170, 170), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
def test_dihedral_matches_explicit_normals(fold, jx, jz):
    mesh = two_triangles(fold)
    mesh.positions[2] += [jx, 0.0, jz]
    expected, _, _ = explicit_normal_angle(mesh.positions, mesh.hinges[0])
    assert dihedral_angle(mesh, 0) == pytest.approx(expected, abs=1e-7)


def test_dihedral_gradient_matches_finite_differences():
    mesh = build_grid_mesh(3)
    rng = np.random.default_rng(3)
    pos = mesh.positions + 0.08 * rng.standard_normal(mesh.positions.shape)
    grad = bending_terms(pos, mesh, material())["grad"]
    from fabricphys.sim import hinge_geometry
    eps = 1e-6
    for h in range(len(mesh.hinges)):
        for s in range(4):
            for k in range(3):
                p = pos.copy()
                p[mesh.hinges[h, s], k] += eps
                up = hinge_geometry(p, mesh.hinges)["theta"][h]
                p[mesh.hinges[h, s], k] -= 2 * eps
                dn = hinge_geometry(p, mesh.hinges)["theta"][h]
                assert grad[h, s, k] == pytest.approx((up - dn) / (2 * eps), abs=1e-7)


# ---------------------------------------------------------------- stiffness lookup

def test_lookup_breakpoint():
    mat = varied_material(2.0)
    assert bending_stiffness_lookup(mat, 0.0, 0.0) == pytest.approx(2.0 * mat.bend_matrix[0, 0])


def test_lookup_bilinear_midpoint():
    mat = varied_material(1.5)
    col_mid = mat.reparam_max / 8  # halfway between columns 0 and 1
    got = bending_stiffness_lookup(mat, math.radians(22.5), col_mid)
    expected = 1.5 * mat.bend_matrix[:2, :2].mean()
    assert got == pytest.approx(expected, rel=1e-12)


def test_lookup_clamps_angle_and_reparam():
    mat = varied_material()
    for r in (0.0, 7.0, 33.0):
        assert bending_stiffness_lookup(mat, math.radians(120), r) == \
            bending_stiffness_lookup(mat, math.radians(90), r)
    assert bending_stiffness_lookup(mat, 0.3, 500.0) == bending_stiffness_lookup(mat, 0.3, 50.0)
    assert bending_stiffness_lookup(mat, 0.3, -1.0) == bending_stiffness_lookup(mat, 0.3, 0.0)


# ---------------------------------------------------------------- bending force

def test_flat_bending_force_zero():
    mesh = build_grid_mesh(4)
    for h in range(len(mesh.hinges)):
        assert np.all(bending_force(mesh, h, material()) == 0.0)


@settings(max_examples=60, deadline=None)
@given(st.floats(-160, 160), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(0.1, 10))
def test_bending_force_zero_net_force_and_torque(fold, jx, jz, scale):
    mesh = two_triangles(fold)
    mesh.positions[2] += [jx, 0.1 * jx, jz]
    f = bending_force(mesh, 0, varied_material(scale))
    pos = mesh.positions[mesh.hinges[0]]
    fmax = np.abs(f).max()
    assert np.allclose(f.sum(axis=0), 0.0, atol=1e-8 * max(fmax, 1e-30))
    mid = 0.5 * (mesh.positions[0] + mesh.positions[1])
    torque = np.cross(pos - mid, f).sum(axis=0)
    assert np.allclose(torque, 0.0, atol=1e-8 * max(fmax, 1e-30))


def _hinge_force_scalar(pos, hinge, mat):
    theta, n1, n2 = explicit_normal_angle(pos, hinge)
    a, b = pos[hinge[0]], pos[hinge[1]]
    elen = np.linalg.norm(b - a)
    h1, h2 = np.linalg.norm(n1) / elen, np.linalg.norm(n2) / elen
    k_e = bending_stiffness_lookup(mat, theta, abs(math.sin(theta / 2)) / (h1 + h2))
    return k_e * math.sin(theta / 2) / (h1 + h2) * elen


def test_bending_magnitude_matches_hinge_formula():
    rng = np.random.default_rng(11)
    mat = varied_material(3.0)
    mesh = build_grid_mesh(4)
    pos = mesh.positions + 0.05 * rng.standard_normal(mesh.positions.shape)
    terms = bending_terms(pos, mesh, mat)
    for h, hinge in enumerate(mesh.hinges):
        scalar = _hinge_force_scalar(pos, hinge, mat)
        for s in range(4):
            # |F_i| = scalar * |dtheta/dx_i|
            expected = abs(scalar) * np.linalg.norm(terms["grad"][h, s])
            assert np.linalg.norm(terms["forces"][h, s]) == pytest.approx(expected, rel=1e-10)


def test_bending_force_reduces_fold():
    mesh = two_triangles(30.0)
    mat = varied_material(5.0)
    before = abs(dihedral_angle(mesh, 0))
    f = bending_force(mesh, 0, mat)
    mesh.positions = mesh.positions + 1e-2 * f / np.abs(f).max()
    assert abs(dihedral_angle(mesh, 0)) < before


def test_bending_force_linear_in_stiffness_scale():
    rng = np.random.default_rng(5)
    mesh = build_grid_mesh(4)
    pos = mesh.positions + 0.05 * rng.standard_normal(mesh.positions.shape)
    f1 = bending_terms(pos, mesh, varied_material(1.0))["forces"]
    f2 = bending_terms(pos, mesh, varied_material(2.0))["forces"]
    np.testing.assert_array_equal(f2, 2.0 * f1)


def test_internal_forces_sum_to_zero():
    rng = np.random.default_rng(9)
    mesh = build_grid_mesh(6)
    mat = material(7.0)
    pos = mesh.positions + 0.03 * rng.standard_normal(mesh.positions.shape)
    f = internal_forces(pos, mesh, mat)
    assert np.abs(f.sum(axis=0)).max() <= 1e-8 * np.abs(f).max()
    fb = bend_forces(pos, mesh, mat)
    assert np.abs(fb.sum(axis=0)).max() <= 1e-8 * np.abs(fb).max()


# ---------------------------------------------------------------- wind

def test_wind_total_formula():
    assert wind_force_total(1.0, WindSpec(2.0)) == pytest.approx(1.225, rel=1e-15)
    assert wind_force_total(1.0, WindSpec(0.0)) == 0.0
    assert wind_force_total(2.0, WindSpec(3.0)) == pytest.approx(2 * wind_force_total(1.0, WindSpec(3.0)))


def test_wind_quadratic_flag():
    assert wind_force_total(1.0, WindSpec(2.0, quadratic=True)) == pytest.approx(0.5 * 1.225 * 4)


def test_face_wind_edge_on_and_facing():
    tri = np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])  # normal along x
    np.testing.assert_array_equal(face_wind_force(tri, WindSpec(3.0, (0.0, 1.0, 0.0))), 0.0)
    f = face_wind_force(tri, WindSpec(3.0, (-1.0, 0.0, 0.0)))
    assert np.linalg.norm(f) == pytest.approx(wind_force_total(0.5, WindSpec(3.0)), rel=1e-12)
    assert f[0] < 0


def test_flat_cloth_wind_sums_to_total():
    mesh = build_grid_mesh(7)
    wind = WindSpec(4.2)
    total = wind_forces(mesh.positions, mesh, wind).sum(axis=0)
    assert np.linalg.norm(total) == pytest.approx(wind_force_total(1.0, wind), rel=1e-9)


# ---------------------------------------------------------------- integration

def test_rest_mesh_without_loads_is_unchanged():
    mesh = build_grid_mesh(4, pinned_edge=None)
    cfg = SimConfig(dt=1e-4, gravity=(0.0, 0.0, 0.0))
    out = step(mesh, material(), WindSpec(0.0), cfg)
    np.testing.assert_array_equal(out.positions, mesh.positions)
    np.testing.assert_array_equal(out.velocities, 0.0)


def test_pinned_vertices_do_not_move():
    mesh = build_grid_mesh(4)
    cfg = SimConfig(dt=1e-4)
    out = mesh
    for _ in range(20):
        out = step(out, material(), WindSpec(5.0), cfg)
    pins = sorted(mesh.pinned)
    np.testing.assert_array_equal(out.positions[pins], mesh.positions[pins])
    np.testing.assert_array_equal(out.velocities[pins], 0.0)
    assert not np.array_equal(out.positions, mesh.positions)


def test_free_fall_matches_ballistic_trajectory():
    mesh = build_grid_mesh(4, pinned_edge=None)
    mat = material(damping=0.0)
    g = np.array([0.0, 0.0, -9.81])
    dt = 1e-4
    cfg = SimConfig(dt=dt, gravity=tuple(g))
    out = mesh
    for _ in range(10):
        out = step(out, mat, WindSpec(0.0), cfg)
    t = 10 * dt
    expected = mesh.positions.mean(axis=0) + 0.5 * g * t * t
    assert np.abs(out.positions.mean(axis=0) - expected).max() <= 1e-6


def test_simulate_frame_counts():
    mesh = build_grid_mesh(3)
    assert len(simulate(mesh, material(), WindSpec(2.0), SimConfig(duration=3.0, sample_rate=20))) == 60
    assert len(simulate(mesh, material(), WindSpec(2.0), SimConfig(duration=1.0, sample_rate=20))) == 20


def test_simulate_is_bit_identical():
    mesh = build_grid_mesh(5)
    cfg = SimConfig(duration=0.5, perturbation=1e-3, seed=4)
    a = simulate(mesh, material(3.0), WindSpec(4.0), cfg)
    b = simulate(mesh, material(3.0), WindSpec(4.0), cfg)
    for x, y in zip(a, b):
        assert x.positions.tobytes() == y.positions.tobytes()


def test_compiled_loop_matches_reference_step():
    mesh = build_grid_mesh(4)
    mat = material(8.0, damping=0.7)
    wind = WindSpec(5.0, (-0.6, 0.8, 0.0))
    cfg = SimConfig(duration=0.05, sample_rate=20)
    fast = simulate(mesh, mat, wind, cfg)[0]
    dt, substeps = substep_plan(mesh, mat, cfg)
    ref = mesh
    for _ in range(substeps):
        ref = step(ref, mat, wind, SimConfig(dt=dt, duration=0.05))
    np.testing.assert_allclose(fast.positions, ref.positions, rtol=0, atol=1e-12)
    np.testing.assert_allclose(fast.velocities, ref.velocities, rtol=0, atol=1e-9)


def test_too_large_dt_reports_instability():
    mesh = build_grid_mesh(6)
    with pytest.raises(SimulationInstability, match="dt=0.01"):
        simulate(mesh, material(), WindSpec(3.0), SimConfig(dt=0.01, duration=1.0))


def test_damped_energy_is_non_increasing():
    mesh = build_grid_mesh(4, pinned_edge=None)
    rng = np.random.default_rng(0)
    mat = material(damping=5.0)
    cfg = SimConfig(dt=1e-5, gravity=(0.0, 0.0, 0.0))
    state = mesh.with_state(mesh.positions, 0.05 * rng.standard_normal(mesh.positions.shape))
    energies = []
    for k in range(400):
        if k % 10 == 0:
            energies.append(kinetic_energy(state) + stretch_energy(state, mat))
        state = step(state, mat, WindSpec(0.0), cfg)
    tail = energies[5:]
    assert all(b <= a for a, b in zip(tail, tail[1:]))
