import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import mc_linear_tet_volume

from simpsdf import cases, geometry
from simpsdf.mesh import HEX8_TETS, structured_hex_mesh
from simpsdf.sdf import CartesianGrid, SdfField

REF_TET = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def grid_field(fn, n, lo=0.0, hi=1.0):
    h = (hi - lo) / n
    g = CartesianGrid((lo, lo, lo), h, (n + 1,) * 3)
    return SdfField(g, fn(g.points()).reshape(g.shape))


def mesh_tets(mesh, values):
    conn = np.vstack([mesh.connectivity[:, list(t)] for t in HEX8_TETS])
    return mesh.nodes[conn], values[conn]


# ---------------------------------------------------------------- tet volumes


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1).filter(lambda v: abs(v) > 1e-3), min_size=4, max_size=4), st.integers(0, 2**31 - 1))
def test_tet_fraction_matches_monte_carlo(vals, seed):
    v = np.array(vals)
    frac = float(geometry.tet_positive_fraction(v))
    est, se = mc_linear_tet_volume(REF_TET[None], v[None], 200_000, seed=seed)
    assert frac == pytest.approx(est * 6.0, abs=6 * 6.0 * se + 1e-12)


def test_tet_fraction_symmetric_cases():
    assert geometry.tet_positive_fraction([1, 1, -1, -1]) == pytest.approx(0.5)
    assert geometry.tet_positive_fraction([1, -1, -1, -1]) == pytest.approx(1 / 8)
    assert geometry.tet_positive_fraction([-1, 1, 1, 1]) == pytest.approx(7 / 8)
    assert geometry.tet_positive_fraction([0, 0, 0, 0]) == 1.0
    assert geometry.tet_positive_fraction([-1, -2, -3, -4]) == 0.0


# ------------------------------------------------------------ FE volumes


def test_fe_volume_of_full_density_is_mesh_volume():
    m = structured_hex_mesh((3, 2, 2), (1.5, 1.0, 0.7))
    assert geometry.fe_isocontour_volume(m, np.ones(m.n_nodes), 0.5) == pytest.approx(1.5 * 0.7, rel=1e-14)


def test_fe_volume_half_space():
    m = structured_hex_mesh((4, 4, 4), (1, 1, 1))
    assert geometry.fe_isocontour_volume(m, m.nodes[:, 0], 0.5) == pytest.approx(0.5, abs=1e-14)


def test_fe_volume_sphere_matches_monte_carlo():
    m, rho = cases.sphere_density(32)
    v = geometry.fe_isocontour_volume(m, rho, 0.5)
    x, f = mesh_tets(m, rho - 0.5)
    ref, se = mc_linear_tet_volume(x, f, 10_000_000, seed=3)
    assert se < 2e-4 * ref
    assert abs(v - ref) < 1e-3 * ref


def test_fe_volume_monotone_in_threshold():
    rng = np.random.default_rng(4)
    m = structured_hex_mesh((4, 3, 3), (1, 1, 1))
    rho = rng.uniform(0, 1, m.n_nodes)
    vols = [geometry.fe_isocontour_volume(m, rho, t) for t in np.linspace(-0.1, 1.1, 49)]
    assert np.all(np.diff(vols) <= 1e-15)
    assert vols[0] == pytest.approx(1.0) and vols[-1] == 0.0


def test_fe_and_grid_volumes_agree_on_identical_fields():
    m, phi = cases.sphere_mesh(16)
    f = cases.sphere_grid_sdf(16)
    assert geometry.fe_isocontour_volume(m, phi, 0.0) == pytest.approx(geometry.grid_isocontour_volume(f), rel=1e-12)


def test_fe_volume_validates_field_length():
    m = structured_hex_mesh((1, 1, 1), (1, 1, 1))
    with pytest.raises(ValueError):
        geometry.fe_isocontour_volume(m, np.ones(3), 0.5)


# ----------------------------------------------------------- grid volumes


def test_grid_volume_half_space_and_empty():
    f = grid_field(lambda p: p[:, 0] - 0.5, 8)
    assert geometry.grid_isocontour_volume(f) == pytest.approx(0.5, abs=1e-14)
    g = grid_field(lambda p: -1.0 - p[:, 0], 4)
    assert geometry.grid_isocontour_volume(g) == 0.0


def test_grid_volume_sphere_fine():
    f = cases.sphere_grid_sdf(128)
    assert geometry.grid_isocontour_volume(f) == pytest.approx(cases.sphere_volume(), rel=5e-3)


def test_grid_volume_complementarity():
    rng = np.random.default_rng(5)
    phi = rng.normal(size=(9, 7, 8))
    h = 0.3
    total = 8 * 6 * 7 * h**3
    a = geometry.grid_isocontour_volume(phi, 0.0, h)
    b = geometry.grid_isocontour_volume(-phi, 0.0, h)
    assert a + b == pytest.approx(total, rel=1e-9)


def test_grid_volume_raw_array_needs_spacing():
    with pytest.raises(ValueError):
        geometry.grid_isocontour_volume(np.zeros((3, 3, 3)))
    with pytest.raises(ValueError):
        geometry.grid_isocontour_volume(np.zeros((1, 3, 3)), 0.0, 1.0)


def test_grid_volume_level_argument():
    f = grid_field(lambda p: p[:, 2], 10)
    assert geometry.grid_isocontour_volume(f, 0.3) == pytest.approx(0.7, abs=1e-14)


# ------------------------------------------------------------ calibration


def test_calibrate_linear_field():
    m = structured_hex_mesh((5, 2, 2), (1, 1, 1))
    rt = geometry.calibrate_threshold(m, m.nodes[:, 0], 0.4, tol=1e-6)
    assert rt == pytest.approx(0.6, abs=1e-5)


def test_calibrate_full_volume_gives_minimum_density():
    m = structured_hex_mesh((3, 3, 3), (1, 1, 1))
    rho = 0.2 + 0.5 * m.nodes[:, 1]
    rt = geometry.calibrate_threshold(m, rho, 1.0, tol=1e-3)
    assert geometry.fe_isocontour_volume(m, rho, rt) == pytest.approx(1.0, rel=1e-3)
    assert rt == pytest.approx(0.2, abs=1e-2)


def test_calibrate_rejects_unreachable_target():
    m = structured_hex_mesh((2, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        geometry.calibrate_threshold(m, m.nodes[:, 0], 2.0)
    with pytest.raises(ValueError):
        geometry.calibrate_threshold(m, m.nodes[:, 0], 0.0)


def test_calibrate_random_field_hits_target():
    rng = np.random.default_rng(6)
    m = structured_hex_mesh((4, 4, 4), (2, 1, 1))
    rho = rng.uniform(0, 1, m.n_nodes)
    rt = geometry.calibrate_threshold(m, rho, 0.8, tol=1e-4)
    assert geometry.fe_isocontour_volume(m, rho, rt) == pytest.approx(0.8, rel=1e-4)


# ---------------------------------------------------------- marching cubes


def test_single_positive_corner_gives_one_triangle():
    phi = -np.ones((2, 2, 2))
    phi[0, 0, 0] = 1.0
    f = SdfField(CartesianGrid((0, 0, 0), 1.0, (2, 2, 2)), phi)
    with pytest.warns(RuntimeWarning):
        s = geometry.marching_cubes(f)
    assert s.n_triangles == 1 and s.open_boundary
    # edge midpoints next to the positive corner
    assert np.allclose(np.sort(s.vertices.sum(axis=1)), [0.5, 0.5, 0.5])
    # outward normal points away from the positive corner
    assert np.all(s.normals @ np.ones(3) > 0)


def test_plane_area_and_orientation():
    f = grid_field(lambda p: p[:, 2] - 0.5, 8)
    with pytest.warns(RuntimeWarning):
        s = geometry.marching_cubes(f)
    assert s.area == pytest.approx(1.0, abs=1e-9)
    assert np.allclose(s.vertices[:, 2], 0.5)
    # phi decreases toward -z
    assert np.allclose(s.normals, [0, 0, -1])


def test_sphere_surface_volume_and_watertightness():
    f = cases.sphere_grid_sdf(128)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        s = geometry.marching_cubes(f)
    assert not s.open_boundary and s.is_watertight()
    assert s.enclosed_volume() == pytest.approx(cases.sphere_volume(), rel=5e-3)
    cen = s.vertices[s.triangles].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", s.normals, cen) > 0)


def test_surface_volume_converges_to_grid_volume_at_second_order():
    diffs = []
    for n in (16, 32, 64):
        f = cases.sphere_grid_sdf(n)
        diffs.append(abs(geometry.marching_cubes(f).enclosed_volume() - geometry.grid_isocontour_volume(f)))
    h = 2.0 / np.array([16, 32, 64])
    scaled = np.array(diffs) / h**2
    assert scaled.max() < 1.5 * scaled.min()
    assert np.polyfit(np.log(h), np.log(diffs), 1)[0] > 1.8


def test_marching_cubes_rejects_level_outside_range_and_constant_field():
    f = grid_field(lambda p: p[:, 0], 4)
    with pytest.raises(ValueError):
        geometry.marching_cubes(f, 5.0)
    c = SdfField(CartesianGrid((0, 0, 0), 1.0, (3, 3, 3)), np.zeros((3, 3, 3)))
    assert geometry.marching_cubes(c).n_triangles == 0


def test_marching_cubes_is_deterministic():
    f = cases.sphere_grid_sdf(24)
    a, b = geometry.marching_cubes(f), geometry.marching_cubes(f)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.triangles, b.triangles)


def test_surface_properties_of_unit_tetrahedron():
    s = geometry.TriangleSurface(REF_TET, [[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    assert s.enclosed_volume() == pytest.approx(1 / 6)
    assert s.is_watertight()
    assert s.area == pytest.approx(1.5 + np.sqrt(3) / 2)
    assert not geometry.TriangleSurface(np.zeros((0, 3)), np.zeros((0, 3))).is_watertight()
