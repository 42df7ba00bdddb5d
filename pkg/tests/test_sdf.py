import numpy as np
import pytest
from oracles import box_sdf, hex_isocontour_samples, nearest_distance, triangle_distance_sampling

from simpsdf import cases, geometry, sdf
from simpsdf.mesh import HEX8_VERTICES, UnstructuredMesh, hex_to_tet_mesh, structured_hex_mesh
from simpsdf.sdf import CartesianGrid, ElementClass

UNIT_CUBE = HEX8_VERTICES * 0.5 + 0.5
TRI = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])


def unit_cube_mesh():
    return structured_hex_mesh((1, 1, 1), (1, 1, 1))


def face_where(mesh, pred):
    for f in mesh.boundary_faces():
        if all(pred(mesh.nodes[n]) for n in f.nodes):
            return f
    raise LookupError


# ------------------------------------------------------------------ grid


def test_grid_from_unit_box():
    g = sdf.build_grid(unit_cube_mesh(), 0.1)
    assert np.allclose(g.origin, -0.3)
    assert g.shape == (17, 17, 17)
    assert np.allclose(g.upper, 1.3)


def test_grid_node_counts_on_brick():
    g = sdf.build_grid(structured_hex_mesh((2, 1, 1), (2, 1, 1)), 0.5)
    assert g.shape == (11, 9, 9)


def test_default_spacing_is_shortest_edge():
    m = structured_hex_mesh((4, 2, 3), (4.0, 2.0, 3.0))
    assert sdf.build_grid(m).spacing == pytest.approx(1.0)


def test_grid_points_and_boxes():
    g = CartesianGrid((0.0, 0.0, 0.0), 0.5, (3, 4, 5))
    pts = g.points()
    assert pts.shape == (60, 3)
    assert np.allclose(pts[1], [0, 0, 0.5])  # C order, last axis fastest
    ids = g.nodes_in_box([0.4, 0.4, 0.4], [1.0, 1.0, 1.1])
    assert np.allclose(np.unique(pts[ids], axis=0), [[a, b, c] for a in (0.5, 1.0) for b in (0.5, 1.0) for c in (0.5, 1.0)])
    assert g.nodes_in_box([5, 5, 5], [6, 6, 6]).size == 0
    r = g.refined(2)
    assert r.shape == (5, 7, 9) and r.spacing == 0.25
    with pytest.raises(ValueError):
        CartesianGrid((0, 0, 0), 0.0, (2, 2, 2))


# -------------------------------------------------------- classification


def test_classification_examples():
    m = structured_hex_mesh((3, 3, 3), (3, 3, 3))
    cls, ext = sdf.classify_elements(m, np.ones(m.n_nodes), 0.5)
    assert cls[13] == ElementClass.INTERIOR_SOLID
    assert np.all(cls[np.arange(27) != 13] == ElementClass.SOLID_BOUNDARY)
    assert 13 not in ext and len(ext[0]) == 3
    cls, _ = sdf.classify_elements(m, np.zeros(m.n_nodes), 0.5)
    assert np.all(cls == ElementClass.VOID)
    rho = (m.nodes[:, 0] > 1.5).astype(float)
    cls, _ = sdf.classify_elements(m, rho, 0.5)
    assert cls[13] == ElementClass.ISOCONTOUR
    assert cls[1 * 9 + 0 * 3 + 0] == ElementClass.TRANSITIONAL_BOUNDARY
    with pytest.raises(ValueError):
        sdf.classify_elements(m, rho, 1.0)


def test_value_at_threshold_counts_as_solid():
    m = unit_cube_mesh()
    cls, _ = sdf.classify_elements(m, np.full(8, 0.5), 0.5)
    assert cls[0] == ElementClass.SOLID_BOUNDARY


# ---------------------------------------------------------- isocontour


def test_isocontour_planar_example():
    d, xi = sdf.distance_to_isocontour("HEX8", UNIT_CUBE, UNIT_CUBE[:, 0], [0.9, 0.5, 0.5], 0.5)
    assert d == pytest.approx(0.4, abs=1e-9)
    assert np.allclose(xi, 0.0, atol=1e-6)


def test_isocontour_edge_clamp_example():
    xg = np.array([0.5, 2.0, 0.5])
    d, _ = sdf.distance_to_isocontour("HEX8", UNIT_CUBE, UNIT_CUBE[:, 0], xg, 0.5)
    assert d == pytest.approx(1.0, abs=1e-8)
    # dense sampling of the contour square x = 0.5
    s = np.linspace(0, 1, 401)
    Y, Z = np.meshgrid(s, s, indexing="ij")
    samples = np.column_stack([np.full(Y.size, 0.5), Y.ravel(), Z.ravel()])
    assert d == pytest.approx(nearest_distance(xg, samples)[0], abs=1e-9)


def test_point_on_isocontour_has_zero_distance():
    d, _ = sdf.distance_to_isocontour("HEX8", UNIT_CUBE, UNIT_CUBE[:, 0], [0.5, 0.3, 0.8], 0.5)
    assert d == pytest.approx(0.0, abs=1e-9)


def test_no_isocontour_returns_none():
    assert sdf.distance_to_isocontour("HEX8", UNIT_CUBE, np.ones(8), [0.5, 0.5, 0.5], 0.5) is None


def test_distorted_hex_projections_match_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(4):
        coords = UNIT_CUBE + rng.uniform(-0.15, 0.15, (8, 3))
        rho = rng.uniform(0, 1, 8)
        rho[:2] = [0.1, 0.9]
        samples, spacing = hex_isocontour_samples(coords, rho, 0.5, k=120)
        pts = rng.uniform(-0.5, 1.5, (15, 3))
        d, _, ok = sdf.distance_to_isocontour_batch("HEX8", coords[None], rho[None], pts, 0.5, np.zeros(15, int))
        assert ok.all()
        assert np.abs(d - nearest_distance(pts, samples)).max() <= 2 * spacing


def test_tet_isocontour_is_exact_for_linear_fields():
    rng = np.random.default_rng(1)
    tet = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    rho = tet[:, 0] + 0.2  # contour is the plane x = 0.3 cut by the tet
    pts = rng.uniform(-0.5, 1.0, (20, 3))
    d, xi, ok = sdf.distance_to_isocontour_batch("TET4", tet[None], rho[None], pts, 0.5, np.zeros(20, int))
    assert ok.all()
    # the contour triangle (0.3,0,0), (0.3,0.7,0), (0.3,0,0.7)
    tri = np.array([[0.3, 0, 0], [0.3, 0.7, 0], [0.3, 0, 0.7]])
    ref = triangle_distance_sampling(pts, *(np.broadcast_to(v, pts.shape) for v in tri))
    assert np.abs(d - ref).max() < 1e-9


# ----------------------------------------------------------- triangles


@pytest.mark.parametrize(
    "x, d, xp",
    [([0.25, 0.25, 1.0], 1.0, [0.25, 0.25, 0]), ([2.0, 0, 0], 1.0, [1, 0, 0]), ([0.5, -1.0, 0], 1.0, [0.5, 0, 0])],
)
def test_triangle_examples(x, d, xp):
    dist, p, lam = sdf.distance_to_triangle(x, TRI)
    assert dist == pytest.approx(d)
    assert np.allclose(p, xp)
    assert np.allclose(lam @ TRI, p) and lam.min() >= 0


def test_triangle_interior_flag():
    _, _, lam = sdf.distance_to_triangle([0.25, 0.25, 1.0], TRI)
    assert np.all(lam > 0)


def test_degenerate_triangle_is_rejected():
    with pytest.raises(ValueError):
        sdf.distance_to_triangle([0, 0, 1], [[0, 0, 0], [1, 0, 0], [2, 0, 0]])


def test_triangle_distances_match_sampling_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2000, 3))
    T = rng.normal(size=(2000, 3, 3))
    d, xp, lam = sdf.distance_to_triangles(x, T[:, 0], T[:, 1], T[:, 2])
    ref = triangle_distance_sampling(x, T[:, 0], T[:, 1], T[:, 2])
    scale = np.maximum(np.ptp(T, axis=1).max(axis=1), d)
    assert np.max(np.abs(d - ref) / scale) < 1e-6
    assert np.allclose(np.linalg.norm(x - xp, axis=1), d)


# --------------------------------------------------------------- faces


def test_solid_face_distance():
    m = unit_cube_mesh()
    top = face_where(m, lambda p: p[2] == 1.0)
    d, xp = sdf.distance_to_boundary_face([0.5, 0.5, 1.7], top, m, np.ones(8), 0.5, transitional=False)
    assert d == pytest.approx(0.7)
    assert np.allclose(xp, [0.5, 0.5, 1.0])


def test_transitional_face_rejects_void_projection():
    m = unit_cube_mesh()
    rho = m.nodes[:, 0]
    top = face_where(m, lambda p: p[2] == 1.0)
    assert sdf.distance_to_boundary_face([0.3, 0.5, 1.5], top, m, rho, 0.5, transitional=True) is None
    d, _ = sdf.distance_to_boundary_face([0.3, 0.5, 1.5], top, m, rho, 0.5, transitional=False)
    assert d == pytest.approx(0.5)


def test_transitional_face_accepts_solid_projection():
    m = unit_cube_mesh()
    rho = m.nodes[:, 0]
    top = face_where(m, lambda p: p[2] == 1.0)
    xg = np.array([0.8, 0.4, 1.5])
    d, xp = sdf.distance_to_boundary_face(xg, top, m, rho, 0.5, transitional=True)
    # dense sampling of the solid part x >= 0.5 of the face
    s = np.linspace(0, 1, 401)
    X, Y = np.meshgrid(s, s, indexing="ij")
    keep = X.ravel() >= 0.5
    samples = np.column_stack([X.ravel()[keep], Y.ravel()[keep], np.ones(keep.sum())])
    assert d == pytest.approx(nearest_distance(xg, samples)[0], abs=1e-9)
    assert d == pytest.approx(sdf.distance_to_triangle(xg, [[0, 0, 1], [1, 0, 1], [1, 1, 1]])[0])


def test_fan_of_warped_face_touches_its_corners():
    coords = UNIT_CUBE.copy()
    coords[6, 2] += 0.3
    tris, local = sdf.face_triangles("HEX8", coords, 5)
    assert tris.shape == (4, 3, 3)
    assert np.allclose(tris[:, 2], coords[[4, 5, 6, 7]].mean(axis=0))


# --------------------------------------------------------------- signs


def test_sign_examples():
    m = structured_hex_mesh((2, 2, 2), (2, 2, 2))
    pts = np.array([[1.0, 1.0, 1.0], [5.0, 5.0, 5.0], [-0.1, 1.0, 1.0]])
    assert list(sdf.assign_signs(pts, m, np.ones(m.n_nodes), 0.5)) == [1, -1, -1]


def test_roof_signs_around_ridge():
    m, rho = cases.roof_case()
    pts = np.array([[1.0, 0.5, 1.05], [0.9, 0.5, 0.95], [1.0, 0.5, 0.9], [0.5, 0.5, 0.2]])
    assert list(sdf.assign_signs(pts, m, rho, 0.5)) == [-1, -1, 1, 1]


# ---------------------------------------------------------------- field


def test_plane_field_matches_box_distance():
    m = unit_cube_mesh()
    rho = m.nodes[:, 0]
    g = sdf.build_grid(m, 0.1)
    field = sdf.build_sdf(m, rho, 0.5, g)
    # contour x = 0.5 plus the solid faces of the element bound [0.5, 1] x [0, 1]^2
    ref = box_sdf(g.points(), [0.5, 0, 0], [1, 1, 1])
    ref = np.clip(ref, -field.band, field.band)
    assert np.abs(field.values.ravel() - ref).max() < 1e-6
    # along the centre line it is the plane distance inside the band
    i = np.flatnonzero(np.isclose(g.axis(1), 0.5))[0]
    line = field.values[:, i, i]
    x = g.axis(0)
    inband = (x > 0.3) & (x < 0.7)
    assert np.allclose(line[inband], (x - 0.5)[inband], atol=1e-9)


def test_tet_mesh_gives_same_plane_field():
    m = unit_cube_mesh()
    t = hex_to_tet_mesh(m)
    g = sdf.build_grid(m, 0.125)
    a = sdf.build_sdf(m, m.nodes[:, 0], 0.5, g).values
    b = sdf.build_sdf(t, t.nodes[:, 0], 0.5, g).values
    assert np.abs(a - b).max() < 1e-9


def test_far_nodes_are_clamped_to_band():
    m = unit_cube_mesh()
    g = CartesianGrid((-2.0, -2.0, -2.0), 0.5, (11, 11, 11))
    field = sdf.build_sdf(m, np.ones(8), 0.5, g)
    assert field.band == pytest.approx(1.0)
    assert field.values[0, 0, 0] == -1.0
    assert np.abs(field.values).max() <= 1.0


def test_field_independent_of_threads_and_element_order():
    rng = np.random.default_rng(3)
    m = structured_hex_mesh((3, 2, 2), (3, 2, 2))
    rho = rng.uniform(0, 1, m.n_nodes)
    g = sdf.build_grid(m, 0.25)
    base = sdf.build_sdf(m, rho, 0.5, g, threads=1).values
    assert np.array_equal(sdf.build_sdf(m, rho, 0.5, g, threads=3).values, base)
    perm = rng.permutation(m.n_elements)
    shuffled = UnstructuredMesh(m.nodes, [("HEX8", m.connectivity[e]) for e in perm])
    assert np.array_equal(sdf.build_sdf(shuffled, rho, 0.5, g).values, base)


def test_roof_equidistance_and_symmetry():
    res = sdf_roof = __import__("simpsdf.validation", fromlist=["roof_validation"]).roof_validation()
    assert sdf_roof is res
    assert res["sign_mismatches"] == 0
    assert res["equidistant_nodes"] > 0
    assert res["equidistant_max_diff"] <= 1e-9
    assert res["symmetry_error"] <= 1e-9
    assert res["c0_max_jump"] <= res["c0_probe_offset"] * (1 + 1e-6)


def test_sphere_density_volume_matches_fe_volume():
    m, rho = cases.sphere_density(16)
    field = sdf.build_sdf(m, rho, 0.5)
    v_grid = geometry.grid_isocontour_volume(field)
    v_fe = geometry.fe_isocontour_volume(m, rho, 0.5)
    assert v_grid == pytest.approx(v_fe, rel=0.02)
    assert field.info["failed_projections"] == 0


def test_signed_distance_at_points_matches_grid():
    m, rho = cases.roof_case()
    g = sdf.build_grid(m, 0.25)
    field = sdf.build_sdf(m, rho, 0.5, g)
    pts = g.points()
    assert np.allclose(sdf.signed_distance_at(m, rho, 0.5, pts, h=0.25), field.values.ravel(), atol=1e-12)
