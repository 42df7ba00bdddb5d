import numpy as np
import pytest

from simpsdf.mesh import HEX8_VERTICES, structured_hex_mesh
from simpsdf.simp import (
    Material,
    SimpProblem,
    assemble_stiffness,
    cantilever_problem,
    compliance_and_sensitivity,
    density_filter,
    element_stiffness,
    filter_matrix,
    oc_update,
    run_simp,
    solve_equilibrium,
)

UNIT_CUBE = HEX8_VERTICES * 0.5 + 0.5


def node_at(mesh, p):
    return int(np.flatnonzero(np.all(np.isclose(mesh.nodes, p), axis=1))[0])


def bar_problem(n=4):
    """Bar of ``n`` unit cubes along x on rollers at x = 0, pulled at x = n."""
    m = structured_hex_mesh((n, 1, 1), (n, 1, 1))
    x = m.nodes
    fixed = [3 * i for i in np.flatnonzero(np.isclose(x[:, 0], 0))]
    o = node_at(m, [0, 0, 0])
    fixed += [3 * o + 1, 3 * o + 2, 3 * node_at(m, [0, 1, 0]) + 2, 3 * node_at(m, [0, 0, 1]) + 1]
    F = np.zeros(3 * m.n_nodes)
    tip = np.flatnonzero(np.isclose(x[:, 0], n))
    F[3 * tip] = 0.25
    return m, np.array(fixed), F, tip


def test_element_stiffness_rigid_modes_and_symmetry():
    K = element_stiffness(UNIT_CUBE)
    assert np.allclose(K, K.T)
    w = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(w) < 1e-10 * w.max()) == 6
    assert w.min() > -1e-12
    rot = np.cross([0.3, -0.2, 0.5], UNIT_CUBE).ravel()
    assert np.abs(K @ rot).max() < 1e-12


def test_uniaxial_bar_matches_hand_solution():
    # uniform stress: tip displacement F L / (E A) and lateral strain -nu eps
    m, fixed, F, tip = bar_problem(4)
    mat = Material(E0=2.0, nu=0.25)
    U = solve_equilibrium(m, np.ones(m.n_elements), mat, fixed, F)
    E = mat.young(1.0, 3.0)
    assert np.allclose(U[3 * tip], 1.0 * 4 / E, rtol=1e-7)
    eps = 1.0 / E
    far = node_at(m, [4, 1, 1])
    assert U[3 * far + 1] == pytest.approx(-0.25 * eps, rel=1e-7)
    C, _ = compliance_and_sensitivity(m, np.ones(m.n_elements), U, mat)
    assert C == pytest.approx(F @ U, rel=1e-12)


def test_single_element_matches_dense_solve():
    m, fixed, F, _ = bar_problem(1)
    mat = Material()
    rho = np.array([0.7])
    U = solve_equilibrium(m, rho, mat, fixed, F)
    # element-local DOF 3 a + d maps to global DOF 3 conn[a] + d
    g = (3 * m.connectivity[0, :8, None] + np.arange(3)).ravel()
    K = np.zeros((24, 24))
    K[np.ix_(g, g)] = mat.young(0.7, 3) * element_stiffness(m.element_coords(0))
    free = np.setdiff1d(np.arange(24), fixed)
    ref = np.zeros(24)
    ref[free] = np.linalg.solve(K[np.ix_(free, free)], F[free])
    assert np.allclose(U, ref, rtol=1e-8, atol=1e-12)


def test_zero_load_and_linearity():
    m, fixed, F, _ = bar_problem(3)
    rho = np.array([0.4, 1.0, 0.6])
    mat = Material()
    assert np.all(solve_equilibrium(m, rho, mat, fixed, np.zeros_like(F)) == 0)
    U1 = solve_equilibrium(m, rho, mat, fixed, F)
    U2 = solve_equilibrium(m, rho, mat, fixed, 3.0 * F)
    assert np.allclose(U2, 3.0 * U1, rtol=1e-7)


def test_global_stiffness_symmetric():
    m = structured_hex_mesh((3, 2, 2), (3, 2, 2))
    rng = np.random.default_rng(0)
    K = assemble_stiffness(m, rng.uniform(0.1, 1, m.n_elements), Material(), 3.0)
    assert abs(K - K.T).max() < 1e-14


def test_singular_system_is_reported():
    m, fixed, F, _ = bar_problem(2)
    rollers_only = fixed[np.asarray(fixed) % 3 == 0]
    with pytest.raises(np.linalg.LinAlgError):
        solve_equilibrium(m, np.ones(2), Material(), rollers_only, F)
    with pytest.raises(np.linalg.LinAlgError):
        solve_equilibrium(m, np.ones(2), Material(), [], F)


def test_sensitivity_matches_finite_differences():
    m, fixed, F, _ = bar_problem(2)
    F[3 * node_at(m, [2, 1, 1]) + 2] = -0.3
    mat = Material(Emin=1e-3)
    rho = np.array([0.6, 0.8])

    def comp(r):
        U = solve_equilibrium(m, r, mat, fixed, F, rtol=1e-12)
        return compliance_and_sensitivity(m, r, U, mat)

    C, dc = comp(rho)
    step = 1e-6
    for e in range(2):
        dr = np.zeros(2)
        dr[e] = step
        fd = (comp(rho + dr)[0] - comp(rho - dr)[0]) / (2 * step)
        assert dc[e] == pytest.approx(fd, rel=1e-5)
    # compliance is homogeneous of degree -p in a uniform density scale
    # when Emin is negligible: dC/drho . rho = -p C
    mat0 = Material(Emin=1e-12)
    U = solve_equilibrium(m, rho, mat0, fixed, F)
    C0, dc0 = compliance_and_sensitivity(m, rho, U, mat0)
    assert dc0 @ rho == pytest.approx(-3 * C0, rel=1e-6)


def test_filter_weights_on_three_by_three_layer():
    m = structured_hex_mesh((3, 3, 1), (3, 3, 1))
    H, Hs = filter_matrix(m.centroids, 1.5)
    centre = 4
    w = H[centre].toarray().ravel()
    d = np.linalg.norm(m.centroids - m.centroids[centre], axis=1)
    assert np.allclose(w, np.maximum(0.0, 1.5 - d))
    assert Hs[centre] == pytest.approx(1.5 + 4 * 0.5 + 4 * (1.5 - np.sqrt(2)))
    rho = np.zeros(9)
    rho[centre] = 1.0
    out = density_filter(m, rho, 1.5)
    assert out[centre] == pytest.approx(1.5 / Hs[centre])
    assert out[0] == pytest.approx((1.5 - np.sqrt(2)) / Hs[0])


def test_filter_preserves_constants_and_rmin_below_spacing_is_identity():
    m = structured_hex_mesh((4, 3, 2), (4, 3, 2))
    assert np.allclose(density_filter(m, np.full(m.n_elements, 0.3), 2.5), 0.3)
    rho = np.random.default_rng(1).uniform(0, 1, m.n_elements)
    assert np.allclose(density_filter(m, rho, 0.9), rho)
    with pytest.raises(ValueError):
        filter_matrix(m.centroids, 0.0)


def test_oc_uniform_sensitivity_keeps_uniform_design():
    rho = np.full(10, 0.4)
    out = oc_update(rho, -np.ones(10), np.ones(10), 0.4)
    assert np.allclose(out, 0.4, atol=1e-6)


def test_oc_respects_move_limit_bounds_and_volume():
    rng = np.random.default_rng(2)
    rho = rng.uniform(0.2, 0.6, 50)
    V = rng.uniform(0.5, 1.5, 50)
    dc = -rng.uniform(0.01, 10, 50)
    out = oc_update(rho, dc, V, 0.4, move=0.2)
    assert np.all(np.abs(out - rho) <= 0.2 + 1e-12)
    assert np.all((out >= 0) & (out <= 1))
    assert V @ out / V.sum() == pytest.approx(0.4, rel=1e-6)
    # every entry is the clipped fixed-point update for one common multiplier
    B = -dc / V
    free = (out > np.maximum(0, rho - 0.2) + 1e-9) & (out < np.minimum(1, rho + 0.2) - 1e-9)
    assert free.any()
    k = np.flatnonzero(free)[0]
    lam = B[k] * (rho[k] / out[k]) ** 2
    expect = np.clip(rho * np.sqrt(B / lam), np.maximum(0, rho - 0.2), np.minimum(1, rho + 0.2))
    assert np.allclose(out, expect, atol=1e-10)


def test_oc_unreachable_target_raises():
    with pytest.raises(RuntimeError):
        oc_update(np.full(4, 0.1), -np.ones(4), np.ones(4), 0.9, move=0.2)


def test_full_volume_fraction_gives_solid():
    P = cantilever_problem(4, 1, 2, volfrac=1.0, max_iter=10)
    res = run_simp(P)
    assert np.allclose(res.densities, 1.0)
    assert res.volume_fraction == pytest.approx(1.0)


def test_small_cantilever_run():
    P = cantilever_problem(8, 2, 4, volfrac=0.5, max_iter=40)
    seen = []
    res = run_simp(P, callback=lambda it, C, rho: seen.append(it))
    assert seen == list(range(1, res.iterations + 1))
    assert res.volume_fraction == pytest.approx(0.5, abs=1e-3)
    assert np.all((res.densities >= 0) & (res.densities <= 1))
    assert res.compliance[-1] < res.compliance[0]


def test_problem_validation():
    m = structured_hex_mesh((2, 1, 1), (2, 1, 1))
    with pytest.raises(ValueError):
        SimpProblem(m, [0], np.zeros(5))
    with pytest.raises(ValueError):
        SimpProblem(m, [0], np.zeros(3 * m.n_nodes), volfrac=0.0)
    with pytest.raises(ValueError):
        Material(E0=1.0, Emin=2.0)


def test_sensitivity_at_full_density_is_minus_three_q():
    m, fixed, F, _ = bar_problem(2)
    mat = Material(Emin=1e-12)
    U = solve_equilibrium(m, np.ones(2), mat, fixed, F)
    C, dc = compliance_and_sensitivity(m, np.ones(2), U, mat)
    k0 = element_stiffness(m.element_coords(0))
    ed = (3 * m.connectivity[:, :8, None] + np.arange(3)).reshape(2, 24)
    q = np.einsum("ei,ij,ej->e", U[ed], k0, U[ed])
    assert np.allclose(dc, -3 * q, rtol=1e-9)
    C0, dc0 = compliance_and_sensitivity(m, np.ones(2), np.zeros_like(U), mat)
    assert C0 == 0 and np.all(dc0 == 0)


def test_oc_clamp_branch():
    # a strong sensitivity on element 0 pushes it onto the upper move limit
    rho = np.array([0.5, 0.5, 0.5, 0.5])
    out = oc_update(rho, -np.array([100.0, 1.0, 1.0, 1.0]), np.ones(4), 0.5, move=0.2)
    assert out[0] == pytest.approx(min(1.0, 0.5 + 0.2))


def test_oc_two_element_volume():
    out = oc_update(np.array([0.5, 0.5]), -np.array([2.0, 1.0]), np.ones(2), 0.5)
    assert abs(out.sum() / 2 - 0.5) < 1e-6
    assert out[0] > out[1]
