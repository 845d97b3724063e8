import numpy as np
import pytest
import scipy.sparse as sp

from app.core.errors import InvalidArgumentError, NumericalFailureError
from app.core.seeding import StreamRole, make_rng
from app.services.fem import (
    HighFidelitySolver,
    Snapshot,
    assemble,
    assemble_stiffness,
    build_mesh,
    h1_seminorm_error,
    l2_error,
    riesz_residual_norm,
    solve,
    v_inner,
)
from app.services.params import AffineCoefficientModel, SamplingMeasure, build_checkerboard_model, sample_set

PI = np.pi


def manufactured_load(x, y):
    return 2 * PI ** 2 * np.sin(PI * x) * np.sin(PI * y)


def exact(x, y):
    return np.sin(PI * x) * np.sin(PI * y)


def exact_grad(x, y):
    return PI * np.cos(PI * x) * np.sin(PI * y), PI * np.sin(PI * x) * np.cos(PI * y)


def unit_operator(grid_n, f=1.0):
    """a = 1 written as abar = 1 with a single zero amplitude."""
    model = AffineCoefficientModel(abar=1.0, k=1, amplitudes=(0.0,))
    return assemble(build_mesh(grid_n, 1), model, f)


def test_smallest_mesh():
    mesh = build_mesh(2, 1)
    assert mesh.n_interior == 1
    assert mesh.triangles.shape == (8, 3)


def test_interior_count():
    assert build_mesh(32, 8).n_interior == 961


@pytest.mark.parametrize("grid_n, k", [(33, 8), (1, 1), (10, 4)])
def test_mesh_rejects_bad_sizes(grid_n, k):
    with pytest.raises(InvalidArgumentError):
        build_mesh(grid_n, k)


def test_triangles_stay_inside_one_subdomain():
    mesh = build_mesh(16, 4)
    p = mesh.nodes[mesh.triangles]
    col = mesh.triangle_cell % 4
    row = mesh.triangle_cell // 4
    tol = 1e-12
    assert np.all(p[:, :, 0] >= col[:, None] / 4 - tol) and np.all(p[:, :, 0] <= (col[:, None] + 1) / 4 + tol)
    assert np.all(p[:, :, 1] >= row[:, None] / 4 - tol) and np.all(p[:, :, 1] <= (row[:, None] + 1) / 4 + tol)
    assert np.bincount(mesh.triangle_cell, minlength=16).tolist() == [32] * 16


def test_misaligned_model_rejected(small_mesh):
    with pytest.raises(InvalidArgumentError):
        assemble(small_mesh, build_checkerboard_model(4, 1.0, 0.1))


def test_zero_amplitude_component_is_zero():
    op = unit_operator(4)
    assert op.component(0).nnz == 0


def test_components_sum_to_unit_stiffness():
    mesh = build_mesh(16, 4)
    model = AffineCoefficientModel(abar=0.0, k=4, amplitudes=(1.0,) * 16)
    op = assemble(mesh, model)
    total = sum(op.components, sp.csr_matrix(op.inner.shape))
    assert abs(total - op.inner).max() < 1e-12


def test_component_support_touches_its_subdomain(small_operator):
    mesh = small_operator.mesh
    A = small_operator.component(3)
    rows = np.unique(A.nonzero()[0])
    nodes = mesh.nodes[mesh.interior[rows]]
    assert np.all(nodes >= 0.5 - 1e-12)


def test_a0_annihilates_constants_away_from_boundary(small_operator):
    mesh = small_operator.mesh
    sums = np.asarray(small_operator.a0.sum(axis=1)).ravel()
    pts = mesh.nodes[mesh.interior]
    h = mesh.h
    away = np.all((pts > 1.5 * h) & (pts < 1 - 1.5 * h), axis=1)
    assert away.any()
    assert np.max(np.abs(sums[away])) < 1e-12


def test_affine_consistency(small_operator):
    rng = make_rng(0, StreamRole.TRAINING, "affine")
    model = small_operator.model
    for y in sample_set(SamplingMeasure.UNIFORM, model.d, 5, rng):
        direct = assemble_stiffness(small_operator.mesh, model.cell_values(y))
        assert abs(direct - small_operator.matrix_at(y)).max() < 1e-12


def test_matrices_symmetric(small_operator):
    assert abs(small_operator.a0 - small_operator.a0.T).max() < 1e-14
    for A in small_operator.components:
        assert abs(A - A.T).max() < 1e-14


def test_apply_components_matches_sparse_products(small_operator):
    v = make_rng(0, StreamRole.TRAINING, "apply").standard_normal(small_operator.n_h)
    rows = small_operator.apply_components(v)
    for j, A in enumerate(small_operator.components):
        np.testing.assert_allclose(rows[j], A @ v, atol=1e-13)


def test_constant_coefficient_scaling():
    model1 = AffineCoefficientModel(abar=1.0, k=1, amplitudes=(0.5,))
    op = assemble(build_mesh(8, 1), model1)
    u_low = solve(op, [-1.0])  # a = 0.5
    u_one = solve(op, [0.0])  # a = 1
    np.testing.assert_allclose(u_low.coeffs, 2.0 * u_one.coeffs, rtol=1e-10)


def test_snapshot_norm_and_galerkin_orthogonality(small_operator):
    solver = HighFidelitySolver(small_operator)
    y = sample_set(SamplingMeasure.UNIFORM, 4, 1, make_rng(1, StreamRole.TRAINING, "galerkin"))[0]
    u = solver.solve(y)
    energy = u.coeffs @ (small_operator.inner @ u.coeffs)
    assert u.vnorm ** 2 == pytest.approx(energy, rel=1e-12)
    A = small_operator.matrix_at(y)
    assert small_operator.load @ u.coeffs == pytest.approx(u.coeffs @ (A @ u.coeffs), rel=1e-9)
    assert solver.solve_count == 1


def test_cg_path_agrees_with_direct(small_operator):
    y = np.array([0.3, -0.7, 0.1, 0.9])
    direct = HighFidelitySolver(small_operator).solve(y)
    iterative = HighFidelitySolver(small_operator, direct_max_unknowns=1).solve(y)
    np.testing.assert_allclose(iterative.coeffs, direct.coeffs, rtol=1e-8, atol=1e-12)


def test_spd_certificate(small_operator):
    solver = HighFidelitySolver(small_operator, direct_max_unknowns=1)
    rng = make_rng(2, StreamRole.TRAINING, "spd")
    for y in sample_set(SamplingMeasure.UNIFORM, 4, 100, rng):
        solver.solve(y)
        A = small_operator.matrix_at(y)
        v = rng.standard_normal((small_operator.n_h, 20))
        assert np.all(np.einsum("ij,ij->j", v, A @ v) > 0)


def test_outside_domain_rejected(small_operator):
    with pytest.raises(InvalidArgumentError):
        solve(small_operator, [2.0, 0.0, 0.0, 0.0])


def test_indefinite_operator_fails():
    # abar below the amplitude: a = -0.5 on the whole square at y = -1
    model = AffineCoefficientModel(abar=0.5, k=1, amplitudes=(1.0,))
    op = assemble(build_mesh(4, 1), model)
    with pytest.raises(NumericalFailureError):
        HighFidelitySolver(op).solve([-1.0])


def test_v_inner_properties(small_operator):
    rng = make_rng(3, StreamRole.TRAINING, "inner")
    S = small_operator.inner
    u, v = rng.standard_normal((2, small_operator.n_h))
    assert v_inner(u, u, S) > 0
    assert v_inner(u, v, S) == pytest.approx(v_inner(v, u, S), rel=1e-13)
    with pytest.raises(InvalidArgumentError):
        v_inner(u, v[:-1], S)


def test_manufactured_norms_converge():
    op = unit_operator(64, manufactured_load)
    u = solve(op, [0.0])
    assert u.vnorm == pytest.approx(PI / np.sqrt(2), rel=5e-3)
    assert v_inner(u, u, op.inner) == pytest.approx(PI ** 2 / 2, rel=1e-2)


def test_manufactured_convergence_orders():
    l2, h1 = [], []
    for grid_n in (16, 32, 64):
        op = unit_operator(grid_n, manufactured_load)
        u = solve(op, [0.0])
        l2.append(l2_error(op.mesh, u.coeffs, exact))
        h1.append(h1_seminorm_error(op.mesh, u.coeffs, exact_grad))
    for coarse, fine in zip(l2, l2[1:]):
        assert 3.5 <= coarse / fine <= 4.5
    for coarse, fine in zip(h1, h1[1:]):
        assert 1.8 <= coarse / fine <= 2.2


def test_riesz_residual_examples(small_operator):
    y = np.array([0.2, 0.2, -0.4, 0.6])
    u = solve(small_operator, y)
    assert riesz_residual_norm(small_operator, y, u) < 1e-8 * u.vnorm
    f = small_operator.load
    riesz_f = np.linalg.solve(small_operator.inner.toarray(), f)
    expected = np.sqrt(riesz_f @ f)
    zero = Snapshot.from_coeffs(np.zeros_like(f), small_operator.inner)
    assert riesz_residual_norm(small_operator, y, zero) == pytest.approx(expected, rel=1e-10)


def test_riesz_frame_ratio():
    model = build_checkerboard_model(2, 1.0, 0.5)
    op = assemble(build_mesh(8, 2), model)
    solver = HighFidelitySolver(op)
    rng = make_rng(4, StreamRole.TRAINING, "frame")
    basis_points = sample_set(SamplingMeasure.UNIFORM, 4, 3, rng)
    B = np.column_stack([solver.solve(y).coeffs for y in basis_points])
    S = op.inner.toarray()
    ratios = []
    for y in sample_set(SamplingMeasure.UNIFORM, 4, 50, rng):
        n = rng.integers(1, 4)
        Bn = B[:, :n]
        A = op.matrix_at(y).toarray()
        c = np.linalg.solve(Bn.T @ A @ Bn, Bn.T @ op.load)
        un = Bn @ c
        e = solver.solve(y).coeffs - un
        err = np.sqrt(e @ S @ e)
        ratios.append(err / solver.riesz_residual_norm(y, un))
    ratios = np.array(ratios)
    assert ratios.max() / ratios.min() < 10
    assert ratios.max() <= 1 / model.a_min + 1e-9
    assert ratios.min() >= 1 / model.a_max - 1e-9
