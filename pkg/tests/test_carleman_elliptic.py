import math

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from pywclab.wclab.carleman_elliptic import (
    CylinderField,
    EllipticProblem,
    IndefiniteOperatorError,
    WeightConstructionError,
    apply_cylinder_operator,
    build_elliptic_weight,
    conjugate_gradient,
    cylinder_bump,
    elliptic_carleman_functionals,
    elliptic_carleman_sweep,
    elliptic_matrix,
    elliptic_residual,
    h2_regularity_ratio,
    regularity_sweep,
    s_grid,
    solve_elliptic,
    weight_failures,
)
from pywclab.wclab.carleman_hyperbolic import InadmissibleParameterError
from pywclab.wclab.diffops import discrete_eigenvalue
from pywclab.wclab.grid import Mesh, NodeField
from pywclab.wclab.wavesolve import sine_mode


@pytest.fixture(scope="module")
def weight_and_bump():
    mesh = Mesh(10)
    weight = build_elliptic_weight(mesh)
    w = cylinder_bump(weight, mesh, s_grid(mesh.h))
    return mesh, weight, w


def test_solver_recovers_eigenvector():
    """
    -Delta_h w = lambda_h g with g the first sine mode gives w = g.
    :return: None
    """
    mesh = Mesh(9)
    mode = sine_mode(mesh)
    problem = EllipticProblem(mesh, NodeField.zeros(mesh), mode * discrete_eigenvalue(mesh, 1, 1))
    w = solve_elliptic(problem)
    np.testing.assert_allclose(w.values, mode.values, atol=1e-9)
    assert elliptic_residual(problem, w) < 1e-8


def test_conjugate_gradient_matches_direct_solve():
    """
    Preconditioned CG agrees with a sparse direct solve.
    :return: None
    """
    mesh = Mesh(6)
    q = NodeField.from_function(mesh, lambda x1, x2: 1.0 + x1 * x2)
    matrix = elliptic_matrix(mesh, q)
    b = np.random.default_rng(0).standard_normal(mesh.N**2)
    x, iterations = conjugate_gradient(matrix, b)
    np.testing.assert_allclose(x, spsolve(matrix.tocsc(), b), rtol=1e-9, atol=1e-12)
    assert 0 < iterations <= mesh.N**2
    with pytest.raises(ValueError):
        conjugate_gradient(matrix, b, max_iter=1)


def test_zero_source():
    """
    g = 0 gives w = 0, and the regularity ratio is undefined.
    :return: None
    """
    mesh = Mesh(5)
    problem = EllipticProblem(mesh, NodeField.zeros(mesh), NodeField.zeros(mesh))
    assert not np.any(solve_elliptic(problem).values)
    with pytest.raises(ValueError):
        h2_regularity_ratio(problem)


def test_indefinite_operator():
    """
    A strongly negative potential makes the operator indefinite.
    :return: None
    """
    mesh = Mesh(4)
    q = NodeField(mesh, np.full(mesh.shape, -200.0))
    problem = EllipticProblem(mesh, q, sine_mode(mesh))
    with pytest.raises(IndefiniteOperatorError):
        solve_elliptic(problem)


@pytest.mark.slow
def test_regularity_ratio_is_bounded():
    """
    The H2_h regularity ratio stays bounded under refinement.
    :return: None
    """
    rows = regularity_sweep([8, 16, 32])
    ratios = [row["ratio"] for row in rows]
    assert all(np.isfinite(ratios))
    assert max(ratios) / min(ratios) < 1.5
    assert max(row["residual"] for row in rows) < 1e-8


def test_weight_construction():
    """
    The default weight separates omega_r from the annulus and yields a positive s-window.
    :return: None
    """
    weight = build_elliptic_weight(Mesh(20))
    assert weight.gap > 0.0
    assert weight.s_window > 0.0
    assert weight.psi_sup_annulus < weight.psi_inf_omega


@pytest.mark.parametrize(
    "kwargs,error",
    [
        ({"depth": 0.5}, WeightConstructionError),
        ({"R": 0.2, "R0": 0.25}, ValueError),
        ({"interval": (0.7, 0.3)}, ValueError),
        ({"mu": 0.5}, ValueError),
    ],
)
def test_weight_construction_errors(kwargs, error):
    """
    Bad geometry is refused before or during the construction.
    :return: None
    """
    with pytest.raises(error):
        build_elliptic_weight(Mesh(10), **kwargs)


@pytest.mark.parametrize("n", [10, 20, 40])
def test_weight_geometry(n):
    """
    psi_r is a cap over a lens omega_r that meets x1 = 1 strictly inside Gamma_0: psi_r <= 1 on
    the square and <= 1/2 on omega_r, positive on the edge only inside the interval, with a
    negative outward slope on the arc.
    :return: None
    """
    mesh = Mesh(n)
    weight = build_elliptic_weight(mesh)
    assert weight_failures(weight, mesh) == []
    assert weight.gap > 0.0

    xs = np.linspace(0.0, 1.0, 401)
    x1, x2 = np.meshgrid(xs, xs, indexing="ij")
    assert np.max(weight.psi(x1, x2)) <= 1.0 + 1e-12
    omega = weight.omega_nodes(mesh)
    assert omega.any()
    node_psi = weight.psi(*mesh.nodes())[omega]
    assert np.all(node_psi > 0.0) and np.all(node_psi <= 0.5 + 1e-12)

    lo, hi = weight.interval
    on_edge = weight.psi(np.ones_like(xs), xs) > 0.0
    assert on_edge.any()
    assert np.all((xs[on_edge] > lo) & (xs[on_edge] < hi))

    c1, c2 = weight.centre
    opening = math.acos(weight.kappa / weight.rho)
    angles = np.linspace(math.pi - 0.99 * opening, math.pi + 0.99 * opening, 200)
    a1, a2 = c1 + weight.rho * np.cos(angles), c2 + weight.rho * np.sin(angles)
    g1, g2 = weight.grad_psi(a1, a2)
    assert np.all(g1 * np.cos(angles) + g2 * np.sin(angles) < 0.0)
    np.testing.assert_allclose(weight.psi(a1, a2), 0.0, atol=1e-12)


def test_solver_is_self_adjoint():
    """
    <solve(g1), g2> = <g1, solve(g2)> for a positive potential.
    :return: None
    """
    mesh = Mesh(12)
    q = NodeField.from_function(mesh, lambda x1, x2: 1.0 + x1 * x2)
    rng = np.random.default_rng(3)
    g1, g2 = (NodeField(mesh, rng.standard_normal(mesh.shape)) for _ in range(2))
    w1 = solve_elliptic(EllipticProblem(mesh, q, g1))
    w2 = solve_elliptic(EllipticProblem(mesh, q, g2))
    left = float(np.sum(w1.interior * g2.interior))
    right = float(np.sum(g1.interior * w2.interior))
    assert left == pytest.approx(right, rel=1e-9)


def test_cylinder_operator_vanishes_at_the_ends(weight_and_bump):
    """
    The cylinder operator is zero at s = +-3 and on the boundary ring.
    :return: None
    """
    _, _, w = weight_and_bump
    out = apply_cylinder_operator(w)
    assert not np.any(out.values[[0, -1]])
    assert not np.any(out.values[:, 0, :])


def test_zero_field_has_zero_ratio(weight_and_bump):
    """
    Both sides vanish for w = 0.
    :return: None
    """
    mesh, weight, w = weight_and_bump
    result = elliptic_carleman_functionals(weight, CylinderField.zeros(mesh, w.s), 2.0)
    assert result.lhs == 0.0
    assert result.ratio == 0.0


def test_functionals_are_scale_invariant(weight_and_bump):
    """
    Doubling w multiplies both sides by 4.
    :return: None
    """
    mesh, weight, w = weight_and_bump
    tau = 0.1 / mesh.h
    single = elliptic_carleman_functionals(weight, w, tau)
    double = elliptic_carleman_functionals(weight, 2.0 * w, tau)
    assert single.rhs > 0.0
    assert double.ratio == pytest.approx(single.ratio, rel=1e-10)
    assert double.lhs == pytest.approx(4.0 * single.lhs, rel=1e-10)


def test_functional_errors(weight_and_bump):
    """
    Fields outside the support, and tau h above the bound, are rejected.
    :return: None
    """
    mesh, weight, w = weight_and_bump
    values = np.zeros(w.values.shape)
    values[w.s.size // 2, 1, 1] = 1.0
    stray = CylinderField(mesh, w.s, values)
    with pytest.raises(ValueError, match="not supported"):
        elliptic_carleman_functionals(weight, stray, 1.0)
    with pytest.raises(InadmissibleParameterError):
        elliptic_carleman_functionals(weight, w, 1.0 / mesh.h)
    with pytest.raises(ValueError):
        elliptic_carleman_functionals(weight, w, -1.0)


def test_elliptic_sweep():
    """
    The sweep reports a finite positive ratio per mesh size.
    :return: None
    """
    rows = elliptic_carleman_sweep([10])
    assert len(rows) == 1
    assert math.isfinite(rows[0]["ratio"]) and rows[0]["ratio"] > 0.0
    assert rows[0]["tau"] == pytest.approx(0.1 * 11)
