import math

import numpy as np
import pytest

from pywclab.wclab.grid import Mesh, NodeField, edge_mask, norm, restrict
from pywclab.wclab.inverse import (
    ManufacturedSolution,
    benchmark_solution,
    consistency_data,
    convergence_study,
    error_monotone,
    gradient_check,
    lipschitz_sweep,
    measure,
    measurement_distance,
    product_norm_equivalence,
    reconstruct,
    sample_perturbation,
    smooth_potential,
)
from pywclab.wclab.wavesolve import TimeSeries


@pytest.fixture(scope="module")
def small_problem():
    mesh = Mesh(4)
    data = consistency_data(mesh, benchmark_solution(smooth_potential))
    gamma0 = edge_mask(mesh, ("x1+", "x2+"))
    measured = measure(data.solve(data.q), gamma0)
    start = data.q.values.copy()
    start[1:-1, 1:-1] = 1.0
    return data, measured, NodeField(mesh, start)


def test_consistency_data_is_exact():
    """
    a(t) r~_h(Y) solves the discrete system built by the consistency construction.
    :return: None
    """
    mesh = Mesh(6)
    reference = benchmark_solution()
    data = consistency_data(mesh, reference, T=1.6)
    sol = data.solve(data.q)
    expected = reference.a(1.6) * restrict(reference.Y, mesh, "cell_average").values
    np.testing.assert_allclose(sol.y.values[-1], expected, rtol=1e-10)
    with pytest.raises(ValueError):
        consistency_data(mesh, reference, alpha0=5.0)


def test_measurements():
    """
    A measurement is at distance zero from itself, and its discrete and continuous product
    norms are comparable.
    :return: None
    """
    mesh = Mesh(6)
    data = consistency_data(mesh, benchmark_solution())
    sol = data.solve(data.q)
    m = measure(sol, edge_mask(mesh, ("x1+", "x2+")))
    assert measurement_distance(m, m) == 0.0
    assert m.flux_norm > 0.0 and m.pen_norm > 0.0
    equivalence = product_norm_equivalence(m, sol.y)
    assert 0.5 <= equivalence["factor"] <= 2.0


def test_continuous_flux_needs_gradient():
    """
    The exact flux cannot be formed without the gradient of the profile.
    :return: None
    """
    reference = benchmark_solution()
    bare = ManufacturedSolution(
        a=reference.a, a_t=reference.a_t, a_tt=reference.a_tt, Y=reference.Y, q=reference.q
    )
    with pytest.raises(ValueError):
        bare.continuous_flux(Mesh(4), np.array([0.0]))
    assert reference.continuous_flux(Mesh(4), np.array([0.0, 1.0])).shape == (2, 4, 4)


@pytest.mark.parametrize("family", ["trig", "bump", "mixed"])
def test_sample_perturbation(family):
    """
    Perturbations vanish on the boundary and their max norm lies in (m/10, m].
    :return: None
    """
    mesh = Mesh(20)
    dq = sample_perturbation(mesh, np.random.default_rng(2), m=0.5, family=family)
    assert dq.is_dirichlet_zero()
    assert 0.05 < norm(dq, "Linf") <= 0.5 + 1e-12


def test_sample_perturbation_family():
    """
    Unknown families are rejected.
    :return: None
    """
    with pytest.raises(ValueError):
        sample_perturbation(Mesh(4), np.random.default_rng(0), family="noise")


def test_gradient_check(small_problem):
    """
    The adjoint gradient matches central differences away from the true potential.
    :return: None
    """
    data, measured, start = small_problem
    result = gradient_check(start, data, measured, np.random.default_rng(0), directions=3)
    assert result["max_relative_error"] < 1e-4
    assert len(result["relative_errors"]) == 3


def test_reconstruct_from_true_potential(small_problem):
    """
    Starting at the true potential stops immediately.
    :return: None
    """
    data, measured, _ = small_problem
    q, log = reconstruct(measured, data, data.q)
    assert log.converged
    assert log.message == "initial guess is stationary"
    np.testing.assert_array_equal(q.values, data.q.values)
    with pytest.raises(ValueError):
        reconstruct(measured, data, data.q, method="newton")


def test_lbfgs_reconstruction(small_problem):
    """
    L-BFGS decreases the objective and moves q towards the true potential.
    :return: None
    """
    data, measured, start = small_problem
    q, log = reconstruct(measured, data, start, method="lbfgs", max_iterations=20)
    assert log.iterations[-1]["J"] < log.iterations[0]["J"]
    assert norm(q - data.q) < norm(start - data.q)
    np.testing.assert_array_equal(q.values[0], data.q.values[0])


def test_descent_is_monotone(small_problem):
    """
    Armijo steps never increase the objective.
    :return: None
    """
    data, measured, start = small_problem
    _, log = reconstruct(measured, data, start, method="descent", max_iterations=3)
    values = [entry["J"] for entry in log.iterations]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_known_set_is_kept(small_problem):
    """
    Node values on the known set are fixed during the reconstruction.
    :return: None
    """
    data, measured, start = small_problem
    known = np.zeros(data.mesh.shape, dtype=bool)
    known[1:3, 1:3] = True
    q, _ = reconstruct(measured, data, start, max_iterations=5, known=known, known_values=data.q)
    np.testing.assert_array_equal(q.values[known], data.q.values[known])


def test_convergence_of_exact_restriction():
    """
    The piecewise constant extension of r~_h(q) converges at first order.
    :return: None
    """
    rows = convergence_study([8, 16], "exact")
    assert math.isnan(rows[0]["rate"])
    assert rows[1]["rate"] >= 0.9
    assert error_monotone(rows)
    with pytest.raises(ValueError):
        convergence_study([4], "fit")


def test_constant_potential_is_exact():
    """
    Constant potentials are reproduced without error.
    :return: None
    """
    rows = convergence_study([4], "exact", q_true=lambda x1, x2: 2.0 + 0.0 * x1)
    assert rows[0]["potential_error"] < 1e-12


def test_lipschitz_sweep():
    """
    Ratios are finite and positive, and do not depend on the number of threads.
    :return: None
    """
    records, summary = lipschitz_sweep([4], samples=2, seed=3, family="trig")
    assert len(records) == 2
    assert all(0.0 < r.ratio < math.inf for r in records)
    assert summary[4] == max(r.ratio for r in records)
    again, _ = lipschitz_sweep([4], samples=2, seed=3, family="trig", threads=2)
    assert [r.ratio for r in again] == [r.ratio for r in records]
    assert records[0].as_row()["N"] == 4


def test_lipschitz_sweep_log_variant():
    """
    The log variant reports the logarithmic bound of each pair.
    :return: None
    """
    records, _ = lipschitz_sweep([4], T=1.0, samples=1, family="trig", variant="log")
    assert records[0].bound > 0.0
    assert records[0].ratio == pytest.approx(records[0].dq_norm / records[0].bound)


def test_lipschitz_sweep_edge_cases():
    """
    Zero perturbations are skipped; a small K, a short T and unknown variants are rejected.
    :return: None
    """
    records, summary = lipschitz_sweep([4], samples=2, m=0.0)
    assert all(r.skipped == "identical potentials" for r in records)
    assert math.isnan(summary[4])
    with pytest.raises(ValueError):
        lipschitz_sweep([4], samples=1, K=1e-6)
    with pytest.raises(ValueError):
        lipschitz_sweep([4], T=1.0, samples=1)
    with pytest.raises(ValueError):
        lipschitz_sweep([4], samples=1, variant="interior")


def test_empty_convergence_study():
    """
    A convergence study without mesh sizes is refused.
    :return: None
    """
    with pytest.raises(ValueError):
        convergence_study([], "exact")


def test_lipschitz_sweep_energy_constant():
    """
    Each pair carries the fitted energy-bound constant, which is invariant under scaling of
    the perturbation to first order.
    :return: None
    """
    records, _ = lipschitz_sweep([6], samples=1, seed=5, family="trig", scales=(1e-3, 1e-2))
    constants = [r.energy_constant for r in records]
    assert all(0.0 < c < math.inf for c in constants)
    assert constants[0] == pytest.approx(constants[1], rel=0.05)
    assert records[0].as_row()["energy_constant"] == constants[0]


def test_lipschitz_ratio_is_scale_invariant():
    """
    For small perturbations the ratio |dq| / gap does not depend on the size of dq.
    :return: None
    """
    records, _ = lipschitz_sweep([6], samples=1, seed=5, family="trig", scales=(1e-3, 1e-2, 1e-1))
    ratios = [r.ratio for r in records]
    assert all(0.0 < r < math.inf for r in ratios)
    assert max(ratios) / min(ratios) < 1.2


def test_measure_is_linear():
    """
    The flux and penalization parts of a combination are the combinations of the parts.
    :return: None
    """
    mesh = Mesh(6)
    data = consistency_data(mesh, benchmark_solution())
    first = data.solve(data.q).y
    second = data.solve(data.q + NodeField(mesh, np.full(mesh.shape, 0.5))).y
    combined = TimeSeries(mesh, first.t0, first.dt, 2.0 * first.values - 3.0 * second.values)
    gamma0 = edge_mask(mesh, ("x1+", "x2+"))
    m1, m2, m = (measure(s, gamma0) for s in (first, second, combined))
    np.testing.assert_allclose(m.flux, 2.0 * m1.flux - 3.0 * m2.flux, atol=1e-10)
    for k in range(2):
        np.testing.assert_allclose(m.pen[k], 2.0 * m1.pen[k] - 3.0 * m2.pen[k], atol=1e-8)
