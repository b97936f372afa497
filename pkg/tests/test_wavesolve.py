import math

import numpy as np
import pytest

from pywclab.wclab.diffops import discrete_eigenvalue, laplacian_array
from pywclab.wclab.grid import Mesh, NodeField, convergence_rate, edge_mask, full_mask, norm
from pywclab.wclab.wavesolve import (
    CFLViolationError,
    TimeSeries,
    WaveProblem,
    energy,
    energy_array,
    energy_bound_constant,
    flux_measurement,
    kavian_field,
    penalization_norm,
    penalization_stream,
    second_time_derivative_matrix,
    sine_mode,
    solve,
    time_derivative_matrix,
)


def _standing_wave(n: int = 10, T: float = 1.0):
    mesh = Mesh(n)
    q = NodeField(mesh, np.ones(mesh.shape))
    problem = WaveProblem.create(mesh, q, sine_mode(mesh), T=T)
    return mesh, problem, solve(problem)


def test_standing_wave_matches_semi_discrete_solution():
    """
    With q = 1 the mode sin(pi x1) sin(pi x2) oscillates at omega^2 = lambda_h + 1.
    :return: None
    """
    mesh, problem, sol = _standing_wave()
    omega = math.sqrt(discrete_eigenvalue(mesh, 1, 1) + 1.0)
    expected = math.cos(omega * problem.T) * sine_mode(mesh).values
    np.testing.assert_allclose(sol.y.values[-1], expected, atol=1e-2)
    assert len(sol.y) == problem.n_steps + 1


def test_energy_is_conserved():
    """
    Without sources the energy stays constant up to the time discretization error.
    :return: None
    """
    _, _, sol = _standing_wave()
    energies = energy_array(sol)
    assert energies[0] > 0.0
    assert np.max(np.abs(energies - energies[0])) / energies[0] < 1e-2
    assert energy(sol, 0) == pytest.approx(energies[0])
    with pytest.raises(IndexError):
        energy(sol, len(sol.y))


def test_cfl_violation():
    """
    A time step above h / sqrt(2) is rejected before any step is taken.
    :return: None
    """
    mesh = Mesh(10)
    zero = NodeField.zeros(mesh)
    with pytest.raises(CFLViolationError):
        WaveProblem(mesh, zero, zero, zero, T=1.0, dt=0.5)


def test_initial_data_must_match_boundary_data():
    """
    y0 with nonzero boundary values needs matching boundary data.
    :return: None
    """
    mesh = Mesh(6)
    ones = NodeField(mesh, np.ones(mesh.shape))
    with pytest.raises(ValueError):
        WaveProblem.create(mesh, ones, ones)
    problem = WaveProblem.create(mesh, ones, ones, f_bdy=lambda t: np.ones((4, mesh.N)))
    sol = solve(problem)
    np.testing.assert_allclose(sol.y.values[-1][0, 1:-1], 1.0)


def test_time_derivative_matrices_are_exact_on_quadratics():
    """
    Both time difference operators differentiate t^2 exactly.
    :return: None
    """
    t = np.linspace(0.0, 1.0, 11)
    dt = t[1] - t[0]
    first = time_derivative_matrix(t.size, dt) @ t**2
    second = second_time_derivative_matrix(t.size, dt) @ t**2
    np.testing.assert_allclose(first, 2.0 * t, atol=1e-10)
    np.testing.assert_allclose(second, 2.0, atol=1e-8)
    with pytest.raises(ValueError):
        time_derivative_matrix(2, dt)


def test_time_series_interpolation_and_odd_extension():
    """
    TimeSeries.at interpolates linearly; the odd extension flips the sign for t < 0.
    :return: None
    """
    mesh = Mesh(3)
    values = np.arange(4.0)[:, None, None] * np.ones((4,) + mesh.shape)
    series = TimeSeries(mesh, 0.0, 0.5, values)
    assert series.t1 == pytest.approx(1.5)
    np.testing.assert_allclose(series.at(0.75), 1.5)
    odd = series.odd_extension()
    assert len(odd) == 7
    assert odd.t0 == pytest.approx(-1.5)
    np.testing.assert_allclose(odd.values[0], -3.0)
    with pytest.raises(ValueError):
        series.at(2.0)


def test_kavian_field_is_an_eigenvector():
    """
    The diagonal checkerboard field satisfies -Delta_h w = (4 / h^2) w.
    :return: None
    """
    mesh = Mesh(7)
    w = kavian_field(mesh)
    lap = laplacian_array(w.values, mesh.h)
    np.testing.assert_allclose(-lap[1:-1, 1:-1], 4.0 / mesh.h**2 * w.interior, atol=1e-9)


def test_flux_measurement():
    """
    Fluxes vanish off Gamma_0 and the penalization stream has staggered shapes.
    :return: None
    """
    mesh, _, sol = _standing_wave(n=6, T=0.5)
    gamma0 = edge_mask(mesh, ("x1+",))
    m = flux_measurement(sol, gamma0)
    assert m.flux.shape == (len(sol.y), 4, mesh.N)
    np.testing.assert_allclose(m.flux[:, 0], 0.0)
    assert m.flux_norm > 0.0
    pen = penalization_stream(sol)
    assert pen[0].shape == (len(sol.y),) + mesh.staggered_shape(1)
    assert pen[1].shape == (len(sol.y),) + mesh.staggered_shape(2)
    with pytest.raises(ValueError):
        flux_measurement(sol, full_mask(mesh))


def _max_relative(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / np.max(np.abs(b)))


def test_time_reversal():
    """
    Running back from (y(T), -d_t y(T)) returns to y0, with an error that shrinks under
    refinement.
    :return: None
    """
    errors = []
    for n in (10, 20, 40):
        mesh, problem, sol = _standing_wave(n=n)
        back = solve(
            WaveProblem.create(
                mesh,
                problem.q,
                sol.y.snapshot(len(sol.y) - 1),
                NodeField(mesh, -sol.velocity.values[-1]),
                T=problem.T,
            )
        )
        errors.append(_max_relative(back.y.values[-1], problem.y0.values))
    assert errors[0] < 5e-3
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.25 * errors[0]


def test_solution_is_additive():
    """
    The solution map is linear in (y0, y1, f) for zero boundary data.
    :return: None
    """
    mesh = Mesh(8)
    q = NodeField.from_function(mesh, lambda x1, x2: 1.0 + x1)
    y0, y1 = sine_mode(mesh), sine_mode(mesh, 2, 1)
    g = sine_mode(mesh, 1, 3).values

    def source(t):
        return math.cos(3.0 * t) * g

    zero = NodeField.zeros(mesh)
    first = solve(WaveProblem.create(mesh, q, y0, T=0.5))
    second = solve(WaveProblem.create(mesh, q, zero, y1, T=0.5, f=source))
    both = solve(WaveProblem.create(mesh, q, y0, y1, T=0.5, f=source))
    np.testing.assert_allclose(both.y.values, first.y.values + second.y.values, atol=1e-12)
    np.testing.assert_allclose(
        both.velocity.values, first.velocity.values + second.velocity.values, atol=1e-10
    )


@pytest.mark.parametrize("n", [10, 20])
def test_kavian_field_oscillates_at_the_grid_frequency(n):
    """
    With q = 0 and y1 = 0 the diagonal checkerboard evolves as cos(2 t / h) w over one period.
    :return: None
    """
    mesh = Mesh(n)
    w = kavian_field(mesh)
    problem = WaveProblem.create(
        mesh, NodeField.zeros(mesh), w, T=math.pi * mesh.h, dt_factor=0.02
    )
    sol = solve(problem)
    expected = np.cos(2.0 * sol.y.times / mesh.h)[:, None, None] * w.values[None]
    np.testing.assert_allclose(sol.y.values, expected, atol=1e-3)


def test_kavian_field_is_invisible_on_the_observed_sub_edge():
    """
    The flux of the checkerboard solution vanishes on {1} x (1/4, 3/4), while its penalization
    stream does not vanish and grows against the H1 norm of the data under refinement.
    :return: None
    """
    relative = []
    for n in (10, 20):
        mesh = Mesh(n)
        w = kavian_field(mesh)
        sol = solve(WaveProblem.create(mesh, NodeField.zeros(mesh), w, T=0.25))
        m = flux_measurement(sol, edge_mask(mesh, ("x1+",), (0.25, 0.75)))
        assert not np.any(m.flux)
        assert m.flux_norm == 0.0
        stream = penalization_norm(penalization_stream(sol), mesh, sol.y.dt)
        assert stream > 0.0
        relative.append(stream / norm(w, "H1"))
    assert relative[1] >= relative[0]


def test_penalization_stream_of_a_smooth_wave_is_first_order():
    """
    For a smooth standing wave the penalization stream decays like h.
    :return: None
    """
    streams, hs = [], []
    for n in (10, 20, 40):
        mesh, _, sol = _standing_wave(n=n)
        streams.append(penalization_norm(penalization_stream(sol), mesh, sol.y.dt))
        hs.append(mesh.h)
    assert np.all(convergence_rate(streams, hs) >= 0.9)


def test_energy_bound_constant():
    """
    The fitted energy constant of a small smooth perturbation is stable under refinement and
    undefined for equal potentials.
    :return: None
    """
    constants = []
    for n in (10, 20):
        mesh, problem, sol = _standing_wave(n=n)
        dq = NodeField.from_function(mesh, lambda x1, x2: 1e-2 * np.sin(np.pi * x1) * x2)
        perturbed = solve(WaveProblem.create(mesh, problem.q + dq, problem.y0, T=problem.T))
        constants.append(energy_bound_constant(sol, perturbed, dq))
    assert all(0.0 < c < math.inf for c in constants)
    assert max(constants) / min(constants) < 1.2
    with pytest.raises(ValueError):
        energy_bound_constant(sol, sol, NodeField.zeros(mesh))
