import math

import numpy as np
import pytest

from pywclab.wclab.carleman_elliptic import build_elliptic_weight
from pywclab.wclab.fbi import (
    CutoffSet,
    FbiConstants,
    FbiKernel,
    StageError,
    StripWidthError,
    approximate_identity_constant,
    closed_form_error,
    fbi_transform,
    fourier_identity_error,
    holomorphy_residual,
    kernel_decay_check,
    kernel_eval,
    log_bound,
    log_stability_experiment,
    measurement_sweep,
    select_lambda,
    standing_wave_identity_constant,
    step5_bound,
    symmetric_wave_solution,
)
from pywclab.wclab.grid import Mesh, NodeField
from pywclab.wclab.wavesolve import TimeSeries, sine_mode


def _constants(**kwargs) -> FbiConstants:
    values = dict(
        gamma=0.75,
        alpha=2.0 / 3.0,
        c0=1.0,
        c1=1.0,
        c3=1.0,
        c4=1.0,
        c5=0.0,
        c6=1.0,
        gap=1.0,
        lambda_star=1.0,
        eps_star=1.0,
        lambda_max=10.0,
        T_large_enough=True,
    )
    values.update(kwargs)
    return FbiConstants(**values)


def _standing_wave(mesh: Mesh, T: float = 2.0, dt: float = 0.05) -> TimeSeries:
    times = np.arange(-T, T + 0.5 * dt, dt)
    values = np.cos(times)[:, None, None] * sine_mode(mesh).values[None]
    return TimeSeries(mesh, -T, dt, values)


@pytest.mark.parametrize("lam", [1.0, 4.0])
def test_closed_form_of_the_first_kernel(lam):
    """
    The order-1 kernel is the Gaussian lambda^{1/2} exp(-lambda z^2 / 4) / (2 sqrt(pi)).
    :return: None
    """
    assert closed_form_error(FbiKernel(n=1, lam=lam)) < 1e-8


def test_fourier_identity():
    """
    The Fourier transform of F_lambda is exp(-(xi / lambda^gamma)^{2n}).
    :return: None
    """
    assert fourier_identity_error(FbiKernel(n=1, lam=1.0)) < 1e-6
    with pytest.raises(ValueError):
        closed_form_error(FbiKernel(n=2))


def test_kernel_decay():
    """
    The fitted growth and decay bounds hold on every sample.
    :return: None
    """
    fitted = kernel_decay_check(FbiKernel(n=1, lam=1.0))
    assert fitted["violation"] <= 0.0
    assert fitted["c1"] > 0.0
    assert fitted["C0"] > 0.0


@pytest.mark.parametrize(
    "kwargs",
    [{"n": 0}, {"n": 1.5}, {"lam": 0.5}, {"strip": 0.0}, {"n": 1, "alpha": 0.5}],
)
def test_invalid_kernels(kwargs):
    """
    Bad orders, lambda < 1, empty strips and too small exponents are rejected.
    :return: None
    """
    with pytest.raises(ValueError):
        FbiKernel(**kwargs)


def test_strip_width():
    """
    Arguments outside the calibrated strip are refused.
    :return: None
    """
    k = FbiKernel(n=1)
    assert abs(kernel_eval(k, 0.0)) == pytest.approx(1.0 / (2.0 * math.sqrt(math.pi)))
    with pytest.raises(StripWidthError):
        kernel_eval(k, 1j * (k.strip + 1.0))


@pytest.mark.parametrize(
    "ratio,case",
    [(0.5, "lambda_star"), (math.exp(5.0) - 2.0, "lambda_0"), (math.exp(50.0), "h_limited")],
)
def test_select_lambda(ratio, case):
    """
    lambda_0 = log(2 + D/M) / c6 decides between the three cases.
    :return: None
    """
    chosen, lam, lambda_0 = select_lambda(_constants(), ratio, 1.0)
    assert chosen == case
    assert lambda_0 == pytest.approx(math.log(2.0 + ratio))
    if case == "lambda_0":
        assert lam == pytest.approx(5.0)


def test_select_lambda_without_measurement():
    """
    M = 0 sends lambda_0 to infinity and the choice to eps_*/h.
    :return: None
    """
    chosen, lam, lambda_0 = select_lambda(_constants(), 1.0, 0.0)
    assert chosen == "h_limited"
    assert lam == 10.0
    assert math.isinf(lambda_0)


def test_log_bound():
    """
    The bound vanishes with D and keeps only the h term when M = 0.
    :return: None
    """
    assert log_bound(0.0, 1.0, 0.1, 1.0) == 0.0
    assert log_bound(2.0, 0.0, 0.01, 1.0) == pytest.approx(0.2)
    assert log_bound(1.0, 1.0, 0.01, 1.0) == pytest.approx(math.log(3.0) ** -0.5 + 0.1)


def test_cutoffs():
    """
    eta is 1 on |t| <= T/2 and 0 beyond 3T/4; chi_S is 1 on |s| <= 2 and 0 at +-3.
    :return: None
    """
    cutoffs = CutoffSet(T=2.0, R=0.1, distance=lambda x1, x2: np.zeros(np.shape(x1)))
    np.testing.assert_allclose(cutoffs.eta(np.array([0.0, 1.0, 1.5, 2.0])), [1.0, 1.0, 0.0, 0.0])
    np.testing.assert_allclose(cutoffs.chi_s(np.array([0.0, 2.0, 3.0])), [1.0, 1.0, 0.0])
    assert cutoffs.chi_r(0.5, 0.5) == pytest.approx(1.0)
    assert cutoffs.bounds()["eta_d1"] > 0.0
    with pytest.raises(ValueError):
        CutoffSet(T=0.0, R=0.1, distance=cutoffs.distance)


def test_transform_is_holomorphic():
    """
    (a, s) -> v_{a,lambda}(s, x) satisfies the Cauchy-Riemann equation to differencing accuracy.
    :return: None
    """
    mesh = Mesh(4)
    zeta = _standing_wave(mesh)
    cutoffs = CutoffSet(T=2.0, R=0.1, distance=lambda x1, x2: np.zeros(np.shape(x1)))
    k = FbiKernel(lam=2.0)
    assert holomorphy_residual(k, 0.0, zeta, cutoffs, [0.0, 0.5]) < 1e-5
    field = fbi_transform(k, 0.0, zeta, cutoffs, [0.0, 1.0])
    assert field.values.shape == (2,) + mesh.shape
    assert not np.any(field.values[:, 0, :])
    with pytest.raises(ValueError):
        fbi_transform(k, 1.0, zeta, cutoffs)
    with pytest.raises(ValueError):
        fbi_transform(k, 0.0, zeta, cutoffs, [4.0])


def test_symmetric_wave_solution():
    """
    With zero initial velocity and no source the solution is even in time.
    :return: None
    """
    mesh = Mesh(5)
    zeta = symmetric_wave_solution(
        mesh, 0.5, NodeField.zeros(mesh), sine_mode(mesh), NodeField.zeros(mesh)
    )
    assert zeta.t0 == pytest.approx(-0.5)
    assert zeta.t1 == pytest.approx(0.5)
    np.testing.assert_allclose(zeta.values, zeta.values[::-1], atol=1e-12)
    np.testing.assert_allclose(zeta.values[len(zeta) // 2], sine_mode(mesh).values)


def test_experiment_rejects_one_sided_input():
    """
    A solution on [0, T] fails in the input stage.
    :return: None
    """
    mesh = Mesh(10)
    weight = build_elliptic_weight(mesh)
    zeta = TimeSeries(mesh, 0.0, 0.1, np.zeros((11,) + mesh.shape))
    with pytest.raises(StageError) as error:
        log_stability_experiment(zeta, weight)
    assert error.value.stage == "input"


@pytest.mark.slow
def test_log_stability_report():
    """
    The pipeline reports every constant, the selected case and both sides of the bound.
    :return: None
    """
    mesh = Mesh(10)
    weight = build_elliptic_weight(mesh)
    zeta = symmetric_wave_solution(
        mesh, 2.0, NodeField.zeros(mesh), sine_mode(mesh), NodeField.zeros(mesh)
    )
    report = log_stability_experiment(zeta, weight)
    assert set(report) == {"constants", "norms", "selection", "bounds", "elliptic", "ratios"}
    assert report["selection"]["case"] in ("lambda_star", "lambda_0", "h_limited")
    assert report["norms"]["D"] > 0.0 and report["norms"]["M"] > 0.0
    assert math.isfinite(report["elliptic"]["real"]["ratio"])
    selection = report["selection"]
    assert selection["lambda_eval"] == max(selection["lambda"], 1.0)
    assert report["bounds"]["step5_bound"] > 0.0
    rows = measurement_sweep(report, mesh.h, factors=(1.0, 2.0))
    assert [row["M"] for row in rows] == pytest.approx(
        [report["norms"]["M"], 2.0 * report["norms"]["M"]]
    )


def test_step5_bound_uses_the_evaluated_lambda():
    """
    Below lambda = 1 the bound is taken at lambda = 1, where the kernel is evaluated.
    :return: None
    """
    constants = _constants(c6=2.0)
    expected = 3.0 + math.exp(1.0) * 0.5
    assert step5_bound(constants, 3.0, 0.5, 0.25) == pytest.approx(expected)
    assert step5_bound(constants, 3.0, 0.5, 1.0) == pytest.approx(expected)
    assert step5_bound(constants, 0.0, 0.5, 0.25) == 0.0
    assert step5_bound(constants, 3.0, 0.5, 4.0) == pytest.approx(
        3.0 / 4.0**0.75 + math.exp(4.0) * 0.5
    )


def test_transform_is_linear():
    """
    The transform of a combination is the combination of the transforms.
    :return: None
    """
    mesh = Mesh(4)
    first = _standing_wave(mesh)
    second = TimeSeries(
        mesh,
        first.t0,
        first.dt,
        np.sin(2.0 * first.times)[:, None, None] * sine_mode(mesh, 2, 1).values[None],
    )
    combined = TimeSeries(mesh, first.t0, first.dt, 2.0 * first.values - 3.0 * second.values)
    cutoffs = CutoffSet(T=2.0, R=0.1, distance=lambda x1, x2: np.zeros(np.shape(x1)))
    k = FbiKernel(lam=4.0)
    s = [0.0, 0.5]
    expected = (
        2.0 * fbi_transform(k, 0.25, first, cutoffs, s).values
        - 3.0 * fbi_transform(k, 0.25, second, cutoffs, s).values
    )
    actual = fbi_transform(k, 0.25, combined, cutoffs, s).values
    np.testing.assert_allclose(actual, expected, atol=1e-12 * np.max(np.abs(expected)))


def test_approximate_identity():
    """
    At lambda = 64 the order-1 transform at s = 0 reproduces cos(t) times the mode within 3%.
    :return: None
    """
    mesh = Mesh(4)
    zeta = _standing_wave(mesh, T=16.0)
    cutoffs = CutoffSet(T=16.0, R=0.1, distance=lambda x1, x2: np.zeros(np.shape(x1)))
    k = FbiKernel(n=1, lam=64.0)
    for a in (0.0, 1.0):
        smoothed = fbi_transform(k, a, zeta, cutoffs, [0.0]).values[0]
        exact = math.cos(a) * sine_mode(mesh).values
        assert np.max(np.abs(smoothed - exact)) < 0.03 * np.max(np.abs(sine_mode(mesh).values))
        assert np.max(np.abs(smoothed.imag)) < 1e-10


def test_approximate_identity_constant():
    """
    The constant vanishes to rounding for zeta constant in time and decreases under doubling
    of lambda for a standing wave.
    :return: None
    """
    mesh = Mesh(4)
    T, dt = 16.0, 0.05
    times = np.linspace(-T, T, int(round(2 * T / dt)) + 1)
    values = np.ones(times.size)[:, None, None] * sine_mode(mesh).values[None]
    constant = TimeSeries(mesh, -T, dt, values)
    cutoffs = CutoffSet(T=T, R=0.1, distance=lambda x1, x2: np.zeros(np.shape(x1)))
    omega = np.ones(mesh.shape, dtype=bool)
    assert approximate_identity_constant(FbiKernel(lam=4.0), constant, cutoffs, omega, 4) < 1e-8

    coarse = standing_wave_identity_constant(FbiKernel(n=1, lam=4.0))
    fine = standing_wave_identity_constant(FbiKernel(n=1, lam=8.0))
    assert 0.0 < fine < coarse
    zero = TimeSeries(mesh, -T, dt, np.zeros_like(values))
    with pytest.raises(ValueError):
        approximate_identity_constant(FbiKernel(lam=4.0), zero, cutoffs, omega)
