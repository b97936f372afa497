import numpy as np
import pytest

from pywclab.wclab.carleman_hyperbolic import (
    CarlemanParams,
    InadmissibleParameterError,
    carleman_functionals,
    carleman_sweep,
    coefficients,
    conjugate_apply,
    cross_product_terms,
    kavian_jet,
    prox_constants,
    random_jet,
    rest_operator_constant,
    split,
    time_cutoff,
    time_grid,
    weight_comparison,
    weight_fields,
)
from pywclab.wclab.constants import C0_MARGIN, CARLEMAN_DT_FACTOR
from pywclab.wclab.diffops import BoundaryConditionError, laplacian_array
from pywclab.wclab.grid import Mesh


def _setup(n: int = 4, tau_h: float = 0.01, seed: int = 7):
    mesh = Mesh(n)
    times = time_grid(1.6, CARLEMAN_DT_FACTOR * mesh.h)
    p = CarlemanParams.gamma_preset(1.6).with_tau(tau_h / mesh.h)
    jet = random_jet(mesh, times, np.random.default_rng(seed))
    return mesh, times, p, jet


def _max_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a))))


def test_gamma_preset():
    """
    The Gamma weight at T = 1.6 uses a = 0.07 and keeps psi >= 1 with the margin.
    :return: None
    """
    p = CarlemanParams.gamma_preset(1.6)
    assert p.a == pytest.approx(0.07)
    assert p.beta == pytest.approx(0.9453125)
    assert p.psi_min == pytest.approx(1.0 + C0_MARGIN)
    comparison = weight_comparison(p)
    assert comparison["holds"] == 1.0
    assert comparison["sup_layer"] <= comparison["inf_center"]
    with pytest.raises(ValueError):
        CarlemanParams.gamma_preset(1.2)


@pytest.mark.parametrize(
    "kwargs",
    [
        {"a": 0.0, "beta": 0.5, "c0": 5.0},
        {"a": 0.1, "beta": 1.0, "c0": 5.0},
        {"a": 0.1, "beta": 0.5, "c0": 5.0, "mu": 0.5},
        {"a": 0.1, "beta": 0.5, "c0": 5.0, "tau": -1.0},
        {"a": 0.1, "beta": 0.9, "c0": 0.0},
    ],
)
def test_invalid_parameters(kwargs):
    """
    Out-of-range parameters, and c0 too small for psi >= 1, are rejected.
    :return: None
    """
    with pytest.raises(ValueError):
        CarlemanParams(**kwargs)


def test_admissibility():
    """
    tau h above the bound is inadmissible.
    :return: None
    """
    p = CarlemanParams.gamma_preset(1.6)
    p.with_tau(2.0).check_admissible(0.1)
    with pytest.raises(InadmissibleParameterError):
        p.with_tau(10.0).check_admissible(0.1)


def test_time_grid_and_cutoff():
    """
    The time grid is symmetric with t = 0 as a node; the cutoff is flat inside and vanishes at
    the ends with its derivative.
    :return: None
    """
    times = time_grid(1.0, 0.3)
    assert times.size == 9
    assert times[4] == pytest.approx(0.0, abs=1e-15)
    chi, d_chi, _ = time_cutoff(times, 1.0)
    assert chi[4] == pytest.approx(1.0)
    np.testing.assert_allclose(chi[[0, -1]], 0.0)
    np.testing.assert_allclose(d_chi[[0, -1]], 0.0)
    with pytest.raises(ValueError):
        time_cutoff(times, 1.0, width=2.0)


def test_random_jets_are_admissible():
    """
    Random fields vanish on the boundary and at +-T; odd ones also vanish at t = 0.
    :return: None
    """
    mesh, times, _, jet = _setup()
    jet.check_admissible()
    odd = random_jet(mesh, times, np.random.default_rng(1), odd=True)
    odd.check_admissible()
    assert np.max(np.abs(odd.v[times.size // 2])) < 1e-12


def test_conjugate_operator_without_weight():
    """
    With tau = 0 both routes reduce to d_tt v - Delta_h v.
    :return: None
    """
    mesh, times, p, jet = _setup()
    p0 = p.with_tau(0.0)
    route_a, route_b = conjugate_apply(p0, coefficients(p0, mesh, times, order=8), jet)
    box = jet.vtt - laplacian_array(jet.v, mesh.h)
    box[:, 0, :] = box[:, -1, :] = box[:, :, 0] = box[:, :, -1] = 0.0
    np.testing.assert_allclose(route_a.values, box, atol=1e-9)
    np.testing.assert_allclose(route_b.values, box, atol=1e-9)


def test_conjugate_operator_routes_agree():
    """
    The neighbour-ratio route and the expanded route give the same operator.
    :return: None
    """
    mesh, times, p, jet = _setup()
    coeffs = coefficients(p, mesh, times)
    route_a, route_b = conjugate_apply(p, coeffs, jet)
    assert _max_gap(route_a.values, route_b.values) < 1e-8
    l1, l2, rest = split(p, coeffs, jet)
    assert _max_gap(route_b.values, l1.values + l2.values - rest.values) < 1e-10


def test_cross_products_sum_to_direct_integral():
    """
    The nine products I_nm add up to the integral of L1 v . L2 v.
    :return: None
    """
    mesh, times, p, jet = _setup()
    record = cross_product_terms(p, coefficients(p, mesh, times), jet)
    scale = sum(abs(record[f"I{n}{m}"]) for n in (1, 2, 3) for m in (1, 2, 3))
    assert abs(record["I_total"] - record["I_direct"]) <= 1e-9 * scale
    assert record["L1_norm_sq"] >= 0.0
    assert record["I_gamma"] == pytest.approx(record["I_gamma_minus"] + record["I_gamma_plus"])


def test_fitted_constants():
    """
    The fitted constants are finite and need tau > 0.
    :return: None
    """
    mesh, times, p, jet = _setup()
    coeffs = coefficients(p, mesh, times)
    constants = prox_constants(p, coeffs)
    assert len(constants) == 10
    assert all(np.isfinite(value) and value >= 0.0 for value in constants.values())
    assert np.isfinite(rest_operator_constant(p, coeffs, jet))
    p0 = p.with_tau(0.0)
    with pytest.raises(ValueError):
        prox_constants(p0, coefficients(p0, mesh, times, order=8))


@pytest.mark.parametrize("variant", ["boundary", "distributed"])
def test_functionals_are_scale_invariant(variant):
    """
    Both sides are quadratic in the field, so the ratio does not change when it is doubled.
    :return: None
    """
    mesh, times, p, jet = _setup(tau_h=0.1)
    weights = weight_fields(p, mesh, times)
    single = carleman_functionals(p, weights, jet, variant)
    double = carleman_functionals(p, weights, jet + jet, variant)
    assert single.lhs > 0.0 and single.rhs > 0.0
    assert double.ratio == pytest.approx(single.ratio, rel=1e-10)
    assert double.lhs == pytest.approx(4.0 * single.lhs, rel=1e-10)


def test_functional_errors():
    """
    Unknown variants and fields not vanishing at t = 0 for the t0 variant are rejected.
    :return: None
    """
    mesh, times, p, jet = _setup(tau_h=0.1)
    weights = weight_fields(p, mesh, times)
    with pytest.raises(ValueError):
        carleman_functionals(p, weights, jet, "interior")
    with pytest.raises(BoundaryConditionError):
        carleman_functionals(p, weights, kavian_jet(mesh, times), "t0")
    odd = carleman_functionals(p, weights, kavian_jet(mesh, times, odd=True), "t0")
    assert odd.lhs == pytest.approx(odd.terms["lhs_t0"])
    with pytest.raises(ValueError):
        carleman_functionals(p.with_tau(1.0), weights, jet)


def test_carleman_sweep():
    """
    One row per term, random samples and the Kavian wave included; deterministic in the seed
    and the number of threads.
    :return: None
    """
    rows, summary = carleman_sweep("boundary", [3], [0.1], samples=2, seed=5)
    assert len(rows) == 3 * 6
    assert {row["sample"] for row in rows} == {0, 1, "kavian"}
    assert list(summary) == [3]
    assert summary[3] > 0.0
    again, _ = carleman_sweep("boundary", [3], [0.1], samples=2, seed=5, threads=2)
    assert [row["value"] for row in again] == [row["value"] for row in rows]
    with pytest.raises(InadmissibleParameterError):
        carleman_sweep("boundary", [3], [0.5], samples=1)
