import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import trapezoid

from pywclab.wclab.constants import (
    C0_MARGIN,
    CARLEMAN_DT_FACTOR,
    CARLEMAN_VARIANTS,
    CUTOFF_WIDTH_FRACTION,
    DEFAULT_COLLAR_WIDTH,
    DEFAULT_EPS_TAU_H,
    DEFAULT_MU,
    DEFAULT_T_GAMMA,
    JET_TOLERANCE,
    QUADRATURE_MAX_ORDER,
    QUADRATURE_START_ORDER,
    QUADRATURE_TOLERANCE,
    TAU_SWEEP_POINTS,
    TAU_SWEEP_START,
    TAU_SWEEP_STOP_TAU_H,
)
from pywclab.wclab.diffops import (
    BoundaryConditionError,
    centered_array,
    forward_array,
    laplacian_array,
    laplacian_axis_array,
    mixed_forward_array,
    normal_difference_array,
)
from pywclab.wclab.grid import (
    Mesh,
    NodeField,
    SubsetMask,
    boundary_integral,
    collar_mask,
    edge_mask,
    interior_integral,
    staggered_integral,
    trace_array,
)
from pywclab.wclab.utils import map_samples, spawn_generators
from pywclab.wclab.wavesolve import (
    TimeSeries,
    apply_in_time,
    kavian_field,
    second_time_derivative_matrix,
    time_derivative_matrix,
)

"""
Carleman weights psi = |x - x_a|^2 - beta t^2 + c0 and phi = exp(mu psi) on [-T, T] x [0,1]^2,
the conjugate operator e^{tau phi} Box_h e^{-tau phi} with its quadrature-evaluated
coefficients A_{l,k}, its splitting into L1 + L2 = L_h + R, and the two sides of the
discrete hyperbolic Carleman estimates as evaluable functionals.

Space-time fields are node arrays of shape (nt, N+2, N+2) on a uniform, symmetric time grid
of [-T, T]. Weighted integrals use exp(2 tau (phi - max phi)); the shift is reported as
log_scale so that large tau stays in floating range.
"""

Temporal = Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray, np.ndarray]]


class InadmissibleParameterError(ValueError):
    """Raised when tau h exceeds the admissible bound of the estimate."""


class QuadratureError(RuntimeError):
    """Raised when the coefficient quadrature does not settle before the maximal order."""


@dataclass(frozen=True)
class CarlemanParams:
    """
    Parameters of the hyperbolic Carleman weight.

    Parameters:
        a (float): Offset of x_a = (-a, -a), a > 0.
        beta (float): Time coefficient of psi, in (0, 1).
        c0 (float): Shift making psi >= 1 on [-T, T] x [0,1]^2.
        mu (float): Exponent of phi, mu >= 1.
        tau (float): Carleman parameter, tau >= 0 (tau = 0 reduces every operator to Box_h).
        T (float): Half-length of the time interval.
        eps_tau_h (float): Admissibility bound tau h <= eps_tau_h.
    """

    a: float
    beta: float
    c0: float
    mu: float = DEFAULT_MU
    tau: float = 1.0
    T: float = DEFAULT_T_GAMMA
    eps_tau_h: float = DEFAULT_EPS_TAU_H

    def __post_init__(self):
        if self.a <= 0:
            raise ValueError(f"a must be positive, got {self.a}.")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}.")
        if self.mu < 1.0:
            raise ValueError(f"mu must be >= 1, got {self.mu}.")
        if self.tau < 0.0:
            raise ValueError(f"tau must be >= 0, got {self.tau}.")
        if self.T <= 0.0 or self.eps_tau_h <= 0.0:
            raise ValueError(f"T and eps_tau_h must be positive, got {self.T}, {self.eps_tau_h}.")
        if self.psi_min < 1.0 - 1e-12:
            raise ValueError(
                f"psi reaches {self.psi_min:.6g} < 1 at x=(0,0), t=+-T; "
                f"c0 must be >= {self.minimal_c0(self.a, self.beta, self.T) - C0_MARGIN:.6g}."
            )

    @staticmethod
    def minimal_c0(a: float, beta: float, T: float) -> float:
        """Smallest admissible c0 plus the margin: min psi = 2a^2 - beta T^2 + c0 = 1 + margin."""
        return 1.0 + beta * T * T - 2.0 * a * a + C0_MARGIN

    @classmethod
    def create(
        cls,
        a: float,
        beta: float,
        T: float = DEFAULT_T_GAMMA,
        c0: Optional[float] = None,
        **kwargs,
    ) -> "CarlemanParams":
        c0 = cls.minimal_c0(a, beta, T) if c0 is None else c0
        return cls(a=a, beta=beta, c0=c0, T=T, **kwargs)

    @classmethod
    def gamma_preset(cls, T: float = DEFAULT_T_GAMMA, **kwargs) -> "CarlemanParams":
        """
        Weight for the observation on Gamma_+ = {x1 = 1} u {x2 = 1}: a = (T^2 - 2)/8 and
        beta the midpoint of ((2 + 4a)/T^2, 1), so that beta T^2 > 2 + 4a and beta < 1.

        Raises:
            ValueError: If T <= sqrt(2).
        """
        if T <= math.sqrt(2.0):
            raise ValueError(f"The Gamma configuration needs T > sqrt(2), got T={T}.")
        a = (T * T - 2.0) / 8.0
        beta = 0.5 * ((2.0 + 4.0 * a) / (T * T) + 1.0)
        return cls.create(a, beta, T, **kwargs)

    @property
    def psi_min(self) -> float:
        return 2.0 * self.a**2 - self.beta * self.T**2 + self.c0

    @property
    def alpha1(self) -> float:
        return (self.beta + 1.0) / (self.beta + 2.0)

    @property
    def x_a(self) -> Tuple[float, float]:
        return (-self.a, -self.a)

    def with_tau(self, tau: float) -> "CarlemanParams":
        return replace(self, tau=tau)

    def psi(self, t, x1, x2) -> np.ndarray:
        return (x1 + self.a) ** 2 + (x2 + self.a) ** 2 - self.beta * np.square(t) + self.c0

    def phi(self, t, x1, x2) -> np.ndarray:
        return np.exp(self.mu * self.psi(t, x1, x2))

    def check_admissible(self, h: float) -> None:
        """
        Raises:
            InadmissibleParameterError: If tau h > eps_tau_h.
        """
        if self.tau * h > self.eps_tau_h * (1.0 + 1e-12):
            raise InadmissibleParameterError(
                f"inadmissible-parameter: tau*h = {self.tau * h:.4g} exceeds "
                f"eps = {self.eps_tau_h:.4g}"
            )

    def gamma_eta(self) -> float:
        """Width eta of the time layer on which psi stays below inf_x psi(0, x)."""
        threshold = (2.0 + 4.0 * self.a) / self.beta
        if self.T**2 <= threshold:
            raise ValueError(
                f"beta T^2 = {self.beta * self.T**2:.4g} must exceed "
                f"2 + 4a = {2 + 4 * self.a:.4g}."
            )
        return 0.9 * (self.T - math.sqrt(threshold))


def weight_comparison(p: CarlemanParams, eta: Optional[float] = None) -> Dict[str, float]:
    """
    Exact extrema of psi for the comparison of the weight near t = +-T with the weight at t = 0:
    sup over |t| in [T - eta, T] and x in [0,1]^2, and inf over x of psi(0, x).
    """
    eta = p.gamma_eta() if eta is None else eta
    if not 0.0 < eta <= p.T:
        raise ValueError(f"eta must lie in (0, T], got {eta}.")
    sup_layer = 2.0 * (1.0 + p.a) ** 2 - p.beta * (p.T - eta) ** 2 + p.c0
    inf_center = 2.0 * p.a**2 + p.c0
    return {
        "eta": eta,
        "sup_layer": sup_layer,
        "inf_center": inf_center,
        "holds": float(sup_layer <= inf_center),
    }


def time_grid(T: float, dt: float) -> np.ndarray:
    """Uniform grid of [-T, T] with an odd number of points, so that t = 0 is a node."""
    if T <= 0 or dt <= 0:
        raise ValueError(f"T and dt must be positive, got {T}, {dt}.")
    half = max(math.ceil(T / dt - 1e-9), 1)
    return np.linspace(-T, T, 2 * half + 1)


def tau_grid(
    h: float,
    start: float = TAU_SWEEP_START,
    stop_tau_h: float = TAU_SWEEP_STOP_TAU_H,
    points: int = TAU_SWEEP_POINTS,
) -> np.ndarray:
    """Geometric grid of tau from start to stop_tau_h / h."""
    stop = stop_tau_h / h
    if stop <= start:
        raise ValueError(f"Empty tau window: {start} >= {stop:.4g} at h={h:.4g}.")
    return np.geomspace(start, stop, points)


def _time_step(times: np.ndarray) -> float:
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 3:
        raise ValueError("A time grid needs at least 3 points.")
    steps = np.diff(times)
    if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps[0]:
        raise ValueError("The time grid must be uniform and increasing.")
    return float(steps[0])


def time_cutoff(
    t: np.ndarray, T: float, width: Optional[float] = None
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    C^2 cutoff chi with chi = 1 on |t| <= T - width and chi(+-T) = chi'(+-T) = chi''(+-T) = 0,
    built from the quintic smoothstep. Returns chi, chi', chi''.
    """
    width = CUTOFF_WIDTH_FRACTION * T if width is None else width
    if not 0.0 < width <= T:
        raise ValueError(f"Cutoff width must lie in (0, T], got {width}.")
    t = np.asarray(t, dtype=float)
    s = np.clip((T - np.abs(t)) / width, 0.0, 1.0)
    chi = s**3 * (10.0 - 15.0 * s + 6.0 * s * s)
    d_s = 30.0 * s * s * (1.0 - s) ** 2
    dd_s = 60.0 * s * (1.0 - s) * (1.0 - 2.0 * s)
    return chi, -np.sign(t) * d_s / width, dd_s / width**2


def harmonic(omega: float, phase: float = 0.0) -> Temporal:
    """theta(t) = cos(omega t + phase) with its first two derivatives."""

    def temporal(t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        arg = omega * t + phase
        return np.cos(arg), -omega * np.sin(arg), -omega * omega * np.cos(arg)

    return temporal


@dataclass(frozen=True, eq=False)
class SpaceTimeJet:
    """A space-time field v on a uniform grid of [-T, T] with d_t v and d_tt v."""

    mesh: Mesh
    times: np.ndarray
    v: np.ndarray
    vt: np.ndarray
    vtt: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        _time_step(times)
        shape = (times.size,) + self.mesh.shape
        for name in ("v", "vt", "vtt"):
            values = np.array(getattr(self, name), dtype=float)
            if values.shape != shape:
                raise ValueError(f"{name} must have shape {shape}, got {values.shape}.")
            values.setflags(write=False)
            object.__setattr__(self, name, values)
        times.setflags(write=False)
        object.__setattr__(self, "times", times)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def series(self) -> TimeSeries:
        return TimeSeries(self.mesh, float(self.times[0]), self.dt, self.v)

    @classmethod
    def from_series(cls, series: TimeSeries) -> "SpaceTimeJet":
        """Jet with time derivatives from the sparse difference operators."""
        nt = len(series)
        vt = apply_in_time(time_derivative_matrix(nt, series.dt), series.values)
        vtt = apply_in_time(second_time_derivative_matrix(nt, series.dt), series.values)
        return cls(series.mesh, series.times, series.values, vt, vtt)

    @classmethod
    def separable(
        cls,
        mesh: Mesh,
        times: np.ndarray,
        spatial: NodeField,
        temporal: Optional[Temporal] = None,
        width: Optional[float] = None,
    ) -> "SpaceTimeJet":
        """v(t, x) = chi(t) theta(t) g(x), with the cutoff chi of [-T, T], T = times[-1]."""
        mesh.check_same(spatial.mesh)
        times = np.asarray(times, dtype=float)
        chi, d_chi, dd_chi = time_cutoff(times, float(times[-1]), width)
        if temporal is None:
            th, d_th, dd_th = np.ones_like(times), np.zeros_like(times), np.zeros_like(times)
        else:
            th, d_th, dd_th = temporal(times)
        a0 = chi * th
        a1 = d_chi * th + chi * d_th
        a2 = dd_chi * th + 2.0 * d_chi * d_th + chi * dd_th
        g = spatial.values[None, :, :]
        return cls(
            mesh, times, a0[:, None, None] * g, a1[:, None, None] * g, a2[:, None, None] * g
        )

    def __add__(self, other: "SpaceTimeJet") -> "SpaceTimeJet":
        self.mesh.check_same(other.mesh)
        if self.times.shape != other.times.shape or not np.allclose(self.times, other.times):
            raise ValueError("Jets live on different time grids.")
        return SpaceTimeJet(
            self.mesh, self.times, self.v + other.v, self.vt + other.vt, self.vtt + other.vtt
        )

    def is_zero(self) -> bool:
        return not (np.any(self.v) or np.any(self.vt) or np.any(self.vtt))

    def check_admissible(self, atol: float = JET_TOLERANCE) -> None:
        """
        Raises:
            BoundaryConditionError: If v does not vanish on the boundary of the square, or v and
                d_t v do not vanish at t = +-T.
        """
        scale = max(1.0, float(np.max(np.abs(self.v))))
        ring = np.concatenate(
            [self.v[:, 0, :], self.v[:, -1, :], self.v[:, :, 0], self.v[:, :, -1]], axis=1
        )
        if np.max(np.abs(ring)) > atol * scale:
            raise BoundaryConditionError("The field must vanish on the boundary at every time.")
        ends = np.abs(np.stack([self.v[0], self.v[-1], self.vt[0], self.vt[-1]]))
        if np.max(ends) > atol * max(scale, float(np.max(np.abs(self.vt)))):
            raise BoundaryConditionError("The field and its time derivative must vanish at +-T.")


def random_jet(
    mesh: Mesh, times: np.ndarray, rng: np.random.Generator, terms: int = 3, odd: bool = False
) -> SpaceTimeJet:
    """
    Admissible random field: a sum of cutoff harmonics times random interior node values.
    With odd=True every harmonic is a sine, so the field vanishes at t = 0.
    """
    jet = None
    for _ in range(terms):
        values = np.zeros(mesh.shape)
        values[1:-1, 1:-1] = rng.standard_normal((mesh.N, mesh.N))
        omega, phase = rng.uniform(0.5, 4.0), rng.uniform(0.0, 2.0 * math.pi)
        temporal = harmonic(omega, -0.5 * math.pi if odd else phase)
        term = SpaceTimeJet.separable(mesh, times, NodeField(mesh, values), temporal)
        jet = term if jet is None else jet + term
    return jet


def standing_wave_jet(
    mesh: Mesh, times: np.ndarray, spatial: NodeField, eigenvalue: float, odd: bool = False
) -> SpaceTimeJet:
    """Cutoff standing wave chi(t) cos(sqrt(lambda) t) g(x), or the sine for odd=True."""
    omega = math.sqrt(eigenvalue)
    return SpaceTimeJet.separable(
        mesh, times, spatial, harmonic(omega, -0.5 * math.pi if odd else 0.0)
    )


def kavian_jet(mesh: Mesh, times: np.ndarray, odd: bool = False) -> SpaceTimeJet:
    """Standing wave of the diagonal checkerboard field, -Delta_h w = (4/h^2) w."""
    return standing_wave_jet(mesh, times, kavian_field(mesh), 4.0 / mesh.h**2, odd)


@dataclass(frozen=True, eq=False)
class WeightFields:
    """psi and phi sampled at the nodes over a time grid, with their analytic derivatives."""

    params: CarlemanParams
    mesh: Mesh
    times: np.ndarray
    psi: TimeSeries
    phi: TimeSeries
    psi_t: np.ndarray
    psi_tt: float
    grad_psi: Tuple[np.ndarray, np.ndarray]

    def check_against(self, p: CarlemanParams, jet: SpaceTimeJet) -> None:
        if self.params != p:
            raise ValueError("The weight fields were built for other parameters.")
        self.mesh.check_same(jet.mesh)
        if self.times.shape != jet.times.shape or not np.allclose(self.times, jet.times):
            raise ValueError("The weight fields and the field live on different time grids.")


def weight_fields(p: CarlemanParams, mesh: Mesh, times: np.ndarray) -> WeightFields:
    """
    Pointwise psi_h and phi_h = exp(mu psi_h) at the nodes, with d_t psi = -2 beta t and
    d_tt psi = -2 beta.
    """
    times = np.array(times, dtype=float)
    dt = _time_step(times)
    x1, x2 = mesh.nodes()
    psi = p.psi(times[:, None, None], x1[None], x2[None])
    return WeightFields(
        params=p,
        mesh=mesh,
        times=times,
        psi=TimeSeries(mesh, float(times[0]), dt, psi),
        phi=TimeSeries(mesh, float(times[0]), dt, np.exp(p.mu * psi)),
        psi_t=-2.0 * p.beta * times,
        psi_tt=-2.0 * p.beta,
        grad_psi=(2.0 * (x1 + p.a), 2.0 * (x2 + p.a)),
    )


@dataclass(frozen=True, eq=False)
class ConjugateCoefficients:
    """
    Coefficients A_{l,k}, l in 0..4, k in 1..2, of the expanded conjugate operator on the
    closure of Omega_h over the time grid. values has shape (5, 2, nt, N+2, N+2).
    """

    weights: WeightFields
    values: np.ndarray
    order: int

    @property
    def params(self) -> CarlemanParams:
        return self.weights.params

    @property
    def mesh(self) -> Mesh:
        return self.weights.mesh

    @property
    def times(self) -> np.ndarray:
        return self.weights.times

    def A(self, ell: int, k: int) -> np.ndarray:
        return self.values[ell, k - 1]

    def total(self, ell: int) -> np.ndarray:
        return self.values[ell, 0] + self.values[ell, 1]

    def field(self, ell: int, k: int) -> TimeSeries:
        w = self.weights
        return TimeSeries(w.mesh, float(w.times[0]), w.psi.dt, self.A(ell, k))


def _coefficients_at_order(
    p: CarlemanParams, weights: WeightFields, order: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre evaluation on [-1, 0] and [0, 1]; returns the values and the integrals of
    the absolute integrands."""
    mesh = weights.mesh
    h = mesh.h
    nodes, gauss_weights = leggauss(order)
    sigma = np.concatenate([(nodes - 1.0) / 2.0, (nodes + 1.0) / 2.0])
    w = np.concatenate([gauss_weights, gauss_weights]) / 2.0
    t2 = np.square(weights.times)[:, None, None]
    x1, x2 = mesh.nodes()
    phi0 = weights.phi.values
    shape = (5, 2) + phi0.shape
    values = np.zeros(shape)
    scale = np.zeros(shape)
    for k in (1, 2):
        along, across = (x1, x2) if k == 1 else (x2, x1)
        rest = (across + p.a) ** 2 - p.beta * t2 + p.c0
        for s, ws in zip(sigma, w):
            d_psi = 2.0 * (along + s * h + p.a)
            phi_s = np.exp(p.mu * (0.25 * d_psi * d_psi + rest))
            base = phi_s * np.exp(-p.tau * (phi_s - phi0))
            tri = ws * (1.0 - abs(s))
            terms = (
                0.5 * ws * base * d_psi,
                tri * base * phi_s * d_psi * d_psi,
                tri * base * d_psi * d_psi,
                tri * base * 2.0,
            )
            for ell, term in enumerate(terms, start=1):
                values[ell, k - 1] += term
                scale[ell, k - 1] += np.abs(term)
    tm, tmm = p.tau * p.mu, p.tau * p.mu * p.mu
    values[0] = 0.5 * h * h * (tm * tm * values[2] - tmm * values[3] - tm * values[4])
    scale[0] = 0.5 * h * h * (tm * tm * scale[2] + tmm * scale[3] + tm * scale[4])
    return values, scale


def _relative_gap(coarse: np.ndarray, fine: np.ndarray, scale: np.ndarray) -> float:
    gap = np.abs(coarse - fine)
    return float(np.max(np.divide(gap, scale, out=np.zeros_like(gap), where=scale > 0)))


def coefficients(
    p: CarlemanParams,
    mesh: Mesh,
    times: np.ndarray,
    order: Optional[int] = None,
    tolerance: float = QUADRATURE_TOLERANCE,
) -> ConjugateCoefficients:
    """
    Coefficients A_{l,k} of the expanded conjugate operator by Gauss-Legendre quadrature in
    sigma of the exact integrands, split at sigma = 0 where the kernel 1 - |sigma| has a kink.

    Parameters:
        p (CarlemanParams): Weight parameters.
        mesh (Mesh): Space grid.
        times (np.ndarray): Uniform time grid of [-T, T].
        order (int): Fixed Gauss order per half interval. By default the order doubles from
            16 until two successive orders agree to the tolerance.
        tolerance (float): Relative agreement required between successive orders.

    Raises:
        InadmissibleParameterError: If tau h > eps_tau_h.
        QuadratureError: If the orders still disagree at the maximal order.
    """
    p.check_admissible(mesh.h)
    weights = weight_fields(p, mesh, times)
    if order is not None:
        values, _ = _coefficients_at_order(p, weights, order)
        return ConjugateCoefficients(weights, values, order)

    order = QUADRATURE_START_ORDER
    values, _ = _coefficients_at_order(p, weights, order)
    while 2 * order <= QUADRATURE_MAX_ORDER:
        finer, scale = _coefficients_at_order(p, weights, 2 * order)
        gap = _relative_gap(values, finer, scale)
        logging.info(f"Coefficient quadrature: order {order} vs {2 * order}, gap {gap:.3e}")
        if gap <= tolerance:
            return ConjugateCoefficients(weights, finer, 2 * order)
        order *= 2
        values = finer
    raise QuadratureError(
        f"Coefficient quadrature did not settle below {tolerance:.1e} at order {order} "
        f"(tau={p.tau:.4g}, h={mesh.h:.4g})."
    )


def _on_interior(values: np.ndarray) -> np.ndarray:
    out = np.zeros_like(values)
    out[..., 1:-1, 1:-1] = values[..., 1:-1, 1:-1]
    return out


def _check_inputs(p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet) -> None:
    coeffs.weights.check_against(p, v)
    p.check_admissible(v.mesh.h)
    v.check_admissible()


def _time_part(p: CarlemanParams, weights: WeightFields, v: SpaceTimeJet) -> np.ndarray:
    """e^{tau phi} d_tt (e^{-tau phi} v) by the product rule."""
    phi = weights.phi.values
    pt = weights.psi_t[:, None, None]
    tm = p.tau * p.mu
    zero_order = (
        tm * tm * phi * phi * pt * pt - tm * p.mu * phi * pt * pt - tm * phi * weights.psi_tt
    )
    return v.vtt - 2.0 * tm * phi * pt * v.vt + zero_order * v.v


def _neighbours(values: np.ndarray, axis: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if axis == 1:
        return values[..., 1:-1, 1:-1], values[..., 2:, 1:-1], values[..., :-2, 1:-1]
    return values[..., 1:-1, 1:-1], values[..., 1:-1, 2:], values[..., 1:-1, :-2]


def _space_part_direct(p: CarlemanParams, weights: WeightFields, v: SpaceTimeJet) -> np.ndarray:
    """-e^{tau phi} Delta_h (e^{-tau phi} v) with the neighbour ratios of the weight."""
    h = v.mesh.h
    out = np.zeros_like(v.v)
    for k in (1, 2):
        phi_c, phi_p, phi_m = _neighbours(weights.phi.values, k)
        v_c, v_p, v_m = _neighbours(v.v, k)
        ratio_p = np.exp(-p.tau * (phi_p - phi_c))
        ratio_m = np.exp(-p.tau * (phi_m - phi_c))
        out[..., 1:-1, 1:-1] -= (ratio_p * v_p - 2.0 * v_c + ratio_m * v_m) / (h * h)
    return out


def _space_part_expanded(
    p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet
) -> np.ndarray:
    h = v.mesh.h
    tm = p.tau * p.mu
    out = np.zeros_like(v.v)
    for k in (1, 2):
        out -= (1.0 + coeffs.A(0, k)) * laplacian_axis_array(v.v, h, k)
        out += 2.0 * tm * coeffs.A(1, k) * centered_array(v.v, h, k)
        zero_order = tm * tm * coeffs.A(2, k) - tm * p.mu * coeffs.A(3, k) - tm * coeffs.A(4, k)
        out -= zero_order * v.v
    return _on_interior(out)


def conjugate_apply(
    p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet
) -> Tuple[TimeSeries, TimeSeries]:
    """
    The conjugate operator L_h v = e^{tau phi} Box_h (e^{-tau phi} v) by two routes: directly
    from the neighbour ratios of the weight (route A), and from the expanded formula with the
    coefficients A_{l,k} (route B). Both vanish on the boundary ring.

    Raises:
        BoundaryConditionError: If v is not admissible.
        InadmissibleParameterError: If tau h > eps_tau_h.
    """
    _check_inputs(p, coeffs, v)
    weights = coeffs.weights
    time_part = _on_interior(_time_part(p, weights, v))
    route_a = time_part + _space_part_direct(p, weights, v)
    route_b = time_part + _space_part_expanded(p, coeffs, v)
    t0, dt = float(v.times[0]), v.dt
    return TimeSeries(v.mesh, t0, dt, route_a), TimeSeries(v.mesh, t0, dt, route_b)


def _splitting_terms(
    p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet
) -> Tuple[Tuple[np.ndarray, ...], Tuple[np.ndarray, ...], np.ndarray]:
    """The three terms of L1, the three terms of L2, and R."""
    h = v.mesh.h
    w = coeffs.weights
    phi = w.phi.values
    pt = w.psi_t[:, None, None]
    tm = p.tau * p.mu
    a1 = p.alpha1

    l1 = (
        v.vtt,
        -sum((1.0 + coeffs.A(0, k)) * laplacian_axis_array(v.v, h, k) for k in (1, 2)),
        tm * tm * (phi * phi * pt * pt - coeffs.total(2)) * v.v,
    )
    l2 = (
        (a1 - 1.0) * tm * (phi * w.psi_tt - coeffs.total(4)) * v.v,
        -tm * p.mu * (phi * pt * pt - coeffs.total(3)) * v.v,
        -2.0
        * tm
        * (phi * pt * v.vt - sum(coeffs.A(1, k) * centered_array(v.v, h, k) for k in (1, 2))),
    )
    rest = a1 * tm * (phi * w.psi_tt - coeffs.total(4)) * v.v
    return (
        tuple(_on_interior(term) for term in l1),
        tuple(_on_interior(term) for term in l2),
        _on_interior(rest),
    )


def split(
    p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet
) -> Tuple[TimeSeries, TimeSeries, TimeSeries]:
    """
    The self-adjoint-like part L1 v, the skew part L2 v and the remainder R v, with
    L1 v + L2 v = L_h v + R v.
    """
    _check_inputs(p, coeffs, v)
    l1, l2, rest = _splitting_terms(p, coeffs, v)
    t0, dt = float(v.times[0]), v.dt
    return (
        TimeSeries(v.mesh, t0, dt, sum(l1)),
        TimeSeries(v.mesh, t0, dt, sum(l2)),
        TimeSeries(v.mesh, t0, dt, rest),
    )


def spacetime_integral(values: np.ndarray, h: float, dt: float, mask=None) -> float:
    """Trapezoid in time of the discrete integral over Omega_h."""
    return float(trapezoid(interior_integral(values, h, mask), dx=dt))


def spacetime_norm(values: np.ndarray, h: float, dt: float) -> float:
    return math.sqrt(max(spacetime_integral(values**2, h, dt), 0.0))


def left_nodes(values: np.ndarray, axis: int) -> np.ndarray:
    """Node values at the left nodes of Omega_{h,k}^-."""
    return values[..., :-1, 1:-1] if axis == 1 else values[..., 1:-1, :-1]


def staggered_spacetime_integral(values: np.ndarray, h: float, dt: float, mask=None) -> float:
    return float(trapezoid(staggered_integral(values, h, mask), dx=dt))


def cross_product_terms(
    p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet
) -> Dict[str, float]:
    """
    Products I_nm of the n-th term of L1 v with the m-th term of L2 v, their sum and the direct
    integral of L1 v . L2 v, and the grouped quantities: I_v and I_dv (leading order terms),
    I_gamma (boundary terms, split into the x_k = 0 and x_k = 1 parts) and I_tych. The
    remainder is the sum of the I_nm minus the grouped quantities. The norms of L1 v, L2 v,
    L_h v and R v are included.
    """
    _check_inputs(p, coeffs, v)
    mesh, h, dt = v.mesh, v.mesh.h, v.dt
    w = coeffs.weights
    tau, mu, a1, beta = p.tau, p.mu, p.alpha1, p.beta
    l1, l2, rest = _splitting_terms(p, coeffs, v)

    def st(values, mask=None):
        return spacetime_integral(values, h, dt, mask)

    record = {}
    for n in range(3):
        for m in range(3):
            record[f"I{n + 1}{m + 1}"] = st(l1[n] * l2[m])
    record["I_total"] = math.fsum(record[f"I{n}{m}"] for n in (1, 2, 3) for m in (1, 2, 3))
    l1v, l2v = sum(l1), sum(l2)
    record["I_direct"] = st(l1v * l2v)

    phi = w.phi.values
    pt = w.psi_t[:, None, None]
    ptt = w.psi_tt
    g1, g2 = w.grad_psi
    dist2 = 0.25 * (g1 * g1 + g2 * g2)
    x_term = pt * pt - (g1 * g1 + g2 * g2)
    big_g = 2.0 * mu * x_term**2 - 2.0 * a1 * (beta + 2.0) * x_term + 16.0 * (1.0 - beta) * dist2
    record["I_v"] = tau**3 * mu**3 * st(v.v**2 * phi**3 * big_g)

    c1, c2 = centered_array(v.v, h, 1), centered_array(v.v, h, 2)
    dot = c1 * g1 + c2 * g2
    lap_psi = 4.0
    i_dv = 2.0 * tau * mu * mu * st(v.vt**2 * phi * pt * pt)
    i_dv += 2.0 * tau * mu * mu * st(dot**2 * phi)
    i_dv -= 4.0 * tau * mu * mu * st(v.vt * pt * phi * dot)
    i_dv += tau * mu * st(v.vt**2 * phi * (2.0 * ptt - a1 * (ptt - lap_psi)))
    for k, (g, c) in enumerate(((g1, c1), (g2, c2)), start=1):
        fwd = forward_array(v.v, h, k)
        phi_k = left_nodes(phi, k)
        g_k = left_nodes(g, k)
        i_dv += tau * mu * staggered_spacetime_integral(
            fwd**2 * phi_k * (a1 * (ptt - lap_psi) + 4.0), h, dt
        )
        i_dv += 2.0 * tau * mu * mu * (
            staggered_spacetime_integral(fwd**2 * phi_k * g_k * g_k, h, dt)
            - st(c * c * phi * g * g)
        )
    record["I_dv"] = i_dv

    normal2 = normal_difference_array(v.v, h) ** 2
    flux_weight = np.stack(
        [trace_array(phi * g1)[..., 0, :], trace_array(phi * g1)[..., 1, :],
         trace_array(phi * g2)[..., 2, :], trace_array(phi * g2)[..., 3, :]],
        axis=-2,
    )
    per_edge = h * np.sum(normal2 * flux_weight, axis=-1)
    edge_terms = trapezoid(per_edge, dx=dt, axis=0)
    record["I_gamma_minus"] = tau * mu * float(edge_terms[0] + edge_terms[2])
    record["I_gamma_plus"] = -tau * mu * float(edge_terms[1] + edge_terms[3])
    record["I_gamma"] = record["I_gamma_minus"] + record["I_gamma_plus"]

    tych = 0.0
    for k in (1, 2):
        grad_t = h * forward_array(v.vt, h, k)
        tych -= 0.5 * tau * mu * staggered_spacetime_integral(
            grad_t**2 * forward_array(coeffs.A(1, k), h, k), h, dt
        )
    u12 = (1.0 + coeffs.A(0, 1)) * coeffs.A(1, 2)
    u21 = (1.0 + coeffs.A(0, 2)) * coeffs.A(1, 1)
    mixed_weight = np.diff(0.5 * (u12[..., 1:, :] + u12[..., :-1, :]), axis=-1) / h
    mixed_weight += np.diff(0.5 * (u21[..., :, 1:] + u21[..., :, :-1]), axis=-2) / h
    mixed = h * mixed_forward_array(v.v, h)
    tych += 0.5 * tau * mu * staggered_spacetime_integral(mixed**2 * mixed_weight, h, dt)
    record["I_tych"] = tych

    record["remainder"] = record["I_total"] - (
        record["I_v"] + record["I_dv"] + record["I_gamma"] + record["I_tych"]
    )
    record["L1_norm_sq"] = st(l1v**2)
    record["L2_norm_sq"] = st(l2v**2)
    record["Lh_norm_sq"] = st((l1v + l2v - rest) ** 2)
    record["R_norm_sq"] = st(rest**2)
    return record


def prox_constants(
    p: CarlemanParams, coeffs: ConjugateCoefficients
) -> Dict[Tuple[int, int], float]:
    """
    Fitted constants C_{l,k} = sup |A_{l,k} - f_{l,k}| / (tau h) over the time grid and the
    closure of Omega_h, with f_0 = 0, f_1 = phi d_k psi, f_2 = phi^2 (d_k psi)^2,
    f_3 = phi (d_k psi)^2 and f_4 = phi d_kk psi.
    """
    tau_h = p.tau * coeffs.mesh.h
    if tau_h <= 0.0:
        raise ValueError("The fitted constants need tau > 0.")
    phi = coeffs.weights.phi.values
    constants = {}
    for k, g in enumerate(coeffs.weights.grad_psi, start=1):
        limits = (np.zeros_like(phi), phi * g, (phi * g) ** 2, phi * g * g, 2.0 * phi)
        for ell, limit in enumerate(limits):
            constants[(ell, k)] = float(np.max(np.abs(coeffs.A(ell, k) - limit))) / tau_h
    logging.info(f"Fitted coefficient constants at tau*h={tau_h:.3g}: {constants}")
    return constants


def rest_operator_constant(
    p: CarlemanParams, coeffs: ConjugateCoefficients, v: SpaceTimeJet
) -> float:
    """Fitted constant |R v| / (tau |v|) in L2(-T, T; L2_h)."""
    _, _, rest = split(p, coeffs, v)
    h, dt = v.mesh.h, v.dt
    v_norm = spacetime_norm(v.v, h, dt)
    if p.tau == 0.0 or v_norm == 0.0:
        raise ValueError("The remainder constant needs tau > 0 and a nonzero field.")
    return spacetime_norm(rest.values, h, dt) / (p.tau * v_norm)


@dataclass(frozen=True)
class CarlemanTerms:
    """
    Both sides of a discrete Carleman estimate. Every term is scaled by exp(-log_scale);
    lhs, rhs and ratio do not depend on the scaling.
    """

    variant: str
    terms: Dict[str, float]
    lhs: float
    rhs: float
    log_scale: float
    ratio: float = field(init=False)

    def __post_init__(self):
        if self.rhs > 0.0:
            ratio = self.lhs / self.rhs
        else:
            ratio = 0.0 if self.lhs == 0.0 else math.inf
        object.__setattr__(self, "ratio", ratio)


def carleman_functionals(
    p: CarlemanParams,
    coeffs: Union[ConjugateCoefficients, WeightFields],
    w: SpaceTimeJet,
    variant: str = "boundary",
    gamma0: Optional[SubsetMask] = None,
    omega: Optional[SubsetMask] = None,
) -> CarlemanTerms:
    """
    Evaluate every term of the boundary, distributed or t = 0 Carleman estimate.

    Parameters:
        p (CarlemanParams): Weight parameters.
        coeffs: Coefficients or bare weight fields on the time grid of w. Only the weights are
            read.
        w (SpaceTimeJet): Admissible field; for "t0" it must also vanish at t = 0.
        variant (str): "boundary", "distributed" or "t0".
        gamma0 (SubsetMask): Boundary observation mask, Gamma_+ by default.
        omega (SubsetMask): Interior observation mask of the distributed variant, the collar of
            Gamma_+ by default.

    Returns:
        CarlemanTerms: The named terms "lhs_*" and "rhs_*", their sums and the ratio.

    Raises:
        InadmissibleParameterError: If tau h > eps_tau_h.
        BoundaryConditionError: If w is not admissible for the variant.
    """
    if variant not in CARLEMAN_VARIANTS:
        raise ValueError(f"Unknown variant '{variant}'. Expected one of {CARLEMAN_VARIANTS}.")
    weights = coeffs.weights if isinstance(coeffs, ConjugateCoefficients) else coeffs
    weights.check_against(p, w)
    mesh, h, dt, tau = w.mesh, w.mesh.h, w.dt, p.tau
    p.check_admissible(h)
    w.check_admissible()
    middle = w.times.size // 2
    if variant == "t0" and np.max(np.abs(w.v[middle])) > JET_TOLERANCE * max(
        1.0, float(np.max(np.abs(w.v)))
    ):
        raise BoundaryConditionError("The t0 variant needs a field vanishing at t = 0.")

    phi = weights.phi.values
    top = float(np.max(phi))
    log_scale = 2.0 * tau * top
    E = np.exp(2.0 * tau * (phi - top))

    def over_q(values, mask=None):
        return spacetime_integral(E * values, h, dt, mask)

    def over_staggered(fn, mask_fn=None):
        return math.fsum(
            staggered_spacetime_integral(
                left_nodes(E, k) * fn(k), h, dt, None if mask_fn is None else mask_fn(k)
            )
            for k in (1, 2)
        )

    terms = {
        "lhs_dt": tau * over_q(w.vt**2),
        "lhs_grad": tau * over_staggered(lambda k: forward_array(w.v, h, k) ** 2),
        "lhs_zero": tau**3 * over_q(w.v**2),
        "rhs_box": over_q((w.vtt - laplacian_array(w.v, h)) ** 2),
        "rhs_penalization": tau
        * h
        * h
        * over_staggered(lambda k: forward_array(w.vt, h, k) ** 2),
    }
    if variant in ("boundary", "t0"):
        gamma0 = edge_mask(mesh, ("x1+", "x2+")) if gamma0 is None else gamma0
        mesh.check_same(gamma0.mesh)
        if gamma0.kind != "boundary":
            raise ValueError("gamma0 must be a boundary mask.")
        flux2 = normal_difference_array(w.v, h) ** 2
        terms["rhs_boundary"] = tau * float(
            trapezoid(boundary_integral(trace_array(E) * flux2, h, gamma0.values), dx=dt)
        )
    else:
        omega = collar_mask(mesh, DEFAULT_COLLAR_WIDTH) if omega is None else omega
        mesh.check_same(omega.mesh)
        if omega.kind != "interior":
            raise ValueError("omega must be an interior mask.")
        terms["rhs_omega_dt"] = tau * over_q(w.vt**2, omega.values)
        terms["rhs_omega_grad"] = tau * over_staggered(
            lambda k: forward_array(w.v, h, k) ** 2, omega.staggered
        )
        terms["rhs_omega_zero"] = tau**3 * over_q(w.v**2, omega.values)

    if variant == "t0":
        terms["lhs_t0"] = math.sqrt(tau) * float(
            interior_integral(E[middle] * w.vt[middle] ** 2, h)
        )
        lhs = terms["lhs_t0"]
    else:
        lhs = math.fsum(terms[name] for name in ("lhs_dt", "lhs_grad", "lhs_zero"))
    rhs = math.fsum(value for name, value in terms.items() if name.startswith("rhs_"))
    return CarlemanTerms(variant=variant, terms=terms, lhs=lhs, rhs=rhs, log_scale=log_scale)


def carleman_sweep(
    variant: str,
    ns: Sequence[int],
    tau_hs: Sequence[float],
    samples: int = 20,
    seed: int = 0,
    T: float = DEFAULT_T_GAMMA,
    kavian: bool = True,
    threads: int = 1,
) -> Tuple[List[Dict[str, object]], Dict[int, float]]:
    """
    Empirical constants of a hyperbolic Carleman estimate for the Gamma preset weight.

    Every (N, tau h) pair evaluates the functionals on `samples` random admissible fields
    (sample k drawn from the k-th stream split from seed) and, with kavian=True, on the
    standing wave of the diagonal checkerboard field (sample "kavian").

    Returns:
        tuple: Rows (N, tau, sample, term_name, value, ratio), one per term, and the largest
            ratio over the random samples per N.

    Raises:
        InadmissibleParameterError: If some tau h exceeds the admissible bound.
    """
    if variant not in CARLEMAN_VARIANTS:
        raise ValueError(f"Unknown variant '{variant}'. Expected one of {CARLEMAN_VARIANTS}.")
    odd = variant == "t0"
    rows: List[Dict[str, object]] = []
    summary: Dict[int, float] = {}
    for n in ns:
        mesh = Mesh(n)
        times = time_grid(T, CARLEMAN_DT_FACTOR * mesh.h)
        worst = 0.0
        for tau_h in tau_hs:
            p = CarlemanParams.gamma_preset(T).with_tau(tau_h / mesh.h)
            p.check_admissible(mesh.h)
            weights = weight_fields(p, mesh, times)

            def evaluate(job) -> Tuple[object, CarlemanTerms]:
                label, rng = job
                jet = kavian_jet(mesh, times, odd) if rng is None else random_jet(
                    mesh, times, rng, odd=odd
                )
                return label, carleman_functionals(p, weights, jet, variant)

            jobs = list(enumerate(spawn_generators(seed, samples)))
            if kavian:
                jobs.append(("kavian", None))
            for label, result in map_samples(evaluate, jobs, threads):
                for name, value in result.terms.items():
                    rows.append(
                        {
                            "N": n,
                            "tau": p.tau,
                            "sample": label,
                            "term_name": name,
                            "value": value,
                            "ratio": result.ratio,
                        }
                    )
                if label != "kavian":
                    worst = max(worst, result.ratio)
        summary[n] = worst
        logging.info(f"Carleman sweep ({variant}) N={n}: C_emp={worst:.6g}")
    return rows, summary
