import functools
import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.integrate import trapezoid
from scipy.optimize import brentq

from pywclab.wclab.carleman_elliptic import (
    CylinderField,
    EllipticWeight,
    elliptic_carleman_functionals,
    s_grid,
)
from pywclab.wclab.carleman_hyperbolic import left_nodes, time_cutoff
from pywclab.wclab.constants import (
    APPROX_IDENTITY_DT,
    APPROX_IDENTITY_MESH,
    APPROX_IDENTITY_STRIDE,
    DECAY_SAMPLES,
    DEFAULT_DT_FACTOR,
    DEFAULT_EPS_TAU_H,
    DEFAULT_KERNEL_ORDER,
    DEFAULT_STRIP_WIDTH,
    DEFAULT_T_LOG,
    FOURIER_STEP,
    FOURIER_WINDOW,
    HOLOMORPHY_STEP,
    KERNEL_CHUNK,
    KERNEL_PANEL_ORDER,
    KERNEL_QUADRATURE_ORDER,
    KERNEL_SCAN_EXTENT,
    KERNEL_SCAN_POINTS,
    KERNEL_TAIL_LEVEL,
    KERNEL_TAIL_MARGIN,
    KERNEL_TRUNCATION_LEVEL,
    MEASUREMENT_FACTORS,
    S_HALF_WIDTH,
    S_PLATEAU,
    SECTOR_SLOPE,
    SMOOTHSTEP_CURVATURE,
    SMOOTHSTEP_SLOPE,
)
from pywclab.wclab.diffops import forward_array, normal_difference_array
from pywclab.wclab.grid import (
    Mesh,
    NodeField,
    boundary_integral,
    interior_integral,
    norm,
    staggered_integral,
    trace_array,
)
from pywclab.wclab.wavesolve import TimeSeries, WaveProblem, sine_mode, solve

"""
The FBI transform in time and the discrete logarithmic stability experiment.

The kernel F(z) = (1/2 pi) int exp(i z xi - xi^{2n}) d xi is entire and even; F_lambda(z) =
lambda^gamma F(lambda^gamma z) with gamma = 1 - 1/(2n). It is evaluated by composite
Gauss-Legendre quadrature on [-Xi, Xi], where Xi is large enough for the imaginary parts of the
batch and panels are short enough for its real parts. Complex values are numpy complex arrays.

The experiment chains the transform of a wave solution zeta_h, the cutoffs eta, chi_S, chi_R,
the elliptic Carleman functional on the cylinder with tau = c3 lambda / gap, and the three-case
choice of lambda, and reports both sides of the logarithmic estimate with every constant.
"""


class StripWidthError(ValueError):
    """Raised when a kernel argument leaves the strip on which the quadrature is calibrated."""


class StageError(ValueError):
    """A precondition failure inside the log-stability pipeline, tagged with its stage."""

    def __init__(self, stage: str, error: Exception):
        super().__init__(f"stage '{stage}': {error}")
        self.stage = stage


@functools.lru_cache(maxsize=None)
def _legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return leggauss(order)


def truncation(n: int, imag_bound: float = 0.0) -> float:
    """Xi with Xi^{2n} - |Im z| Xi = 1 - log(level), so that exp(-Xi^{2n}) < level."""
    level = 1.0 - math.log(KERNEL_TRUNCATION_LEVEL)
    y = abs(imag_bound)

    def excess(x):
        return x ** (2 * n) - y * x - level

    hi = (2.0 * level) ** (1.0 / (2 * n)) + (2.0 * y) ** (1.0 / (2 * n - 1)) + 1.0
    return float(brentq(excess, 0.0, hi))


def _panel_rule(xi_max: float, panels: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = _legendre(KERNEL_PANEL_ORDER)
    edges = np.linspace(-xi_max, xi_max, panels + 1)
    mid = 0.5 * (edges[1:] + edges[:-1])
    half = 0.5 * (edges[1:] - edges[:-1])
    return (mid[:, None] + half[:, None] * x).ravel(), (half[:, None] * w).ravel()


def _profile(n: int, w, order: int = KERNEL_QUADRATURE_ORDER) -> np.ndarray:
    """F(w) for a complex array w."""
    w = np.asarray(w, dtype=complex)
    flat = w.ravel()
    if flat.size == 0:
        return np.zeros(w.shape, dtype=complex)
    y = float(np.max(np.abs(flat.imag)))
    x = float(np.max(np.abs(flat.real)))
    xi_max = truncation(n, y)
    panels = max(
        math.ceil(order / KERNEL_PANEL_ORDER), math.ceil((x + y) * xi_max / math.pi)
    )
    nodes, weights = _panel_rule(xi_max, panels)
    envelope = nodes ** (2 * n)
    out = np.empty(flat.size, dtype=complex)
    chunk = max(1, KERNEL_CHUNK // nodes.size)
    for start in range(0, flat.size, chunk):
        part = flat[start : start + chunk]
        out[start : start + chunk] = np.exp(1j * np.outer(part, nodes) - envelope) @ weights
    return (out / (2.0 * math.pi)).reshape(w.shape)


@functools.lru_cache(maxsize=None)
def real_axis_extent(n: int) -> float:
    """Margin times the abscissa beyond which |F| stays below the tail level times F(0)."""
    x = np.linspace(0.0, KERNEL_SCAN_EXTENT, KERNEL_SCAN_POINTS)
    values = np.abs(_profile(n, x + 0j))
    tail = np.maximum.accumulate(values[::-1])[::-1]
    below = np.nonzero(tail < KERNEL_TAIL_LEVEL * values[0])[0]
    if below.size == 0:
        raise ValueError(f"The order-{n} kernel does not decay within {KERNEL_SCAN_EXTENT}.")
    return KERNEL_TAIL_MARGIN * float(x[below[0]])


@dataclass(frozen=True)
class FbiKernel:
    """
    The kernel F_lambda.

    Parameters:
        n (int): Order of the kernel, n >= 1.
        lam (float): FBI parameter lambda >= 1.
        alpha (float): Optional Hölder exponent; gamma must then exceed 1/(1 + alpha).
        strip (float): Calibrated strip |Im z| <= strip for the argument of F_lambda.
        order (int): Minimal number of quadrature nodes.
    """

    n: int = DEFAULT_KERNEL_ORDER
    lam: float = 1.0
    alpha: Optional[float] = None
    strip: float = DEFAULT_STRIP_WIDTH
    order: int = KERNEL_QUADRATURE_ORDER

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 1:
            raise ValueError(f"The kernel order must be a positive integer, got {self.n}.")
        if self.lam < 1.0:
            raise ValueError(f"lambda must be >= 1, got {self.lam}.")
        if self.strip <= 0.0:
            raise ValueError(f"The strip width must be positive, got {self.strip}.")
        if self.alpha is not None and not self.gamma > 1.0 / (1.0 + self.alpha):
            raise ValueError(
                f"gamma = {self.gamma:.4g} must exceed 1/(1 + alpha) = "
                f"{1.0 / (1.0 + self.alpha):.4g}; increase n."
            )

    @property
    def gamma(self) -> float:
        return 1.0 - 1.0 / (2 * self.n)

    @property
    def scale(self) -> float:
        return self.lam**self.gamma

    @property
    def truncation(self) -> float:
        """Xi calibrated for the whole strip."""
        return truncation(self.n, self.scale * self.strip)

    def with_lambda(self, lam: float) -> "FbiKernel":
        return FbiKernel(self.n, lam, self.alpha, self.strip, self.order)


def default_alpha(n: int) -> float:
    """An exponent alpha with 1/(1 + alpha) < gamma for the order-n kernel."""
    return 2.0 / (2 * n - 1)


def kernel_eval(k: FbiKernel, z):
    """
    F_lambda(z) = lambda^gamma F(lambda^gamma z).

    Raises:
        StripWidthError: If |Im z| exceeds the calibrated strip.
    """
    z = np.asarray(z, dtype=complex)
    if np.any(np.abs(z.imag) > k.strip + 1e-12):
        raise StripWidthError(
            f"|Im z| = {float(np.max(np.abs(z.imag))):.4g} exceeds the strip width {k.strip}; "
            "the quadrature accuracy is not guaranteed."
        )
    values = k.scale * _profile(k.n, k.scale * z, k.order)
    return complex(values) if values.ndim == 0 else values


def kernel_decay_check(
    k: FbiKernel, sector: float = SECTOR_SLOPE, samples: int = DECAY_SAMPLES
) -> Dict[str, float]:
    """
    Fit the growth bound |F_lambda(z)| <= C0 exp(c0 lambda |Im z|^{1/gamma}) on the strip and
    the decay bound |F_lambda(z)| <= C0 exp(-c1 lambda |z|^{1/gamma}) on the sector
    |Im z| <= c2 |Re z|, then measure the largest log-violation of both over the samples.

    Returns:
        dict: C0, c0, c1, c2 and violation (<= 0 when both bounds hold).

    Raises:
        ValueError: If no positive decay rate fits.
    """
    lam, g = k.lam, k.gamma
    extent = 0.5 * real_axis_extent(k.n) / k.scale
    f0 = abs(kernel_eval(k, 0.0))

    y = np.linspace(0.0, k.strip, samples)[1:]
    rise = np.log(np.abs(kernel_eval(k, 1j * y)) / f0) / (lam * y ** (1.0 / g))
    c0 = max(float(np.max(rise)), 0.0) * (1.0 + 1e-9)

    x = np.linspace(extent / samples, extent, samples)
    slopes = np.linspace(-sector, sector, 2 * (samples // 4) + 1)
    z = x[:, None] + 1j * np.clip(x[:, None] * slopes[None, :], -k.strip, k.strip)
    fz = np.maximum(np.abs(kernel_eval(k, z)), np.finfo(float).tiny)
    radius = lam * np.abs(z) ** (1.0 / g)
    outer = x >= 0.5 * extent
    c1 = float(np.min(((math.log(f0) - np.log(fz)) / radius)[outer]))
    if not c1 > 0.0:
        raise ValueError(f"No decay rate fits the order-{k.n} kernel at lambda={lam}.")
    C0 = max(f0, float(np.max(fz * np.exp(c1 * radius)))) * (1.0 + 1e-9)

    grid_x = np.linspace(-extent, extent, samples)
    grid_y = np.concatenate([-y[::-1], [0.0], y])
    rect = grid_x[:, None] + 1j * grid_y[None, :]
    f_rect = np.maximum(np.abs(kernel_eval(k, rect)), np.finfo(float).tiny)
    growth = np.log(f_rect) - math.log(C0) - c0 * lam * np.abs(rect.imag) ** (1.0 / g)
    decay = np.log(fz) - math.log(C0) + c1 * radius
    violation = max(float(np.max(growth)), float(np.max(decay)))
    logging.info(
        f"Kernel n={k.n}, lambda={lam}: C0={C0:.4g}, c0={c0:.4g}, c1={c1:.4g}, "
        f"violation={violation:.3e}"
    )
    return {"C0": C0, "c0": c0, "c1": c1, "c2": float(sector), "violation": violation}


def fourier_identity_error(
    k: FbiKernel, window: float = FOURIER_WINDOW, step: float = FOURIER_STEP, points: int = 161
) -> float:
    """
    sup over |xi| <= window lambda^gamma of the gap between the Fourier transform of F_lambda
    and exp(-(xi / lambda^gamma)^{2n}).
    """
    extent = real_axis_extent(k.n) / k.scale
    dx = step / k.scale
    x = np.arange(-extent, extent + 0.5 * dx, dx)
    f = np.real(kernel_eval(k, x + 0j))
    xi = np.linspace(-window * k.scale, window * k.scale, points)
    transform = trapezoid(f[None, :] * np.exp(-1j * np.outer(xi, x)), dx=dx, axis=1)
    exact = np.exp(-((xi / k.scale) ** (2 * k.n)))
    return float(np.max(np.abs(transform - exact)))


def closed_form_error(k: FbiKernel, points: int = 201) -> float:
    """
    Largest relative gap between F_lambda and its closed form for n = 1,
    lambda^{1/2} exp(-lambda z^2 / 4) / (2 sqrt(pi)), on a rectangle of the strip. Points where
    the closed form is below 1e-3 of its maximum are left out.
    """
    if k.n != 1:
        raise ValueError(f"The closed form only exists for n = 1, got n={k.n}.")
    extent = 0.5 * real_axis_extent(1) / k.scale
    x = np.linspace(-extent, extent, points)
    y = np.linspace(-min(k.strip, 1.0), min(k.strip, 1.0), 9)
    z = x[:, None] + 1j * y[None, :]
    exact = k.scale * np.exp(-((k.scale * z) ** 2) / 4.0) / (2.0 * math.sqrt(math.pi))
    keep = np.abs(exact) >= 1e-3 * float(np.max(np.abs(exact)))
    gap = np.abs(kernel_eval(k, z[keep]) - exact[keep]) / np.abs(exact[keep])
    return float(np.max(gap))


def _smoothstep(u: np.ndarray) -> np.ndarray:
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10.0 - 15.0 * u + 6.0 * u * u)


@dataclass(frozen=True)
class CutoffSet:
    """
    eta(t) = 1 on |t| <= T/2 and 0 on |t| >= 3T/4; chi_S(s) = 1 on |s| <= 2 and 0 on |s| >= 3;
    chi_R(x) = 1 on d(x, omega) <= R/2 and 0 on d(x, omega) >= R. All are quintic smoothsteps.
    """

    T: float
    R: float
    distance: Callable[[np.ndarray, np.ndarray], np.ndarray]

    def __post_init__(self):
        if self.T <= 0.0 or self.R <= 0.0:
            raise ValueError(f"T and R must be positive, got {self.T}, {self.R}.")

    def eta(self, t) -> np.ndarray:
        return time_cutoff(t, 0.75 * self.T, 0.25 * self.T)[0]

    def chi_s(self, s) -> np.ndarray:
        return time_cutoff(s, S_HALF_WIDTH, S_HALF_WIDTH - S_PLATEAU)[0]

    def chi_r(self, x1, x2) -> np.ndarray:
        return _smoothstep((self.R - self.distance(x1, x2)) / (0.5 * self.R))

    def bounds(self) -> Dict[str, float]:
        """Sup norms of the first and second derivatives of the three profiles."""
        widths = {"eta": 0.25 * self.T, "chi_s": S_HALF_WIDTH - S_PLATEAU, "chi_r": 0.5 * self.R}
        out = {}
        for name, width in widths.items():
            out[f"{name}_d1"] = SMOOTHSTEP_SLOPE / width
            out[f"{name}_d2"] = SMOOTHSTEP_CURVATURE / width**2
        return out


def default_cutoffs(T: float, weight: EllipticWeight, R: Optional[float] = None) -> CutoffSet:
    return CutoffSet(T=T, R=weight.R if R is None else R, distance=weight.distance)


@dataclass(frozen=True, eq=False)
class FbiField:
    """v_{a,lambda}(s, x_h) on an s-grid: complex values of shape (ns, N+2, N+2)."""

    mesh: Mesh
    a: float
    lam: float
    s: np.ndarray
    values: np.ndarray

    @property
    def real(self) -> CylinderField:
        return CylinderField(self.mesh, self.s, self.values.real)

    @property
    def imag(self) -> CylinderField:
        return CylinderField(self.mesh, self.s, self.values.imag)


def _check_zeta(zeta: TimeSeries, cutoffs: CutoffSet) -> None:
    T = cutoffs.T
    if zeta.t0 > -T + 1e-9 * T or zeta.t1 < T - 1e-9 * T:
        raise ValueError(f"zeta must be defined on [-{T}, {T}], got [{zeta.t0}, {zeta.t1}].")


def _time_window(k: FbiKernel, zeta: TimeSeries, cutoffs: CutoffSet, a: float):
    """Times of supp eta where F_lambda(a - t) is above the tail level, with weights eta dt."""
    t = zeta.times
    weights = np.full(t.size, zeta.dt)
    weights[0] = weights[-1] = 0.5 * zeta.dt
    reach = real_axis_extent(k.n) / k.scale + 2.0 * HOLOMORPHY_STEP
    keep = (np.abs(t) < 0.75 * cutoffs.T) & (np.abs(a - t) <= reach)
    return t[keep], (weights * cutoffs.eta(t))[keep], zeta.values[keep]


def _transform(k: FbiKernel, a: float, s: np.ndarray, window) -> np.ndarray:
    t, weights, values = window
    kernel = kernel_eval(k, a + 1j * s[:, None] - t[None, :])
    return np.tensordot(kernel * weights[None, :], values, axes=(1, 0))


def fbi_transform(
    k: FbiKernel, a: float, zeta: TimeSeries, eta: CutoffSet, s: Optional[np.ndarray] = None
) -> FbiField:
    """
    v_{a,lambda}(s, x_h) = int F_lambda(a + is - t) eta(t) zeta(t, x_h) dt by the trapezoid
    rule on the time grid of zeta, restricted to supp eta.

    Raises:
        ValueError: If a is outside [-T/4, T/4], s leaves [-3, 3] or zeta does not cover [-T, T].
    """
    s = s_grid(zeta.mesh.h) if s is None else np.atleast_1d(np.asarray(s, dtype=float))
    if np.any(np.abs(s) > S_HALF_WIDTH + 1e-12):
        raise ValueError(f"s must lie in [-{S_HALF_WIDTH}, {S_HALF_WIDTH}].")
    if abs(a) > 0.25 * eta.T + 1e-12:
        raise ValueError(f"a={a} must lie in [-T/4, T/4] with T={eta.T}.")
    _check_zeta(zeta, eta)
    values = _transform(k, a, s, _time_window(k, zeta, eta, a))
    return FbiField(zeta.mesh, float(a), k.lam, s, values)


def holomorphy_residual(
    k: FbiKernel, a: float, zeta: TimeSeries, eta: CutoffSet, s: Sequence[float]
) -> float:
    """
    Relative Cauchy-Riemann residual |d_s v - i d_a v| / |d_a v| of (a, s) -> v_{a,lambda}(s, x)
    by centered differences of step 1e-4 lambda^{-gamma}, over the given s and all nodes.
    """
    _check_zeta(zeta, eta)
    s = np.asarray(s, dtype=float)
    delta = HOLOMORPHY_STEP / k.scale
    window = _time_window(k, zeta, eta, a)
    d_a = (_transform(k, a + delta, s, window) - _transform(k, a - delta, s, window)) / (2 * delta)
    d_s = (_transform(k, a, s + delta, window) - _transform(k, a, s - delta, window)) / (2 * delta)
    scale = float(np.max(np.abs(d_a)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(d_s - 1j * d_a))) / scale


def approximate_identity_constant(
    k: FbiKernel,
    zeta: TimeSeries,
    eta: CutoffSet,
    omega: np.ndarray,
    stride: int = 1,
) -> float:
    """
    C in |eta zeta - F_lambda * (eta zeta)|_{L2((-T/8, T/8) x omega_h)}
    <= C lambda^{-gamma} |eta zeta|_{H1(-T, T; L2_h(omega_h))}.
    """
    _check_zeta(zeta, eta)
    h, dt = zeta.mesh.h, zeta.dt
    t = zeta.times
    eta_zeta = eta.eta(t)[:, None, None] * zeta.values
    rate = np.gradient(eta_zeta, dt, axis=0)
    reference = math.sqrt(
        float(trapezoid(interior_integral(eta_zeta**2 + rate**2, h, omega), dx=dt))
    )
    if reference == 0.0:
        raise ValueError("The approximate-identity constant needs eta zeta != 0 on omega.")
    centre = np.nonzero(np.abs(t) < 0.125 * eta.T)[0][::stride]
    errors = []
    for index in centre:
        smoothed = fbi_transform(k, float(t[index]), zeta, eta, [0.0]).values[0].real
        errors.append(float(interior_integral((eta_zeta[index] - smoothed) ** 2, h, omega)))
    error = math.sqrt(max(float(trapezoid(errors, dx=stride * dt)), 0.0))
    return error * k.scale / reference


def standing_wave_identity_constant(k: FbiKernel, T: float = DEFAULT_T_LOG) -> float:
    """
    approximate_identity_constant for zeta = cos(t) times the first sine mode on a coarse grid,
    with omega the whole interior.
    """
    mesh = Mesh(APPROX_IDENTITY_MESH)
    steps = math.ceil(2.0 * T / APPROX_IDENTITY_DT)
    times = np.linspace(-T, T, steps + 1)
    zeta = TimeSeries(
        mesh, -T, 2.0 * T / steps, np.cos(times)[:, None, None] * sine_mode(mesh).values[None]
    )
    cutoffs = CutoffSet(T=T, R=1.0, distance=lambda x1, x2: np.zeros(np.shape(x1)))
    omega = np.ones(mesh.shape, dtype=bool)
    return approximate_identity_constant(k, zeta, cutoffs, omega, APPROX_IDENTITY_STRIDE)


def symmetric_wave_solution(
    mesh: Mesh,
    T: float,
    q: NodeField,
    y0: NodeField,
    y1: NodeField,
    f: Optional[Callable[[float], np.ndarray]] = None,
    dt_factor: float = DEFAULT_DT_FACTOR,
) -> TimeSeries:
    """
    zeta_h on [-T, T] with zeta(0) = y0, d_t zeta(0) = y1, zero boundary data and source f(t),
    from two forward leapfrog runs.
    """
    forward = solve(WaveProblem.create(mesh, q, y0, y1, T, dt_factor, f=f))
    source = f.at if isinstance(f, TimeSeries) else f
    backward_source = None if source is None else (lambda t: source(-t))
    backward = solve(WaveProblem.create(mesh, q, y0, -y1, T, dt_factor, f=backward_source))
    values = np.concatenate([backward.y.values[:0:-1], forward.y.values], axis=0)
    return TimeSeries(mesh, -forward.y.t1, forward.y.dt, values)


def spacetime_h2_norm(zeta: TimeSeries) -> float:
    """|zeta|_{H^2_h((-T, T) x Omega_h)}: H2_h of zeta, H1_h of d_t zeta, L2_h of d_tt zeta."""
    zt = zeta.time_derivative()
    ztt = zeta.second_time_derivative()
    squared = [
        norm(NodeField(zeta.mesh, zeta.values[n]), "H2") ** 2
        + norm(NodeField(zeta.mesh, zt.values[n]), "H1") ** 2
        + norm(NodeField(zeta.mesh, ztt.values[n])) ** 2
        for n in range(len(zeta))
    ]
    return math.sqrt(max(float(trapezoid(squared, dx=zeta.dt)), 0.0))


def gamma0_flux_norm(zeta: TimeSeries, gamma0_values: np.ndarray) -> float:
    """|d_nu zeta|_{L2(-T, T; L2_h(Gamma_0))} with the outward normal difference."""
    flux2 = normal_difference_array(zeta.values, zeta.mesh.h) ** 2
    squared = boundary_integral(flux2, zeta.mesh.h, gamma0_values)
    return math.sqrt(max(float(trapezoid(squared, dx=zeta.dt)), 0.0))


def local_h1_norm(zeta: TimeSeries, omega: np.ndarray, half_width: float) -> float:
    """|zeta|_{H1_h((-half_width, half_width) x omega_h)}; staggered cells at nodes of omega."""
    h = zeta.mesh.h
    inside = np.abs(zeta.times) <= half_width + 1e-12
    values = zeta.values[inside]
    rate = zeta.time_derivative().values[inside]
    squared = interior_integral(values**2 + rate**2, h, omega)
    for axis in (1, 2):
        squared = squared + staggered_integral(
            forward_array(values, h, axis) ** 2, h, left_nodes(omega, axis)
        )
    return math.sqrt(max(float(trapezoid(squared, dx=zeta.dt)), 0.0))


@dataclass(frozen=True)
class FbiConstants:
    """Measured constants linking lambda and tau, and the admissible lambda window."""

    gamma: float
    alpha: float
    c0: float
    c1: float
    c3: float
    c4: float
    c5: float
    c6: float
    gap: float
    lambda_star: float
    eps_star: float
    lambda_max: float
    T_large_enough: bool

    def tau(self, lam: float) -> float:
        return self.c3 * lam / self.gap

    def as_dict(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


def fbi_constants(
    k: FbiKernel,
    weight: EllipticWeight,
    h: float,
    T: float,
    alpha: Optional[float] = None,
    eps_tau_h: float = DEFAULT_EPS_TAU_H,
) -> FbiConstants:
    """
    c3 = 2 3^{1/gamma} c0 from the fitted growth rate, tau(lambda) = c3 lambda / gap with
    gap = I_omega - max(S_C, S_(2,3)), lambda_* = gap / c3 (tau >= 1), the leading exponents
    c4 = c3, c5 = 2 c3 (S - I_omega) / gap and c6 = c5 + c3, eps_* = eps_tau_h gap / c3 and
    the check c5 <= c1 (T/2)^{1/gamma}.
    """
    alpha = default_alpha(k.n) if alpha is None else alpha
    if not k.gamma > 1.0 / (1.0 + alpha):
        raise ValueError(f"gamma = {k.gamma:.4g} must exceed 1/(1 + alpha) for alpha={alpha}.")
    fitted = kernel_decay_check(k)
    gap = weight.gap
    if gap <= 0.0:
        raise ValueError(f"The weight ordering gap must be positive, got {gap:.4g}.")
    g = k.gamma
    c3 = 2.0 * 3.0 ** (1.0 / g) * fitted["c0"]
    if c3 <= 0.0:
        raise ValueError("The fitted growth rate c0 vanishes; lambda and tau cannot be linked.")
    c5 = 2.0 * c3 * (weight.S - weight.I_omega) / gap
    eps_star = eps_tau_h * gap / c3
    constants = FbiConstants(
        gamma=g,
        alpha=alpha,
        c0=fitted["c0"],
        c1=fitted["c1"],
        c3=c3,
        c4=c3,
        c5=c5,
        c6=c5 + c3,
        gap=gap,
        lambda_star=gap / c3,
        eps_star=eps_star,
        lambda_max=eps_star / h,
        T_large_enough=bool(c5 <= fitted["c1"] * (0.5 * T) ** (1.0 / g)),
    )
    logging.info(f"FBI constants: {constants.as_dict()}")
    return constants


def select_lambda(constants: FbiConstants, D: float, M: float) -> Tuple[str, float, float]:
    """
    The three-case choice: lambda_0 = log(2 + D/M) / c6; lambda_* if lambda_0 <= lambda_*,
    lambda_0 inside (lambda_*, eps_*/h), eps_*/h beyond.

    Returns:
        tuple: (case, lambda, lambda_0).
    """
    rho = math.inf if M == 0.0 else D / M
    lambda_0 = math.inf if math.isinf(rho) else math.log(2.0 + rho) / constants.c6
    if lambda_0 <= constants.lambda_star:
        return "lambda_star", constants.lambda_star, lambda_0
    if lambda_0 < constants.lambda_max:
        return "lambda_0", lambda_0, lambda_0
    return "h_limited", constants.lambda_max, lambda_0


def log_bound(D: float, M: float, h: float, alpha: float) -> float:
    """D [log(2 + D/M)]^{-1/(1+alpha)} + D h^{1/(1+alpha)}, constants set to 1."""
    if D == 0.0:
        return 0.0
    p = 1.0 / (1.0 + alpha)
    log_term = 0.0 if M == 0.0 else D * math.log(2.0 + D / M) ** (-p)
    return log_term + D * h**p


def evaluation_lambda(lam: float) -> float:
    """The kernel is evaluated at lambda >= 1."""
    return max(lam, 1.0)


def step5_bound(constants: FbiConstants, D: float, M: float, lam: float) -> float:
    """D lambda^{-gamma} + exp(c6 lambda / 2) M at the lambda the transform is evaluated with."""
    if D == 0.0:
        return 0.0
    lam = evaluation_lambda(lam)
    return D / lam**constants.gamma + math.exp(0.5 * constants.c6 * lam) * M


@contextmanager
def _stage(name: str):
    logging.info(f"log-stability stage: {name}")
    try:
        yield
    except ValueError as e:
        raise StageError(name, e) from e


def log_stability_experiment(
    zeta: TimeSeries,
    weight: EllipticWeight,
    n: int = DEFAULT_KERNEL_ORDER,
    alpha: Optional[float] = None,
    source: Optional[TimeSeries] = None,
    q: Optional[NodeField] = None,
    eps_tau_h: float = DEFAULT_EPS_TAU_H,
    s_step: Optional[float] = None,
) -> Dict[str, object]:
    """
    Run the discrete logarithmic stability pipeline on a wave solution zeta_h on [-T, T].

    Parameters:
        zeta (TimeSeries): Solution on a symmetric time grid, zero on the boundary.
        weight (EllipticWeight): Elliptic weight built around Gamma_0.
        n (int): Kernel order.
        alpha (float): Exponent of the bound; 2/(2n - 1) by default.
        source (TimeSeries): Source of the wave equation, checked to vanish near omega_r.
        q (NodeField): Potential passed to the cylinder operator.
        eps_tau_h (float): Admissibility bound of the elliptic estimate.
        s_step (float): Step of the s-grid, h by default.

    Returns:
        dict: "constants", "norms" (D, M, lhs), "selection", "bounds", "elliptic" and "ratios".

    Raises:
        StageError: Naming the stage whose precondition failed.
    """
    mesh, h = zeta.mesh, zeta.mesh.h
    with _stage("input"):
        T = zeta.t1
        if abs(zeta.t0 + T) > 1e-9 * max(T, 1.0):
            raise ValueError(f"zeta must live on a symmetric interval, got [{zeta.t0}, {T}].")
        if np.any(trace_array(zeta.values) != 0.0):
            raise ValueError("zeta must vanish on the boundary of Omega_h.")
        alpha = default_alpha(n) if alpha is None else alpha
        kernel = FbiKernel(n=n, lam=1.0, alpha=alpha)
    with _stage("source"):
        if source is not None:
            near = weight.neighbourhood(mesh, weight.R0)
            if np.any(source.values[:, near] != 0.0):
                raise ValueError("The source does not vanish at distance < R0 from omega_r.")

    with _stage("norms"):
        D = spacetime_h2_norm(zeta)
        M = gamma0_flux_norm(zeta, weight.gamma0(mesh).values)
        omega = weight.omega_nodes(mesh)
        lhs = local_h1_norm(zeta, omega, T / 8.0)
    with _stage("constants"):
        constants = fbi_constants(kernel, weight, h, T, alpha, eps_tau_h)
    with _stage("selection"):
        case, lam, lambda_0 = select_lambda(constants, D, M)
        lam_eval = evaluation_lambda(lam)
        tau = min(constants.tau(lam_eval), eps_tau_h / h)

    with _stage("transform"):
        cutoffs = default_cutoffs(T, weight)
        s = s_grid(h, step=s_step)
        v = fbi_transform(kernel.with_lambda(lam_eval), 0.0, zeta, cutoffs, s)
        x1, x2 = mesh.nodes()
        localized = cutoffs.chi_s(s)[:, None, None] * cutoffs.chi_r(x1, x2)[None] * v.values
        localized[:, ~weight.neighbourhood(mesh)] = 0.0
    with _stage("elliptic"):
        elliptic = {}
        for part, values in (("real", localized.real), ("imag", localized.imag)):
            terms = elliptic_carleman_functionals(
                weight, CylinderField(mesh, s, values), tau, q=q, eps_tau_h=eps_tau_h
            )
            elliptic[part] = {
                "lhs": terms.lhs,
                "rhs": terms.rhs,
                "ratio": terms.ratio,
                "log_scale": terms.log_scale,
            }

    g = constants.gamma
    step5 = step5_bound(constants, D, M, lam)
    rhs = log_bound(D, M, h, alpha)
    h_term = D * h ** (1.0 / (1.0 + alpha))
    report = {
        "constants": constants.as_dict(),
        "norms": {"D": D, "M": M, "lhs": lhs, "rho": math.inf if M == 0.0 else D / M},
        "selection": {
            "case": case,
            "lambda": lam,
            "lambda_eval": lam_eval,
            "lambda_0": lambda_0,
            "tau": tau,
        },
        "bounds": {
            "log_bound": rhs,
            "step5_bound": step5,
            "h_term": h_term,
            "h_gamma_term": D * h**g,
        },
        "elliptic": elliptic,
        "ratios": {
            "lhs_over_log_bound": _ratio(lhs, rhs),
            "lhs_over_step5": _ratio(lhs, step5),
            "lhs_over_h_term": _ratio(lhs, h_term),
        },
    }
    logging.info(f"log-stability: case={case}, D={D:.4g}, M={M:.4g}, lhs={lhs:.4g}")
    return report


def _ratio(lhs: float, rhs: float) -> float:
    if rhs > 0.0:
        return lhs / rhs
    return 0.0 if lhs == 0.0 else math.inf


def measurement_sweep(
    report: Dict[str, object], h: float, factors: Sequence[float] = MEASUREMENT_FACTORS
) -> List[Dict[str, float]]:
    """The log bound with the measurement norm scaled by each factor, D and lhs held fixed."""
    norms = report["norms"]
    alpha = report["constants"]["alpha"]
    rows = []
    for factor in factors:
        M = factor * norms["M"]
        bound = log_bound(norms["D"], M, h, alpha)
        rows.append(
            {
                "factor": factor,
                "M": M,
                "log_bound": bound,
                "lhs_over_log_bound": _ratio(norms["lhs"], bound),
            }
        )
    return rows
