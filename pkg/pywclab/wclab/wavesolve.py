import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple, Union

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid

from pywclab.wclab.constants import DEFAULT_CFL_FACTOR, DEFAULT_DT_FACTOR
from pywclab.wclab.diffops import (
    forward_array,
    laplacian_array,
    normal_difference_array,
)
from pywclab.wclab.grid import (
    BoundaryTrace,
    Mesh,
    NodeField,
    SubsetMask,
    boundary_integral,
    interior_integral,
    set_trace_array,
    staggered_integral,
    trace_array,
)

"""
Leapfrog integration of the semi-discrete wave equation

    d_tt y = Delta_h y - q y + f   in Omega_h,     y = f_bdy   on the boundary,

with energy, boundary flux and penalization diagnostics.
"""

TimeFunction = Callable[[float], np.ndarray]


class CFLViolationError(ValueError):
    """Raised when the time step violates the stability bound of the explicit scheme."""


class DivergenceError(RuntimeError):
    """Raised when a non-finite value shows up during time stepping."""


def time_derivative_matrix(nt: int, dt: float) -> sparse.csr_matrix:
    """
    First time derivative on a uniform grid: fourth order central in the interior, second
    order central next to the ends, second order one-sided at the ends.
    """
    if nt < 3:
        raise ValueError(f"Time derivatives need at least 3 samples, got {nt}.")
    d = sparse.lil_matrix((nt, nt))
    d[0, :3] = [-1.5, 2.0, -0.5]
    d[nt - 1, nt - 3 :] = [0.5, -2.0, 1.5]
    for n in range(1, nt - 1):
        if 2 <= n <= nt - 3:
            d[n, n - 2 : n + 3] = [1.0 / 12, -2.0 / 3, 0.0, 2.0 / 3, -1.0 / 12]
        else:
            d[n, n - 1] = -0.5
            d[n, n + 1] = 0.5
    return (d / dt).tocsr()


def second_time_derivative_matrix(nt: int, dt: float) -> sparse.csr_matrix:
    """Second time derivative: central in the interior, one-sided (2, -5, 4, -1) at the ends."""
    if nt < 3:
        raise ValueError(f"Second time derivatives need at least 3 samples, got {nt}.")
    d = sparse.lil_matrix((nt, nt))
    for n in range(1, nt - 1):
        d[n, n - 1 : n + 2] = [1.0, -2.0, 1.0]
    if nt >= 4:
        d[0, :4] = [2.0, -5.0, 4.0, -1.0]
        d[nt - 1, nt - 4 :] = [-1.0, 4.0, -5.0, 2.0]
    else:
        d[0, :3] = d[nt - 1, :3] = [1.0, -2.0, 1.0]
    return (d / dt**2).tocsr()


def apply_in_time(matrix: sparse.spmatrix, values: np.ndarray) -> np.ndarray:
    """Apply a time operator to an array whose leading axis is time."""
    flat = values.reshape(values.shape[0], -1)
    return np.asarray(matrix @ flat).reshape(values.shape)


def time_norm(squared: np.ndarray, dt: float) -> float:
    """Square root of the trapezoid integral in time of a squared spatial norm."""
    return math.sqrt(max(float(trapezoid(squared, dx=dt)), 0.0))


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Node arrays sampled on the uniform time grid t0 + n dt, stacked along the first axis."""

    mesh: Mesh
    t0: float
    dt: float
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim < 3 or values.shape[-2:] != self.mesh.shape:
            raise ValueError(f"Expected snapshots of shape {self.mesh.shape}, got {values.shape}.")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}.")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(len(self))

    @property
    def t1(self) -> float:
        return self.t0 + self.dt * (len(self) - 1)

    def snapshot(self, n: int) -> NodeField:
        return NodeField(self.mesh, self.values[n])

    def at(self, t: float) -> np.ndarray:
        """Linear interpolation in time."""
        s = (t - self.t0) / self.dt
        if s < -1e-9 or s > len(self) - 1 + 1e-9:
            raise ValueError(f"t={t} outside [{self.t0}, {self.t1}].")
        n = int(min(max(math.floor(s), 0), len(self) - 2))
        theta = min(max(s - n, 0.0), 1.0)
        return (1.0 - theta) * self.values[n] + theta * self.values[n + 1]

    def odd_extension(self) -> "TimeSeries":
        """Series on [-t1, t1] with z(-t) = -z(t). Requires t0 = 0."""
        if abs(self.t0) > 1e-12:
            raise ValueError("The odd extension needs a series starting at t=0.")
        values = np.concatenate([-self.values[:0:-1], self.values], axis=0)
        return TimeSeries(self.mesh, -self.t1, self.dt, values)

    def time_derivative(self) -> "TimeSeries":
        d = time_derivative_matrix(len(self), self.dt)
        return TimeSeries(self.mesh, self.t0, self.dt, apply_in_time(d, self.values))

    def second_time_derivative(self) -> "TimeSeries":
        d2 = second_time_derivative_matrix(len(self), self.dt)
        return TimeSeries(self.mesh, self.t0, self.dt, apply_in_time(d2, self.values))

    def __add__(self, other: "TimeSeries") -> "TimeSeries":
        return TimeSeries(self.mesh, self.t0, self.dt, self.values + other.values)

    def __sub__(self, other: "TimeSeries") -> "TimeSeries":
        return TimeSeries(self.mesh, self.t0, self.dt, self.values - other.values)


def _as_time_function(source, shape: Tuple[int, ...]) -> TimeFunction:
    if source is None:
        zero = np.zeros(shape)
        return lambda t: zero
    if isinstance(source, TimeSeries):
        return source.at
    if callable(source):

        def evaluate(t: float) -> np.ndarray:
            value = source(t)
            if isinstance(value, (NodeField, BoundaryTrace)):
                value = value.values
            return np.broadcast_to(np.asarray(value, dtype=float), shape)

        return evaluate
    raise ValueError(f"Unsupported time-dependent data of type {type(source).__name__}.")


@dataclass(frozen=True, eq=False)
class WaveProblem:
    """
    Semi-discrete wave problem with potential.

    Parameters:
        mesh (Mesh): Space grid.
        q (NodeField): Potential; interior values are used.
        y0 (NodeField): Initial position, boundary values equal to f_bdy(0).
        y1 (NodeField): Initial velocity; interior values are used.
        f: Interior source, a callable t -> node array, a TimeSeries, or None.
        f_bdy: Boundary data, a callable t -> (4, N) array, or None for zero data.
        T (float): Final time.
        dt (float): Time step; T/dt must be an integer up to rounding.
        cfl_factor (float): Safety factor c <= 1 in dt <= c h / sqrt(2).
    """

    mesh: Mesh
    q: NodeField
    y0: NodeField
    y1: NodeField
    T: float
    dt: float
    f: Optional[object] = None
    f_bdy: Optional[object] = None
    cfl_factor: float = DEFAULT_CFL_FACTOR
    source: TimeFunction = field(init=False, repr=False)
    boundary: TimeFunction = field(init=False, repr=False)

    def __post_init__(self):
        for name in ("q", "y0", "y1"):
            self.mesh.check_same(getattr(self, name).mesh)
        if self.T <= 0:
            raise ValueError(f"T must be positive, got {self.T}.")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError(f"T={self.T} is not a multiple of dt={self.dt}.")
        object.__setattr__(self, "source", _as_time_function(self.f, self.mesh.shape))
        object.__setattr__(self, "boundary", _as_time_function(self.f_bdy, (4, self.mesh.N)))
        self.check_cfl()
        mismatch = np.max(np.abs(trace_array(self.y0.values) - self.boundary(0.0)), initial=0.0)
        if mismatch > 1e-10 * max(1.0, float(np.max(np.abs(self.y0.values)))):
            raise ValueError(f"y0 does not match the boundary data at t=0 (gap {mismatch:.3e}).")

    @classmethod
    def create(
        cls,
        mesh: Mesh,
        q: NodeField,
        y0: NodeField,
        y1: Optional[NodeField] = None,
        T: float = 1.0,
        dt_factor: float = DEFAULT_DT_FACTOR,
        **kwargs,
    ) -> "WaveProblem":
        """Problem with dt = T / ceil(T / (dt_factor h))."""
        dt = T / math.ceil(T / (dt_factor * mesh.h) - 1e-9)
        y1 = NodeField.zeros(mesh) if y1 is None else y1
        return cls(mesh=mesh, q=q, y0=y0, y1=y1, T=T, dt=dt, **kwargs)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def check_cfl(self) -> None:
        """
        Raises:
            CFLViolationError: If dt > c h / sqrt(2) or dt^2 (8/h^2 + max q+) >= 4.
        """
        h = self.mesh.h
        q_plus = max(float(np.max(self.q.interior)), 0.0)
        if self.cfl_factor > 1.0 or self.cfl_factor <= 0.0:
            raise CFLViolationError(f"CFL factor must lie in (0, 1], got {self.cfl_factor}.")
        bound = self.cfl_factor * h / math.sqrt(2.0)
        if self.dt > bound or self.dt**2 * (8.0 / h**2 + q_plus) >= 4.0:
            raise CFLViolationError(
                f"dt={self.dt:.4g} violates the CFL bound {bound:.4g} "
                f"at h={h:.4g}."
            )


@dataclass(frozen=True, eq=False)
class WaveSolution:
    y: TimeSeries
    velocity: TimeSeries
    problem: WaveProblem

    @property
    def mesh(self) -> Mesh:
        return self.y.mesh


def potential_operator(values: np.ndarray, q: np.ndarray, h: float) -> np.ndarray:
    """Delta_h y - q y at interior nodes, zero on the boundary ring."""
    out = laplacian_array(values, h)
    out[..., 1:-1, 1:-1] -= q[1:-1, 1:-1] * values[..., 1:-1, 1:-1]
    return out


def solve(p: WaveProblem) -> WaveSolution:
    """
    Leapfrog solution of the semi-discrete wave equation.

    The first step uses y^1 = y^0 + dt y1 + dt^2/2 (Delta_h y^0 - q y^0 + f(0)); boundary
    nodes are overwritten with the boundary data at every step.

    Raises:
        DivergenceError: If a non-finite value appears; the message names the step.
    """
    mesh, h, dt = p.mesh, p.mesh.h, p.dt
    nt = p.n_steps + 1
    q = p.q.values
    logging.info(f"Solving wave problem: N={mesh.N}, T={p.T}, dt={dt:.4g}, steps={nt - 1}")

    def acceleration(y: np.ndarray, t: float) -> np.ndarray:
        a = potential_operator(y, q, h)
        a[1:-1, 1:-1] += p.source(t)[1:-1, 1:-1]
        return a

    y = np.empty((nt,) + mesh.shape)
    y[0] = p.y0.values
    y[1] = y[0] + dt * p.y1.values + 0.5 * dt * dt * acceleration(y[0], 0.0)
    set_trace_array(y[1], p.boundary(dt))
    for n in range(1, nt - 1):
        y[n + 1] = 2.0 * y[n] - y[n - 1] + dt * dt * acceleration(y[n], n * dt)
        set_trace_array(y[n + 1], p.boundary((n + 1) * dt))
        if not np.all(np.isfinite(y[n + 1])):
            raise DivergenceError(f"Non-finite values at step {n + 1} (t={(n + 1) * dt:.4g}).")

    velocity = apply_in_time(time_derivative_matrix(nt, dt), y)
    velocity[0, 1:-1, 1:-1] = p.y1.interior
    return WaveSolution(
        y=TimeSeries(mesh, 0.0, dt, y),
        velocity=TimeSeries(mesh, 0.0, dt, velocity),
        problem=p,
    )


def energy_array(sol: WaveSolution) -> np.ndarray:
    """Energy at every snapshot."""
    h = sol.mesh.h
    y = sol.y.values
    kinetic = interior_integral(sol.velocity.values**2, h)
    potential = sum(staggered_integral(forward_array(y, h, k) ** 2, h) for k in (1, 2))
    reaction = interior_integral(sol.problem.q.values * y**2, h)
    return 0.5 * (kinetic + potential + reaction)


def energy(sol: WaveSolution, t_index: int) -> float:
    """
    E(t) = 1/2 |d_t y|^2 + 1/2 sum_k |d+_k y|^2 + 1/2 int q |y|^2 at snapshot t_index.

    Raises:
        IndexError: If t_index is out of range.
    """
    if not 0 <= t_index < len(sol.y):
        raise IndexError(f"t_index {t_index} outside [0, {len(sol.y) - 1}].")
    return float(energy_array(sol)[t_index])


@dataclass(frozen=True, eq=False)
class Measurement:
    """
    Boundary flux on Gamma_0 over time, with the h-scaled penalization stream.

    flux has shape (nt, 4, N) and is zero outside gamma0; pen holds the two staggered arrays
    h d+_k d_tt y of shapes (nt, N+1, N) and (nt, N, N+1), or None for a flux-only record.
    """

    mesh: Mesh
    dt: float
    gamma0: SubsetMask
    flux: np.ndarray
    pen: Optional[Tuple[np.ndarray, np.ndarray]] = None
    flux_norm: float = field(init=False)
    pen_norm: float = field(init=False)

    def __post_init__(self):
        flux_norm = flux_h1_norm(self.flux, self.mesh, self.dt, self.gamma0)
        object.__setattr__(self, "flux_norm", flux_norm)
        pen_norm = 0.0 if self.pen is None else penalization_norm(self.pen, self.mesh, self.dt)
        object.__setattr__(self, "pen_norm", pen_norm)

    def __sub__(self, other: "Measurement") -> "Measurement":
        pen = None
        if self.pen is not None and other.pen is not None:
            pen = (self.pen[0] - other.pen[0], self.pen[1] - other.pen[1])
        return Measurement(self.mesh, self.dt, self.gamma0, self.flux - other.flux, pen)

    def __add__(self, other: "Measurement") -> "Measurement":
        pen = None
        if self.pen is not None and other.pen is not None:
            pen = (self.pen[0] + other.pen[0], self.pen[1] + other.pen[1])
        return Measurement(self.mesh, self.dt, self.gamma0, self.flux + other.flux, pen)


def flux_h1_norm(flux: np.ndarray, mesh: Mesh, dt: float, gamma0: SubsetMask) -> float:
    """H1(0,T; L2_h(Gamma_0)) norm of a flux record."""
    values = np.where(gamma0.values, flux, 0.0)
    rate = apply_in_time(time_derivative_matrix(values.shape[0], dt), values)
    squared = boundary_integral(values**2, mesh.h) + boundary_integral(rate**2, mesh.h)
    return time_norm(squared, dt)


def penalization_norm(pen: Tuple[np.ndarray, np.ndarray], mesh: Mesh, dt: float) -> float:
    """sum_k of the L2(0,T; L2_h(Omega_{h,k}^-)) norms of the penalization stream."""
    return sum(time_norm(staggered_integral(p**2, mesh.h), dt) for p in pen)


def _series_of(source: Union[WaveSolution, TimeSeries]) -> TimeSeries:
    return source.y if isinstance(source, WaveSolution) else source


def flux_measurement(source: Union[WaveSolution, TimeSeries], gamma0: SubsetMask) -> Measurement:
    """
    Outward normal differences on gamma0 at every snapshot, with their H1-in-time norm.

    Raises:
        ValueError: If gamma0 is not a boundary mask.
    """
    series = _series_of(source)
    series.mesh.check_same(gamma0.mesh)
    if gamma0.kind != "boundary":
        raise ValueError("gamma0 must be a boundary mask.")
    flux = normal_difference_array(series.values, series.mesh.h)
    flux = np.where(gamma0.values, flux, 0.0)
    return Measurement(series.mesh, series.dt, gamma0, flux)


def penalization_stream(source: Union[WaveSolution, TimeSeries]) -> Tuple[np.ndarray, np.ndarray]:
    """
    The pair h d+_k d_tt y, k = 1, 2, with second time differences from the sparse operator.

    Raises:
        ValueError: If fewer than 3 snapshots are available.
    """
    series = _series_of(source)
    if len(series) < 3:
        raise ValueError("The penalization stream needs at least 3 snapshots.")
    h = series.mesh.h
    ytt = apply_in_time(second_time_derivative_matrix(len(series), series.dt), series.values)
    return tuple(h * forward_array(ytt, h, k) for k in (1, 2))


def distributed_observation(
    source: Union[WaveSolution, TimeSeries], omega: SubsetMask
) -> Tuple[float, float]:
    """
    The two interior observation norms of the distributed case:
    |d_t y|_{H1(0,T; L2_h(omega))} and sum_k |d+_k d_t y|_{L2(0,T; L2_h(omega_k^-))}.
    """
    series = _series_of(source)
    h, dt = series.mesh.h, series.dt
    mask = omega.values
    yt = apply_in_time(time_derivative_matrix(len(series), dt), series.values)
    ytt = apply_in_time(time_derivative_matrix(len(series), dt), yt)
    first = time_norm(interior_integral(yt**2, h, mask) + interior_integral(ytt**2, h, mask), dt)
    second = sum(
        time_norm(staggered_integral(forward_array(yt, h, k) ** 2, h, omega.staggered(k)), dt)
        for k in (1, 2)
    )
    return first, second


def kavian_field(mesh: Mesh) -> NodeField:
    """w_{i,j} = (-1)^i on the diagonal i = j in 1..N, zero elsewhere; -Delta_h w = (4/h^2) w."""
    values = np.zeros(mesh.shape)
    i = np.arange(1, mesh.N + 1)
    values[i, i] = (-1.0) ** i
    return NodeField(mesh, values)


def sine_mode(mesh: Mesh, k: int = 1, l: int = 1) -> NodeField:
    return NodeField.from_function(
        mesh, lambda x1, x2: np.sin(k * np.pi * x1) * np.sin(l * np.pi * x2)
    ).with_zero_boundary()


def energy_bound_constant(
    sol_a: WaveSolution, sol_b: WaveSolution, dq: NodeField
) -> float:
    """
    Fitted constant of the energy estimate for z = d_t(y[q_b] - y[q_a]):
    sup_t (|d+ z| + |d_t z| + |z|) / |q_a - q_b|_{L2_h}.
    """
    h, dt = sol_a.mesh.h, sol_a.y.dt
    z = sol_b.velocity.values - sol_a.velocity.values
    zt = apply_in_time(time_derivative_matrix(len(sol_a.y), dt), z)
    grad = sum(np.sqrt(staggered_integral(forward_array(z, h, k) ** 2, h)) for k in (1, 2))
    sup = np.max(grad + np.sqrt(interior_integral(zt**2, h)) + np.sqrt(interior_integral(z**2, h)))
    dq_norm = math.sqrt(float(interior_integral(dq.values**2, h)))
    if dq_norm == 0.0:
        raise ValueError("The potentials coincide; the energy constant is undefined.")
    return float(sup) / dq_norm

