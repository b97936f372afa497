import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import minimize

from pywclab.wclab.constants import (
    ARMIJO_MAX_HALVINGS,
    ARMIJO_SLOPE,
    DEFAULT_ALPHA0,
    DEFAULT_COLLAR_WIDTH,
    DEFAULT_DT_FACTOR,
    DEFAULT_GAMMA0_INTERVAL,
    DEFAULT_GRADIENT_TOLERANCE,
    DEFAULT_KERNEL_ORDER,
    DEFAULT_M_CAP,
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_T_GAMMA,
    PERTURBATION_MAX_FREQUENCY,
)
from pywclab.wclab.diffops import (
    forward_array,
    forward_transpose_array,
    normal_difference_transpose_array,
)
from pywclab.wclab.fbi import log_bound
from pywclab.wclab.grid import (
    AffineExtension,
    Mesh,
    NodeField,
    SubsetMask,
    collar_mask,
    convergence_rate,
    edge_mask,
    extend_constant,
    norm,
    restrict,
    trace_array,
)
from pywclab.wclab.utils import map_samples, spawn_generators
from pywclab.wclab.wavesolve import (
    Measurement,
    TimeSeries,
    WaveProblem,
    WaveSolution,
    apply_in_time,
    distributed_observation,
    energy_bound_constant,
    flux_h1_norm,
    flux_measurement,
    penalization_stream,
    potential_operator,
    second_time_derivative_matrix,
    solve,
    time_derivative_matrix,
    time_norm,
)

"""
The discrete inverse problem: penalized boundary measurements, stability sweeps, the
consistency construction of discrete data from a manufactured trajectory, adjoint-state
reconstruction of the potential and mesh-refinement convergence studies.
"""

SpatialFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]
TemporalFunction = Callable[[float], float]

VARIANTS = ("boundary", "distributed", "log")
FAMILIES = ("trig", "bump", "mixed")
METHODS = ("descent", "lbfgs")


class LineSearchError(RuntimeError):
    """Raised when backtracking fails to decrease the objective."""


def measure(sol, gamma0: SubsetMask) -> Measurement:
    """The penalized measurement: flux on gamma0 and h d+_k d_tt y, with cached norms."""
    flux = flux_measurement(sol, gamma0)
    series = sol.y if isinstance(sol, WaveSolution) else sol
    return Measurement(flux.mesh, flux.dt, gamma0, flux.flux, penalization_stream(series))


def measurement_distance(a: Measurement, b: Measurement) -> float:
    """Norm of a - b in the product space: flux H1(0,T; L2_h(Gamma_0)) plus penalization."""
    a.mesh.check_same(b.mesh)
    gap = a - b
    return gap.flux_norm + gap.pen_norm


def _continuous_edge_squared(flux: np.ndarray, h: float) -> np.ndarray:
    """int over the boundary of the piecewise linear interpolant of traces (..., 4, N)."""
    pad = [(0, 0)] * (flux.ndim - 1) + [(1, 1)]
    p = np.pad(flux, pad)
    a, b = p[..., :-1], p[..., 1:]
    return h * np.sum(a * a + a * b + b * b, axis=(-2, -1)) / 3.0


def product_norm_equivalence(m: Measurement, series: TimeSeries) -> Dict[str, float]:
    """
    The discrete product norm of a measurement against its continuous counterpart: the flux
    interpolated linearly along the boundary and h |grad e_h(d_tt y)|_{L2(Omega)}.
    """
    h, dt = m.mesh.h, m.dt
    rate = apply_in_time(time_derivative_matrix(m.flux.shape[0], dt), m.flux)
    flux = time_norm(_continuous_edge_squared(m.flux, h) + _continuous_edge_squared(rate, h), dt)
    ytt = apply_in_time(second_time_derivative_matrix(len(series), dt), series.values)
    pen = time_norm(
        np.array(
            [
                (h * AffineExtension(NodeField(series.mesh, v)).gradient_l2_norm()) ** 2
                for v in ytt
            ]
        ),
        dt,
    )
    discrete = m.flux_norm + m.pen_norm
    continuous = flux + pen
    factor = continuous / discrete if discrete > 0.0 else 1.0
    logging.info(f"Product norm equivalence factor: {factor:.6g}")
    return {"discrete": discrete, "continuous": continuous, "factor": factor}


@dataclass(frozen=True)
class ManufacturedSolution:
    """
    A separable reference trajectory y(t, x) = a(t) Y(x) with known potential q.

    Parameters:
        a, a_t, a_tt: The time profile and its first two derivatives.
        Y: Spatial profile.
        q: Potential, including its boundary values.
        grad_Y: Optional gradient (dY/dx1, dY/dx2) for the continuous measurement.
    """

    a: TemporalFunction
    a_t: TemporalFunction
    a_tt: TemporalFunction
    Y: SpatialFunction
    q: SpatialFunction
    grad_Y: Optional[Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]] = None

    def continuous_flux(self, mesh: Mesh, times: np.ndarray) -> np.ndarray:
        """The exact outward normal derivative at the boundary nodes, shape (nt, 4, N)."""
        if self.grad_Y is None:
            raise ValueError("The continuous flux needs the gradient of the spatial profile.")
        s = mesh.coordinates()[1:-1]
        zero, one = np.zeros_like(s), np.ones_like(s)
        edges = [
            -self.grad_Y(zero, s)[0],
            self.grad_Y(one, s)[0],
            -self.grad_Y(s, zero)[1],
            self.grad_Y(s, one)[1],
        ]
        profile = np.stack([np.broadcast_to(e, s.shape) for e in edges])
        return np.array([self.a(t) for t in times])[:, None, None] * profile[None]


def benchmark_solution(q: Optional[SpatialFunction] = None) -> ManufacturedSolution:
    """y = (1 + t^2)(2 + sin(pi x1) cos(pi x2)); q = 1 unless given."""
    pi = math.pi
    return ManufacturedSolution(
        a=lambda t: 1.0 + t * t,
        a_t=lambda t: 2.0 * t,
        a_tt=lambda t: 2.0,
        Y=lambda x1, x2: 2.0 + np.sin(pi * x1) * np.cos(pi * x2),
        q=(lambda x1, x2: np.ones_like(x1 + x2)) if q is None else q,
        grad_Y=lambda x1, x2: (
            pi * np.cos(pi * x1) * np.cos(pi * x2),
            -pi * np.sin(pi * x1) * np.sin(pi * x2),
        ),
    )


def smooth_potential(x1, x2):
    return 1.0 + 0.5 * np.sin(np.pi * x1) * np.sin(np.pi * x2)


@dataclass(frozen=True, eq=False)
class InverseData:
    """Discrete data (y0, y1, f, f_bdy) of the wave problem and the potential it was built for."""

    mesh: Mesh
    T: float
    dt_factor: float
    y0: NodeField
    y1: NodeField
    f: Callable[[float], np.ndarray]
    f_bdy: Callable[[float], np.ndarray]
    q: NodeField
    regularity_verified: bool = True

    def problem(self, q: NodeField) -> WaveProblem:
        return WaveProblem.create(
            self.mesh, q, self.y0, self.y1, self.T, self.dt_factor, f=self.f, f_bdy=self.f_bdy
        )

    def solve(self, q: NodeField) -> WaveSolution:
        return solve(self.problem(q))


def check_lower_bound(y0: NodeField, alpha0: float) -> None:
    """
    Raises:
        ValueError: If inf |y0| over Omega_h is below alpha0.
    """
    low = float(np.min(np.abs(y0.interior)))
    if low < alpha0:
        raise ValueError(f"inf |y0| = {low:.4g} is below alpha0 = {alpha0:.4g}.")


def consistency_data(
    mesh: Mesh,
    reference: ManufacturedSolution,
    T: float = DEFAULT_T_GAMMA,
    dt_factor: float = DEFAULT_DT_FACTOR,
    alpha0: float = DEFAULT_ALPHA0,
) -> InverseData:
    """
    Discrete data for which a(t) r~_h(Y) solves the semi-discrete system exactly:
    y0 = a(0) Y_h, y1 = a'(0) Y_h, f = a'' Y_h - a (Delta_h Y_h - q_h Y_h) and f_bdy the trace
    of a(t) Y_h, with Y_h = r~_h(Y) and q_h = r~_h(q).

    Raises:
        ValueError: If inf |y0| < alpha0.
    """
    Y = restrict(reference.Y, mesh, "cell_average")
    q = restrict(reference.q, mesh, "cell_average")
    operator = potential_operator(Y.values, q.values, mesh.h)
    y0 = NodeField(mesh, reference.a(0.0) * Y.values)
    check_lower_bound(y0, alpha0)
    trace = trace_array(Y.values)

    def source(t: float) -> np.ndarray:
        return reference.a_tt(t) * Y.values - reference.a(t) * operator

    def boundary(t: float) -> np.ndarray:
        return reference.a(t) * trace

    logging.info(f"Consistency data on N={mesh.N}, T={T}, inf|y0|={np.min(y0.interior):.4g}")
    return InverseData(
        mesh=mesh,
        T=T,
        dt_factor=dt_factor,
        y0=y0,
        y1=NodeField(mesh, reference.a_t(0.0) * Y.values),
        f=source,
        f_bdy=boundary,
        q=q,
    )


def sample_perturbation(
    mesh: Mesh,
    rng: np.random.Generator,
    m: float = DEFAULT_M_CAP,
    family: str = "mixed",
) -> NodeField:
    """
    A random perturbation vanishing on the boundary with max norm in (m/10, m]: tensor sine
    modes up to frequency 4 ("trig"), a C2 bump (1 - |x - c|^2/r^2)_+^3 ("bump"), or either.
    """
    if family not in FAMILIES:
        raise ValueError(f"Unknown perturbation family '{family}'. Expected one of {FAMILIES}.")
    if family == "mixed":
        family = FAMILIES[int(rng.integers(2))]
    x1, x2 = mesh.nodes()
    if family == "trig":
        k = np.arange(1, PERTURBATION_MAX_FREQUENCY + 1)
        c = rng.standard_normal((k.size, k.size)) / (k[:, None] + k[None, :]) ** 2
        values = np.einsum(
            "kl,kij,lij->ij",
            c,
            np.sin(np.pi * k[:, None, None] * x1[None]),
            np.sin(np.pi * k[:, None, None] * x2[None]),
        )
    else:
        centre = rng.uniform(0.25, 0.75, size=2)
        radius = rng.uniform(0.1, 0.25)
        r2 = ((x1 - centre[0]) ** 2 + (x2 - centre[1]) ** 2) / radius**2
        values = np.clip(1.0 - r2, 0.0, None) ** 3
    top = float(np.max(np.abs(values)))
    if top == 0.0:
        return NodeField.zeros(mesh)
    amplitude = m * rng.uniform(0.1, 1.0)
    return NodeField(mesh, amplitude * values / top).with_zero_boundary()


@dataclass(frozen=True, eq=False)
class StabilityRecord:
    """One pair of potentials of a stability sweep."""

    N: int
    sample: int
    scale: float
    variant: str
    q_a: NodeField
    q_b: NodeField
    dq_norm: float
    measurement_gap: float
    ratio: float
    bound: float = math.nan
    energy_constant: float = math.nan
    skipped: str = ""

    def as_row(self) -> Dict[str, object]:
        return {
            "N": self.N,
            "h": self.q_a.mesh.h,
            "sample": self.sample,
            "scale": self.scale,
            "variant": self.variant,
            "dq_norm": self.dq_norm,
            "measurement_gap": self.measurement_gap,
            "ratio": self.ratio,
            "bound": self.bound,
            "energy_constant": self.energy_constant,
            "skipped": self.skipped,
        }


def trajectory_regularity(series: TimeSeries) -> float:
    """|y|_{H1(0,T; Linf_h)} from the max norms of y and d_t y at every time."""
    top = np.max(np.abs(series.values), axis=(1, 2))
    rate = np.max(np.abs(series.time_derivative().values), axis=(1, 2))
    return time_norm(top**2 + rate**2, series.dt)


def _observation_gap(
    variant: str, sol_a: WaveSolution, sol_b: WaveSolution, gamma0: SubsetMask, omega
) -> float:
    diff = sol_a.y - sol_b.y
    m = measure(diff, gamma0)
    if variant == "distributed":
        first, second = distributed_observation(diff, omega)
        return first + second + m.pen_norm
    return m.flux_norm + m.pen_norm


def lipschitz_sweep(
    ns: Sequence[int],
    T: float = DEFAULT_T_GAMMA,
    dt_factor: float = DEFAULT_DT_FACTOR,
    samples: int = 20,
    seed: int = 0,
    m: float = DEFAULT_M_CAP,
    alpha0: float = DEFAULT_ALPHA0,
    K: Optional[float] = None,
    family: str = "mixed",
    variant: str = "boundary",
    scales: Sequence[float] = (1.0,),
    collar_width: float = DEFAULT_COLLAR_WIDTH,
    interval: Tuple[float, float] = DEFAULT_GAMMA0_INTERVAL,
    kernel_order: int = DEFAULT_KERNEL_ORDER,
    threads: int = 1,
) -> Tuple[List[StabilityRecord], Dict[int, float]]:
    """
    Ratios |q_a - q_b|_{L2_h} / |M~_h[q_a] - M~_h[q_b]| over random perturbations q_b - q_a.

    Parameters:
        ns (list): Mesh sizes.
        T (float): Final time; T > sqrt(2) for the boundary and distributed variants.
        dt_factor (float): dt = dt_factor h.
        samples (int): Perturbations per mesh; sample k uses the k-th spawned stream.
        seed (int): Root seed.
        m (float): Max-norm cap of the perturbations.
        alpha0 (float): Required lower bound of |y0|.
        K (float): Optional cap on |y[q_a]|_{H1(0,T; Linf_h)}.
        family (str): "trig", "bump" or "mixed".
        variant (str): "boundary" (Gamma_0 = Gamma_+), "distributed" (collar of Gamma_+) or
            "log" (Gamma_0 = {1} x interval, the logarithmic bound reported).
        scales (list): Factors applied to each perturbation.
        threads (int): Worker threads.

    Returns:
        tuple: The records and the max ratio per N over the records that were not skipped.

    Raises:
        ValueError: On unknown variants, T <= sqrt(2) for Lipschitz variants, an alpha0
            violation or a K violation.
    """
    if variant not in VARIANTS:
        raise ValueError(f"Unknown variant '{variant}'. Expected one of {VARIANTS}.")
    if variant != "log" and T <= math.sqrt(2.0):
        raise ValueError(f"The Gamma configuration needs T > sqrt(2), got T={T}.")
    alpha = 2.0 / (2 * kernel_order - 1)
    reference = benchmark_solution(smooth_potential)
    records: List[StabilityRecord] = []
    summary: Dict[int, float] = {}

    for n in ns:
        mesh = Mesh(n)
        data = consistency_data(mesh, reference, T, dt_factor, alpha0)
        if variant == "log":
            gamma0 = edge_mask(mesh, ("x1+",), interval)
        else:
            gamma0 = edge_mask(mesh, ("x1+", "x2+"))
        omega = collar_mask(mesh, collar_width)
        sol_a = data.solve(data.q)
        regularity = trajectory_regularity(sol_a.y)
        if K is not None and regularity > K:
            raise ValueError(
                f"|y[q_a]|_{{H1(Linf)}} = {regularity:.4g} exceeds K = {K:.4g} on N={n}."
            )

        def run(job) -> List[StabilityRecord]:
            index, rng = job
            dq = sample_perturbation(mesh, rng, m, family)
            out = []
            for scale in scales:
                q_b = data.q + dq * scale
                record = dict(N=n, sample=index, scale=scale, variant=variant, q_a=data.q, q_b=q_b)
                dq_norm = norm(dq * scale)
                if dq_norm == 0.0:
                    out.append(
                        StabilityRecord(
                            **record,
                            dq_norm=0.0,
                            measurement_gap=0.0,
                            ratio=math.nan,
                            skipped="identical potentials",
                        )
                    )
                    continue
                sol_b = data.solve(q_b)
                gap = _observation_gap(variant, sol_a, sol_b, gamma0, omega)
                bound = math.nan
                ratio = dq_norm / gap if gap > 0.0 else math.inf
                if variant == "log":
                    bound = log_bound(norm(dq * scale, "H1"), gap, mesh.h, alpha)
                    ratio = dq_norm / bound if bound > 0.0 else math.inf
                out.append(
                    StabilityRecord(
                        **record,
                        dq_norm=dq_norm,
                        measurement_gap=gap,
                        ratio=ratio,
                        bound=bound,
                        energy_constant=energy_bound_constant(sol_a, sol_b, dq * scale),
                    )
                )
            return out

        jobs = list(enumerate(spawn_generators(seed, samples)))
        level = [r for rows in map_samples(run, jobs, threads) for r in rows]
        ratios = [r.ratio for r in level if not r.skipped]
        summary[n] = max(ratios) if ratios else math.nan
        logging.info(f"Stability sweep N={n} ({variant}): max ratio {summary[n]:.6g}")
        records.extend(level)
    return records, summary


@dataclass
class ReconstructionLog:
    """Iteration history of a reconstruction."""

    iterations: List[Dict[str, float]] = field(default_factory=list)
    converged: bool = False
    message: str = ""

    def record(self, iteration: int, J: float, grad_norm: float, step: float) -> None:
        self.iterations.append(
            {"iteration": iteration, "J": J, "grad_norm": grad_norm, "step": step}
        )
        logging.info(f"Iteration {iteration}: J={J:.6e}, |grad|={grad_norm:.3e}, step={step:.3g}")


def _trapezoid_weights(nt: int, dt: float) -> np.ndarray:
    w = np.full(nt, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _measurement_gradient(
    residual: Measurement, series: TimeSeries
) -> Tuple[float, np.ndarray]:
    """
    J = 1/2 (|flux|^2_{H1(L2(Gamma_0))} + sum_k |pen_k|^2) of a residual and dJ/dy at every
    snapshot, zero on the boundary ring.
    """
    mesh, h, dt = residual.mesh, residual.mesh.h, residual.dt
    nt = residual.flux.shape[0]
    w = _trapezoid_weights(nt, dt)
    mask = residual.gamma0.values
    D = time_derivative_matrix(nt, dt)
    D2 = second_time_derivative_matrix(nt, dt)

    F = np.where(mask, residual.flux, 0.0)
    DF = apply_in_time(D, F)
    J = 0.5 * h * float(np.sum(w[:, None, None] * (F**2 + DF**2)))
    g_flux = h * (w[:, None, None] * F + apply_in_time(D.T, w[:, None, None] * DF))
    grad = normal_difference_transpose_array(np.where(mask, g_flux, 0.0), h, mesh.N + 2)

    g_acc = np.zeros_like(series.values)
    for k, pen in zip((1, 2), residual.pen):
        J += 0.5 * h * h * float(np.sum(w[:, None, None] * pen**2))
        g_acc += h * forward_transpose_array(h * h * w[:, None, None] * pen, h, k)
    grad += apply_in_time(D2.T, g_acc)
    grad[:, 0, :] = grad[:, -1, :] = 0.0
    grad[:, :, 0] = grad[:, :, -1] = 0.0
    return J, grad


def objective_and_gradient(
    q: NodeField,
    data: InverseData,
    measured: Measurement,
    eps_reg: float = 0.0,
) -> Tuple[float, np.ndarray]:
    """
    J(q) = 1/2 |M~_h[q] - measured|^2 + eps_reg/2 sum_k |d+_k q|^2 and its gradient with
    respect to the node values of q (plain sums; zero on the boundary), by the discrete
    adjoint of the leapfrog scheme.
    """
    mesh, h = data.mesh, data.mesh.h
    sol = data.solve(q)
    series = sol.y
    if len(series) != measured.flux.shape[0] or abs(series.dt - measured.dt) > 1e-14:
        raise ValueError("The measurement was taken on another time grid.")
    J, g = _measurement_gradient(measure(series, measured.gamma0) - measured, series)

    dt = series.dt
    nt = len(series)
    y = series.values
    lam = np.zeros((nt,) + mesh.shape)
    lam[nt - 1] = g[nt - 1]
    if nt >= 2:
        lam[nt - 2] = g[nt - 2] + 2.0 * lam[nt - 1] + dt * dt * potential_operator(
            lam[nt - 1], q.values, h
        )
    for n in range(nt - 3, 0, -1):
        lam[n] = (
            g[n]
            + 2.0 * lam[n + 1]
            + dt * dt * potential_operator(lam[n + 1], q.values, h)
            - lam[n + 2]
        )
    grad = -dt * dt * (0.5 * lam[1] * y[0] + np.einsum("nij,nij->ij", lam[2:], y[1:-1]))
    if eps_reg > 0.0:
        for k in (1, 2):
            dq = forward_array(q.values, h, k)
            J += 0.5 * eps_reg * h * h * float(np.sum(dq**2))
            grad = grad + eps_reg * h * h * forward_transpose_array(dq, h, k)
    grad[0, :] = grad[-1, :] = 0.0
    grad[:, 0] = grad[:, -1] = 0.0
    return J, grad


def gradient_check(
    q: NodeField,
    data: InverseData,
    measured: Measurement,
    rng: np.random.Generator,
    directions: int = 5,
    eps: float = 1e-3,
    eps_reg: float = 0.0,
) -> Dict[str, object]:
    """
    Compare <grad J, d> with (J(q + eps d) - J(q - eps d)) / (2 eps) along random directions
    vanishing on the boundary; the error slope under eps-halving is fitted on the first one.
    """
    _, grad = objective_and_gradient(q, data, measured, eps_reg)

    def J(values):
        return objective_and_gradient(NodeField(q.mesh, values), data, measured, eps_reg)[0]

    def central(d, e):
        return (J(q.values + e * d) - J(q.values - e * d)) / (2.0 * e)

    errors = []
    first = None
    for _ in range(directions):
        d = NodeField(q.mesh, rng.standard_normal(q.mesh.shape)).with_zero_boundary().values
        exact = float(np.sum(grad * d))
        errors.append(abs(central(d, eps) - exact) / max(abs(exact), np.finfo(float).tiny))
        first = (d, exact) if first is None else first

    d, exact = first
    steps = [eps, eps / 2.0, eps / 4.0]
    gaps = [abs(central(d, e) - exact) for e in steps]
    slopes = convergence_rate(gaps, steps) if min(gaps) > 0.0 else np.array([math.nan])
    result = {
        "relative_errors": errors,
        "max_relative_error": max(errors),
        "slope": float(np.mean(slopes)),
    }
    logging.info(f"Gradient check: max rel. error {result['max_relative_error']:.3e}")
    return result


def _free_mask(mesh: Mesh, known: Optional[np.ndarray]) -> np.ndarray:
    free = np.zeros(mesh.shape, dtype=bool)
    free[1:-1, 1:-1] = True
    if known is not None:
        free &= ~np.asarray(known, dtype=bool)
    return free


def reconstruct(
    measured: Measurement,
    data: InverseData,
    q_init: NodeField,
    method: str = "lbfgs",
    tolerance: float = DEFAULT_GRADIENT_TOLERANCE,
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    eps_reg: float = 0.0,
    known: Optional[np.ndarray] = None,
    known_values: Optional[NodeField] = None,
) -> Tuple[NodeField, ReconstructionLog]:
    """
    Minimize J over the interior values of q outside the known set.

    Parameters:
        measured (Measurement): Target measurement, on the time grid of data.
        data (InverseData): Discrete data of the wave problem.
        q_init (NodeField): Initial guess; its boundary values are kept.
        method (str): "descent" (steepest descent, Armijo backtracking) or "lbfgs".
        tolerance (float): Stop when the gradient max norm falls below it.
        max_iterations (int): Iteration cap.
        eps_reg (float): Weight of the gradient penalty.
        known (np.ndarray): Boolean node mask of the set O where q is known.
        known_values (NodeField): The values of q on O, q_init by default.

    Returns:
        tuple: The reconstructed potential and the iteration log.

    Raises:
        LineSearchError: If the Armijo search fails after 40 halvings.
    """
    if method not in METHODS:
        raise ValueError(f"Unknown method '{method}'. Expected one of {METHODS}.")
    data.mesh.check_same(q_init.mesh)
    free = _free_mask(data.mesh, known)
    base = q_init.values.copy()
    if known is not None:
        source = q_init if known_values is None else known_values
        base[~free] = source.values[~free]
    log = ReconstructionLog()

    def full(x: np.ndarray) -> NodeField:
        values = base.copy()
        values[free] = x
        return NodeField(data.mesh, values)

    last: Dict[bytes, Tuple[float, np.ndarray]] = {}

    def evaluate(x: np.ndarray) -> Tuple[float, np.ndarray]:
        key = x.tobytes()
        if key not in last:
            J, grad = objective_and_gradient(full(x), data, measured, eps_reg)
            last.clear()
            last[key] = (J, grad[free])
        return last[key]

    x = base[free].copy()
    J, g = evaluate(x)
    log.record(0, J, float(np.max(np.abs(g), initial=0.0)), 0.0)
    if J == 0.0 or np.max(np.abs(g), initial=0.0) < tolerance:
        log.converged, log.message = True, "initial guess is stationary"
        return full(x), log

    if method == "lbfgs":
        counter = {"n": 0}

        def callback(xk):
            counter["n"] += 1
            Jk, gk = evaluate(xk)
            log.record(counter["n"], Jk, float(np.max(np.abs(gk))), math.nan)

        result = minimize(
            evaluate,
            x,
            jac=True,
            method="L-BFGS-B",
            callback=callback,
            options={"maxiter": max_iterations, "gtol": tolerance, "ftol": 0.0},
        )
        log.converged, log.message = bool(result.success), str(result.message)
        return full(result.x), log

    step = 1.0 / max(float(np.max(np.abs(g))), 1.0)
    for iteration in range(1, max_iterations + 1):
        slope = float(np.dot(g, g))
        for _ in range(ARMIJO_MAX_HALVINGS):
            candidate = x - step * g
            J_new, g_new = evaluate(candidate)
            if J_new <= J - ARMIJO_SLOPE * step * slope:
                break
            step *= 0.5
        else:
            raise LineSearchError(
                f"Line search failed after {ARMIJO_MAX_HALVINGS} halvings at iteration "
                f"{iteration}: J={J:.6e}, |grad|={math.sqrt(slope):.3e}, step={step:.3e}."
            )
        x, J, g = candidate, J_new, g_new
        grad_norm = float(np.max(np.abs(g)))
        log.record(iteration, J, grad_norm, step)
        if grad_norm < tolerance or J == 0.0:
            log.converged, log.message = True, "gradient tolerance reached"
            break
        step *= 2.0
    else:
        log.message = "iteration cap reached"
    return full(x), log


def potential_error(q_h: NodeField, q: SpatialFunction) -> float:
    """|e_h^0(q_h) - q| in L2 over the cells of the interior nodes."""
    return extend_constant(q_h).l2_distance(q, interior_cells=True)


def continuous_measurement_gap(
    sol: WaveSolution, reference: ManufacturedSolution, gamma0: SubsetMask
) -> float:
    """Distance between M~_h[q_h] and the exact flux of the reference (whose pen part is 0)."""
    series = sol.y
    m = measure(series, gamma0)
    exact = np.where(gamma0.values, reference.continuous_flux(series.mesh, series.times), 0.0)
    return flux_h1_norm(m.flux - exact, series.mesh, series.dt, gamma0) + m.pen_norm


def convergence_study(
    ns: Sequence[int],
    mode: str = "exact",
    q_true: SpatialFunction = smooth_potential,
    T: float = DEFAULT_T_GAMMA,
    dt_factor: float = DEFAULT_DT_FACTOR,
    method: str = "lbfgs",
    max_iterations: int = DEFAULT_MAX_ITERATIONS,
    tolerance: float = DEFAULT_GRADIENT_TOLERANCE,
    eps_reg: float = 0.0,
    threads: int = 1,
) -> List[Dict[str, float]]:
    """
    Potential error and measurement gap over a sequence of meshes.

    In "exact" mode q_h = r~_h(q_true); in "reconstruct" mode q_h is reconstructed from the
    noiseless measurement of the consistency data, starting from q_h = 1 inside with the
    boundary values of r~_h(q_true). The observation set is Gamma_+.
    """
    if mode not in ("exact", "reconstruct"):
        raise ValueError(f"Unknown mode '{mode}'. Expected 'exact' or 'reconstruct'.")
    ns = list(ns)
    if not ns:
        raise ValueError("The convergence study needs at least one mesh size.")
    reference = benchmark_solution(q_true)

    def run(n: int) -> Dict[str, float]:
        mesh = Mesh(n)
        data = consistency_data(mesh, reference, T, dt_factor)
        gamma0 = edge_mask(mesh, ("x1+", "x2+"))
        iterations = 0
        if mode == "exact":
            q_h = data.q
        else:
            measured = measure(data.solve(data.q), gamma0)
            start = data.q.values.copy()
            start[1:-1, 1:-1] = 1.0
            q_h, log = reconstruct(
                measured,
                data,
                NodeField(mesh, start),
                method=method,
                tolerance=tolerance,
                max_iterations=max_iterations,
                eps_reg=eps_reg,
            )
            iterations = len(log.iterations) - 1
        row = {
            "N": n,
            "h": mesh.h,
            "potential_error": potential_error(q_h, q_true),
            "measurement_gap": continuous_measurement_gap(data.solve(q_h), reference, gamma0),
            "iterations": iterations,
        }
        logging.info(f"Convergence N={n}: error={row['potential_error']:.6e}")
        return row

    rows = list(map_samples(run, ns, threads))
    if len(rows) > 1:
        errors = [r["potential_error"] for r in rows]
        rates = (
            convergence_rate(errors, [r["h"] for r in rows])
            if min(errors) > 0.0
            else np.full(len(rows) - 1, math.nan)
        )
        for row, rate in zip(rows[1:], rates):
            row["rate"] = float(rate)
    rows[0]["rate"] = math.nan
    return rows


def error_monotone(rows: Sequence[Dict[str, float]], slack: float = 0.1) -> bool:
    """Potential errors decrease along the refinement up to a relative slack."""
    errors = [r["potential_error"] for r in rows]
    return all(b <= (1.0 + slack) * a for a, b in zip(errors, errors[1:]))
