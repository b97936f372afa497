import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.integrate import trapezoid
from scipy.optimize import minimize_scalar

from pywclab.wclab.carleman_hyperbolic import (
    CarlemanTerms,
    InadmissibleParameterError,
    left_nodes,
    spacetime_integral,
    staggered_spacetime_integral,
    time_cutoff,
)
from pywclab.wclab.constants import (
    BOUNDARY_SAMPLES,
    CG_ITERATION_FACTOR,
    CG_TOLERANCE,
    CHORD_FRACTION,
    DEFAULT_ELLIPTIC_R0,
    DEFAULT_ELLIPTIC_RADIUS,
    DEFAULT_EPS_TAU_H,
    DEFAULT_GAMMA0_INTERVAL,
    DEFAULT_MU,
    EXTREMA_SUBDIVISION,
    REFINEMENT_PENALTY,
    REFINEMENT_SWEEPS,
    S_HALF_WIDTH,
    S_PLATEAU,
)
from pywclab.wclab.diffops import (
    BoundaryConditionError,
    forward_array,
    laplacian_array,
    normal_difference_array,
)
from pywclab.wclab.grid import (
    ContinuousFunction,
    Mesh,
    NodeField,
    SubsetMask,
    boundary_integral,
    edge_mask,
    interior_integral,
    norm,
    trace_array,
)

"""
The elliptic side of the logarithmic stability argument: the Dirichlet problem
-Delta_h w + q w = g with its H^2_h regularity ratio, the cylinder (-3, 3) x Omega_h with the
operator -d_ss - Delta_h + q, the weight phi_r = exp(mu (psi_r(x) - s^2)) and the two sides
of the elliptic Carleman estimate.

The weight is built around the observed sub-edge Gamma_0 = {1} x (c, d). With m = (c + d)/2,
psi_r(x) = Z (rho^2 - |x - x_c|^2) for a centre x_c = (1 + kappa, m) outside the square, so
omega_r = {psi_r > 0} is the lens cut from the square by a circle through two points of
Gamma_0. Its boundary off Gamma_+ is a smooth arc on which psi_r vanishes and d_nu psi_r < 0,
and |grad psi_r| >= 2 Z kappa everywhere.
"""

WEIGHT_BULLETS = (
    "psi >= 0 on the closure of omega_r",
    "inf |grad psi| > 0 on omega_{r,R}",
    "d_nu psi < 0 on the boundary of omega_r off Gamma_0",
    "psi = 0 on the boundary of omega_r off Gamma_+",
    "psi <= 1/2 on omega_r and |psi| <= 1 on the square",
)
ORDERING = "I_omega > max(S_C, S_(2,3))"


class IndefiniteOperatorError(RuntimeError):
    """Raised when conjugate gradients meet a direction of non-positive curvature."""


class WeightConstructionError(ValueError):
    """Raised when the elliptic weight misses one of its required properties."""


@dataclass(frozen=True, eq=False)
class EllipticProblem:
    """
    The Dirichlet problem -Delta_h w + q w = g, w = 0 on the boundary of Omega_h.

    Parameters:
        mesh (Mesh): The grid.
        q (NodeField): Potential.
        g (NodeField): Right-hand side; its boundary values are ignored.
    """

    mesh: Mesh
    q: NodeField
    g: NodeField

    def __post_init__(self):
        self.mesh.check_same(self.q.mesh)
        self.mesh.check_same(self.g.mesh)

    @property
    def q_bound(self) -> float:
        """The stored m with |q|_{L^inf_h} <= m."""
        return norm(self.q, "Linf")


def elliptic_matrix(mesh: Mesh, q: Optional[NodeField] = None) -> sparse.csr_matrix:
    """Sparse -Delta_h + q on the N^2 interior unknowns, row-major in (i, j)."""
    n, h = mesh.N, mesh.h
    second = sparse.diags([-np.ones(n - 1), 2.0 * np.ones(n), -np.ones(n - 1)], [-1, 0, 1]) / h**2
    eye = sparse.identity(n)
    matrix = sparse.kron(second, eye) + sparse.kron(eye, second)
    if q is not None:
        matrix = matrix + sparse.diags(q.interior.ravel())
    return matrix.tocsr()


def conjugate_gradient(
    A: sparse.spmatrix,
    b: np.ndarray,
    tolerance: float = CG_TOLERANCE,
    max_iter: Optional[int] = None,
) -> Tuple[np.ndarray, int]:
    """
    Jacobi-preconditioned conjugate gradients from a zero initial guess.

    Returns:
        tuple: The solution and the number of iterations.

    Raises:
        IndefiniteOperatorError: If the diagonal or a search direction has non-positive
            curvature.
        ValueError: If the relative residual stays above tolerance after max_iter iterations.
    """
    max_iter = CG_ITERATION_FACTOR * b.size if max_iter is None else max_iter
    diagonal = A.diagonal()
    if np.any(diagonal <= 0.0):
        raise IndefiniteOperatorError(
            f"Non-positive diagonal entry {float(np.min(diagonal)):.3e}; the operator is not "
            "positive definite."
        )
    x = np.zeros_like(b, dtype=float)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0

    r = b.astype(float).copy()
    z = r / diagonal
    p = z.copy()
    rz = float(r @ z)
    for counter in range(1, max_iter + 1):
        Ap = A @ p
        curvature = float(p @ Ap)
        if curvature <= 0.0:
            raise IndefiniteOperatorError(
                f"Negative curvature p^T A p = {curvature:.3e} at iteration {counter}; the "
                "operator is not positive definite."
            )
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * Ap
        relres = float(np.linalg.norm(r)) / b_norm
        if relres < tolerance:
            return x, counter
        z = r / diagonal
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise ValueError(
        f"Maximum number of iterations exceeded. Number of iters: {max_iter}. "
        f"relres = {relres:.3e}"
    )


def solve_elliptic(p: EllipticProblem) -> NodeField:
    """
    Dirichlet-zero solution of -Delta_h w + q w = g.

    Raises:
        IndefiniteOperatorError: If q makes the operator indefinite.
    """
    mesh = p.mesh
    w, iterations = conjugate_gradient(elliptic_matrix(mesh, p.q), p.g.interior.ravel())
    logging.info(f"Elliptic solve: N={mesh.N}, {iterations} CG iterations.")
    values = np.zeros(mesh.shape)
    values[1:-1, 1:-1] = w.reshape(mesh.N, mesh.N)
    return NodeField(mesh, values)


def elliptic_residual(p: EllipticProblem, w: NodeField) -> float:
    """|-Delta_h w + q w - g|_{L^2_h}."""
    residual = -laplacian_array(w.values, p.mesh.h)
    residual[1:-1, 1:-1] += p.q.interior * w.interior - p.g.interior
    return norm(NodeField(p.mesh, residual))


def h2_regularity_ratio(p: EllipticProblem, w: Optional[NodeField] = None) -> float:
    """
    |w|_{H^2_h} / |g|_{L^2_h} for the solution w of the problem.

    Raises:
        ValueError: If g vanishes, where the ratio is undefined.
    """
    g_norm = norm(p.g.with_zero_boundary())
    if g_norm == 0.0:
        raise ValueError("The regularity ratio is undefined for g = 0.")
    w = solve_elliptic(p) if w is None else w
    return norm(w, "H2") / g_norm


def regularity_sweep(
    ns: Sequence[int],
    q: Optional[ContinuousFunction] = None,
    g: Optional[ContinuousFunction] = None,
) -> List[Dict[str, float]]:
    """
    H^2_h regularity ratios of the Dirichlet problem for a fixed smooth (q, g), one row per
    mesh size. By default q = 1 + x1 x2 and g = sin(pi x1) sin(2 pi x2) + x1.
    """
    q = (lambda x1, x2: 1.0 + x1 * x2) if q is None else q
    g = (lambda x1, x2: np.sin(np.pi * x1) * np.sin(2.0 * np.pi * x2) + x1) if g is None else g
    rows = []
    for n in ns:
        mesh = Mesh(n)
        problem = EllipticProblem(
            mesh, NodeField.from_function(mesh, q), NodeField.from_function(mesh, g)
        )
        w = solve_elliptic(problem)
        rows.append(
            {
                "N": n,
                "h": mesh.h,
                "ratio": h2_regularity_ratio(problem, w),
                "residual": elliptic_residual(problem, w),
            }
        )
        logging.info(f"Regularity ratio N={n}: {rows[-1]['ratio']:.6g}")
    return rows


def s_grid(h: float, half_width: float = S_HALF_WIDTH, step: Optional[float] = None) -> np.ndarray:
    """Uniform grid of [-half_width, half_width] with step at most `step` (h by default)."""
    step = h if step is None else step
    if step <= 0 or half_width <= 0:
        raise ValueError(f"step and half_width must be positive, got {step}, {half_width}.")
    intervals = max(math.ceil(2.0 * half_width / step - 1e-9), 2)
    return np.linspace(-half_width, half_width, intervals + 1)


@dataclass(frozen=True, eq=False)
class CylinderField:
    """Node field on the cylinder: values of shape (ns, N+2, N+2) over the s-grid."""

    mesh: Mesh
    s: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        s = np.array(self.s, dtype=float)
        steps = np.diff(s)
        if s.ndim != 1 or s.size < 3 or np.any(steps <= 0) or np.ptp(steps) > 1e-9 * steps[0]:
            raise ValueError("The s-grid must be uniform, increasing and hold at least 3 points.")
        values = np.array(self.values, dtype=float)
        shape = (s.size,) + self.mesh.shape
        if values.shape != shape:
            raise ValueError(f"Expected values of shape {shape}, got {values.shape}.")
        s.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "values", values)

    @property
    def ds(self) -> float:
        return float(self.s[1] - self.s[0])

    @classmethod
    def zeros(cls, mesh: Mesh, s: np.ndarray) -> "CylinderField":
        return cls(mesh, s, np.zeros((len(s),) + mesh.shape))

    def __add__(self, other: "CylinderField") -> "CylinderField":
        self.mesh.check_same(other.mesh)
        return CylinderField(self.mesh, self.s, self.values + other.values)

    def __mul__(self, factor: float) -> "CylinderField":
        return CylinderField(self.mesh, self.s, factor * self.values)

    __rmul__ = __mul__


def apply_cylinder_operator(w: CylinderField, q: Optional[NodeField] = None) -> CylinderField:
    """(-d_ss - Delta_h + q) w at interior s and x nodes, zero elsewhere."""
    v, h, ds = w.values, w.mesh.h, w.ds
    out = -laplacian_array(v, h)
    out[1:-1, 1:-1, 1:-1] -= (
        v[2:, 1:-1, 1:-1] - 2.0 * v[1:-1, 1:-1, 1:-1] + v[:-2, 1:-1, 1:-1]
    ) / (ds * ds)
    if q is not None:
        w.mesh.check_same(q.mesh)
        out[:, 1:-1, 1:-1] += q.interior * v[:, 1:-1, 1:-1]
    out[0] = 0.0
    out[-1] = 0.0
    return CylinderField(w.mesh, w.s, out)


@dataclass(frozen=True)
class EllipticWeight:
    """
    psi_r(x) = scale (rho^2 - |x - x_c|^2), x_c = (1 + kappa, m), and
    phi_r(s, x) = exp(mu (psi_r(x) - s^2)), with the geometry omega_r = {psi_r > 0},
    omega_{r,R} = {d(x, omega_r) < R}, the annulus C_r = {R/2 <= d(x, omega_r) <= R}, and the
    sampled extrema of psi_r that give I_omega, S, S_(2,3) and S_C.

    s_window is the half-width eps_0 of the s-slab on which I_omega is taken.
    """

    interval: Tuple[float, float]
    kappa: float
    rho: float
    scale: float
    R: float
    R0: float
    mu: float
    s_window: float = 0.0
    psi_inf_omega: float = 0.0
    psi_sup: float = 0.0
    psi_sup_annulus: float = 0.0

    @property
    def centre(self) -> Tuple[float, float]:
        return (1.0 + self.kappa, 0.5 * (self.interval[0] + self.interval[1]))

    @property
    def depth(self) -> float:
        return self.rho - self.kappa

    @property
    def half_chord(self) -> float:
        return math.sqrt(self.rho**2 - self.kappa**2)

    def psi(self, x1, x2) -> np.ndarray:
        c1, c2 = self.centre
        return self.scale * (self.rho**2 - (np.asarray(x1) - c1) ** 2 - (np.asarray(x2) - c2) ** 2)

    def grad_psi(self, x1, x2) -> Tuple[np.ndarray, np.ndarray]:
        c1, c2 = self.centre
        return -2.0 * self.scale * (np.asarray(x1) - c1), -2.0 * self.scale * (np.asarray(x2) - c2)

    def phi(self, s, x1, x2) -> np.ndarray:
        """phi_r on s x space; the s axes come first."""
        psi = np.asarray(self.psi(x1, x2), dtype=float)
        s = np.asarray(s, dtype=float)
        return np.exp(self.mu * (psi - (s**2).reshape(s.shape + (1,) * psi.ndim)))

    def distance(self, x1, x2) -> np.ndarray:
        """Euclidean distance from points of the closed square to omega_r."""
        x1, x2 = np.broadcast_arrays(np.asarray(x1, dtype=float), np.asarray(x2, dtype=float))
        c1, c2 = self.centre
        r = np.hypot(x1 - c1, x2 - c2)
        with np.errstate(invalid="ignore", divide="ignore"):
            projected = c1 + self.rho * (x1 - c1) / r
        to_corner = np.minimum(
            np.hypot(x1 - 1.0, x2 - (c2 + self.half_chord)),
            np.hypot(x1 - 1.0, x2 - (c2 - self.half_chord)),
        )
        outside = np.where(projected <= 1.0, r - self.rho, to_corner)
        return np.where((r <= self.rho) & (x1 <= 1.0), 0.0, outside)

    def omega_nodes(self, mesh: Mesh) -> np.ndarray:
        """Boolean node array of the interior nodes in omega_r."""
        x1, x2 = mesh.nodes()
        return _interior_only(self.psi(x1, x2) > 0.0)

    def neighbourhood(self, mesh: Mesh, radius: Optional[float] = None) -> np.ndarray:
        """Boolean node array of the interior nodes at distance < radius (R) from omega_r."""
        radius = self.R if radius is None else radius
        x1, x2 = mesh.nodes()
        return _interior_only(self.distance(x1, x2) < radius)

    def annulus_nodes(self, mesh: Mesh) -> np.ndarray:
        x1, x2 = mesh.nodes()
        d = self.distance(x1, x2)
        return _interior_only((d >= 0.5 * self.R) & (d <= self.R))

    def gamma0(self, mesh: Mesh) -> SubsetMask:
        return edge_mask(mesh, ("x1+",), self.interval)

    @property
    def I_omega(self) -> float:
        return math.exp(self.mu * (self.psi_inf_omega - self.s_window**2))

    @property
    def S(self) -> float:
        return math.exp(self.mu * self.psi_sup)

    @property
    def S_23(self) -> float:
        return math.exp(self.mu * (self.psi_sup - S_PLATEAU**2))

    @property
    def S_C(self) -> float:
        return math.exp(self.mu * self.psi_sup_annulus)

    @property
    def gap(self) -> float:
        return self.I_omega - max(self.S_C, self.S_23)

    def extrema(self) -> Dict[str, float]:
        return {
            "I_omega": self.I_omega,
            "S": self.S,
            "S_23": self.S_23,
            "S_C": self.S_C,
            "gap": self.gap,
            "s_window": self.s_window,
            "psi_inf_omega": self.psi_inf_omega,
            "psi_sup": self.psi_sup,
            "psi_sup_annulus": self.psi_sup_annulus,
        }


def _interior_only(values: np.ndarray) -> np.ndarray:
    values = np.array(values, dtype=bool)
    values[0, :] = values[-1, :] = values[:, 0] = values[:, -1] = False
    return values


def _refine_max(fn, violation, point: Tuple[float, float], step: float) -> float:
    """
    Coordinate-wise bounded refinement of a sampled maximiser of fn on {violation = 0}.
    Moves are kept only when they stay feasible and improve fn.
    """
    x = [float(point[0]), float(point[1])]
    best = float(fn(*x))
    for _ in range(REFINEMENT_SWEEPS):
        for axis in (0, 1):

            def objective(value):
                y = list(x)
                y[axis] = value
                return -float(fn(*y)) + REFINEMENT_PENALTY * float(violation(*y))

            lo, hi = max(0.0, x[axis] - step), min(1.0, x[axis] + step)
            result = minimize_scalar(objective, bounds=(lo, hi), method="bounded")
            candidate = list(x)
            candidate[axis] = float(result.x)
            value = float(fn(*candidate))
            if float(violation(*candidate)) <= 0.0 and value > best:
                x, best = candidate, value
    return best


def _sampled_extrema(weight: EllipticWeight, mesh: Mesh) -> Tuple[float, float, float]:
    """inf of psi over omega_r, sup over the square and sup over C_r: grid at h/4, refined."""
    step = mesh.h / EXTREMA_SUBDIVISION
    xs = np.linspace(0.0, 1.0, EXTREMA_SUBDIVISION * (mesh.N + 1) + 1)
    x1, x2 = np.meshgrid(xs, xs, indexing="ij")
    psi = weight.psi(x1, x2)
    d = weight.distance(x1, x2)
    R = weight.R

    def neg_psi(a, b):
        return -weight.psi(a, b)

    def in_lens(a, b):
        return weight.distance(a, b)

    def in_annulus(a, b):
        dist = float(weight.distance(a, b))
        return max(0.0, 0.5 * R - dist) + max(0.0, dist - R)

    def free(a, b):
        return 0.0

    lens = d <= 0.0
    annulus = (d >= 0.5 * R) & (d <= R)
    if not lens.any() or not annulus.any():
        raise ValueError(f"omega_r or its annulus holds no sample at h/4 = {step:.4g}.")

    def best_point(values, mask):
        index = np.unravel_index(np.argmax(np.where(mask, values, -np.inf)), values.shape)
        return x1[index], x2[index]

    inf_omega = -_refine_max(neg_psi, in_lens, best_point(-psi, lens), step)
    sup = _refine_max(weight.psi, free, best_point(psi, np.ones_like(lens)), step)
    sup_annulus = _refine_max(weight.psi, in_annulus, best_point(psi, annulus), step)
    return inf_omega, sup, sup_annulus


def weight_failures(weight: EllipticWeight, mesh: Mesh) -> List[str]:
    """Names of the required properties of psi_r that fail on dense samples."""
    c1, c2 = weight.centre
    lo, hi = weight.interval
    xs = np.linspace(0.0, 1.0, EXTREMA_SUBDIVISION * (mesh.N + 1) + 1)
    x1, x2 = np.meshgrid(xs, xs, indexing="ij")
    psi = weight.psi(x1, x2)
    d = weight.distance(x1, x2)

    opening = math.acos(min(1.0, weight.kappa / weight.rho))
    angles = np.linspace(math.pi - opening, math.pi + opening, BOUNDARY_SAMPLES // 2)
    arc1 = c1 + weight.rho * np.cos(angles)
    arc2 = c2 + weight.rho * np.sin(angles)
    chord2 = np.linspace(c2 - weight.half_chord, c2 + weight.half_chord, BOUNDARY_SAMPLES // 2)
    arc_psi = weight.psi(arc1, arc2)

    failures = []
    if min(float(np.min(psi[d <= 0.0], initial=np.inf)), float(np.min(arc_psi))) < -1e-12:
        failures.append(WEIGHT_BULLETS[0])
    g1, g2 = weight.grad_psi(x1, x2)
    grad = np.hypot(g1, g2)[d < weight.R]
    if grad.size == 0 or float(np.min(grad)) <= 1e-8:
        failures.append(WEIGHT_BULLETS[1])
    a1, a2 = weight.grad_psi(arc1, arc2)
    arc_normal = (a1 * (arc1 - c1) + a2 * (arc2 - c2)) / weight.rho
    chord_normal, _ = weight.grad_psi(np.ones_like(chord2), chord2)
    off_gamma0 = (chord2 <= lo) | (chord2 >= hi)
    if np.any(arc_normal >= 0.0) or np.any(chord_normal[off_gamma0] >= 0.0):
        failures.append(WEIGHT_BULLETS[2])
    inside_square = np.all((arc1 > 0.0) & (arc2 > 0.0) & (arc2 < 1.0))
    if not inside_square or float(np.max(np.abs(arc_psi))) > 1e-12:
        failures.append(WEIGHT_BULLETS[3])
    lens_max = max(
        float(np.max(psi[d <= 0.0], initial=-np.inf)), weight.scale * weight.half_chord**2
    )
    if lens_max > 0.5 + 1e-12 or float(np.max(np.abs(psi))) > 1.0 + 1e-12:
        failures.append(WEIGHT_BULLETS[4])
    return failures


def build_elliptic_weight(
    mesh: Mesh,
    interval: Tuple[float, float] = DEFAULT_GAMMA0_INTERVAL,
    depth: Optional[float] = None,
    R: float = DEFAULT_ELLIPTIC_RADIUS,
    R0: float = DEFAULT_ELLIPTIC_R0,
    mu: float = DEFAULT_MU,
    chord_fraction: float = CHORD_FRACTION,
) -> EllipticWeight:
    """
    Build psi_r for Gamma_0 = {1} x interval and check its properties on samples at h/4.

    Parameters:
        mesh (Mesh): Sets the sampling resolution h/4.
        interval (tuple): The observed sub-interval (c, d) of the edge x1 = 1.
        depth (float): Width of omega_r along x1; half the half-length of Gamma_0 by default.
        R (float): Radius of omega_{r,R}, in (0, R0/2).
        R0 (float): Radius of the set around omega_r on which sources must vanish.
        mu (float): Exponent of phi_r.
        chord_fraction (float): The lens meets Gamma_0 on this fraction of its length.

    Returns:
        EllipticWeight: The weight with its extrema and the s-window eps_0.

    Raises:
        WeightConstructionError: Listing every required property that fails.
    """
    c, d = (float(v) for v in interval)
    if not 0.0 <= c < d <= 1.0:
        raise ValueError(f"Gamma_0 interval must satisfy 0 <= c < d <= 1, got {interval}.")
    if not 0.0 < R < 0.5 * R0:
        raise ValueError(f"R must lie in (0, R0/2), got R={R}, R0={R0}.")
    if not 0.0 < chord_fraction < 1.0:
        raise ValueError(f"chord_fraction must lie in (0, 1), got {chord_fraction}.")
    if mu < 1.0:
        raise ValueError(f"mu must be >= 1, got {mu}.")
    half = 0.5 * (d - c)
    depth = 0.5 * half if depth is None else float(depth)
    chord = chord_fraction * half
    kappa = (chord**2 - depth**2) / (2.0 * depth) if depth > 0 else -1.0
    if kappa <= 0.0:
        raise WeightConstructionError(
            f"Weight construction failed: {WEIGHT_BULLETS[1]} (depth {depth:.4g} must be "
            f"smaller than {chord:.4g} so that grad psi does not vanish in the square)."
        )
    rho = kappa + depth
    m = 0.5 * (c + d)
    top = rho**2 - kappa**2
    bottom = (1.0 + kappa) ** 2 + max(m, 1.0 - m) ** 2 - rho**2
    weight = EllipticWeight(
        interval=(c, d),
        kappa=kappa,
        rho=rho,
        scale=min(0.5 / top, 1.0 / bottom),
        R=float(R),
        R0=float(R0),
        mu=float(mu),
    )

    failures = weight_failures(weight, mesh)
    inf_omega, sup, sup_annulus = _sampled_extrema(weight, mesh)
    level = max(sup_annulus - inf_omega, sup - S_PLATEAU**2 - inf_omega)
    if level >= 0.0:
        failures.append(ORDERING)
    if failures:
        raise WeightConstructionError("Weight construction failed: " + "; ".join(failures))

    weight = replace(
        weight,
        s_window=math.sqrt(-0.5 * level),
        psi_inf_omega=inf_omega,
        psi_sup=sup,
        psi_sup_annulus=sup_annulus,
    )
    logging.info(
        f"Elliptic weight: kappa={kappa:.4g}, rho={rho:.4g}, scale={weight.scale:.4g}, "
        f"eps0={weight.s_window:.4g}, gap={weight.gap:.4g}"
    )
    return weight


def cylinder_bump(
    weight: EllipticWeight, mesh: Mesh, s: np.ndarray, radius: Optional[float] = None
) -> CylinderField:
    """
    w(s, x) = chi_S(s) b(x), b = x1 (1 - x1) x2 (1 - x2) (1 - d(x, omega_r)/radius)_+^3,
    supported in (-3, 3) x omega_{r,R} for radius <= R.
    """
    radius = weight.R if radius is None else radius
    chi, _, _ = time_cutoff(s, S_HALF_WIDTH, S_HALF_WIDTH - S_PLATEAU)
    x1, x2 = mesh.nodes()
    profile = np.clip(1.0 - weight.distance(x1, x2) / radius, 0.0, None) ** 3
    bump = x1 * (1.0 - x1) * x2 * (1.0 - x2) * profile
    bump[~weight.neighbourhood(mesh, radius)] = 0.0
    return CylinderField(mesh, s, chi[:, None, None] * bump[None, :, :])


def check_cylinder_admissible(weight: EllipticWeight, w: CylinderField) -> None:
    """
    Raises:
        BoundaryConditionError: If w does not vanish at s = +-3 or on the boundary of Omega_h.
        ValueError: If w is not supported in (-3, 3) x omega_{r,R}.
    """
    if not (
        math.isclose(w.s[0], -S_HALF_WIDTH, abs_tol=1e-12)
        and math.isclose(w.s[-1], S_HALF_WIDTH, abs_tol=1e-12)
    ):
        raise ValueError(f"The s-grid must span [-3, 3], got [{w.s[0]}, {w.s[-1]}].")
    v = w.values
    ring = np.concatenate([v[:, 0, :], v[:, -1, :], v[:, :, 0], v[:, :, -1]], axis=None)
    if np.any(v[0] != 0.0) or np.any(v[-1] != 0.0) or np.any(ring != 0.0):
        raise BoundaryConditionError("w must vanish at s = +-3 and on the boundary of Omega_h.")
    outside = ~weight.neighbourhood(w.mesh)
    if np.any(v[:, outside] != 0.0):
        raise ValueError("w is not supported in (-3, 3) x omega_{r,R}.")


def elliptic_carleman_functionals(
    weight: EllipticWeight,
    w: CylinderField,
    tau: float,
    q: Optional[NodeField] = None,
    g: Optional[CylinderField] = None,
    eps_tau_h: float = DEFAULT_EPS_TAU_H,
) -> CarlemanTerms:
    """
    Both sides of the elliptic Carleman estimate on the cylinder.

    lhs: tau^3 |e^{tau phi} w|^2 + tau |e^{tau phi} d_s w|^2 + tau sum_k |e^{tau phi} d+_k w|^2
    rhs: |e^{tau phi} g|^2 + tau |e^{tau phi} d_nu w|^2 on Gamma_0

    g defaults to (-d_ss - Delta_h + q) w. Weighted integrals use exp(2 tau (phi - max phi)).

    Raises:
        InadmissibleParameterError: If tau h > eps_tau_h.
        BoundaryConditionError, ValueError: If w violates the boundary or support conditions.
    """
    mesh, h, ds = w.mesh, w.mesh.h, w.ds
    if tau < 0.0:
        raise ValueError(f"tau must be >= 0, got {tau}.")
    if tau * h > eps_tau_h * (1.0 + 1e-12):
        raise InadmissibleParameterError(
            f"inadmissible-parameter: tau*h = {tau * h:.4g} exceeds {eps_tau_h:.4g}."
        )
    check_cylinder_admissible(weight, w)
    g = apply_cylinder_operator(w, q) if g is None else g
    mesh.check_same(g.mesh)

    v = w.values
    x1, x2 = mesh.nodes()
    phi = weight.phi(w.s, x1, x2)
    top = float(np.max(phi))
    E = np.exp(2.0 * tau * (phi - top))
    ds_w = np.diff(v, axis=0) / ds
    flux2 = normal_difference_array(v, h) ** 2
    gamma0 = weight.gamma0(mesh)

    terms = {
        "lhs_zero": tau**3 * spacetime_integral(E * v**2, h, ds),
        "lhs_ds": tau * ds * float(np.sum(interior_integral(E[:-1] * ds_w**2, h))),
        "lhs_grad": tau
        * math.fsum(
            staggered_spacetime_integral(left_nodes(E, k) * forward_array(v, h, k) ** 2, h, ds)
            for k in (1, 2)
        ),
        "rhs_source": spacetime_integral(E * g.values**2, h, ds),
        "rhs_boundary": tau
        * float(trapezoid(boundary_integral(trace_array(E) * flux2, h, gamma0.values), dx=ds)),
    }
    lhs = math.fsum(value for name, value in terms.items() if name.startswith("lhs_"))
    rhs = math.fsum(value for name, value in terms.items() if name.startswith("rhs_"))
    return CarlemanTerms(
        variant="elliptic", terms=terms, lhs=lhs, rhs=rhs, log_scale=2.0 * tau * top
    )


def elliptic_carleman_sweep(
    ns: Sequence[int],
    tau_h: float = 0.1,
    mu: float = DEFAULT_MU,
    interval: Tuple[float, float] = DEFAULT_GAMMA0_INTERVAL,
    R: float = DEFAULT_ELLIPTIC_RADIUS,
    R0: float = DEFAULT_ELLIPTIC_R0,
    s_step_factor: float = 1.0,
    q: Optional[NodeField] = None,
) -> List[Dict[str, float]]:
    """
    Ratio lhs/rhs of the elliptic estimate for the cylinder bump at tau = tau_h / h, one row
    per mesh size. q, when given, is only used on meshes it lives on.
    """
    rows = []
    for n in ns:
        mesh = Mesh(n)
        weight = build_elliptic_weight(mesh, interval=interval, R=R, R0=R0, mu=mu)
        s = s_grid(mesh.h, step=s_step_factor * mesh.h)
        w = cylinder_bump(weight, mesh, s)
        potential = q if q is not None and q.mesh == mesh else None
        result = elliptic_carleman_functionals(weight, w, tau_h / mesh.h, q=potential)
        logging.info(f"Elliptic Carleman N={n}: ratio={result.ratio:.6g}")
        rows.append(
            {
                "N": n,
                "h": mesh.h,
                "tau": tau_h / mesh.h,
                "lhs": result.lhs,
                "rhs": result.rhs,
                "ratio": result.ratio,
                "log_scale": result.log_scale,
                "gap": weight.gap,
                **result.terms,
            }
        )
    return rows
