import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from pywclab.wclab.constants import EDGE_NAMES, IPP_IDENTITIES
from pywclab.wclab.grid import BoundaryTrace, Mesh, NodeField, StaggeredField
from pywclab.wclab.utils import map_samples, spawn_generators

"""
Difference and averaging operators of the 5-point scheme, and checks of the discrete
integration by parts formulas.

Array-level functions act on the last two axes of node arrays (..., N+2, N+2), so they apply
unchanged to a whole time series. Centered operators fill interior nodes only; the boundary
ring of their output is zero.
"""

OPERATOR_NAMES = (
    "laplacian",
    "laplacian_axis",
    "centered",
    "forward",
    "backward",
    "mean",
    "mean_forward",
    "mean_backward",
    "gradient",
    "box",
)
_AXIS_OPERATORS = {
    "laplacian_axis",
    "centered",
    "forward",
    "backward",
    "mean",
    "mean_forward",
    "mean_backward",
}
_ZERO_BOUNDARY_IDENTITIES = {"IPP3", "IPP5", "IPPnew", "New1"}


class BoundaryConditionError(ValueError):
    """Raised when a field required to vanish on the boundary does not."""


@dataclass(frozen=True)
class OperatorTag:
    """
    Names a discrete operator. Axis-dependent operators need axis 1 or 2.

    Output kinds: "laplacian", "laplacian_axis", "centered", "mean" and "box" give interior
    node values; "forward"/"mean_forward" give a StaggeredField on Omega_{h,k}^-;
    "backward"/"mean_backward" give the same staggered storage shifted by one node
    ((d-_k v)_{i+1} is stored where (d+_k v)_i is); "gradient" gives the pair of centered
    differences.
    """

    name: str
    axis: Optional[int] = None

    def __post_init__(self):
        if self.name not in OPERATOR_NAMES:
            raise ValueError(f"Unknown operator '{self.name}'. Expected one of {OPERATOR_NAMES}.")
        if self.name in _AXIS_OPERATORS and self.axis not in (1, 2):
            raise ValueError(f"Operator '{self.name}' needs axis 1 or 2, got {self.axis}.")


def _interior_only(inner: np.ndarray) -> np.ndarray:
    out = np.zeros(inner.shape[:-2] + (inner.shape[-2] + 2, inner.shape[-1] + 2))
    out[..., 1:-1, 1:-1] = inner
    return out


def laplacian_axis_array(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    v = values
    if axis == 1:
        inner = v[..., 2:, 1:-1] - 2.0 * v[..., 1:-1, 1:-1] + v[..., :-2, 1:-1]
    else:
        inner = v[..., 1:-1, 2:] - 2.0 * v[..., 1:-1, 1:-1] + v[..., 1:-1, :-2]
    return _interior_only(inner / (h * h))


def laplacian_array(values: np.ndarray, h: float) -> np.ndarray:
    """Five-point Laplacian at interior nodes."""
    v = values
    inner = (
        v[..., 2:, 1:-1]
        + v[..., :-2, 1:-1]
        + v[..., 1:-1, 2:]
        + v[..., 1:-1, :-2]
        - 4.0 * v[..., 1:-1, 1:-1]
    )
    return _interior_only(inner / (h * h))


def centered_array(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    v = values
    if axis == 1:
        inner = v[..., 2:, 1:-1] - v[..., :-2, 1:-1]
    else:
        inner = v[..., 1:-1, 2:] - v[..., 1:-1, :-2]
    return _interior_only(inner / (2.0 * h))


def mean_array(values: np.ndarray, axis: int) -> np.ndarray:
    v = values
    if axis == 1:
        inner = v[..., 2:, 1:-1] + 2.0 * v[..., 1:-1, 1:-1] + v[..., :-2, 1:-1]
    else:
        inner = v[..., 1:-1, 2:] + 2.0 * v[..., 1:-1, 1:-1] + v[..., 1:-1, :-2]
    return _interior_only(inner / 4.0)


def forward_array(values: np.ndarray, h: float, axis: int) -> np.ndarray:
    """d+_k on Omega_{h,k}^-, shape (..., N+1, N) for k=1 and (..., N, N+1) for k=2."""
    if axis == 1:
        return np.diff(values, axis=-2)[..., :, 1:-1] / h
    return np.diff(values, axis=-1)[..., 1:-1, :] / h


def mean_forward_array(values: np.ndarray, axis: int) -> np.ndarray:
    v = values
    if axis == 1:
        return 0.5 * (v[..., 1:, 1:-1] + v[..., :-1, 1:-1])
    return 0.5 * (v[..., 1:-1, 1:] + v[..., 1:-1, :-1])


def forward_transpose_array(staggered: np.ndarray, h: float, axis: int) -> np.ndarray:
    """
    Transpose of d+_k with respect to plain sums: the node array u with
    sum(u * v) = sum(staggered * d+_k v) for every node array v.
    """
    s = staggered
    lead = s.shape[:-2]
    if axis == 1:
        n_inner = s.shape[-1]
        out = np.zeros(lead + (s.shape[-2] + 1, n_inner + 2))
        out[..., :-1, 1:-1] -= s
        out[..., 1:, 1:-1] += s
    else:
        n_inner = s.shape[-2]
        out = np.zeros(lead + (n_inner + 2, s.shape[-1] + 1))
        out[..., 1:-1, :-1] -= s
        out[..., 1:-1, 1:] += s
    return out / h


def mixed_forward_array(values: np.ndarray, h: float) -> np.ndarray:
    """d+_1 d+_2 on Omega_h^- = [[0,N]]^2."""
    return np.diff(np.diff(values, axis=-2), axis=-1) / (h * h)


def normal_difference_array(values: np.ndarray, h: float) -> np.ndarray:
    """
    Outward normal differences on the four edges, shape (..., 4, N):
    x1+ gives (v_{N+1,j} - v_{N,j})/h, x1- gives -(v_{1,j} - v_{0,j})/h, same for axis 2.
    """
    v = values
    return np.stack(
        [
            (v[..., 0, 1:-1] - v[..., 1, 1:-1]) / h,
            (v[..., -1, 1:-1] - v[..., -2, 1:-1]) / h,
            (v[..., 1:-1, 0] - v[..., 1:-1, 1]) / h,
            (v[..., 1:-1, -1] - v[..., 1:-1, -2]) / h,
        ],
        axis=-2,
    )


def normal_difference_transpose_array(trace: np.ndarray, h: float, n_nodes: int) -> np.ndarray:
    """Transpose of normal_difference_array with respect to plain sums."""
    t = trace
    out = np.zeros(t.shape[:-2] + (n_nodes, n_nodes))
    out[..., 0, 1:-1] += t[..., 0, :] / h
    out[..., 1, 1:-1] -= t[..., 0, :] / h
    out[..., -1, 1:-1] += t[..., 1, :] / h
    out[..., -2, 1:-1] -= t[..., 1, :] / h
    out[..., 1:-1, 0] += t[..., 2, :] / h
    out[..., 1:-1, 1] -= t[..., 2, :] / h
    out[..., 1:-1, -1] += t[..., 3, :] / h
    out[..., 1:-1, -2] -= t[..., 3, :] / h
    return out


def second_time_difference(values: np.ndarray, dt: float) -> np.ndarray:
    """Central second differences along the leading axis, zero at both end samples."""
    out = np.zeros_like(values)
    out[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / (dt * dt)
    return out


def apply(tag: OperatorTag, f, dt: Optional[float] = None):
    """
    Apply a discrete operator.

    Parameters:
        tag (OperatorTag): The operator.
        f (NodeField): Input field. For "box" any time series exposing `mesh`, `dt` and a
            (nt, N+2, N+2) `values` array is accepted.
        dt (float): Time step for "box" when f has no `dt` attribute.

    Returns:
        NodeField, StaggeredField, tuple of NodeField ("gradient") or, for "box", an array
        of shape (nt, N+2, N+2) with the residual at interior nodes of interior times.
    """
    mesh = f.mesh
    h = mesh.h
    v = np.asarray(f.values)
    name, k = tag.name, tag.axis

    if name == "box":
        step = dt if dt is not None else f.dt
        if v.ndim != 3 or v.shape[0] < 3:
            raise ValueError("The wave operator needs a time series of at least 3 snapshots.")
        residual = second_time_difference(v, step) - laplacian_array(v, h)
        residual[..., 0, :], residual[..., -1, :] = 0.0, 0.0
        residual[..., :, 0], residual[..., :, -1] = 0.0, 0.0
        residual[0], residual[-1] = 0.0, 0.0
        return residual
    if name == "laplacian":
        return NodeField(mesh, laplacian_array(v, h))
    if name == "laplacian_axis":
        return NodeField(mesh, laplacian_axis_array(v, h, k))
    if name == "centered":
        return NodeField(mesh, centered_array(v, h, k))
    if name == "mean":
        return NodeField(mesh, mean_array(v, k))
    if name in ("forward", "backward"):
        return StaggeredField(mesh, k, forward_array(v, h, k))
    if name in ("mean_forward", "mean_backward"):
        return StaggeredField(mesh, k, mean_forward_array(v, k))
    return (
        NodeField(mesh, centered_array(v, h, 1)),
        NodeField(mesh, centered_array(v, h, 2)),
    )


def normal_difference(
    f: NodeField, edges: Sequence[str] = EDGE_NAMES, require_zero: bool = True
) -> BoundaryTrace:
    """
    Discrete outward normal derivative on the selected edges (zero on the others).

    Parameters:
        f (NodeField): Field, by default required to vanish on the boundary.
        edges (Sequence[str]): Edges among "x1-", "x1+", "x2-", "x2+".
        require_zero (bool): Enforce the Dirichlet-zero precondition.

    Raises:
        BoundaryConditionError: If require_zero and f does not vanish on the boundary.
    """
    if require_zero and not f.is_dirichlet_zero():
        raise BoundaryConditionError("normal_difference expects a field vanishing on the boundary")
    trace = normal_difference_array(f.values, f.mesh.h)
    keep = np.array([name in edges for name in EDGE_NAMES])
    return BoundaryTrace(f.mesh, np.where(keep[:, None], trace, 0.0))


def _lines(values: np.ndarray, axis: int) -> np.ndarray:
    """Grid lines along the axis with transverse index in 1..N, shape (N, N+2)."""
    return values[:, 1:-1].T if axis == 1 else values[1:-1, :]


def _identity_sides(identity: str, g, v, f, h: float) -> Tuple[float, float]:
    def fwd(u):
        return np.diff(u, axis=-1) / h

    def ctr(u):
        return (u[:, 2:] - u[:, :-2]) / (2.0 * h)

    def lap(u):
        return (u[:, 2:] - 2.0 * u[:, 1:-1] + u[:, :-2]) / (h * h)

    def mp(u):
        return 0.5 * (u[:, 1:] + u[:, :-1])

    def inner(u):
        return u[:, 1:-1]

    def integral(x):
        return h * h * np.sum(x)

    def edge(x):
        return h * np.sum(x)

    if identity == "IPP1":
        lhs = integral(g[:, :-1] * fwd(f))
        rhs = -integral(fwd(g) * f[:, 1:]) + edge(g[:, -1] * f[:, -1]) - edge(g[:, 0] * f[:, 0])
    elif identity == "IPP2":
        df = fwd(f)
        lhs = integral(inner(g) * ctr(f))
        rhs = (
            integral(mp(g) * df)
            - 0.5 * h * edge(g[:, 0] * df[:, 0])
            - 0.5 * h * edge(g[:, -1] * df[:, -1])
        )
    elif identity == "IPP3":
        lhs = 2.0 * integral(inner(g) * inner(v) * ctr(v))
        rhs = -integral(inner(v) ** 2 * ctr(g)) + 0.5 * h * h * integral(fwd(v) ** 2 * fwd(g))
    elif identity == "IPP4":
        dv = fwd(v)
        lhs = integral(inner(g) * lap(v))
        rhs = -integral(dv * fwd(g)) - edge(dv[:, 0] * g[:, 0]) + edge(dv[:, -1] * g[:, -1])
    elif identity == "IPP5":
        lhs = integral(inner(g) * inner(v) * lap(v))
        rhs = -integral(fwd(v) ** 2 * mp(g)) + 0.5 * integral(inner(v) ** 2 * lap(g))
    elif identity == "IPP6":
        dv = fwd(v)
        lhs = integral(inner(g) * lap(v) * ctr(v))
        rhs = (
            -0.5 * integral(dv**2 * fwd(g))
            + 0.5 * edge(dv[:, -1] ** 2 * g[:, -1])
            - 0.5 * edge(dv[:, 0] ** 2 * g[:, 0])
        )
    else:
        lhs = integral(mp(v) * fwd(f) * fwd(g))
        rhs = integral(inner(v) * ctr(f) * ctr(g)) + 0.25 * h * h * integral(
            inner(v) * lap(f) * lap(g)
        )
    return float(lhs), float(rhs)


def new1_sides(g: np.ndarray, v: np.ndarray, h: float) -> Tuple[float, float]:
    """Both sides of the 2-d formula for the integral of g * Delta_{h,1} v * d_{h,2} v."""
    h2 = h * h
    d1v = np.diff(v, axis=0) / h
    d1g = np.diff(g, axis=0) / h
    m1g = 0.5 * (g[1:, :] + g[:-1, :])
    c2v = (v[:, 2:] - v[:, :-2]) / (2.0 * h)
    lap1 = (v[2:, 1:-1] - 2.0 * v[1:-1, 1:-1] + v[:-2, 1:-1]) / h2
    lhs = h2 * np.sum(g[1:-1, 1:-1] * lap1 * c2v[1:-1, :])
    first = 0.5 * h2 * np.sum(d1v[:, 1:-1] ** 2 * (m1g[:, 2:] - m1g[:, :-2]) / (2.0 * h))
    second = -h2 * np.sum(d1v[:, 1:-1] * 0.5 * (c2v[1:, :] + c2v[:-1, :]) * d1g[:, 1:-1])
    mixed = np.diff(d1v, axis=1) / h
    third = -0.25 * h2 * h2 * np.sum(mixed**2 * np.diff(m1g, axis=1) / h)
    return float(lhs), float(first + second + third)


def ipp_sides(
    identity: str, g: NodeField, v: NodeField, f: Optional[NodeField] = None
) -> Tuple[float, float]:
    """
    Left and right hand sides of a discrete integration by parts formula.

    The 1-d formulas are applied along every grid line of each axis with the transverse index
    in 1..N and summed with weight h; both axes are added. "New1" is the 2-d formula.

    Raises:
        ValueError: If the identity is unknown.
        BoundaryConditionError: If the identity needs v vanishing on the boundary.
    """
    if identity not in IPP_IDENTITIES:
        raise ValueError(f"Unknown identity '{identity}'. Expected one of {IPP_IDENTITIES}.")
    g.mesh.check_same(v.mesh)
    if identity in _ZERO_BOUNDARY_IDENTITIES and not v.is_dirichlet_zero():
        raise BoundaryConditionError(f"{identity} needs v vanishing on the boundary.")
    f = v if f is None else f
    h = v.mesh.h
    if identity == "New1":
        return new1_sides(g.values, v.values, h)
    lhs = rhs = 0.0
    for axis in (1, 2):
        left, right = _identity_sides(
            identity, _lines(g.values, axis), _lines(v.values, axis), _lines(f.values, axis), h
        )
        lhs += left
        rhs += right
    return lhs, rhs


def ipp_residual(
    identity: str, g: NodeField, v: NodeField, f: Optional[NodeField] = None
) -> float:
    """
    Normalized residual |LHS - RHS| / (|LHS| + |RHS| + 1) of a discrete integration by
    parts formula. f is the second free function of IPP1, IPP2 and IPPnew (defaults to v).
    """
    lhs, rhs = ipp_sides(identity, g, v, f)
    residual = abs(lhs - rhs) / (abs(lhs) + abs(rhs) + 1.0)
    logging.debug(f"{identity}: lhs={lhs:.6e} rhs={rhs:.6e} residual={residual:.3e}")
    return residual


def discrete_eigenvalue(mesh: Mesh, k: int, l: int) -> float:
    """Eigenvalue of -Delta_h for the mode sin(k pi x1) sin(l pi x2)."""
    h = mesh.h
    return 4.0 / h**2 * (np.sin(k * np.pi * h / 2) ** 2 + np.sin(l * np.pi * h / 2) ** 2)


def ipp_suite(
    ns: Sequence[int],
    trials: int = 200,
    seed: int = 0,
    identities: Sequence[str] = IPP_IDENTITIES,
    threads: int = 1,
) -> List[Dict[str, object]]:
    """
    Residuals of every identity on random fields, one row (identity, N, trial, residual) per
    trial. Trial k on mesh N draws g, v and f from the k-th stream split from (seed, N); v
    vanishes on the boundary for the identities that need it.
    """
    rows = []
    for n in ns:
        mesh = Mesh(n)

        def run(job) -> List[Dict[str, object]]:
            trial, rng = job
            g, v, f = (NodeField(mesh, rng.standard_normal(mesh.shape)) for _ in range(3))
            out = []
            for identity in identities:
                w = v.with_zero_boundary() if identity in _ZERO_BOUNDARY_IDENTITIES else v
                out.append(
                    {
                        "identity": identity,
                        "N": n,
                        "trial": trial,
                        "residual": ipp_residual(identity, g, w, f),
                    }
                )
            return out

        jobs = enumerate(spawn_generators([seed, n], trials))
        level = [row for part in map_samples(run, jobs, threads) for row in part]
        logging.info(f"IPP suite N={n}: max residual {max(r['residual'] for r in level):.3e}")
        rows.extend(level)
    rows.sort(key=lambda r: (IPP_IDENTITIES.index(r["identity"]), r["N"], r["trial"]))
    return rows
