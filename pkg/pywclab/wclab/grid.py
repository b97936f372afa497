import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial.legendre import leggauss

from pywclab.wclab.constants import (
    CELL_QUADRATURE_ORDER,
    EDGE_NAMES,
    MIN_INTERIOR_NODES,
    NORM_SPACES,
)

"""
Discrete domains of the unit square: meshes, node and staggered fields, boundary traces,
subset masks, discrete integrals and norms, and the extension/restriction operators that
link grid functions with functions of the continuous variable.

Node (i, j) sits at x_h = (ih, jh), i, j in 0..N+1. The boundary set excludes the corners.
"""

Rectangle = Tuple[float, float, float, float]
ContinuousFunction = Callable[[np.ndarray, np.ndarray], Union[np.ndarray, float]]


class MeshMismatchError(ValueError):
    """Raised when two grid objects live on different meshes."""


@dataclass(frozen=True)
class Mesh:
    """
    Uniform grid of the unit square with N interior nodes per axis.

    Parameters:
        N (int): Number of interior nodes per axis. Must be at least 2.
    """

    N: int

    def __post_init__(self):
        if int(self.N) != self.N or self.N < MIN_INTERIOR_NODES:
            raise ValueError(f"N must be an integer >= {MIN_INTERIOR_NODES}, got {self.N}.")
        object.__setattr__(self, "N", int(self.N))

    @property
    def h(self) -> float:
        return 1.0 / (self.N + 1)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.N + 2, self.N + 2)

    def staggered_shape(self, axis: int) -> Tuple[int, int]:
        if axis == 1:
            return (self.N + 1, self.N)
        if axis == 2:
            return (self.N, self.N + 1)
        raise ValueError(f"axis must be 1 or 2, got {axis}.")

    def coordinates(self) -> np.ndarray:
        """1-d array of the node coordinates ih, i in 0..N+1."""
        return np.arange(self.N + 2) * self.h

    def nodes(self) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays (x1, x2) of shape (N+2, N+2), indexed (i, j)."""
        x = self.coordinates()
        return np.meshgrid(x, x, indexing="ij")

    def staggered_nodes(self, axis: int) -> Tuple[np.ndarray, np.ndarray]:
        """Coordinates of the nodes of Omega_{h,k}^-."""
        x = self.coordinates()
        if axis == 1:
            return np.meshgrid(x[:-1], x[1:-1], indexing="ij")
        if axis == 2:
            return np.meshgrid(x[1:-1], x[:-1], indexing="ij")
        raise ValueError(f"axis must be 1 or 2, got {axis}.")

    def check_same(self, other: "Mesh") -> None:
        if self != other:
            raise MeshMismatchError(f"Mesh mismatch: N={self.N} vs N={other.N}.")


def _frozen_array(values, shape: Tuple[int, ...], dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype)
    if array.shape != tuple(shape):
        raise ValueError(f"Expected an array of shape {tuple(shape)}, got {array.shape}.")
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class NodeField:
    """Real discrete function on the closure of Omega_h."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, self.mesh.shape))

    @classmethod
    def zeros(cls, mesh: Mesh) -> "NodeField":
        return cls(mesh, np.zeros(mesh.shape))

    @classmethod
    def from_function(cls, mesh: Mesh, fn: ContinuousFunction) -> "NodeField":
        return restrict(fn, mesh, kind="sample")

    @property
    def interior(self) -> np.ndarray:
        return self.values[1:-1, 1:-1]

    def is_dirichlet_zero(self, atol: float = 0.0) -> bool:
        """True if the field vanishes on the four edges and at the corners."""
        v = self.values
        edges = np.concatenate([v[0, :], v[-1, :], v[:, 0], v[:, -1]])
        return bool(np.all(np.abs(edges) <= atol))

    def with_zero_boundary(self) -> "NodeField":
        values = np.zeros(self.mesh.shape)
        values[1:-1, 1:-1] = self.interior
        return NodeField(self.mesh, values)

    def _binary(self, other, op) -> "NodeField":
        if isinstance(other, NodeField):
            self.mesh.check_same(other.mesh)
            return NodeField(self.mesh, op(self.values, other.values))
        return NodeField(self.mesh, op(self.values, other))

    def __add__(self, other):
        return self._binary(other, np.add)

    def __sub__(self, other):
        return self._binary(other, np.subtract)

    def __mul__(self, other):
        return self._binary(other, np.multiply)

    __rmul__ = __mul__
    __radd__ = __add__

    def __neg__(self):
        return NodeField(self.mesh, -self.values)


@dataclass(frozen=True, eq=False)
class StaggeredField:
    """Discrete function on Omega_{h,k}^-: i in 0..N, j in 1..N for k=1 (transposed for k=2)."""

    mesh: Mesh
    axis: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _frozen_array(self.values, self.mesh.staggered_shape(self.axis))
        )


@dataclass(frozen=True, eq=False)
class BoundaryTrace:
    """Values on the boundary nodes, one row of N entries per edge, corners excluded."""

    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, (4, self.mesh.N)))

    def edge(self, name: str) -> np.ndarray:
        return self.values[EDGE_NAMES.index(name)]


@dataclass(frozen=True, eq=False)
class SubsetMask:
    """
    Indicator of a subset of Omega_h ("interior") or of the boundary nodes ("boundary").

    Interior masks carry the open rectangles they were built from, so that the staggered
    companions omega_{h,k}^- follow the continuous rule: x in omega_{h,k}^- iff
    x + eps e_k lies in omega for some eps in [0, h].
    """

    mesh: Mesh
    kind: str
    values: np.ndarray
    rectangles: Tuple[Rectangle, ...] = field(default=())

    def __post_init__(self):
        if self.kind == "interior":
            shape = self.mesh.shape
        elif self.kind == "boundary":
            shape = (4, self.mesh.N)
        else:
            raise ValueError(f"Unknown mask kind '{self.kind}'.")
        object.__setattr__(self, "values", _frozen_array(self.values, shape, dtype=bool))

    def is_empty(self) -> bool:
        return not bool(self.values.any())

    def staggered(self, axis: int) -> np.ndarray:
        """Boolean array over Omega_{h,k}^- for the staggered companion of this mask."""
        if self.kind != "interior":
            raise ValueError("Staggered companions are only defined for interior masks.")
        x1, x2 = self.mesh.staggered_nodes(axis)
        h = self.mesh.h
        inside = np.zeros(x1.shape, dtype=bool)
        for a, b, c, d in self.rectangles:
            if axis == 1:
                inside |= (x2 > c) & (x2 < d) & (x1 < b) & (x1 + h > a)
            else:
                inside |= (x1 > a) & (x1 < b) & (x2 < d) & (x2 + h > c)
        return inside

    def mixed(self) -> np.ndarray:
        """Boolean array over Omega_h^- = [[0,N]]^2, shifted in both directions."""
        if self.kind != "interior":
            raise ValueError("Mixed companions are only defined for interior masks.")
        x = self.mesh.coordinates()[:-1]
        x1, x2 = np.meshgrid(x, x, indexing="ij")
        h = self.mesh.h
        inside = np.zeros(x1.shape, dtype=bool)
        for a, b, c, d in self.rectangles:
            inside |= (x1 < b) & (x1 + h > a) & (x2 < d) & (x2 + h > c)
        return inside


def rectangle_mask(mesh: Mesh, rectangles: Iterable[Rectangle]) -> SubsetMask:
    """
    Build an interior mask from a union of open rectangles (a, b) x (c, d).

    Raises:
        ValueError: If a rectangle is degenerate or the mask holds no node of Omega_h.
    """
    rectangles = tuple(tuple(float(v) for v in r) for r in rectangles)
    x1, x2 = mesh.nodes()
    values = np.zeros(mesh.shape, dtype=bool)
    for a, b, c, d in rectangles:
        if not (a < b and c < d):
            raise ValueError(f"Degenerate rectangle {(a, b, c, d)}.")
        values |= (x1 > a) & (x1 < b) & (x2 > c) & (x2 < d)
    values[0, :] = values[-1, :] = values[:, 0] = values[:, -1] = False
    if not values.any():
        raise ValueError(f"Mask {rectangles} holds no interior node at h={mesh.h:.4g}.")
    return SubsetMask(mesh, "interior", values, rectangles)


def full_mask(mesh: Mesh) -> SubsetMask:
    return rectangle_mask(mesh, [(0.0, 1.0, 0.0, 1.0)])


def collar_mask(mesh: Mesh, width: float, edges: Sequence[str] = ("x1+", "x2+")) -> SubsetMask:
    """Interior mask of the points at distance < width from the given edges."""
    rectangles = []
    for name in edges:
        if name == "x1+":
            rectangles.append((1.0 - width, 1.0, 0.0, 1.0))
        elif name == "x1-":
            rectangles.append((0.0, width, 0.0, 1.0))
        elif name == "x2+":
            rectangles.append((0.0, 1.0, 1.0 - width, 1.0))
        elif name == "x2-":
            rectangles.append((0.0, 1.0, 0.0, width))
        else:
            raise ValueError(f"Unknown edge '{name}'.")
    return rectangle_mask(mesh, rectangles)


def edge_mask(
    mesh: Mesh,
    edges: Sequence[str] = EDGE_NAMES,
    interval: Tuple[float, float] = (0.0, 1.0),
) -> SubsetMask:
    """
    Build a boundary mask holding the nodes of the given edges whose coordinate along the
    edge lies in the open interval. May be empty.
    """
    s = mesh.coordinates()[1:-1]
    along = (s > interval[0]) & (s < interval[1])
    values = np.zeros((4, mesh.N), dtype=bool)
    for name in edges:
        if name not in EDGE_NAMES:
            raise ValueError(f"Unknown edge '{name}'.")
        values[EDGE_NAMES.index(name)] = along
    return SubsetMask(mesh, "boundary", values)


def trace_array(values: np.ndarray) -> np.ndarray:
    """Boundary values of node arrays (..., N+2, N+2) as (..., 4, N), edges x1-, x1+, x2-, x2+."""
    return np.stack(
        [values[..., 0, 1:-1], values[..., -1, 1:-1], values[..., 1:-1, 0], values[..., 1:-1, -1]],
        axis=-2,
    )


def set_trace_array(values: np.ndarray, trace: np.ndarray) -> None:
    """Overwrite in place the boundary nodes of node arrays (..., N+2, N+2)."""
    values[..., 0, 1:-1] = trace[..., 0, :]
    values[..., -1, 1:-1] = trace[..., 1, :]
    values[..., 1:-1, 0] = trace[..., 2, :]
    values[..., 1:-1, -1] = trace[..., 3, :]


def boundary_trace(f: NodeField) -> BoundaryTrace:
    return BoundaryTrace(f.mesh, trace_array(f.values))


def _masked(values: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    return values if mask is None else np.where(mask, values, 0.0)


def interior_integral(values: np.ndarray, h: float, mask: Optional[np.ndarray] = None):
    """h^2 sum over Omega_h of node arrays (..., N+2, N+2); mask is a node-shaped boolean array."""
    inner = values[..., 1:-1, 1:-1]
    if mask is not None:
        inner = np.where(mask[1:-1, 1:-1], inner, 0.0)
    return h * h * np.sum(inner, axis=(-2, -1))


def closure_integral(values: np.ndarray, h: float):
    """h^2 sum over the closure of Omega_h."""
    return h * h * np.sum(values, axis=(-2, -1))


def staggered_integral(values: np.ndarray, h: float, mask: Optional[np.ndarray] = None):
    return h * h * np.sum(_masked(values, mask), axis=(-2, -1))


def boundary_integral(values: np.ndarray, h: float, mask: Optional[np.ndarray] = None):
    return h * np.sum(_masked(values, mask), axis=(-2, -1))


def _check_mask(mask: Optional[SubsetMask], mesh: Mesh, kind: str) -> None:
    if mask is None:
        return
    mesh.check_same(mask.mesh)
    if mask.kind != kind:
        raise ValueError(f"Expected a {kind} mask, got a {mask.kind} mask.")


def integrate_interior(f: NodeField, mask: Optional[SubsetMask] = None) -> float:
    """
    Discrete integral h^2 sum_{i,j=1..N} f_{i,j}. Boundary values are ignored.

    Parameters:
        f (NodeField): Integrand.
        mask (SubsetMask): Optional interior mask restricting the sum.

    Returns:
        float: The discrete integral, accumulated with compensated summation.
    """
    _check_mask(mask, f.mesh, "interior")
    inner = f.interior if mask is None else f.interior[mask.values[1:-1, 1:-1]]
    return f.mesh.h**2 * math.fsum(np.ravel(inner))


def integrate_staggered(f: StaggeredField, mask: Optional[SubsetMask] = None) -> float:
    """Discrete integral h^2 sum over Omega_{h,k}^-, optionally restricted to omega_{h,k}^-."""
    _check_mask(mask, f.mesh, "interior")
    values = f.values if mask is None else f.values[mask.staggered(f.axis)]
    return f.mesh.h**2 * math.fsum(np.ravel(values))


def integrate_boundary(f: BoundaryTrace, mask: Optional[SubsetMask] = None) -> float:
    """
    Boundary integral h sum over the boundary nodes (corners excluded).

    Raises:
        MeshMismatchError: If the mask lives on another mesh.
    """
    _check_mask(mask, f.mesh, "boundary")
    values = f.values if mask is None else f.values[mask.values]
    return f.mesh.h * math.fsum(np.ravel(values))


def _sum_squares(values: np.ndarray) -> float:
    return math.fsum(np.ravel(np.square(values)))


def norm(f: NodeField, space: str = "Lp", p: float = 2.0) -> float:
    """
    Discrete norms of a node field.

    Parameters:
        f (NodeField): The field.
        space (str): One of "Lp", "Linf", "H1", "H1_0", "H2".
        p (float): Exponent of the Lp norm, p >= 1.

    Returns:
        float: The norm value.

    Raises:
        ValueError: If p < 1, the space is unknown, or an H1_0 field does not vanish on the
            boundary.
    """
    if space not in NORM_SPACES:
        raise ValueError(f"Unknown norm space '{space}'. Expected one of {NORM_SPACES}.")
    h = f.mesh.h
    v = f.values
    if space == "Lp":
        if p < 1:
            raise ValueError(f"p must be >= 1, got {p}.")
        return (h * h * math.fsum(np.ravel(np.abs(f.interior) ** p))) ** (1.0 / p)
    if space == "Linf":
        return float(np.max(np.abs(f.interior)))

    if space == "H1_0" and not f.is_dirichlet_zero():
        raise ValueError("The H1_0 norm requires a field vanishing on the boundary.")
    d1 = np.diff(v, axis=0)[:, 1:-1] / h
    d2 = np.diff(v, axis=1)[1:-1, :] / h
    squared = h * h * (_sum_squares(v) + _sum_squares(d1) + _sum_squares(d2))
    if space == "H2":
        lap1 = (v[2:, 1:-1] - 2.0 * v[1:-1, 1:-1] + v[:-2, 1:-1]) / h**2
        lap2 = (v[1:-1, 2:] - 2.0 * v[1:-1, 1:-1] + v[1:-1, :-2]) / h**2
        mixed = np.diff(np.diff(v, axis=0), axis=1) / h**2
        squared += h * h * (_sum_squares(lap1) + _sum_squares(lap2) + _sum_squares(mixed))
    return math.sqrt(squared)


class AffineExtension:
    """Continuous piecewise bilinear extension e_h of a node field."""

    def __init__(self, f: NodeField):
        self.field = f
        self.mesh = f.mesh

    def __call__(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if np.any((x1 < 0) | (x1 > 1) | (x2 < 0) | (x2 > 1)):
            raise ValueError("e_h is only defined on [0,1]^2.")
        h, N = self.mesh.h, self.mesh.N
        i = np.clip(np.floor(x1 / h).astype(int), 0, N)
        j = np.clip(np.floor(x2 / h).astype(int), 0, N)
        s = x1 / h - i
        r = x2 / h - j
        v = self.field.values
        return (
            (1 - s) * (1 - r) * v[i, j]
            + s * (1 - r) * v[i + 1, j]
            + (1 - s) * r * v[i, j + 1]
            + s * r * v[i + 1, j + 1]
        )

    def l2_norm(self) -> float:
        """Exact L2(Omega) norm of the bilinear interpolant."""
        v = self.field.values
        # 1-d mass matrix of hat functions on [0,1]: h/6 * tridiag(1,4,1), halved at the ends
        h = self.mesh.h
        n = v.shape[0]
        mass = np.diag(np.full(n, 4.0)) + np.diag(np.ones(n - 1), 1) + np.diag(np.ones(n - 1), -1)
        mass[0, 0] = mass[-1, -1] = 2.0
        mass *= h / 6.0
        return math.sqrt(max(float(np.einsum("ij,ik,jl,kl->", v, mass, mass, v)), 0.0))

    def gradient_l2_norm(self) -> float:
        """Exact L2(Omega) norm of the gradient of the bilinear interpolant."""
        v = self.field.values
        total = 0.0
        for a_diff in (np.diff(v, axis=0), np.diff(v, axis=1).T):
            a, b = a_diff[:, :-1], a_diff[:, 1:]
            total += math.fsum(np.ravel(a * a + a * b + b * b)) / 3.0
        return math.sqrt(total)


class ConstantExtension:
    """Piecewise constant extension e_h^0 on the half-open cells centred at interior nodes."""

    def __init__(self, f: NodeField):
        self.field = f
        self.mesh = f.mesh

    def __call__(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        h, N = self.mesh.h, self.mesh.N
        i = np.floor(x1 / h + 0.5).astype(int)
        j = np.floor(x2 / h + 0.5).astype(int)
        inside = (i >= 1) & (i <= N) & (j >= 1) & (j <= N)
        return np.where(
            inside, self.field.values[np.clip(i, 0, N + 1), np.clip(j, 0, N + 1)], 0.0
        )

    def l2_norm(self) -> float:
        return norm(self.field, "Lp", 2.0)

    def l2_distance(
        self,
        fn: ContinuousFunction,
        order: int = CELL_QUADRATURE_ORDER,
        interior_cells: bool = False,
    ) -> float:
        """
        L2(Omega) distance between e_h^0(f) and a continuous function, by a tensor Gauss rule
        on the sub-squares of side h/2 on which e_h^0(f) is constant. With interior_cells the
        integral only covers [h/2, 1 - h/2]^2, the union of the cells of the interior nodes.
        """
        h, N = self.mesh.h, self.mesh.N
        pieces = 2 * (N + 1)
        nodes, weights = leggauss(order)
        left = np.arange(pieces) * h / 2
        x = (left[:, None] + (nodes[None, :] + 1.0) * h / 4).ravel()
        w = np.tile(weights * h / 4, pieces)
        cell = (np.arange(pieces) + 1) // 2
        cell = np.repeat(cell, order)
        valid = (cell >= 1) & (cell <= N)
        ext = np.where(
            valid[:, None] & valid[None, :],
            self.field.values[np.clip(cell, 0, N + 1)[:, None], np.clip(cell, 0, N + 1)[None, :]],
            0.0,
        )
        target = _evaluate(fn, x[:, None], x[None, :], ext.shape)
        if interior_cells:
            w = np.where(valid, w, 0.0)
        return math.sqrt(float(np.einsum("a,b,ab->", w, w, (ext - target) ** 2)))


def extend_affine(f: NodeField) -> AffineExtension:
    return AffineExtension(f)


def extend_constant(f: NodeField) -> ConstantExtension:
    return ConstantExtension(f)


def _evaluate(fn: ContinuousFunction, x1, x2, shape) -> np.ndarray:
    try:
        values = np.asarray(fn(x1, x2), dtype=float)
        return np.broadcast_to(values, shape)
    except Exception as e:
        raise ValueError(f"Continuous function could not be evaluated: {e}") from e


def _cell_points(mesh: Mesh, order: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss points and weights of [ih - h/2, ih + h/2] clipped to [0, 1], per node index."""
    nodes, weights = leggauss(order)
    x = mesh.coordinates()
    lo = np.clip(x - mesh.h / 2, 0.0, 1.0)
    hi = np.clip(x + mesh.h / 2, 0.0, 1.0)
    half = (hi - lo) / 2
    points = (lo + half)[:, None] + half[:, None] * nodes[None, :]
    return points, half[:, None] * weights[None, :], hi - lo


def restrict(
    fn: ContinuousFunction,
    mesh: Mesh,
    kind: str = "sample",
    order: int = CELL_QUADRATURE_ORDER,
) -> Union[NodeField, BoundaryTrace]:
    """
    Restriction of a continuous function to the mesh.

    Parameters:
        fn (callable): Vectorized function of (x1, x2).
        mesh (Mesh): Target mesh.
        kind (str): "sample" (r_h, nodal values), "cell_average" (r~_h, averages over the
            cells of side h centred at the nodes, clipped to the square) or "boundary_average"
            (r_h^d, averages over the boundary segments of length h).
        order (int): Gauss points per direction for the averaging kinds.

    Returns:
        NodeField or BoundaryTrace.

    Raises:
        ValueError: If the kind is unknown or fn cannot be evaluated.
    """
    if kind == "sample":
        x1, x2 = mesh.nodes()
        return NodeField(mesh, _evaluate(fn, x1, x2, mesh.shape))

    if kind == "cell_average":
        points, weights, lengths = _cell_points(mesh, order)
        n = mesh.N + 2
        values = _evaluate(
            fn, points[:, :, None, None], points[None, None, :, :], (n, order, n, order)
        )
        average = np.einsum("ia,jb,iajb->ij", weights, weights, values)
        return NodeField(mesh, average / np.outer(lengths, lengths))

    if kind == "boundary_average":
        nodes, weights = leggauss(order)
        s = mesh.coordinates()[1:-1]
        points = s[:, None] + nodes[None, :] * mesh.h / 2
        w = weights / 2
        zero = np.zeros_like(points)
        one = np.ones_like(points)
        rows = [
            _evaluate(fn, zero, points, points.shape),
            _evaluate(fn, one, points, points.shape),
            _evaluate(fn, points, zero, points.shape),
            _evaluate(fn, points, one, points.shape),
        ]
        return BoundaryTrace(mesh, np.stack([r @ w for r in rows]))

    raise ValueError(f"Unknown restriction kind '{kind}'.")


def convergence_rate(errors: Sequence[float], hs: Sequence[float]) -> np.ndarray:
    """Observed orders log(e_k / e_{k+1}) / log(h_k / h_{k+1}) between consecutive meshes."""
    errors = np.asarray(errors, dtype=float)
    hs = np.asarray(hs, dtype=float)
    rates = np.log(errors[:-1] / errors[1:]) / np.log(hs[:-1] / hs[1:])
    logging.info(f"Observed convergence rates: {rates}")
    return rates
