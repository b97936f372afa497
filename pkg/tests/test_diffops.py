import numpy as np
import pytest

from pywclab.wclab.constants import IPP_IDENTITIES, IPP_TOLERANCE
from pywclab.wclab.diffops import (
    BoundaryConditionError,
    OperatorTag,
    apply,
    discrete_eigenvalue,
    forward_array,
    forward_transpose_array,
    ipp_residual,
    ipp_suite,
    normal_difference,
    normal_difference_array,
    normal_difference_transpose_array,
)
from pywclab.wclab.grid import Mesh, NodeField
from pywclab.wclab.wavesolve import sine_mode


@pytest.mark.parametrize("k,l", [(1, 1), (2, 3), (4, 1)])
def test_sine_modes_are_eigenvectors(k, l):
    """
    -Delta_h sin(k pi x1) sin(l pi x2) = lambda_h sin(k pi x1) sin(l pi x2) at interior nodes.
    :return: None
    """
    mesh = Mesh(9)
    mode = sine_mode(mesh, k, l)
    lap = apply(OperatorTag("laplacian"), mode)
    np.testing.assert_allclose(
        -lap.interior, discrete_eigenvalue(mesh, k, l) * mode.interior, atol=1e-10
    )


def test_operator_tags():
    """
    Unknown operators and missing axes are rejected.
    :return: None
    """
    with pytest.raises(ValueError):
        OperatorTag("curl")
    with pytest.raises(ValueError):
        OperatorTag("forward")
    assert OperatorTag("forward", 2).axis == 2


def test_forward_difference_shapes():
    """
    Forward differences live on Omega_{h,k}^-; the gradient is a pair of node fields.
    :return: None
    """
    mesh = Mesh(5)
    f = NodeField.from_function(mesh, lambda x1, x2: x1 * x2)
    assert apply(OperatorTag("forward", 1), f).values.shape == mesh.staggered_shape(1)
    assert apply(OperatorTag("mean_forward", 2), f).values.shape == mesh.staggered_shape(2)
    g1, g2 = apply(OperatorTag("gradient"), f)
    x1, x2 = mesh.nodes()
    np.testing.assert_allclose(g1.interior, x2[1:-1, 1:-1], atol=1e-12)
    np.testing.assert_allclose(g2.interior, x1[1:-1, 1:-1], atol=1e-12)


@pytest.mark.parametrize("axis", [1, 2])
def test_forward_transpose(axis):
    """
    forward_transpose_array is the adjoint of the forward difference for plain sums.
    :return: None
    """
    rng = np.random.default_rng(3)
    mesh = Mesh(6)
    v = rng.standard_normal(mesh.shape)
    s = rng.standard_normal(mesh.staggered_shape(axis))
    lhs = np.sum(forward_transpose_array(s, mesh.h, axis) * v)
    rhs = np.sum(s * forward_array(v, mesh.h, axis))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_normal_difference_transpose():
    """
    normal_difference_transpose_array is the adjoint of the normal differences.
    :return: None
    """
    rng = np.random.default_rng(4)
    mesh = Mesh(5)
    v = rng.standard_normal(mesh.shape)
    t = rng.standard_normal((4, mesh.N))
    lhs = np.sum(normal_difference_transpose_array(t, mesh.h, mesh.N + 2) * v)
    rhs = np.sum(t * normal_difference_array(v, mesh.h))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_normal_difference_requires_zero_boundary():
    """
    The normal difference of a field with nonzero boundary values is refused.
    :return: None
    """
    mesh = Mesh(4)
    ones = NodeField(mesh, np.ones(mesh.shape))
    with pytest.raises(BoundaryConditionError):
        normal_difference(ones)
    trace = normal_difference(ones.with_zero_boundary(), edges=("x1+",))
    np.testing.assert_allclose(trace.edge("x1+"), -1.0 / mesh.h)
    np.testing.assert_allclose(trace.edge("x1-"), 0.0)


def test_identity_needs_zero_boundary():
    """
    IPP3 is only stated for v vanishing on the boundary.
    :return: None
    """
    rng = np.random.default_rng(5)
    mesh = Mesh(4)
    g, v = (NodeField(mesh, rng.standard_normal(mesh.shape)) for _ in range(2))
    with pytest.raises(BoundaryConditionError):
        ipp_residual("IPP3", g, v)
    assert ipp_residual("IPP3", g, v.with_zero_boundary()) < IPP_TOLERANCE
    with pytest.raises(ValueError):
        ipp_residual("IPP9", g, v)


def test_ipp_suite():
    """
    Every identity holds to rounding on random fields, with one row per trial.
    :return: None
    """
    rows = ipp_suite([3, 6], trials=4, seed=11)
    assert len(rows) == len(IPP_IDENTITIES) * 2 * 4
    assert max(row["residual"] for row in rows) < IPP_TOLERANCE
    assert rows[0]["identity"] == IPP_IDENTITIES[0]


def test_ipp_suite_is_deterministic():
    """
    Residuals only depend on the seed, not on the number of threads.
    :return: None
    """
    serial = ipp_suite([4], trials=3, seed=2)
    threaded = ipp_suite([4], trials=3, seed=2, threads=3)
    assert [r["residual"] for r in serial] == [r["residual"] for r in threaded]
    other = ipp_suite([4], trials=3, seed=3)
    assert [r["residual"] for r in serial] != [r["residual"] for r in other]
