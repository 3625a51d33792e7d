import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from cdrdesign.errors import DegenerateGeometryError, EmptySetError, InvalidInputError, ShapeError
from cdrdesign.geometry import (
    RbfSpec,
    backbone_frame,
    bond_angle,
    dihedral,
    min_pairwise_distance,
    neighbour_order,
    quaternion_to_rotation,
    random_rotation,
    rbf_expand,
    rotation_to_quaternion,
    superpose_rmsd,
)



# rbf_expand


def test_rbf_peak_at_center():
    spec = RbfSpec.uniform(0.0, 10.0, 9)
    v = rbf_expand(spec.centers[3], spec)
    assert v[3] == 1.0
    assert np.all(np.delete(v, 3) < 1.0)


def test_rbf_two_widths_from_center():
    spec = RbfSpec((2.0,), 0.7)
    np.testing.assert_allclose(rbf_expand(2.0 + 2 * 0.7, spec), [math.exp(-2)], rtol=1e-14)


def test_rbf_matches_scalar_loop():
    spec = RbfSpec(tuple(np.arange(0, 20.0 + 1e-9, 1.25)), 1.25)
    expected = [math.exp(-((5.0 - mu) ** 2) / (2 * 1.25**2)) for mu in spec.centers]
    np.testing.assert_allclose(rbf_expand(5.0, spec), expected, rtol=1e-14)


def test_rbf_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        rbf_expand(float("nan"), RbfSpec.uniform(0, 1, 3))


@pytest.mark.parametrize("centers,width", [((), 1.0), ((0.0, 1.0), 0.0), ((1.0, 0.0), 1.0), ((0.0, 1.0, 3.0), 1.0)])
def test_rbf_spec_validation(centers, width):
    with pytest.raises(InvalidInputError):
        RbfSpec(centers, width)


@given(st.floats(0, 30))
def test_rbf_components_in_unit_interval(d):
    v = rbf_expand(d, RbfSpec.uniform(0, 20, 16))
    assert np.all(v > 0) and np.all(v <= 1)


# backbone_frame


def test_frame_axes_and_orthonormality(rng):
    for _ in range(20):
        N, CA, C = rng.normal(size=(3, 3)) * 2
        f = backbone_frame(N, CA, C)
        np.testing.assert_allclose(f.rotation @ f.rotation.T, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(f.rotation) - 1) < 1e-9
        e1 = (C - CA) / np.linalg.norm(C - CA)
        n = np.cross(C - CA, N - CA)
        np.testing.assert_allclose(f.rotation[0], e1, atol=1e-12)
        np.testing.assert_allclose(f.rotation[2], n / np.linalg.norm(n), atol=1e-12)
        np.testing.assert_array_equal(f.origin, CA)


def test_frame_equivariance(rng):
    N, CA, C = rng.normal(size=(3, 3)) * 2
    R = random_rotation(rng)
    t = rng.normal(size=3) * 10
    f0 = backbone_frame(N, CA, C)
    f1 = backbone_frame(R @ N + t, R @ CA + t, R @ C + t)
    # rows are axes, so they rotate as rotation @ R.T
    np.testing.assert_allclose(f1.rotation, f0.rotation @ R.T, atol=1e-9)
    np.testing.assert_allclose(f1.origin, R @ CA + t, atol=1e-9)


def test_frame_collinear_is_degenerate():
    with pytest.raises(DegenerateGeometryError):
        backbone_frame([-1, 0, 0], [0, 0, 0], [1, 0, 0])
    with pytest.raises(DegenerateGeometryError):
        backbone_frame([0, 0, 0], [0, 0, 0], [1, 0, 0])


# dihedral and bond_angle


def test_dihedral_trans_and_cis():
    p2, p3 = [0, 0, 0], [0, 0, 1]
    assert dihedral([1, 0, 0], p2, p3, [-1, 0, 1]) == pytest.approx(math.pi)
    assert dihedral([1, 0, 0], p2, p3, [1, 0, 1]) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("theta", np.linspace(-math.pi + 1e-3, math.pi, 13))
def test_dihedral_by_rotation(theta):
    p1, p2, p3 = np.array([1.0, 0, 0]), np.zeros(3), np.array([0, 0, 1.5])
    cis = np.array([1.0, 0, 1.5])
    # right-handed rotation about p2->p3; IUPAC counts clockwise looking down p2->p3 as positive
    R = Rotation.from_rotvec(np.array([0, 0, 1.0]) * theta).as_matrix()
    p4 = p3 + R @ (cis - p3)
    assert dihedral(p1, p2, p3, p4) == pytest.approx(theta, abs=1e-12)


def test_dihedral_sign_convention():
    # standard example: positive for a right-handed twist
    assert dihedral([1, 0, 0], [0, 0, 0], [0, 0, 1], [0, 1, 1]) == pytest.approx(math.pi / 2)


def test_dihedral_degenerate():
    with pytest.raises(DegenerateGeometryError):
        dihedral([0, 0, 0], [1, 0, 0], [2, 0, 0], [2, 1, 0])


def test_bond_angle_values(rng):
    assert bond_angle([1, 0, 0], [0, 0, 0], [0, 1, 0]) == pytest.approx(math.pi / 2, abs=1e-15)
    assert bond_angle([1, 0, 0], [0, 0, 0], [-2, 0, 0]) == pytest.approx(math.pi, abs=1e-15)
    for _ in range(50):
        a, b, c = rng.normal(size=(3, 3))
        u, v = a - b, c - b
        oracle = math.acos(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
        assert bond_angle(a, b, c) == pytest.approx(oracle, abs=1e-12)
    with pytest.raises(DegenerateGeometryError):
        bond_angle([0, 0, 0], [0, 0, 0], [1, 0, 0])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_angles_invariant_under_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(4, 3)) * 3
    R, t = random_rotation(rng), rng.uniform(-50, 50, 3)
    q = p @ R.T + t
    assert abs(bond_angle(*q[:3]) - bond_angle(*p[:3])) < 1e-9
    d0, d1 = dihedral(*p), dihedral(*q)
    assert abs(math.remainder(d1 - d0, 2 * math.pi)) < 1e-9


# quaternions


def test_quaternion_identity_and_half_turn():
    np.testing.assert_allclose(rotation_to_quaternion(np.eye(3)), [1, 0, 0, 0], atol=1e-15)
    Rz = np.diag([-1.0, -1.0, 1.0])
    np.testing.assert_allclose(rotation_to_quaternion(Rz), [0, 0, 0, 1], atol=1e-15)


def test_quaternion_round_trip_1000(rng):
    for _ in range(1000):
        R = random_rotation(rng)
        q = rotation_to_quaternion(R)
        assert abs(np.linalg.norm(q) - 1) < 1e-9
        assert q[0] >= 0
        np.testing.assert_allclose(quaternion_to_rotation(q), R, atol=1e-8)


def test_quaternion_batch_matches_single(rng):
    Rs = np.stack([random_rotation(rng) for _ in range(5)])
    np.testing.assert_array_equal(rotation_to_quaternion(Rs)[2], rotation_to_quaternion(Rs[2]))


def test_quaternion_rejects_non_rotation():
    with pytest.raises(InvalidInputError):
        rotation_to_quaternion(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidInputError):
        rotation_to_quaternion(np.eye(3) * 1.1)
    with pytest.raises(ShapeError):
        rotation_to_quaternion(np.eye(2))


# distances and RMSD


def test_min_pairwise_distance(rng):
    assert min_pairwise_distance([[1, 2, 3]], [[1, 2, 3]]) == 0.0
    assert min_pairwise_distance([[0, 0, 0]], [[3, 4, 0]]) == 5.0
    A, B = rng.normal(size=(20, 3)) * 5, rng.normal(size=(30, 3)) * 5
    oracle = min(math.dist(a, b) for a in A for b in B)
    assert min_pairwise_distance(A, B) == pytest.approx(oracle, rel=1e-14)
    with pytest.raises(EmptySetError):
        min_pairwise_distance(np.zeros((0, 3)), B)


def test_rmsd_identity_and_translation(rng):
    P = rng.normal(size=(6, 3))
    assert superpose_rmsd(P, P) == 0.0
    assert superpose_rmsd(P, P, superpose=True) < 1e-12
    Q = P + [1.0, 0, 0]
    assert superpose_rmsd(P, Q) == pytest.approx(1.0, abs=1e-12)
    assert superpose_rmsd(P, Q, superpose=True) < 1e-9
    with pytest.raises(ShapeError):
        superpose_rmsd(P, P[:5])


def _search_rmsd(P, Q, rng, starts=40):
    """Best RMSD found by local search over rotation vectors from random starts."""
    Pc, Qc = P - P.mean(0), Q - Q.mean(0)

    def f(r):
        R = Rotation.from_rotvec(r).as_matrix()
        return np.sqrt(np.mean(np.sum((Pc @ R.T - Qc) ** 2, axis=1)))

    best = np.inf
    for _ in range(starts):
        r0 = Rotation.random(random_state=rng).as_rotvec()
        res = minimize(f, r0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, res.fun)
    return best


def test_superposed_rmsd_matches_search(rng):
    for _ in range(3):
        P = rng.normal(size=(8, 3)) * 3
        Q = P @ random_rotation(rng).T + rng.normal(size=3) * 5 + rng.normal(size=(8, 3))
        assert superpose_rmsd(P, Q, superpose=True) == pytest.approx(_search_rmsd(P, Q, rng), abs=1e-3)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12))
def test_superposed_never_exceeds_fixed(seed, n):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(n, 3)) * 4, rng.normal(size=(n, 3)) * 4
    assert superpose_rmsd(P, Q, superpose=True) <= superpose_rmsd(P, Q) + 1e-12


def test_neighbour_order_breaks_near_ties_by_index():
    d = np.array([[3.0, 1.0 + 1e-9, 1.0, np.inf, 2.0]])
    np.testing.assert_array_equal(neighbour_order(d)[0], [1, 2, 4, 0, 3])
