import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from tumblecap import so3

S45 = np.sin(np.pi / 4)
C45 = np.cos(np.pi / 4)

vec4 = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3)
vec3 = arrays(np.float64, 3, elements=st.floats(-5, 5))


def unit(v):
    return so3.normalize(v)


def test_identity_is_neutral(rng):
    q = so3.random_quaternion(rng)
    assert np.allclose(so3.quat_product(so3.IDENTITY, q), q, atol=1e-15)
    assert np.allclose(so3.quat_product(q, so3.IDENTITY), q, atol=1e-15)


def test_inverse_gives_identity(rng):
    q = so3.random_quaternion(rng)
    assert np.allclose(so3.quat_product(q, so3.inverse(q)), so3.IDENTITY, atol=1e-15)


def test_composition_convention_with_matrix_oracle():
    mu = np.array([0.0, 0.0, S45, C45])
    q = np.array([S45, 0.0, 0.0, C45])
    Rz = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    Rx = np.array([[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
    assert np.allclose(so3.rotation_matrix(mu), Rz, atol=1e-15)
    assert np.allclose(so3.rotation_matrix(q), Rx, atol=1e-15)
    # A(mu ⊗ q) = A(q) A(mu)
    assert np.allclose(so3.rotation_matrix(so3.quat_product(mu, q)), Rx @ Rz, atol=1e-15)
    assert not np.allclose(Rx @ Rz, Rz @ Rx)
    assert so3.COMPOSITION == "A(p*q) = A(q) @ A(p)"


def test_non_unit_input_rejected():
    with pytest.raises(so3.QuaternionError):
        so3.quat_product(np.array([0.0, 0.0, 0.0, 1.1]), so3.IDENTITY)


def test_z_quarter_turn_maps_x_to_y():
    A = so3.rotation_matrix(np.array([0.0, 0.0, S45, C45]))
    assert np.allclose(A @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)


def test_rotation_matrix_matches_axis_angle_exponential(rng):
    for _ in range(20):
        axis = unit(rng.standard_normal(3))
        ang = rng.uniform(-np.pi, np.pi)
        A = so3.rotation_matrix(so3.from_axis_angle(axis, ang))
        assert np.allclose(A, expm(ang * so3.skew(axis)), atol=1e-13)


@settings(max_examples=200, deadline=None)
@given(vec4)
def test_rotation_matrix_is_orthonormal(v):
    A = so3.rotation_matrix(unit(v))
    assert np.allclose(A.T @ A, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(A) - 1.0) < 1e-12


@settings(max_examples=200, deadline=None)
@given(vec4)
def test_double_cover(v):
    q = unit(v)
    assert np.allclose(so3.rotation_matrix(q), so3.rotation_matrix(-q), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(vec4, vec4, vec4)
def test_product_associative(a, b, c):
    a, b, c = unit(a), unit(b), unit(c)
    lhs = so3.quat_product(so3.quat_product(a, b), c)
    rhs = so3.quat_product(a, so3.quat_product(b, c))
    assert np.allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec4, vec4)
def test_product_homomorphism(a, b):
    a, b = unit(a), unit(b)
    A = so3.rotation_matrix(so3.quat_product(a, b))
    assert np.allclose(A, so3.rotation_matrix(b) @ so3.rotation_matrix(a), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec4, vec4)
def test_left_right_matrices(a, b):
    a, b = unit(a), unit(b)
    p = so3.quat_product(a, b)
    assert np.allclose(so3.left_matrix(a) @ b, p, atol=1e-12)
    assert np.allclose(so3.right_matrix(b) @ a, p, atol=1e-12)


def test_quat_rate_zero_for_zero_rate(rng):
    assert np.array_equal(so3.quat_rate(so3.random_quaternion(rng), np.zeros(3)), np.zeros(4))


@settings(max_examples=200, deadline=None)
@given(vec4, vec3)
def test_quat_rate_orthogonal_to_q(v, w):
    q = unit(v)
    assert abs(q @ so3.quat_rate(q, w)) < 1e-12


def test_quat_rate_matches_matrix_kinematics(rng):
    # Ȧ = A [ω×] for body-frame ω
    q = so3.random_quaternion(rng)
    w = rng.standard_normal(3)
    h = 1e-6
    Ad = (so3.rotation_matrix(q + h * so3.quat_rate(q, w)) - so3.rotation_matrix(q - h * so3.quat_rate(q, w))) / (2 * h)
    assert np.allclose(Ad, so3.rotation_matrix(q) @ so3.skew(w), atol=1e-8)


def test_constant_rate_integration_quarter_turn():
    q = so3.IDENTITY.copy()
    w = np.array([0.0, 0.0, np.pi / 2])
    n = 1000
    h = 1.0 / n
    for _ in range(n):
        k1 = so3.quat_rate(q, w)
        k2 = so3.quat_rate(q + 0.5 * h * k1, w)
        k3 = so3.quat_rate(q + 0.5 * h * k2, w)
        k4 = so3.quat_rate(q + h * k3, w)
        q = so3.normalize(q + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4))
    assert np.allclose(q, [0.0, 0.0, S45, C45], atol=1e-6)


def test_small_error_trivial_cases(rng):
    q = so3.random_quaternion(rng)
    assert np.allclose(so3.small_quat_error(q, q), so3.IDENTITY, atol=1e-15)
    assert np.allclose(so3.small_quat_error(so3.IDENTITY, q), so3.canonical(q), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(vec4, vec4)
def test_small_error_round_trip(a, b):
    q_hat, q = unit(a), unit(b)
    dq = so3.small_quat_error(q_hat, q)
    assert dq[3] >= 0
    back = so3.quat_product(dq, q_hat)
    assert min(np.linalg.norm(back - q), np.linalg.norm(back + q)) < 1e-12


def test_skew_is_antisymmetric(rng):
    v = rng.standard_normal(3)
    S = so3.skew(v)
    assert np.array_equal(S.T, -S)
    u = rng.standard_normal(3)
    assert np.allclose(S @ u, np.cross(v, u))


def test_from_vector_part_and_rotation_matrix_inverse(rng):
    for _ in range(20):
        q = so3.random_quaternion(rng)
        assert np.allclose(so3.from_vector_part(q[:3]), q, atol=1e-12)
        assert np.allclose(so3.from_rotation_matrix(so3.rotation_matrix(q)), q, atol=1e-12)
