"""Quaternion and rotation algebra.

Layout is vector-first, scalar-last: ``q = [q_x, q_y, q_z, q_o]``.

The product ``p ⊗ q = (p_o I + Ω(p_v)) q`` uses

    Ω(v) = [[-[v×], v],
            [-vᵀ,   0]]

so the vector part is ``p_o q_v + q_o p_v - p_v × q_v``. With the attitude
matrix ``A(q) = I + 2 q_o [q_v×] + 2 [q_v×]²`` this product composes
rotations right-to-left in the matrix sense::

    A(p ⊗ q) = A(q) @ A(p)

(see ``COMPOSITION``; pinned by ``tests/test_so3.py``). ``A(q)`` maps
body-frame vectors into the reference frame, and ``q̇ = ½ Ω(ω) q`` with
``ω`` expressed in the body frame gives ``Ȧ = A [ω×]``.

Functions accept a single quaternion of shape ``(4,)`` or a stack of shape
``(..., 4)`` wherever that is cheap to support.
"""

from __future__ import annotations

import numpy as np

#: Matrix order produced by ``quat_product``: ``A(p ⊗ q) == A(q) @ A(p)``.
COMPOSITION = "A(p*q) = A(q) @ A(p)"

UNIT_TOL = 1e-9

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


class QuaternionError(ValueError):
    """Raised for non-unit or otherwise invalid quaternion input."""


def skew(v):
    """Cross-product matrix ``[v×]`` so that ``skew(v) @ u == cross(v, u)``."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def omega_matrix(v):
    """4×4 operator ``Ω(v)`` used by both the product and the kinematics."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (4, 4))
    out[..., :3, :3] = -skew(v)
    out[..., :3, 3] = v
    out[..., 3, :3] = -v
    return out


def _check_unit(q, name="q"):
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise QuaternionError(f"{name} is not unit-norm (|{name}| = {n})")


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonical(q):
    """Flip to the ``q_o >= 0`` hemisphere."""
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., 3:4] < 0.0, -1.0, 1.0)
    return q * sign


def inverse(q):
    q = np.asarray(q, dtype=float)
    out = q.copy()
    out[..., :3] = -out[..., :3]
    return out


def from_vector_part(qv):
    """Rebuild a unit quaternion from its vector part, scalar ``+sqrt(1-|qv|²)``.

    A vector part with norm above one is rescaled onto the unit sphere (zero
    scalar part).
    """
    qv = np.asarray(qv, dtype=float)
    n2 = np.sum(qv * qv, axis=-1, keepdims=True)
    scale = np.where(n2 > 1.0, 1.0 / np.sqrt(np.maximum(n2, 1.0)), 1.0)
    qv = qv * scale
    qo = np.sqrt(np.clip(1.0 - np.sum(qv * qv, axis=-1, keepdims=True), 0.0, None))
    return np.concatenate([qv, qo], axis=-1)


def _product(p, q):
    pv, po = p[..., :3], p[..., 3:4]
    qv, qo = q[..., :3], q[..., 3:4]
    vec = po * qv + qo * pv - np.cross(pv, qv)
    sca = po * qo - np.sum(pv * qv, axis=-1, keepdims=True)
    return np.concatenate([vec, sca], axis=-1)


def quat_product(p, q, check=True):
    """Composite quaternion ``p ⊗ q``, renormalized.

    Raises ``QuaternionError`` if either input is further than 1e-9 from
    unit norm (``check=False`` skips the test for internal hot loops).
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if check:
        _check_unit(p, "p")
        _check_unit(q, "q")
    return normalize(_product(p, q))


def left_matrix(p):
    """``L(p)`` with ``p ⊗ q == L(p) @ q``."""
    p = np.asarray(p, dtype=float)
    return p[..., 3, None, None] * np.eye(4) + omega_matrix(p[..., :3])


def right_matrix(q):
    """``R(q)`` with ``p ⊗ q == R(q) @ p``."""
    q = np.asarray(q, dtype=float)
    qv, qo = q[..., :3], q[..., 3]
    out = np.zeros(q.shape[:-1] + (4, 4))
    out[..., :3, :3] = qo[..., None, None] * np.eye(3) + skew(qv)
    out[..., :3, 3] = qv
    out[..., 3, :3] = -qv
    out[..., 3, 3] = qo
    return out


def rotation_matrix(q):
    """Attitude matrix ``A(q) = I + 2 q_o [q_v×] + 2 [q_v×]²``."""
    q = np.asarray(q, dtype=float)
    S = skew(q[..., :3])
    return np.eye(3) + 2.0 * q[..., 3, None, None] * S + 2.0 * S @ S


def quat_rate(q, w):
    """Kinematics ``q̇ = ½ Ω(ω) q`` for body-frame angular velocity ``ω``."""
    q = np.asarray(q, dtype=float)
    w = np.asarray(w, dtype=float)
    qv, qo = q[..., :3], q[..., 3:4]
    vec = qo * w - np.cross(w, qv)
    sca = -np.sum(w * qv, axis=-1, keepdims=True)
    return 0.5 * np.concatenate([vec, sca], axis=-1)


def small_quat_error(q_hat, q):
    """Small attitude error ``δq`` with ``δq ⊗ q̂ = q``, in the ``δq_o >= 0`` hemisphere.

    With the product above this is the body-side error (``A(q) = A(q̂) A(δq)``),
    which makes ``δq̇_v ≈ -[ω̂×] δq_v + ½ δω``.
    """
    return canonical(quat_product(q, inverse(q_hat)))


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([np.sin(0.5 * angle) * axis, [np.cos(0.5 * angle)]])


def rotation_angle(q_a, q_b):
    """Angle (rad) of the relative rotation between two attitudes."""
    # atan2 keeps full precision near zero, where arccos of the dot product does not
    dq = _product(np.asarray(q_b, float), inverse(np.asarray(q_a, float)))
    return 2.0 * float(np.arctan2(np.linalg.norm(dq[:3]), abs(dq[3])))


def from_rotation_matrix(A):
    """Quaternion with ``rotation_matrix(q) == A``, canonical hemisphere."""
    A = np.asarray(A, dtype=float)
    # A = (2qo² - 1) I + 2 q_v q_vᵀ + 2 qo [q_v×]; trace-based branch choice
    K = np.empty((4, 4))
    K[:3, :3] = A + A.T - np.trace(A) * np.eye(3)
    v = np.array([A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]])
    K[:3, 3] = v
    K[3, :3] = v
    K[3, 3] = np.trace(A)
    vals, vecs = np.linalg.eigh(K)
    return canonical(vecs[:, -1])


def random_quaternion(rng):
    return canonical(normalize(rng.standard_normal(4)))
