"""Target rigid-body dynamics in dimensionless inertia ratios.

The rotational dynamics only see the inertia through two ratios

    σ₁ = (I_yy - I_zz)/I_xx,   σ₂ = (I_zz - I_xx)/I_yy

(the third, σ₃, follows from σ₁ + σ₂ + σ₃ + σ₁σ₂σ₃ = 0), and a disturbance
torque enters through ``B(σ) = tr(I_c) I_c⁻¹`` acting on the angular
acceleration noise ``w_τ = τ_dis / tr(I_c)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3

#: Default fixed integrator step (s).
DT = 0.01


class InvalidInertiaError(ValueError):
    pass


class NumericError(ArithmeticError):
    """Non-finite values or a diverging integration."""


@dataclass(frozen=True)
class PrincipalInertia:
    """Ground-truth principal moments (kg m²) and mass (kg)."""

    Ixx: float
    Iyy: float
    Izz: float
    m: float = 1.0

    @property
    def diag(self):
        return np.array([self.Ixx, self.Iyy, self.Izz])

    @property
    def trace(self):
        return self.Ixx + self.Iyy + self.Izz

    def check(self):
        I = self.diag
        if np.any(I <= 0) or self.m <= 0:
            raise InvalidInertiaError("principal moments and mass must be positive")
        if not (I[0] + I[1] > I[2] and I[1] + I[2] > I[0] and I[2] + I[0] > I[1]):
            raise InvalidInertiaError(f"triangle inequality violated by {I}")


@dataclass
class TargetState:
    """Attitude ``q`` (body to camera), body rate ``w`` (rad/s), CoM position/velocity (m, m/s)."""

    q: np.ndarray = field(default_factory=lambda: so3.IDENTITY.copy())
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))
    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def as_array(self):
        return np.concatenate([self.q, self.w, self.r, self.v])

    @classmethod
    def from_array(cls, x):
        x = np.asarray(x, dtype=float)
        return cls(q=x[0:4].copy(), w=x[4:7].copy(), r=x[7:10].copy(), v=x[10:13].copy())

    def copy(self):
        return TargetState.from_array(self.as_array())


@dataclass
class TargetParams:
    """Identifiable parameters: inertia ratios, grasp offset ϱ (body frame, m), fixture misalignment μ_v."""

    sigma: np.ndarray
    offset: np.ndarray
    mu_v: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def mu(self):
        return so3.from_vector_part(self.mu_v)


def sigma_from_inertia(inertia: PrincipalInertia):
    inertia.check()
    Ixx, Iyy, Izz = inertia.Ixx, inertia.Iyy, inertia.Izz
    return np.array([(Iyy - Izz) / Ixx, (Izz - Ixx) / Iyy])


def sigma3(sigma):
    s1, s2 = sigma[..., 0], sigma[..., 1]
    return -(s1 + s2) / (1.0 + s1 * s2)


def sigma_constraint_residual(sigma):
    s3 = sigma3(sigma)
    return sigma[0] + sigma[1] + s3 + sigma[0] * sigma[1] * s3


def phi(w, sigma):
    """Torque-free angular acceleration ``φ(ω, σ)``."""
    w = np.asarray(w, dtype=float)
    s1, s2 = sigma[0], sigma[1]
    s3 = -(s1 + s2) / (1.0 + s1 * s2)
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    return np.stack([s1 * wy * wz, s2 * wx * wz, s3 * wx * wy], axis=-1)


def dphi_dw(w, sigma):
    s1, s2 = sigma[0], sigma[1]
    s3 = -(s1 + s2) / (1.0 + s1 * s2)
    wx, wy, wz = w
    return np.array([
        [0.0, s1 * wz, s1 * wy],
        [s2 * wz, 0.0, s2 * wx],
        [s3 * wy, s3 * wx, 0.0],
    ])


def dphi_dsigma(w, sigma):
    s1, s2 = sigma[0], sigma[1]
    den = (1.0 + s1 * s2) ** 2
    wx, wy, wz = w
    return np.array([
        [wy * wz, 0.0],
        [0.0, wx * wz],
        [(s2 * s2 - 1.0) / den * wx * wy, (s1 * s1 - 1.0) / den * wx * wy],
    ])


def b_diag(sigma):
    s1, s2 = sigma[0], sigma[1]
    pi = 3.0 + s1 * s2 + s1 - s2
    return np.array([pi / (1.0 - s2), pi / (1.0 + s1), pi / (1.0 + s1 * s2)])


def b_matrix(sigma):
    """Disturbance input matrix ``B(σ) = diag(π/(1-σ₂), π/(1+σ₁), π/(1+σ₁σ₂))``."""
    return np.diag(b_diag(sigma))


def _deriv(x, s1, s2, s3, bt, af):
    """Packed-state derivative on Python floats (the integrator's hot path)."""
    qx, qy, qz, qo, wx, wy, wz = x[0], x[1], x[2], x[3], x[4], x[5], x[6]
    return (
        0.5 * (qo * wx - (wy * qz - wz * qy)),
        0.5 * (qo * wy - (wz * qx - wx * qz)),
        0.5 * (qo * wz - (wx * qy - wy * qx)),
        -0.5 * (wx * qx + wy * qy + wz * qz),
        s1 * wy * wz + bt[0], s2 * wx * wz + bt[1], s3 * wx * wy + bt[2],
        x[10], x[11], x[12],
        af[0], af[1], af[2],
    )


def step_array(x, sigma, dt, w_tau=None, w_f=None):
    """One RK4 step of the packed 13-state ``[q, ω, ρ_o, ρ̇_o]``; quaternion renormalized.

    Disturbances are held constant over the step.
    """
    s1, s2 = float(sigma[0]), float(sigma[1])
    s3 = -(s1 + s2) / (1.0 + s1 * s2)
    bt = (0.0, 0.0, 0.0) if w_tau is None else tuple(float(v) for v in b_diag(sigma) * w_tau)
    af = (0.0, 0.0, 0.0) if w_f is None else tuple(float(v) for v in w_f)
    x0 = [float(v) for v in x]
    h = float(dt)
    k1 = _deriv(x0, s1, s2, s3, bt, af)
    k2 = _deriv([a + 0.5 * h * b for a, b in zip(x0, k1)], s1, s2, s3, bt, af)
    k3 = _deriv([a + 0.5 * h * b for a, b in zip(x0, k2)], s1, s2, s3, bt, af)
    k4 = _deriv([a + h * b for a, b in zip(x0, k3)], s1, s2, s3, bt, af)
    c = h / 6.0
    out = np.array([a + c * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
                    for a, b1, b2, b3, b4 in zip(x0, k1, k2, k3, k4)])
    out[0:4] /= np.linalg.norm(out[0:4])
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite target state")
    return out


def propagate(state: TargetState, sigma, w_tau=None, w_f=None, dt=DT) -> TargetState:
    """Advance the target by one step of ``dt`` seconds."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return TargetState.from_array(step_array(state.as_array(), np.asarray(sigma, float), dt, w_tau, w_f))


def propagate_array(x, sigma, duration, dt=DT):
    """Torque-free propagation over ``duration`` using steps of ``dt`` plus a final partial step."""
    sigma = np.asarray(sigma, float)
    n = int(np.floor(duration / dt + 1e-9))
    x = np.array(x, dtype=float)
    for _ in range(n):
        x = step_array(x, sigma, dt)
    rest = duration - n * dt
    if rest > 1e-12:
        x = step_array(x, sigma, rest)
    return x


def trajectory_array(x0, sigma, n_steps, dt=DT):
    """Torque-free states at ``t = k dt`` for ``k = 0..n_steps`` (shape ``(n_steps+1, 13)``)."""
    sigma = np.asarray(sigma, float)
    out = np.empty((n_steps + 1, 13))
    out[0] = x0
    for k in range(n_steps):
        out[k + 1] = step_array(out[k], sigma, dt)
    return out


def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


def grasp_point_kinematics(state: TargetState, sigma, offset):
    """Camera-frame position, velocity and torque-free acceleration of the grasp point."""
    A = so3.rotation_matrix(state.q)
    w = state.w
    offset = np.asarray(offset, dtype=float)
    wxr = _cross(w, offset)
    pos = state.r + A @ offset
    vel = state.v + A @ wxr
    acc = A @ (_cross(w, wxr) + _cross(phi(w, sigma), offset))
    return pos, vel, acc


def angular_momentum(state: TargetState, inertia: PrincipalInertia):
    """Angular momentum in the camera frame, ``A(q) I_c ω``."""
    return so3.rotation_matrix(state.q) @ (inertia.diag * state.w)


def kinetic_energy(state: TargetState, inertia: PrincipalInertia):
    return 0.5 * float(np.sum(inertia.diag * state.w ** 2))
