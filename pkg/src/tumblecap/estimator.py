"""Fault-tolerant constrained EKF for the target pose, motion and parameters.

Error-state layout (20):

    δq_v (0:3) | ω (3:6) | ρ_o (6:9) | ρ̇_o (9:12) | σ (12:14) | ϱ (14:17) | δμ_v (17:20)

Attitudes use multiplicative errors on the left of the nominal,
``q = δq ⊗ q̂`` and ``μ = δμ ⊗ μ̂`` (body-side under this product, see
``so3``). The measurement is the registered fixture pose ``y = [ρ, η_v]``
with ``η = μ ⊗ q``.

A registration whose fit error ε reaches the threshold ε* is treated as
faulty and leaves the belief untouched; the filter then coasts on the
dynamics model. Gain rows of the two inertia ratios are scaled so that an
update that would leave (-1, 1) lands on the boundary (minus a small margin).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3, target
from .target import NumericError

N = 20
IQ, IW, IR, IV = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12)
IS, IO, IM = slice(12, 14), slice(14, 17), slice(17, 20)


@dataclass
class NoiseConfig:
    """Process densities, measurement covariance and fault threshold.

    ``sigma_tau`` (rad/s^1.5) and ``sigma_f`` (m/s^1.5) are the white-noise
    densities of the angular and linear acceleration disturbances; ``R`` is
    the 6×6 covariance of ``[ρ, η_v]``; ``eps_star`` (m²) gates registrations.
    """

    sigma_tau: float = 1e-4
    sigma_f: float = 1e-4
    R: np.ndarray = field(default_factory=lambda: np.diag([1e-6] * 3 + [1e-6] * 3))
    eps_star: float = 1e-3
    gate: bool = True
    boundary_margin: float = 1e-6
    joseph: bool = False
    cov_substeps: int = 1

    def validate(self):
        if self.sigma_tau <= 0 or self.sigma_f <= 0 or self.eps_star <= 0:
            raise ValueError("noise densities and eps_star must be positive")
        if int(self.cov_substeps) < 1:
            raise ValueError("cov_substeps must be at least 1")
        R = np.asarray(self.R, float)
        if R.shape != (6, 6) or np.max(np.abs(R - R.T)) > 1e-15 or np.linalg.eigvalsh(R)[0] <= 0:
            raise ValueError("R must be a symmetric positive definite 6x6 matrix")


#: Initial standard deviations per block (rad, rad/s, m, m/s, -, m, -).
DEFAULT_INITIAL_STD = {
    "attitude": 0.1, "rate": 0.05, "position": 0.1, "velocity": 0.05,
    "sigma": 0.3, "offset": 0.2, "mu": 0.1,
}


def initial_covariance(std=None):
    s = dict(DEFAULT_INITIAL_STD)
    s.update(std or {})
    d = np.concatenate([
        np.full(3, s["attitude"]), np.full(3, s["rate"]), np.full(3, s["position"]),
        np.full(3, s["velocity"]), np.full(2, s["sigma"]), np.full(3, s["offset"]),
        np.full(3, s["mu"]),
    ])
    return np.diag(d ** 2)


@dataclass
class Belief:
    q: np.ndarray
    w: np.ndarray
    r: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    offset: np.ndarray
    mu: np.ndarray
    P: np.ndarray
    t: float = 0.0

    def copy(self):
        return Belief(*(np.array(getattr(self, k)) for k in
                        ("q", "w", "r", "v", "sigma", "offset", "mu", "P")), t=self.t)

    @property
    def target_state(self):
        return target.TargetState(q=self.q.copy(), w=self.w.copy(), r=self.r.copy(), v=self.v.copy())

    def motion_array(self):
        return np.concatenate([self.q, self.w, self.r, self.v])

    def mean_vector(self):
        """Flat mean ``[q(4), ω, ρ_o, ρ̇_o, σ, ϱ, μ(4)]`` (22 values)."""
        return np.concatenate([self.q, self.w, self.r, self.v, self.sigma, self.offset, self.mu])


def boxplus(b: Belief, dx) -> Belief:
    """Apply an error-state increment to the nominal (multiplicative on attitudes)."""
    out = b.copy()
    out.q = so3.quat_product(so3.from_vector_part(dx[IQ]), b.q, check=False)
    out.w = b.w + dx[IW]
    out.r = b.r + dx[IR]
    out.v = b.v + dx[IV]
    out.sigma = b.sigma + dx[IS]
    out.offset = b.offset + dx[IO]
    out.mu = so3.quat_product(so3.from_vector_part(dx[IM]), b.mu, check=False)
    return out


def boxminus(b: Belief, ref: Belief):
    """Error state ``b ⊟ ref`` (inverse of ``boxplus``)."""
    dx = np.empty(N)
    dx[IQ] = so3.small_quat_error(ref.q, b.q)[:3]
    dx[IW] = b.w - ref.w
    dx[IR] = b.r - ref.r
    dx[IV] = b.v - ref.v
    dx[IS] = b.sigma - ref.sigma
    dx[IO] = b.offset - ref.offset
    dx[IM] = so3.small_quat_error(ref.mu, b.mu)[:3]
    return dx


# --- process model ---------------------------------------------------------

def process_jacobian(b: Belief):
    """Linearized error dynamics ``F`` at the current mean."""
    F = np.zeros((N, N))
    F[IQ, IQ] = -so3.skew(b.w)
    F[IQ, IW] = 0.5 * np.eye(3)
    F[IW, IW] = target.dphi_dw(b.w, b.sigma)
    F[IW, IS] = target.dphi_dsigma(b.w, b.sigma)
    F[IR, IV] = np.eye(3)
    return F


def error_dynamics(b: Belief, dx):
    """Nonlinear rate of the error state at ``b ⊞ dx`` (zero noise).

    Used to check ``process_jacobian`` by finite differences.
    """
    x = boxplus(b, dx)
    q_dot = so3.quat_rate(x.q, x.w)
    qh_dot = so3.quat_rate(b.q, b.w)
    # δq = q ⊗ q̂⁻¹, bilinear in (q, q̂⁻¹)
    dq_dot = so3._product(q_dot, so3.inverse(b.q)) + so3._product(x.q, so3.inverse(qh_dot))
    out = np.zeros(N)
    out[IQ] = dq_dot[:3]
    out[IW] = target.phi(x.w, x.sigma) - target.phi(b.w, b.sigma)
    out[IR] = x.v - b.v
    return out


def transition_matrix(F, dt):
    """First-order transition ``Φ ≈ I + dt F``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return np.eye(F.shape[0]) + dt * F


def process_noise(b: Belief, dt, sigma_tau, sigma_f):
    """Discrete process-noise covariance ``Q_k`` over an interval ``dt``."""
    B2 = np.diag(target.b_diag(b.sigma) ** 2)
    J = target.dphi_dw(b.w, b.sigma)
    Q = np.zeros((N, N))
    st2, sf2 = sigma_tau ** 2, sigma_f ** 2
    Q11 = dt ** 3 / 12.0 * B2
    Q12 = dt ** 3 / 6.0 * B2 @ J.T + dt ** 2 / 4.0 * B2
    Q22 = (dt ** 3 / 3.0 * J @ B2 @ J.T
           + dt ** 2 / 2.0 * (B2 @ J.T + J @ B2) + dt * B2)
    Q[IQ, IQ] = st2 * Q11
    Q[IQ, IW] = st2 * Q12
    Q[IW, IQ] = st2 * Q12.T
    Q[IW, IW] = st2 * Q22
    Q[IR, IR] = dt ** 3 / 3.0 * sf2 * np.eye(3)
    Q[IR, IV] = dt ** 2 / 2.0 * sf2 * np.eye(3)
    Q[IV, IR] = dt ** 2 / 2.0 * sf2 * np.eye(3)
    Q[IV, IV] = dt * sf2 * np.eye(3)
    return 0.5 * (Q + Q.T)


def noise_input_matrix(b: Belief):
    """``L`` mapping ``[w_τ, w_f]`` into the error-state rate."""
    L = np.zeros((N, 6))
    L[IW, 0:3] = target.b_matrix(b.sigma)
    L[IV, 3:6] = np.eye(3)
    return L


def propagate(b: Belief, dt, cfg: NoiseConfig, dt_int=target.DT) -> Belief:
    """Mean by RK4 of the torque-free model, covariance by ``Φ P Φᵀ + Q``.

    With ``cfg.cov_substeps = n > 1`` the interval is split into ``n`` chunks
    of whole integrator steps and ``Φ``, ``Q`` are re-linearized at the mean
    at the start of each chunk. The mean sees the same sequence of RK4 steps
    either way.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_int = int(np.floor(dt / dt_int + 1e-9))
    n_sub = max(1, min(int(cfg.cov_substeps), n_int))
    bounds = [round(i * n_int / n_sub) for i in range(n_sub + 1)]
    x = b.motion_array()
    P = b.P
    cur = b.copy()
    elapsed = 0.0
    for i in range(n_sub):
        steps = bounds[i + 1] - bounds[i]
        h = steps * dt_int if n_sub > 1 else dt
        if i == n_sub - 1:
            h = dt - elapsed
        cur.q, cur.w, cur.r, cur.v = x[0:4], x[4:7], x[7:10], x[10:13]
        Phi = transition_matrix(process_jacobian(cur), h)
        P = Phi @ P @ Phi.T + process_noise(cur, h, cfg.sigma_tau, cfg.sigma_f)
        P = 0.5 * (P + P.T)
        for _ in range(steps):
            x = target.step_array(x, b.sigma, dt_int)
        elapsed += steps * dt_int
    rest = dt - n_int * dt_int
    if rest > 1e-12:
        x = target.step_array(x, b.sigma, rest)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(P))):
        raise NumericError("belief propagation produced non-finite values")
    out = b.copy()
    out.q, out.w, out.r, out.v = x[0:4], x[4:7], x[7:10], x[10:13]
    out.P = P
    out.t = b.t + dt
    return out


# --- measurement model ------------------------------------------------------

def predicted_pose(b: Belief):
    """Predicted fixture pose ``(ρ, η)`` with ``η = μ ⊗ q``."""
    rho = b.r + so3.rotation_matrix(b.q) @ b.offset
    eta = so3.quat_product(b.mu, b.q, check=False)
    return rho, eta


def observation(b: Belief):
    """Predicted measurement ``h(x̂) = [ρ_o + A(q)ϱ, vec(μ ⊗ q)]``."""
    rho, eta = predicted_pose(b)
    return np.concatenate([rho, eta[:3]])


def observation_perturbed(b: Belief, dx):
    """Nonlinear ``h(δx)`` about the mean, for finite-difference checks."""
    return observation(boxplus(b, dx))


def observation_jacobian(b: Belief):
    """``H = ∂h/∂δx`` at ``δx = 0``."""
    H = np.zeros((6, N))
    A = so3.rotation_matrix(b.q)
    H[0:3, IQ] = -2.0 * A @ so3.skew(b.offset)
    H[0:3, IR] = np.eye(3)
    H[0:3, IO] = A
    eta = so3.quat_product(b.mu, b.q, check=False)
    H[3:6, IQ] = (so3.left_matrix(b.mu) @ so3.right_matrix(b.q))[:3, :3]
    H[3:6, IM] = so3.right_matrix(eta)[:3, :3]
    return H


def innovation(b: Belief, meas):
    """``y - h(x̂)``; the measured quaternion is first put on the predicted hemisphere."""
    rho_hat, eta_hat = predicted_pose(b)
    eta = np.asarray(meas.eta, float)
    if float(np.dot(eta, eta_hat)) < 0.0:
        eta = -eta
    return np.concatenate([meas.rho - rho_hat, eta[:3] - eta_hat[:3]])


@dataclass
class UpdateInfo:
    fault: bool
    projected: tuple = ()
    unconstrained_sigma: np.ndarray | None = None


def is_faulty(eps, cfg: NoiseConfig):
    return cfg.gate and not (eps < cfg.eps_star)


def update(b: Belief, meas, fit, cfg: NoiseConfig):
    """Gated, gain-projected measurement update.

    ``fit`` is the registration ``FitError`` (or a bare ε). Returns the new
    belief and an ``UpdateInfo``.
    """
    eps = getattr(fit, "eps", fit)
    if is_faulty(eps, cfg):
        return b, UpdateInfo(fault=True)
    H = observation_jacobian(b)
    e = innovation(b, meas)
    P = b.P
    S = H @ P @ H.T + cfg.R
    try:
        K = np.linalg.solve(S, H @ P).T
    except np.linalg.LinAlgError as exc:
        raise NumericError("innovation covariance is singular") from exc
    dx = K @ e
    sig_free = b.sigma + dx[IS]
    bound = 1.0 - cfg.boundary_margin
    projected = []
    for i in range(2):
        ke = dx[12 + i]
        if abs(b.sigma[i] + ke) > bound:
            lam = (np.sign(ke) * bound - b.sigma[i]) / ke
            K[12 + i] *= lam
            projected.append(i)
    if projected:
        dx = K @ e
        for i in projected:  # land exactly on the clamp despite rounding
            dx[12 + i] = np.sign(dx[12 + i]) * bound - b.sigma[i]
    if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(K))):
        raise NumericError("non-finite Kalman update")
    IKH = np.eye(N) - K @ H
    if cfg.joseph:
        Pn = IKH @ P @ IKH.T + K @ cfg.R @ K.T
    else:
        Pn = IKH @ P
    out = boxplus(b, dx)
    out.P = 0.5 * (Pn + Pn.T)
    return out, UpdateInfo(fault=False, projected=tuple(projected), unconstrained_sigma=sig_free)


def convergence_metric(b_or_P):
    """Frobenius norm of the covariance."""
    P = getattr(b_or_P, "P", b_or_P)
    return float(np.linalg.norm(P))


def _body_rate(q0, q1, dt):
    """Mean body rate taking ``q0`` to ``q1`` in ``dt`` seconds."""
    dq = so3.small_quat_error(q0, q1)
    ang = 2.0 * np.arctan2(np.linalg.norm(dq[:3]), dq[3])
    axis = dq[:3] / max(np.linalg.norm(dq[:3]), 1e-300)
    return axis * ang / dt


def initial_belief(measurements, times, P0=None, sigma0=(0.0, 0.0),
                   offset0=(0.0, 0.0, 0.0), mu0=None, min_rotation=0.3, fit_offset=True):
    """Belief at ``times[-1]`` from a short batch of pose measurements.

    Attitude comes from the last pose taking the prior misalignment at face
    value. The body rate is the finite-difference rate of the last two poses,
    extrapolated to the last epoch when three or more poses are available.
    When the batch spans at least ``min_rotation`` rad of rotation, the CoM
    position, velocity and grasp offset are fitted jointly by linear least
    squares to ``ρ_k = ρ_o + ρ̇_o t_k + A(q_k) ϱ``; otherwise the offset keeps its
    prior and position and velocity come from the last two poses. With
    ``fit_offset=False`` the offset is held at ``offset0`` and only position and
    velocity are fitted.
    """
    meas = list(measurements)
    t = np.asarray(times, float)
    if len(meas) < 2 or len(meas) != len(t):
        raise ValueError("need at least two timed pose measurements")
    if np.any(np.diff(t) <= 0):
        raise ValueError("measurement times must increase")
    mu0 = so3.IDENTITY.copy() if mu0 is None else np.asarray(mu0, float)
    mu_inv = so3.inverse(mu0)
    qs = [so3.quat_product(mu_inv, m.eta) for m in meas]
    w = _body_rate(qs[-2], qs[-1], t[-1] - t[-2])
    if len(meas) >= 3:
        w_prev = _body_rate(qs[-3], qs[-2], t[-2] - t[-3])
        span = 0.5 * (t[-1] - t[-3])
        w = w + (w - w_prev) * 0.5 * (t[-1] - t[-2]) / span
    As = [so3.rotation_matrix(q) for q in qs]
    rot = so3.rotation_angle(qs[0], qs[-1])
    offset = np.asarray(offset0, float).copy()
    fit = fit_offset and rot >= min_rotation
    if len(meas) >= 3 and (fit or not fit_offset):
        tau = t - t[-1]
        M = np.zeros((3 * len(meas), 9 if fit else 6))
        y = np.zeros(3 * len(meas))
        for k, (m, A) in enumerate(zip(meas, As)):
            M[3 * k:3 * k + 3, 0:3] = np.eye(3)
            M[3 * k:3 * k + 3, 3:6] = tau[k] * np.eye(3)
            if fit:
                M[3 * k:3 * k + 3, 6:9] = A
            y[3 * k:3 * k + 3] = m.rho - (0.0 if fit else A @ offset)
        sol = np.linalg.lstsq(M, y, rcond=None)[0]
        r, v = sol[0:3], sol[3:6]
        if fit:
            offset = sol[6:9]
    else:
        r = meas[-1].rho - As[-1] @ offset
        r_prev = meas[-2].rho - As[-2] @ offset
        v = (r - r_prev) / (t[-1] - t[-2])
    return Belief(q=qs[-1], w=w, r=r, v=v, sigma=np.array(sigma0, float),
                  offset=offset, mu=mu0.copy(),
                  P=initial_covariance() if P0 is None else np.array(P0, float), t=float(t[-1]))


def nees(b: Belief, truth_state):
    """Normalized estimation error squared of the (ω, ρ_o, ρ̇_o) blocks."""
    err = np.concatenate([truth_state.w - b.w, truth_state.r - b.r, truth_state.v - b.v])
    Pb = b.P[3:12, 3:12]
    return float(err @ np.linalg.solve(Pb, err))
