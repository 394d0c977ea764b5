"""Minimum-time detumbling of the captured target.

With body-frame CoM velocity ``υ``, body rate ``ω`` and contact wrench
``(f_e, τ_e)`` applied at the grasp offset ``ϱ``::

    υ̇ = -ω × υ + f_e / m
    ω̇ = φ(ω, σ) + B(σ) (τ_e - ϱ × f_e) / tr(I_c)

Only ``a₂max = f_max/m``, ``γ_max = τ_max/tr(I_c)`` and ``κ² = tr(I_c)/m``
enter the optimal solution. Writing the Hamiltonian ``H₂ = 1 + λᵀẋ`` with
costate ``λ = [λ′, λ″]`` gives the switching vectors

    p₁ = B λ″,    p₂ = κ² λ′ + ϱ × B λ″

and the saturated inputs ``τ_e = -τ_max p₁/‖p₁‖``, ``f_e = -f_max p₂/‖p₂‖``
(zero when the switching vector vanishes). The costate obeys

    λ̇′ = -ω × λ′,    λ̇″ = υ × λ′ - (∂φ/∂ω)ᵀ λ″

and the unknowns ``{λ(t₁), t₂}`` are found by shooting on
``e₂ = [υ(t₂), ω(t₂), H₂(t₂)]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.optimize import least_squares

from . import so3, target

SINGULAR_TOL = 1e-10


class NoConvergenceError(RuntimeError):
    """Shooting failed; carries the best plan found."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


@dataclass(frozen=True)
class DetumbleLimits:
    """Wrench limits and the acceleration parameters the planner uses.

    Defaults are the user-defined values of the reference experiment:
    ``a₂max`` (m/s²), ``γ_max`` (rad/s²), ``f_max`` (N), ``τ_max`` (N m) and a
    gyradius norm from upper-bound mass properties (1700 kg, 1800 kg m²).
    """

    a2_max: float = 0.0035
    gamma_max: float = 0.0045
    kappa: float = float(np.sqrt(1800.0 / 1700.0))
    f_max: float = 7.0
    tau_max: float = 8.0

    @classmethod
    def from_mass_bounds(cls, f_max, tau_max, mass, trace):
        """Limits implied by (upper-bound) mass and inertia trace."""
        return cls(a2_max=f_max / mass, gamma_max=tau_max / trace,
                   kappa=float(np.sqrt(trace / mass)), f_max=f_max, tau_max=tau_max)

    def validate(self):
        if min(self.a2_max, self.gamma_max, self.kappa, self.f_max, self.tau_max) <= 0:
            raise ValueError("detumble limits must be positive")


@dataclass
class DetumbleParams:
    limits: DetumbleLimits = field(default_factory=DetumbleLimits)
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(2))
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class CoupledState:
    """Body-frame CoM velocity (m/s), body rate (rad/s) and attitude at capture."""

    upsilon: np.ndarray
    w: np.ndarray
    q: np.ndarray = field(default_factory=lambda: so3.IDENTITY.copy())


@dataclass
class Costate6:
    lin: np.ndarray
    ang: np.ndarray

    def as_array(self):
        return np.concatenate([self.lin, self.ang])

    @classmethod
    def from_array(cls, lam):
        lam = np.asarray(lam, float)
        return cls(lam[:3].copy(), lam[3:].copy())


def _lam(lam):
    return lam.as_array() if isinstance(lam, Costate6) else np.asarray(lam, float)


# --- Hamiltonian structure ----------------------------------------------------

def switching_vectors(lam, params: DetumbleParams):
    """``(p₁, p₂) = (Bλ″, κ²λ′ + ϱ × Bλ″)``."""
    lam = _lam(lam)
    Bl = target.b_diag(params.sigma) * lam[3:]
    return Bl, params.limits.kappa ** 2 * lam[:3] + np.cross(params.offset, Bl)


def _unit_or_zero(p):
    n = np.linalg.norm(p)
    return p / n if n >= SINGULAR_TOL else np.zeros(3)


def optimal_inputs(lam, params: DetumbleParams):
    """Saturated ``(f_e, τ_e)`` in N and N m; zero on a singular arc."""
    p1, p2 = switching_vectors(lam, params)
    lim = params.limits
    return -lim.f_max * _unit_or_zero(p2), -lim.tau_max * _unit_or_zero(p1)


def state_rate(s, f_e, tau_e, params: DetumbleParams):
    """``[υ̇, ω̇]`` for physical inputs, using only the planner's acceleration parameters."""
    ups, w = np.asarray(s[:3], float), np.asarray(s[3:6], float)
    lim = params.limits
    f_hat = np.asarray(f_e, float) / lim.f_max
    tau_hat = np.asarray(tau_e, float) / lim.tau_max
    b = target.b_diag(params.sigma)
    ud = -np.cross(w, ups) + lim.a2_max * f_hat
    wd = (target.phi(w, params.sigma) + lim.gamma_max * b * tau_hat
          - lim.a2_max / lim.kappa ** 2 * b * np.cross(params.offset, f_hat))
    return np.concatenate([ud, wd])


def hamiltonian_h2(s, lam, f_e, tau_e, params: DetumbleParams):
    """``H₂ = 1 + λᵀẋ₂`` evaluated directly from the dynamics."""
    return 1.0 + float(_lam(lam) @ state_rate(s, f_e, tau_e, params))


def hamiltonian_p_form(s, lam, f_e, tau_e, params: DetumbleParams):
    """``H₂ = c + (γ_max/τ_max) p₁ᵀτ_e + (a₂max/(κ² f_max)) p₂ᵀf_e``."""
    lam = _lam(lam)
    ups, w = np.asarray(s[:3], float), np.asarray(s[3:6], float)
    lim = params.limits
    c = 1.0 - lam[:3] @ np.cross(w, ups) + lam[3:] @ target.phi(w, params.sigma)
    p1, p2 = switching_vectors(lam, params)
    return float(c + lim.gamma_max / lim.tau_max * (p1 @ tau_e)
                 + lim.a2_max / (lim.kappa ** 2 * lim.f_max) * (p2 @ f_e))


def costate_rate(s, lam, params: DetumbleParams):
    """``λ̇ = -∂H₂/∂x₂``."""
    lam = _lam(lam)
    ups, w = np.asarray(s[:3], float), np.asarray(s[3:6], float)
    dl = -np.cross(w, lam[:3])
    dll = np.cross(ups, lam[:3]) - target.dphi_dw(w, params.sigma).T @ lam[3:]
    return np.concatenate([dl, dll])


# --- joint state/costate integration -----------------------------------------

def _rhs_consts(params: DetumbleParams):
    """Packed constants ``[σ₁, σ₂, σ₃, B(3), ϱ(3), κ², a₂max, γ_max, a₂max/κ²]``."""
    s1, s2 = float(params.sigma[0]), float(params.sigma[1])
    lim = params.limits
    return np.concatenate([[s1, s2, -(s1 + s2) / (1.0 + s1 * s2)], target.b_diag(params.sigma),
                           np.asarray(params.offset, float),
                           [lim.kappa ** 2, lim.a2_max, lim.gamma_max, lim.a2_max / lim.kappa ** 2]])


@numba.njit(cache=True)
def _input_dirs(z, k):
    """Unit-scaled directions ``(f̂, τ̂)`` from the costate part of ``z``."""
    p10 = k[3] * z[9]
    p11 = k[4] * z[10]
    p12 = k[5] * z[11]
    o0, o1, o2 = k[6], k[7], k[8]
    p20 = k[9] * z[6] + (o1 * p12 - o2 * p11)
    p21 = k[9] * z[7] + (o2 * p10 - o0 * p12)
    p22 = k[9] * z[8] + (o0 * p11 - o1 * p10)
    n1 = np.sqrt(p10 * p10 + p11 * p11 + p12 * p12)
    n2 = np.sqrt(p20 * p20 + p21 * p21 + p22 * p22)
    u = np.zeros(6)
    if n2 >= SINGULAR_TOL:
        u[0] = -p20 / n2
        u[1] = -p21 / n2
        u[2] = -p22 / n2
    if n1 >= SINGULAR_TOL:
        u[3] = -p10 / n1
        u[4] = -p11 / n1
        u[5] = -p12 / n1
    return u


@numba.njit(cache=True)
def _rhs(z, k):
    """Right-hand side of the 12-dim optimal system ``[υ, ω, λ′, λ″]``."""
    u0, u1, u2, w0, w1, w2 = z[0], z[1], z[2], z[3], z[4], z[5]
    l0, l1, l2, m0, m1, m2 = z[6], z[7], z[8], z[9], z[10], z[11]
    s1, s2, s3 = k[0], k[1], k[2]
    o0, o1, o2 = k[6], k[7], k[8]
    a2, g, c = k[10], k[11], k[12]
    d = _input_dirs(z, k)
    of0 = o1 * d[2] - o2 * d[1]
    of1 = o2 * d[0] - o0 * d[2]
    of2 = o0 * d[1] - o1 * d[0]
    out = np.empty(12)
    out[0] = -(w1 * u2 - w2 * u1) + a2 * d[0]
    out[1] = -(w2 * u0 - w0 * u2) + a2 * d[1]
    out[2] = -(w0 * u1 - w1 * u0) + a2 * d[2]
    out[3] = s1 * w1 * w2 + k[3] * (g * d[3] - c * of0)
    out[4] = s2 * w0 * w2 + k[4] * (g * d[4] - c * of1)
    out[5] = s3 * w0 * w1 + k[5] * (g * d[5] - c * of2)
    out[6] = -(w1 * l2 - w2 * l1)
    out[7] = -(w2 * l0 - w0 * l2)
    out[8] = -(w0 * l1 - w1 * l0)
    out[9] = (u1 * l2 - u2 * l1) - (s2 * w2 * m1 + s3 * w1 * m2)
    out[10] = (u2 * l0 - u0 * l2) - (s1 * w2 * m0 + s3 * w0 * m2)
    out[11] = (u0 * l1 - u1 * l0) - (s1 * w1 * m0 + s2 * w0 * m1)
    return out


@numba.njit(cache=True)
def _rk4_run(z0, k, h, n, record):
    m = n + 1 if record else 1
    hist = np.empty((m, 12))
    z = z0.copy()
    hist[0] = z
    for i in range(n):
        k1 = _rhs(z, k)
        k2 = _rhs(z + 0.5 * h * k1, k)
        k3 = _rhs(z + 0.5 * h * k2, k)
        k4 = _rhs(z + h * k3, k)
        z = z + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if record:
            hist[i + 1] = z
    if not record:
        hist[0] = z
    return hist


def n_steps(T, dt):
    return max(1, int(np.ceil(T / dt - 1e-9)))


def integrate(s1, lam1, T, params: DetumbleParams, dt=target.DT, n=None, record=False):
    """RK4 of state and costate over ``[0, T]`` with ``n`` equal steps (default ``⌈T/dt⌉``).

    Returns the final 12-vector, or the ``(n+1, 12)`` history if ``record``.
    """
    n = n_steps(T, dt) if n is None else int(n)
    z0 = np.concatenate([np.asarray(s1[:6], float), _lam(lam1)])
    hist = _rk4_run(z0, _rhs_consts(params), float(T) / n, n, bool(record))
    if not np.all(np.isfinite(hist)):
        raise target.NumericError("detumble integration produced non-finite values")
    return hist if record else hist[0]


def input_directions(z, params: DetumbleParams):
    """``(f̂, τ̂)`` unit (or zero) input directions for a joint state/costate ``z``."""
    d = _input_dirs(np.asarray(z, float), _rhs_consts(params))
    return d[:3], d[3:]


def _h2_opt(z, params: DetumbleParams):
    f, t = input_directions(z, params)
    lim = params.limits
    return hamiltonian_h2(z[:6], z[6:12], lim.f_max * f, lim.tau_max * t, params)


def shooting_error_e2(lam1, T, s1, params: DetumbleParams, dt=target.DT, n=None):
    """``e₂ = [υ(t₂), ω(t₂), H₂(t₂)]`` after ``T = t₂ - t₁`` seconds."""
    if T < 0:
        raise ValueError("t2 must not precede t1")
    if T == 0:
        z = np.concatenate([np.asarray(s1[:6], float), _lam(lam1)])
    else:
        z = integrate(s1, lam1, T, params, dt, n)
    return np.concatenate([z[:6], [_h2_opt(z, params)]])


# --- solver ---

class _Reached(Exception):
    def __init__(self, x):
        self.x = x


def _least_squares(fun, x0, n, lower, upper, target_norm, max_nfev):
    """Trust-region least squares on ``fun(x, n)`` that stops once ``‖e‖ < target_norm``.

    Returns ``(x, nfev)``; the step count ``n`` is held fixed so the residual
    is smooth in the duration unknown.
    """
    count = [0]

    def resid(x):
        count[0] += 1
        e = fun(x, n)
        if np.linalg.norm(e) < target_norm:
            raise _Reached(x.copy())
        return e

    try:
        sol = least_squares(resid, x0, method="trf", x_scale="jac", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=max_nfev, bounds=(lower, upper))
        return sol.x, count[0]
    except _Reached as hit:
        return hit.x, count[0]


@dataclass
class DetumblePlan:
    lam1: np.ndarray
    t1: float
    t2: float
    converged: bool
    residual: float
    s1: CoupledState
    params: DetumbleParams
    mode: str = "full"
    nfev: int = 0
    samples: dict = field(default_factory=dict)

    @property
    def duration(self):
        return self.t2 - self.t1


def _time_guesses(ups, w, params):
    lim = params.limits
    tv = np.linalg.norm(ups) / lim.a2_max
    tw = np.linalg.norm(np.asarray(w) / target.b_diag(params.sigma)) / lim.gamma_max
    return tv, tw


def _base_guess(ups, w, params, mode):
    """Costate aimed against the initial velocities, scaled so that ``H₂ ≈ 0``."""
    b = target.b_diag(params.sigma)
    lim = params.limits
    lin = np.zeros(3)
    ang = np.zeros(3)
    if mode in ("full", "translation") and np.linalg.norm(ups) > 0:
        lin = ups / np.linalg.norm(ups)
    if mode in ("full", "rotation") and np.linalg.norm(w) > 0:
        d = w / b ** 2
        ang = d / np.linalg.norm(b * d)
    lam = np.concatenate([lin, ang])
    p1, p2 = switching_vectors(lam, params)
    rate = lim.gamma_max * np.linalg.norm(p1) + lim.a2_max / lim.kappa ** 2 * np.linalg.norm(p2)
    return lam / rate if rate > 0 else lam


def _mode(s1: CoupledState, params: DetumbleParams, tol):
    if np.linalg.norm(params.offset) > 0:
        return "full"
    if np.linalg.norm(s1.upsilon) <= tol:
        return "rotation"
    if np.linalg.norm(s1.w) <= tol:
        return "translation"
    return "full"


def solve(s1: CoupledState, params: DetumbleParams, t1=0.0, dt=target.DT, tol=1e-6,
          n_starts=16, start_seed=0, max_nfev=1000, sample=True) -> DetumblePlan:
    """Shooting for ``{λ(t₁), t₂}`` with trust-region least squares and multi-start.

    With zero grasp offset the translational and rotational channels decouple;
    a channel already at rest is then held on its singular arc (its costate
    block fixed at zero) so the remaining problem is well posed. Each
    least-squares run keeps the step count fixed so the residual is smooth
    in ``t₂``; the converged plan is then re-evaluated on the nominal grid.
    """
    params.limits.validate()
    ups = np.asarray(s1.upsilon, float)
    w = np.asarray(s1.w, float)
    state0 = np.concatenate([ups, w])
    if np.linalg.norm(state0) <= tol:
        plan = DetumblePlan(np.zeros(6), t1, t1, True, float(np.linalg.norm(state0)), s1, params, "rest")
        if sample:
            plan.samples = sample_plan(plan, dt)
        return plan

    mode = _mode(s1, params, tol)
    free = {"full": np.arange(6), "translation": np.arange(3), "rotation": np.arange(3, 6)}[mode]

    def full_lam(x):
        lam = np.zeros(6)
        lam[free] = x[:-1]
        return lam

    tv, tw = _time_guesses(ups, w, params)
    t_base = [t for t in (tv, tw, max(tv, tw)) if t > 0]
    base = _base_guess(ups, w, params, mode)[free]
    rng = np.random.default_rng(start_seed)
    starts = []
    for T0 in sorted(set(t_base), key=lambda t: (-t, t)):
        starts.append(np.concatenate([base, [T0]]))
    for _ in range(n_starts):
        d = rng.standard_normal(len(free))
        d *= np.linalg.norm(base) / np.linalg.norm(d)
        for T0 in t_base:
            for m in (1.0, 1.5, 2.0):
                starts.append(np.concatenate([d, [T0 * m]]))

    lower = np.r_[np.full(len(free), -np.inf), 1e-6]
    upper = np.full(len(free) + 1, np.inf)
    best = None
    nfev = 0
    for x0 in starts:
        try:
            x, k = _least_squares(lambda x, n: shooting_error_e2(full_lam(x), x[-1], state0, params, dt, n),
                                  x0, n_steps(x0[-1], dt), lower, upper, 0.5 * tol, max_nfev)
            nfev += k
            n_fin = n_steps(x[-1], dt)
            if n_fin != n_steps(x0[-1], dt):
                # polish on the nominal step grid for the converged duration
                x, k = _least_squares(lambda x, n: shooting_error_e2(full_lam(x), x[-1], state0, params, dt, n),
                                      x, n_fin, lower, upper, 0.5 * tol, max_nfev // 4)
                nfev += k
        except (ValueError, ArithmeticError):
            continue
        e = shooting_error_e2(full_lam(x), x[-1], state0, params, dt)
        ne = float(np.linalg.norm(e))
        cand = (ne >= tol, ne, float(x[-1]), x)
        if best is None or cand[:3] < best[:3]:
            best = cand
        if ne < tol:
            break
    if best is None:
        raise NoConvergenceError("detumble shooting failed from every start")
    failed, ne, T, x = best
    plan = DetumblePlan(full_lam(x), t1, t1 + T, not failed, ne, s1, params, mode, nfev)
    if failed:
        raise NoConvergenceError(f"detumble shooting did not converge (|e2| = {ne:.3e})", plan)
    if sample:
        plan.samples = sample_plan(plan, dt)
    return plan


# --- sampled plan -----------------------------------------------------------

def sample_plan(plan: DetumblePlan, dt=target.DT):
    """Trajectory ``{t, υ, ω, q, f_e, τ_e, H₂, u₂}`` on the plan's RK4 grid."""
    params = plan.params
    s0 = np.concatenate([plan.s1.upsilon, plan.s1.w])
    T = plan.duration
    if T <= 0:
        z = np.concatenate([s0, plan.lam1])[None, :]
        ts = np.array([0.0])
    else:
        z = integrate(s0, plan.lam1, T, params, dt, record=True)
        ts = np.linspace(0.0, T, len(z))
    lim = params.limits
    f = np.zeros((len(z), 3))
    tau = np.zeros((len(z), 3))
    H = np.zeros(len(z))
    xd = np.zeros((len(z), 6))
    for i, zi in enumerate(z):
        fh, th = input_directions(zi, params)
        f[i] = lim.f_max * fh
        tau[i] = lim.tau_max * th
        xd[i] = state_rate(zi[:6], f[i], tau[i], params)
        H[i] = 1.0 + float(zi[6:12] @ xd[i])
    # attitude along the plan, same step as the state
    q = np.zeros((len(z), 4))
    q[0] = plan.s1.q
    for i in range(1, len(z)):
        h = ts[i] - ts[i - 1]
        x = np.concatenate([q[i - 1], z[i - 1, 3:6], np.zeros(6)])
        # rate held at the step's mean for the attitude-only update
        x[4:7] = 0.5 * (z[i - 1, 3:6] + z[i, 3:6])
        q[i] = target.step_array(x, np.zeros(2), h)[0:4]
    u2 = np.array([end_effector_accel_u2(q[i], z[i, 0:3], z[i, 3:6], xd[i], params.offset)
                   for i in range(len(z))])
    return {"t": plan.t1 + ts, "upsilon": z[:, 0:3], "w": z[:, 3:6], "q": q, "f_e": f,
            "tau_e": tau, "H2": H, "u2": u2, "costate": z[:, 6:12]}


def end_effector_accel_u2(q, upsilon, w, xdot, offset):
    """Camera-frame grasp-point acceleration.

    ``A(q)(υ̇ + ω × υ + ω̇ × ϱ + ω × (ω × ϱ))``; the ``ω × υ`` transport term
    appears because ``υ`` is resolved in the rotating body frame.
    """
    w = np.asarray(w, float)
    offset = np.asarray(offset, float)
    ud, wd = xdot[:3], xdot[3:6]
    acc = ud + np.cross(w, upsilon) + np.cross(wd, offset) + np.cross(w, np.cross(w, offset))
    return so3.rotation_matrix(q) @ acc


PLAN_CSV_HEADER = ["t", "ups_x", "ups_y", "ups_z", "w_x", "w_y", "w_z", "f_x", "f_y", "f_z",
                   "tau_x", "tau_y", "tau_z", "f_norm", "tau_norm", "H2"]


def write_plan_csv(path, plan: DetumblePlan):
    """Plan CSV: ``t`` (s), ``υ`` (m/s), ``ω`` (rad/s), ``f_e`` (N), ``τ_e`` (N m), norms, ``H₂``."""
    import csv

    s = plan.samples
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(PLAN_CSV_HEADER)
        for i in range(len(s["t"])):
            row = [s["t"][i], *s["upsilon"][i], *s["w"][i], *s["f_e"][i], *s["tau_e"][i],
                   np.linalg.norm(s["f_e"][i]), np.linalg.norm(s["tau_e"][i]), s["H2"][i]]
            wr.writerow([f"{v:.17g}" for v in row])
