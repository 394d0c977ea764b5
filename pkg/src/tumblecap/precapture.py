"""Time-optimal interception of a tumbling target's grasp point.

The end-effector is a double integrator ``r̈ = u₁`` with ``‖u₁‖ ≤ a_max``.
Minimizing ``t₁ + φ(t₁)`` subject to ``r(t₁) = ρ(t₁)`` and ``ṙ(t₁) = ρ̇(t₁)``
gives the costate ``λ = [a₁; -a₁τ + a₂]`` and the bang-norm law

    u₁(τ) = -a_max (-a₁τ + a₂) / ‖-a₁τ + a₂‖,    τ = t - t₀.

The seven unknowns ``{a₁, a₂, t₁}`` are found by a damped Newton iteration on
the terminal error ``e₁`` (position, velocity and the free-final-time
transversality residual). ``φ = -w cos α`` rewards facing the fixture normal
``k`` towards the camera at capture.

Chaser states are evaluated with Gauss-Legendre quadrature split at the
switching instant, so a plan is exact to round-off for the double
integrator; the grasp-point prediction integrates the torque-free target
model from the belief mean on the shared RK4 grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import so3, target

#: Relative half-widths (in switching time-scales) of the refined segments around ``τ*``.
_REFINE = (1.0, 4.0, 16.0, 64.0)
_GL_X, _GL_W = np.polynomial.legendre.leggauss(16)


class SingularControlError(ArithmeticError):
    """The switching vector ``-a₁τ + a₂`` vanished."""


class UndefinedLOSError(ValueError):
    """Line of sight undefined at ``r = 0``."""


class NoConvergenceError(RuntimeError):
    """Shooting failed; carries the best iterate found."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


class SingularJacobianError(ArithmeticError):
    def __init__(self, msg, cond=np.inf):
        super().__init__(msg)
        self.cond = cond


@dataclass
class ChaserState:
    """End-effector position (m) and velocity (m/s), camera frame."""

    r: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rd: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class PlannerConfig:
    """Pre-capture planner settings.

    ``a_max`` (m/s²) defaults to the user-defined limit of the reference
    experiment; durations beyond ``max_duration`` (s) are rejected.
    ``transversality`` selects the terminal-time condition: ``"classic"`` uses
    ``∂φ/∂t₁ + 1 + a₁ᵀṙ - ‖λ_v‖ a_max``; ``"exact"`` adds the moving-target
    terms of the terminal constraint.
    """

    a_max: float = 0.01
    w: float = 0.0
    k: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    tol: float = 1e-9
    max_iter: int = 60
    fd_step: float = 1e-6
    max_halvings: int = 50
    n_starts: int = 8
    start_seed: int = 0
    transversality: str = "classic"
    sample_dt: float = target.DT
    max_duration: float = 600.0

    def validate(self):
        if self.a_max <= 0:
            raise ValueError("a_max must be positive")
        if self.w < 0:
            raise ValueError("w must be non-negative")
        if abs(np.linalg.norm(self.k) - 1.0) > 1e-9:
            raise ValueError("k must be a unit vector")
        if self.transversality not in ("classic", "exact"):
            raise ValueError("transversality must be 'classic' or 'exact'")
        if self.max_duration <= 0:
            raise ValueError("max_duration must be positive")


# --- control law and chaser kinematics ---------------------------------------

def switching_vector(tau, a1, a2):
    """``λ_v(τ) = -a₁τ + a₂`` (broadcasts over ``tau``)."""
    tau = np.asarray(tau, float)
    return a2 - tau[..., None] * a1


def control_u1(tau, a1, a2, a_max, singular_tol=1e-12):
    """Optimal bang-norm acceleration at ``τ`` (m/s²)."""
    lv = switching_vector(tau, np.asarray(a1, float), np.asarray(a2, float))
    n = np.linalg.norm(lv, axis=-1, keepdims=True)
    if np.any(n < singular_tol):
        raise SingularControlError("switching vector vanished")
    return -a_max * lv / n


def _u_limit(tau, a1, a2, a_max):
    """``control_u1`` with the right-hand limit ``a_max a₁/‖a₁‖`` where ``λ_v = 0`` exactly."""
    lv = switching_vector(tau, a1, a2)
    n = np.linalg.norm(lv, axis=-1, keepdims=True)
    n1 = np.linalg.norm(a1)
    fallback = a1 / n1 if n1 > 0 else np.zeros(3)
    with np.errstate(invalid="ignore", divide="ignore"):
        u = np.where(n > 0, -lv / np.where(n > 0, n, 1.0), fallback)
    return a_max * u


def switch_time(a1, a2):
    """Instant ``τ*`` where ``‖-a₁τ + a₂‖`` is smallest."""
    n2 = float(a1 @ a1)
    return float(a1 @ a2) / n2 if n2 > 0 else -np.inf


def _segments(a1, a2, t_end):
    """Quadrature breakpoints on ``[0, t_end]`` refined around ``τ*``."""
    pts = [0.0, t_end]
    ts = switch_time(a1, a2)
    if 0.0 < ts < t_end:
        n1 = np.linalg.norm(a1)
        scale = np.linalg.norm(switching_vector(ts, a1, a2)) / n1
        pts.append(ts)
        for m in _REFINE:
            for s in (-1.0, 1.0):
                p = ts + s * m * scale
                if 0.0 < p < t_end:
                    pts.append(p)
    return np.unique(np.array(pts))


def _moments(a1, a2, a_max, lo, hi, t_ref):
    """``∫ u ds`` and ``∫ (t_ref - s) u ds`` over ``[lo, hi]``."""
    if hi <= lo:
        return np.zeros(3), np.zeros(3)
    half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)
    s = mid + half * _GL_X
    u = _u_limit(s, a1, a2, a_max)
    wts = half * _GL_W
    return wts @ u, (wts * (t_ref - s)) @ u


def chaser_at(tau, chaser0: ChaserState, a1, a2, a_max):
    """End-effector ``(r, ṙ)`` after ``τ`` seconds of the bang-norm law."""
    if tau <= 0.0:
        return chaser0.r.copy(), chaser0.rd.copy()
    dv = np.zeros(3)
    dr = np.zeros(3)
    br = _segments(a1, a2, tau)
    for lo, hi in zip(br[:-1], br[1:]):
        m0, m1 = _moments(a1, a2, a_max, lo, hi, tau)
        dv += m0
        dr += m1
    return chaser0.r + chaser0.rd * tau + dr, chaser0.rd + dv


# --- target prediction -------------------------------------------------------

class GraspPrediction:
    """Torque-free grasp-point prediction from a belief mean.

    States are cached on the ``dt`` grid starting at ``t0``; off-grid times
    take a partial RK4 step from the preceding node so the prediction is
    continuous in time.
    """

    def __init__(self, state: target.TargetState, sigma, offset, dt=target.DT):
        self.sigma = np.asarray(sigma, float)
        self.offset = np.asarray(offset, float)
        self.dt = dt
        self._grid = [state.as_array()]

    @classmethod
    def from_belief(cls, belief, dt=target.DT):
        return cls(belief.target_state, belief.sigma, belief.offset, dt)

    def state(self, tau) -> target.TargetState:
        if tau < 0:
            raise ValueError("prediction time must be non-negative")
        k = int(np.floor(tau / self.dt + 1e-9))
        while len(self._grid) <= k:
            self._grid.append(target.step_array(self._grid[-1], self.sigma, self.dt))
        x = self._grid[k]
        rest = tau - k * self.dt
        if rest > 1e-12:
            x = target.step_array(x, self.sigma, rest)
        return target.TargetState.from_array(x)

    def grasp(self, tau):
        """``(ρ, ρ̇, ρ̈, state)`` at ``τ`` seconds after the snapshot."""
        s = self.state(tau)
        pos, vel, acc = target.grasp_point_kinematics(s, self.sigma, self.offset)
        return pos, vel, acc, s


# --- line-of-sight objective ------------------------------------------------

def los_objective(r, q, k, w):
    """``φ = -w (r/‖r‖)ᵀ A(q) k``; returns ``(φ, cos α)``."""
    r = np.asarray(r, float)
    nr = np.linalg.norm(r)
    if nr == 0.0:
        raise UndefinedLOSError("line of sight undefined at r = 0")
    cos_a = float(r @ (so3.rotation_matrix(q) @ k)) / nr
    return -w * cos_a, cos_a


def los_gradient(r, q, k, w):
    """``(∂φ/∂r, ∂φ/∂q)`` with ``q = [q_v, q_o]`` and ``A = I + 2q_o[q_v×] + 2[q_v×]²``."""
    r = np.asarray(r, float)
    q = np.asarray(q, float)
    k = np.asarray(k, float)
    nr = np.linalg.norm(r)
    if nr == 0.0:
        raise UndefinedLOSError("line of sight undefined at r = 0")
    u = r / nr
    n = so3.rotation_matrix(q) @ k
    g_r = -w * (n - u * (u @ n)) / nr
    qv, qo = q[:3], q[3]
    g_qv = -w * 2.0 * (qo * np.cross(k, u) + u * (qv @ k) + k * (u @ qv) - 2.0 * (u @ k) * qv)
    g_qo = -w * 2.0 * float(u @ np.cross(qv, k))
    return g_r, np.concatenate([g_qv, [g_qo]])


def los_rate(r, rd, q, w_body, k, w):
    """``dφ/dt`` along ``ṙ`` and the attitude kinematics ``q̇ = ½Ω(ω)q``."""
    g_r, g_q = los_gradient(r, q, k, w)
    return float(g_r @ rd + g_q @ so3.quat_rate(q, w_body))


# --- shooting ----------------------------------------------------------------

def transversality(a1, a2, T, rd1, rho_acc, dphi_dt, a_max, mode="classic"):
    """Free-final-time residual at ``t₁``."""
    lv = switching_vector(T, a1, a2)
    nl = float(np.linalg.norm(lv))
    if mode == "classic":
        return dphi_dt + 1.0 + float(a1 @ rd1) - nl * a_max
    # exact: ν from λ(t₁), constraint ψ depends on t₁ through ρ(t₁)
    return dphi_dt + 1.0 - nl * a_max - float(lv @ rho_acc)


def terminal_error_e1(z, chaser0: ChaserState, pred: GraspPrediction, cfg: PlannerConfig):
    """``e₁ = [r - ρ, ṙ - ρ̇, ∂φ/∂t₁ + H₁]`` at ``t₁ = t₀ + z[6]``."""
    a1, a2, T = z[0:3], z[3:6], float(z[6])
    if T <= 0:
        raise ValueError("t1 must exceed t0")
    if T > cfg.max_duration:
        raise ValueError("t1 exceeds the planning horizon")
    r1, rd1 = chaser_at(T, chaser0, a1, a2, cfg.a_max)
    rho, rhod, rhoa, s = pred.grasp(T)
    dphi = los_rate(rho, rhod, s.q, s.w, cfg.k, cfg.w) if cfg.w > 0 else 0.0
    e = np.empty(7)
    e[0:3] = r1 - rho
    e[3:6] = rd1 - rhod
    e[6] = transversality(a1, a2, T, rd1, rhoa, dphi, cfg.a_max, cfg.transversality)
    if not np.all(np.isfinite(e)):
        raise target.NumericError("non-finite shooting residual")
    return e


def initial_guess(chaser0: ChaserState, pred: GraspPrediction, a_max, sweeps=3):
    """Rest-to-rest guess aimed at the predicted grasp point.

    ``T = 2√(d/a_max)``, ``a₂ = -d̂/a_max``, ``a₁ = -2d̂/(a_max T)`` solve the
    stationary collinear case exactly; a few sweeps re-aim at ``ρ(T)``.
    """
    T = None
    d = pred.grasp(0.0)[0] - chaser0.r
    for _ in range(sweeps):
        dist = np.linalg.norm(d)
        if dist == 0.0:
            break
        T = 2.0 * np.sqrt(dist / a_max)
        d = pred.grasp(T)[0] - chaser0.r
    dist = np.linalg.norm(d)
    if dist == 0.0:
        d, dist = np.array([1.0, 0.0, 0.0]), 1.0
    T = 2.0 * np.sqrt(dist / a_max)
    dh = d / dist
    return np.concatenate([-2.0 * dh / (a_max * T), -dh / a_max, [T]])


def _jacobian(fun, z, e0, step):
    J = np.empty((len(e0), len(z)))
    for i in range(len(z)):
        h = step * max(1.0, abs(z[i]))
        zp = z.copy()
        zp[i] += h
        J[:, i] = (fun(zp) - e0) / h
    return J


def damped_newton(fun, z0, tol, max_iter, fd_step, max_halvings, positive=(6,)):
    """Newton iteration with forward-difference Jacobian and step halving.

    Returns ``(z, ‖e‖, iterations, converged)``.
    """
    z = np.array(z0, float)
    e = fun(z)
    ne = float(np.linalg.norm(e))
    it = 0
    for it in range(1, max_iter + 1):
        if ne < tol:
            return z, ne, it - 1, True
        J = _jacobian(fun, z, e, fd_step)
        cond = np.linalg.cond(J)
        if not np.isfinite(cond) or cond > 1e14:
            raise SingularJacobianError(f"singular shooting Jacobian (cond={cond:.3g})", cond)
        dz = -np.linalg.solve(J, e)
        lam = 1.0
        for _ in range(max_halvings):
            zn = z + lam * dz
            if all(zn[i] > 0 for i in positive):
                try:
                    en = fun(zn)
                except (ValueError, ArithmeticError):
                    en = None
                if en is not None and np.linalg.norm(en) < ne:
                    break
            lam *= 0.5
        else:
            return z, ne, it, False
        z, e, ne = zn, en, float(np.linalg.norm(en))
    return z, ne, it, ne < tol


@dataclass
class PreCapturePlan:
    a1: np.ndarray
    a2: np.ndarray
    t0: float
    t1: float
    a_max: float
    chaser0: ChaserState
    converged: bool
    residual: float
    iterations: int = 0
    cos_alpha: float = float("nan")
    samples: dict = field(default_factory=dict)

    @property
    def duration(self):
        return self.t1 - self.t0

    def state_at(self, t):
        """Planned ``(r, ṙ)`` at absolute time ``t`` (held at ``t₁`` afterwards)."""
        tau = min(max(t - self.t0, 0.0), self.duration)
        return chaser_at(tau, self.chaser0, self.a1, self.a2, self.a_max)

    def accel_at(self, t):
        tau = t - self.t0
        if self.duration <= 0 or tau < 0 or tau > self.duration:
            return np.zeros(3)
        return _u_limit(tau, self.a1, self.a2, self.a_max)


def chaser_samples(taus, chaser0: ChaserState, a1, a2, a_max):
    """Vectorized ``chaser_at`` over an increasing grid ``taus`` starting at 0."""
    taus = np.asarray(taus, float)
    T = float(taus[-1])
    br = np.union1d(taus, _segments(a1, a2, T)) if T > 0 else taus
    lo, hi = br[:-1], br[1:]
    half, mid = 0.5 * (hi - lo), 0.5 * (hi + lo)
    s = mid[:, None] + half[:, None] * _GL_X[None, :]
    u = _u_limit(s, a1, a2, a_max)
    wts = half[:, None] * _GL_W[None, :]
    m0 = np.einsum("ij,ijk->ik", wts, u)
    m1 = np.einsum("ij,ijk->ik", wts * (hi[:, None] - s), u)
    v = np.empty((len(br), 3))
    r = np.empty((len(br), 3))
    v[0], r[0] = chaser0.rd, chaser0.r
    for j in range(len(lo)):
        r[j + 1] = r[j] + v[j] * (hi[j] - lo[j]) + m1[j]
        v[j + 1] = v[j] + m0[j]
    idx = np.searchsorted(br, taus)
    return r[idx], v[idx]


def sample_plan(plan: PreCapturePlan, pred: GraspPrediction, k, dt=target.DT):
    """Sampled trajectory ``{t, r, ṙ, u₁, ρ, ρ̇, cos α}`` on a ``dt`` grid plus ``t₁``."""
    T = plan.duration
    n = int(np.floor(T / dt + 1e-9))
    taus = dt * np.arange(n + 1)
    if T - taus[-1] > 1e-12:
        taus = np.append(taus, T)
    r, rd = chaser_samples(taus, plan.chaser0, plan.a1, plan.a2, plan.a_max)
    u = _u_limit(taus, plan.a1, plan.a2, plan.a_max) if T > 0 else np.zeros((len(taus), 3))
    rho, rhod, cos_a = [], [], []
    for tau in taus:
        p, pd, _, s = pred.grasp(tau)
        rho.append(p)
        rhod.append(pd)
        cos_a.append(los_objective(p, s.q, k, 1.0)[1] if np.linalg.norm(p) > 0 else np.nan)
    return {"t": plan.t0 + taus, "r": r, "rd": rd, "u": u, "rho": np.array(rho),
            "rhod": np.array(rhod), "cos_alpha": np.array(cos_a)}


def solve(chaser0: ChaserState, pred: GraspPrediction, cfg: PlannerConfig, t0=0.0,
          z0=None, sample=True) -> PreCapturePlan:
    """Solve the seven-unknown shooting problem from ``chaser0`` at time ``t0``.

    ``z0`` (``[a₁, a₂, t₁ - t₀]``) warm-starts the iteration, e.g. from the
    previous plan. On failure, ``cfg.n_starts`` deterministic perturbations
    of the guess are tried and the lowest-residual plan (then earliest
    ``t₁``) is kept. Raises ``NoConvergenceError`` if none converges.
    """
    cfg.validate()
    chaser0 = ChaserState(np.asarray(chaser0.r, float).copy(), np.asarray(chaser0.rd, float).copy())
    rho0, rhod0, _, _ = pred.grasp(0.0)
    if (np.linalg.norm(rho0 - chaser0.r) < cfg.tol and np.linalg.norm(rhod0 - chaser0.rd) < cfg.tol):
        plan = PreCapturePlan(np.zeros(3), np.zeros(3), t0, t0, cfg.a_max, chaser0, True,
                              float(np.hypot(np.linalg.norm(rho0 - chaser0.r),
                                             np.linalg.norm(rhod0 - chaser0.rd))))
        if sample:
            plan.samples = sample_plan(plan, pred, cfg.k, cfg.sample_dt)
        return plan

    def fun(z):
        return terminal_error_e1(z, chaser0, pred, cfg)

    guess = initial_guess(chaser0, pred, cfg.a_max)
    starts = [np.asarray(z0, float)] if z0 is not None else []
    starts.append(guess)
    rng = np.random.default_rng(cfg.start_seed)
    for _ in range(cfg.n_starts):
        g = guess.copy()
        g[0:6] *= 1.0 + 0.3 * rng.standard_normal(6)
        g[6] *= rng.uniform(0.7, 1.6)
        starts.append(g)

    results = []
    for i, z_init in enumerate(starts):
        try:
            z, ne, it, ok = damped_newton(fun, z_init, cfg.tol, cfg.max_iter, cfg.fd_step,
                                          cfg.max_halvings)
        except (SingularJacobianError, SingularControlError, ValueError, ArithmeticError):
            continue
        results.append((not ok, ne, z[6], i, z, it))
        if ok:  # perturbed starts only run after a failure
            break
    if not results:
        raise NoConvergenceError("pre-capture shooting failed from every start")
    results.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    failed, ne, T, _, z, it = results[0]
    plan = PreCapturePlan(z[0:3].copy(), z[3:6].copy(), t0, t0 + float(T), cfg.a_max, chaser0,
                          not failed, ne, it)
    rho, _, _, s = pred.grasp(float(T))
    plan.cos_alpha = los_objective(rho, s.q, cfg.k, 1.0)[1]
    if failed:
        raise NoConvergenceError(f"pre-capture shooting did not converge (|e1| = {ne:.3e})", plan)
    if sample:
        plan.samples = sample_plan(plan, pred, cfg.k, cfg.sample_dt)
    return plan
