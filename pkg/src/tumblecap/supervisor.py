"""Closed-loop mission: learning, pre-capture approach, capture, detumbling.

One fixed-step loop advances the true target and the ideal chaser
end-effector. Vision runs at the configured rate: each epoch synthesizes a
scan of the true fixture, registers it and feeds the estimator. Once the
covariance norm drops below the threshold the approach starts after a
margin; the rendezvous plan is recomputed at every healthy epoch and frozen
while the registration is flagged faulty. Capture fires inside the position
and speed envelopes; the detumbling plan then runs open loop from a snapshot
of the captured motion.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from . import postcapture as post
from . import precapture as pre
from . import rng as rngmod
from . import so3, target, vision
from .config import ScenarioConfig


class MissionPhase(enum.IntEnum):
    LEARNING = 0
    PRECAPTURE = 1
    POSTCAPTURE = 2
    DONE = 3
    ABORTED = 4


@dataclass
class EventLog:
    """Event times (s) and capture errors (m, m/s); ``None`` when not reached."""

    T_c: float | None = None
    T_o: float | None = None
    T_oc: float | None = None
    T_1: float | None = None
    T_2: float | None = None
    capture_position_error: float | None = None
    capture_velocity_error: float | None = None
    closest_approach: float | None = None
    phase: str = MissionPhase.LEARNING.name
    reason: str = ""
    replans: int = 0
    replan_failures: int = 0
    faults: int = 0
    precapture_duration: float | None = None
    detumble_duration: float | None = None
    detumble_residual: float | None = None
    max_force_ratio: float | None = None
    max_torque_ratio: float | None = None

    def ordered(self):
        """``T_c ≤ T_o ≤ T_1 ≤ T_2`` over the events that occurred."""
        seq = [v for v in (self.T_c, self.T_o, self.T_1, self.T_2) if v is not None]
        return all(a <= b for a, b in zip(seq, seq[1:]))

    def to_dict(self):
        return asdict(self)


@dataclass
class Trace:
    header: list
    rows: list = field(default_factory=list)

    def add(self, *values):
        self.rows.append([float(v) for v in values])

    def array(self):
        return np.array(self.rows, dtype=float).reshape(-1, len(self.header))

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header)
            for row in self.rows:
                w.writerow([f"{v:.17g}" for v in row])


@dataclass
class MissionResult:
    events: EventLog
    traces: dict
    noise: est.NoiseConfig
    belief: est.Belief | None = None
    precapture_plan: pre.PreCapturePlan | None = None
    detumble_plan: post.DetumblePlan | None = None
    # (t, clamped indices, unconstrained sigma, posterior sigma) per projected update
    projections: list = field(default_factory=list)

    @property
    def success(self):
        return self.events.phase == MissionPhase.DONE.name


# --- scenario pieces ------------------------------------------------------------

def target_model(cfg: ScenarioConfig):
    v = cfg.vision
    if v.model == "box":
        return vision.box_model(v.box_size, v.spacing)
    return vision.load_model(v.model)


def truth(cfg: ScenarioConfig):
    """True inertia, parameters and initial state."""
    t = cfg.target
    inertia = target.PrincipalInertia(*t.inertia, m=t.mass)
    params = target.TargetParams(sigma=target.sigma_from_inertia(inertia),
                                 offset=np.array(t.offset, float), mu_v=np.array(t.mu_v, float))
    state = target.TargetState(q=so3.normalize(np.array(t.q0, float)), w=np.array(t.w0, float),
                               r=np.array(t.r0, float), v=np.array(t.v0, float))
    return inertia, params, state


def detumble_limits(cfg: ScenarioConfig):
    p = cfg.postcapture
    base = post.DetumbleLimits.from_mass_bounds(p.f_max, p.tau_max, p.mass_bound, p.trace_bound)
    return post.DetumbleLimits(a2_max=p.a2_max or base.a2_max, gamma_max=p.gamma_max or base.gamma_max,
                               kappa=base.kappa, f_max=p.f_max, tau_max=p.tau_max)


def calibrate_noise(model, noise_std, samples, rng, rho, outlier_rate=0.0):
    """Empirical pose covariance and median fit error of clean registrations.

    Returns ``(R, median ε)`` from ``samples`` scans at random attitudes placed
    at ``rho``. A floor keeps ``R`` positive definite for noiseless sensors.
    """
    errs, eps = [], []
    for _ in range(samples):
        eta = so3.random_quaternion(rng)
        scan = vision.synth_scan(rho, eta, model, noise_std=noise_std,
                                 outlier_rate=outlier_rate, rng=rng)
        pose, fit = vision.register_scan(scan, model)
        e = pose.eta if float(pose.eta @ eta) >= 0 else -pose.eta
        errs.append(np.concatenate([pose.rho - rho, e[:3] - eta[:3]]))
        eps.append(fit.eps)
    R = np.cov(np.array(errs).T) if samples > 1 else np.zeros((6, 6))
    R = 0.5 * (R + R.T) + 1e-12 * np.eye(6)
    return R, float(np.median(eps))


def noise_config(cfg: ScenarioConfig, model, seed):
    e, v = cfg.estimator, cfg.vision
    R = np.diag(np.asarray(e.r_diag, float)) if e.r_diag else None
    eps_star = e.eps_star
    if R is None or eps_star <= 0:
        rng = rngmod.generator(seed, "calibration")
        R_cal, eps_med = calibrate_noise(model, v.noise_std, v.calibration_samples, rng,
                                         np.array(cfg.target.r0, float), v.outlier_rate)
        R = R_cal if R is None else R
        if eps_star <= 0:
            eps_star = max(v.eps_factor * eps_med, 1e-12)
    return est.NoiseConfig(sigma_tau=e.sigma_tau, sigma_f=e.sigma_f, R=R, eps_star=eps_star,
                           gate=e.gate, joseph=e.joseph, cov_substeps=e.cov_substeps)


def occlusion_trigger(chaser_r, grasp, occ, t=0.0):
    """Whether the chaser hand obstructs the camera's view of the grasp point.

    ``auto`` fires when the hand is inside the camera-to-target cone of
    half-angle ``occ.cone_deg`` (and not behind the target) or closer to the
    grasp point than ``occ.range``; ``window`` fires on ``[window₀, window₁)``.
    The camera sits at the origin.
    """
    if occ.mode == "off":
        return False
    if occ.mode == "window":
        return occ.window[0] <= t < occ.window[1]
    r = np.asarray(chaser_r, float)
    g = np.asarray(grasp, float)
    if np.linalg.norm(r - g) < occ.range:
        return True
    nr, ng = np.linalg.norm(r), np.linalg.norm(g)
    if nr == 0 or ng == 0:
        return False
    cos_a = float(r @ g) / (nr * ng)
    return cos_a >= np.cos(np.radians(occ.cone_deg)) and float(r @ g) / ng <= ng


def _measurement(cfg, model, x, params, chaser_r, occluded, rng):
    s = target.TargetState.from_array(x)
    rho = s.r + so3.rotation_matrix(s.q) @ params.offset
    eta = so3.quat_product(params.mu, s.q)
    v = cfg.vision
    kwargs = {}
    if occluded:
        toward = np.asarray(chaser_r, float) - rho
        n = np.linalg.norm(toward)
        kwargs = dict(occlusion_fraction=cfg.occlusion.fraction,
                      occluder_shift=cfg.occlusion.shift * (toward / n if n > 0 else np.zeros(3)))
    scan = vision.synth_scan(rho, eta, model, noise_std=v.noise_std, outlier_rate=v.outlier_rate,
                             rng=rng, **kwargs)
    pose, fit = vision.register_scan(scan, model)
    if v.icp_iterations > 0:
        pose, fit = vision.icp_refine(scan.points, model, pose, v.icp_iterations)
    return pose, fit


def _initial_belief(cfg, params, meas, times):
    e = cfg.estimator
    P0 = est.initial_covariance()
    kwargs = {}
    if e.known_parameters:
        kwargs = dict(sigma0=params.sigma, offset0=params.offset, mu0=params.mu, fit_offset=False)
        for blk in (est.IS, est.IO, est.IM):
            P0[blk, :] = 0.0
            P0[:, blk] = 0.0
            idx = np.arange(est.N)[blk]
            P0[idx, idx] = e.known_std ** 2
    b = est.initial_belief(meas, times, P0=P0, **kwargs)
    return b


def _plan_config(cfg):
    p = cfg.precapture
    return pre.PlannerConfig(a_max=p.a_max, w=p.w, k=tuple(p.k), transversality=p.transversality)


# --- the mission loop --------------------------------------------------------------

TRUTH_HEADER = ["t", "q_x", "q_y", "q_z", "q_o", "w_x", "w_y", "w_z", "r_x", "r_y", "r_z",
                "v_x", "v_y", "v_z", "phase"]
ESTIMATOR_HEADER = (["t", "q_x", "q_y", "q_z", "q_o", "w_x", "w_y", "w_z", "r_x", "r_y", "r_z",
                     "v_x", "v_y", "v_z", "sigma_1", "sigma_2", "off_x", "off_y", "off_z",
                     "mu_x", "mu_y", "mu_z", "mu_o"]
                    + [f"P_{i}" for i in range(est.N)] + ["eps", "fault", "P_norm"])
VISION_HEADER = ["t", "rho_x", "rho_y", "rho_z", "eta_x", "eta_y", "eta_z", "eta_o", "eps",
                 "occluded", "fault"]
CHASER_HEADER = ["t", "r_x", "r_y", "r_z", "rd_x", "rd_y", "rd_z", "u_x", "u_y", "u_z",
                 "rho_x", "rho_y", "rho_z", "rhod_x", "rhod_y", "rhod_z", "distance", "speed"]
REPLAN_HEADER = ["t", "t1", "residual", "iterations", "cos_alpha", "converged"]
POST_HEADER = ["t", "ee_vx", "ee_vy", "ee_vz", "u2_x", "u2_y", "u2_z", "f_true", "tau_true"]


def run_mission(cfg: ScenarioConfig, seed: int, out_dir=None, record_truth=True) -> MissionResult:
    """Run one deterministic mission; write traces to ``out_dir`` when given."""
    cfg.validate()
    seed = rngmod.check_seed(seed)
    model = target_model(cfg)
    inertia, params, state = truth(cfg)
    noise = noise_config(cfg, model, seed)
    noise.validate()
    m = cfg.mission
    dt = m.dt
    every = max(1, int(round(1.0 / (cfg.vision.rate_hz * dt))))
    pcfg = _plan_config(cfg)

    traces = {"truth": Trace(TRUTH_HEADER), "estimator": Trace(ESTIMATOR_HEADER),
              "vision": Trace(VISION_HEADER), "chaser": Trace(CHASER_HEADER),
              "replans": Trace(REPLAN_HEADER), "postcapture": Trace(POST_HEADER)}
    ev = EventLog()
    phase = MissionPhase.LEARNING
    x = state.as_array()
    chaser_r = np.array(cfg.chaser.r0, float)
    chaser_rd = np.array(cfg.chaser.v0, float)
    belief = None
    batch, batch_t = [], []
    plan = None
    plan_tries = 0
    d_prev = np.inf
    closest = np.inf
    result = MissionResult(ev, traces, noise)

    def abort(reason):
        ev.phase = MissionPhase.ABORTED.name
        ev.reason = reason

    k = 0
    while phase in (MissionPhase.LEARNING, MissionPhase.PRECAPTURE):
        t = k * dt
        s = target.TargetState.from_array(x)
        rho_t, rhod_t, _ = target.grasp_point_kinematics(s, params.sigma, params.offset)
        if record_truth:
            traces["truth"].add(t, *x, int(phase))

        if phase == MissionPhase.PRECAPTURE and plan is not None:
            # hand state at t, so a re-plan starts where the hand actually is
            chaser_r, chaser_rd = plan.state_at(t)

        if phase == MissionPhase.LEARNING and t > m.learning_timeout:
            abort("estimator did not converge before the learning timeout")
            break

        if k % every == 0:
            epoch = k // every
            occluded = occlusion_trigger(chaser_r, rho_t, cfg.occlusion, t)
            pose, fit = _measurement(cfg, model, x, params, chaser_r, occluded,
                                     rngmod.generator(seed, "vision", epoch))
            fault = est.is_faulty(fit.eps, noise)
            if occluded and ev.T_oc is None:
                ev.T_oc = t
            if fault:
                ev.faults += 1
            traces["vision"].add(t, *pose.rho, *pose.eta, fit.eps, int(occluded), int(fault))
            if belief is None:
                batch.append(pose)
                batch_t.append(t)
                if t >= cfg.estimator.init_batch:
                    belief = _initial_belief(cfg, params, batch, batch_t)
            else:
                belief = est.propagate(belief, t - belief.t, noise) if t > belief.t else belief
                belief, info = est.update(belief, pose, fit, noise)
                if info.projected:
                    result.projections.append((t, info.projected, info.unconstrained_sigma,
                                               belief.sigma.copy()))
            if belief is not None:
                traces["estimator"].add(t, *belief.mean_vector(), *np.diag(belief.P), fit.eps,
                                        int(fault), est.convergence_metric(belief))
                if (phase == MissionPhase.LEARNING and ev.T_c is None
                        and est.convergence_metric(belief) < cfg.estimator.convergence_threshold):
                    ev.T_c = t
                    ev.T_o = t + m.margin

            # approach start and re-planning
            want_plan = False
            if phase == MissionPhase.LEARNING and ev.T_o is not None and t >= ev.T_o - 1e-9:
                phase = MissionPhase.PRECAPTURE
                want_plan = True
            elif phase == MissionPhase.PRECAPTURE and not fault:
                if plan is None:
                    want_plan = True
                elif cfg.precapture.replan and plan.t1 - t > cfg.precapture.min_horizon:
                    want_plan = True
            if want_plan:
                pred = pre.GraspPrediction.from_belief(belief, dt)
                z0 = None
                if plan is not None:
                    lag = t - plan.t0
                    z0 = np.concatenate([plan.a1, plan.a2 - plan.a1 * lag, [plan.t1 - t]])
                try:
                    new = pre.solve(pre.ChaserState(chaser_r, chaser_rd), pred, pcfg, t0=t, z0=z0,
                                    sample=False)
                    plan = new
                    ev.replans += 1
                    traces["replans"].add(t, new.t1, new.residual, new.iterations, new.cos_alpha, 1)
                except (pre.NoConvergenceError, ArithmeticError, ValueError) as exc:
                    ev.replan_failures += 1
                    best = getattr(exc, "best", None)
                    traces["replans"].add(t, getattr(best, "t1", np.nan), getattr(best, "residual", np.nan),
                                          getattr(best, "iterations", 0), np.nan, 0)
                    if plan is None:
                        plan_tries += 1
                        if plan_tries > m.plan_retries:
                            abort(f"pre-capture planner failed: {exc}")
                            break

        if phase == MissionPhase.PRECAPTURE and plan is not None:
            chaser_r, chaser_rd = plan.state_at(t)
            u = plan.accel_at(t)
            dist = float(np.linalg.norm(chaser_r - rho_t))
            speed = float(np.linalg.norm(chaser_rd - rhod_t))
            closest = min(closest, dist)
            traces["chaser"].add(t, *chaser_r, *chaser_rd, *u, *rho_t, *rhod_t, dist, speed)
            inside = dist <= m.capture_envelope and speed <= m.velocity_envelope
            to_go = plan.t1 - t
            if inside and (dist >= d_prev or to_go <= 0.5 * dt):
                ev.T_1 = t
                ev.capture_position_error = dist
                ev.capture_velocity_error = speed
                ev.closest_approach = closest
                ev.precapture_duration = t - ev.T_o
                phase = MissionPhase.POSTCAPTURE
                break
            if to_go <= 0.5 * dt:
                ev.closest_approach = closest
                abort(f"capture missed: closest approach {closest:.4f} m")
                break
            d_prev = dist

        x = target.step_array(x, params.sigma, dt)
        k += 1

    result.belief = belief
    result.precapture_plan = plan
    if phase == MissionPhase.POSTCAPTURE:
        _postcapture(cfg, result, x, rhod_t, inertia, params, belief, ev)
    if ev.phase != MissionPhase.ABORTED.name and phase == MissionPhase.POSTCAPTURE:
        ev.phase = MissionPhase.DONE.name if ev.T_2 is not None else MissionPhase.ABORTED.name
    if out_dir is not None:
        write_outputs(out_dir, cfg, result)
    return result


def _postcapture(cfg, result, x, rhod_true, inertia, params, belief, ev):
    """Snapshot the captured motion, plan the detumbling and play it open loop."""
    s = target.TargetState.from_array(x)
    A = so3.rotation_matrix(s.q)
    offset_hat = belief.offset.copy()
    ups = A.T @ rhod_true - np.cross(s.w, offset_hat)
    s1 = post.CoupledState(upsilon=ups, w=s.w.copy(), q=s.q.copy())
    dparams = post.DetumbleParams(detumble_limits(cfg), belief.sigma.copy(), offset_hat)
    try:
        dplan = post.solve(s1, dparams, t1=ev.T_1, dt=cfg.mission.dt, tol=cfg.postcapture.tol)
    except (post.NoConvergenceError, ArithmeticError, ValueError) as exc:
        ev.phase = MissionPhase.ABORTED.name
        ev.reason = f"detumble planner failed: {exc}"
        return
    result.detumble_plan = dplan
    ev.T_2 = dplan.t2
    ev.detumble_duration = dplan.duration
    ev.detumble_residual = dplan.residual
    # ideal tracking: the stack follows the plan; report the wrench the true body needs
    smp = dplan.samples
    lim = dparams.limits
    f_ratio, t_ratio = 0.0, 0.0
    b_true = target.b_diag(params.sigma)
    tr = inertia.trace
    for i in range(len(smp["t"])):
        ups_i, w_i = smp["upsilon"][i], smp["w"][i]
        xd = post.state_rate(np.concatenate([ups_i, w_i]), smp["f_e"][i], smp["tau_e"][i], dparams)
        f_true = inertia.m * (xd[:3] + np.cross(w_i, ups_i))
        tau_true = tr * (xd[3:] - target.phi(w_i, params.sigma)) / b_true + np.cross(params.offset, f_true)
        f_ratio = max(f_ratio, np.linalg.norm(f_true) / lim.f_max)
        t_ratio = max(t_ratio, np.linalg.norm(tau_true) / lim.tau_max)
        ee_v = so3.rotation_matrix(smp["q"][i]) @ (ups_i + np.cross(w_i, offset_hat))
        result.traces["postcapture"].add(smp["t"][i], *ee_v, *smp["u2"][i],
                                         np.linalg.norm(f_true), np.linalg.norm(tau_true))
    ev.max_force_ratio = float(f_ratio)
    ev.max_torque_ratio = float(t_ratio)


# --- outputs ----------------------------------------------------------------------

def write_outputs(out_dir, cfg, result: MissionResult):
    from .config import dump

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, tr in result.traces.items():
        tr.write(out / f"{name}.csv")
    if result.detumble_plan is not None:
        post.write_plan_csv(out / "detumble_plan.csv", result.detumble_plan)
    payload = {"events": result.events.to_dict(), "config": dump(cfg),
               "noise": {"R": np.asarray(result.noise.R).tolist(), "eps_star": result.noise.eps_star},
               "residuals": {
                   "precapture": None if result.precapture_plan is None else result.precapture_plan.residual,
                   "detumble": None if result.detumble_plan is None else result.detumble_plan.residual}}
    with open(out / "events.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def summary_line(ev: EventLog):
    def f(v, fmt="{:.2f}"):
        return "-" if v is None else fmt.format(v)

    return (f"phase={ev.phase} T_c={f(ev.T_c)} T_o={f(ev.T_o)} T_oc={f(ev.T_oc)} T_1={f(ev.T_1)} "
            f"T_2={f(ev.T_2)} capture_err={f(ev.capture_position_error, '{:.4f}')} m"
            + (f" reason={ev.reason}" if ev.reason else ""))
