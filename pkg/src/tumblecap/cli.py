"""Command-line entry point.

    tumblecap run|estimate|plan-pre|plan-post --config PATH --seed U64 --out DIR [--jobs N]

Exit codes: 0 success, 1 configuration or input error, 2 mission aborted
(``run``) or planner failure (planner stages).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import estimator as est
from . import postcapture as post
from . import precapture as pre
from . import rng as rngmod
from . import so3, supervisor, target, vision

EXIT_OK, EXIT_INPUT, EXIT_ABORT = 0, 1, 2


class InputError(RuntimeError):
    """Missing or malformed stage input."""


def _write_json(path, payload):
    """Write JSON through a temporary file so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
    with os.fdopen(fd, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    os.replace(tmp, path)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(f"not serializable: {type(v)!r}")


def _prepare_out(out):
    out = Path(out)
    if out.exists() and not out.is_dir():
        raise InputError(f"{out} exists and is not a directory")
    if not out.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=".tmp-out-"))
        os.replace(tmp, out)
    return out


def write_manifest(out, args, cfg=None, error=None):
    payload = {"config": str(args.config), "seed": args.seed, "out": str(args.out),
               "subcommand": args.command, "version": __version__,
               "config_hash": None if cfg is None else cfgmod.config_hash(cfg)}
    if error is not None:
        payload["error"] = error
    _write_json(Path(out) / "manifest.json", payload)


def _resolve(path, cfg_path):
    p = Path(path)
    return p if p.is_absolute() else Path(cfg_path).parent / p


def _load_snapshot(cfg, cfg_path):
    if not cfg.inputs.snapshot:
        raise InputError("inputs.snapshot is required for this stage")
    path = _resolve(cfg.inputs.snapshot, cfg_path)
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read snapshot {path}: {exc}") from exc


def _vec(snap, key, n, default=None):
    if key not in snap:
        if default is None:
            raise InputError(f"snapshot lacks {key!r}")
        return np.array(default, float)
    v = np.asarray(snap[key], float)
    if v.shape != (n,) or not np.all(np.isfinite(v)):
        raise InputError(f"snapshot {key!r} must be {n} finite numbers")
    return v


# --- stages -------------------------------------------------------------------

def _run_one(cfg, seed, out):
    res = supervisor.run_mission(cfg, seed, out_dir=out)
    return res.events


def cmd_run(cfg, args, out):
    if args.missions <= 1:
        ev = _run_one(cfg, args.seed, out)
        print(supervisor.summary_line(ev))
        return EXIT_OK if ev.phase == supervisor.MissionPhase.DONE.name else EXIT_ABORT
    seeds = [(args.seed + i) % (rngmod.U64_MAX + 1) for i in range(args.missions)]
    outs = [out / f"seed_{s}" for s in seeds]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            events = list(pool.map(_run_one, [cfg] * len(seeds), seeds, outs))
    else:
        events = [_run_one(cfg, s, o) for s, o in zip(seeds, outs)]
    for s, ev in zip(seeds, events):
        print(f"seed={s} " + supervisor.summary_line(ev))
    _write_json(out / "batch.json", {str(s): ev.to_dict() for s, ev in zip(seeds, events)})
    ok = all(ev.phase == supervisor.MissionPhase.DONE.name for ev in events)
    return EXIT_OK if ok else EXIT_ABORT


def _filter_pass(cfg, params, noise, epochs, prior=None):
    """One filter pass over registered ``(t, pose, fit)`` epochs.

    Later passes start from the previous pass's parameter estimates with a
    prior std of ``estimator.pass_std``; the motion is re-initialized from the
    log each time.
    """
    trace = supervisor.Trace(supervisor.ESTIMATOR_HEADER)
    belief, batch, batch_t = None, [], []
    faults = 0
    for t, pose, fit in epochs:
        fault = est.is_faulty(fit.eps, noise)
        faults += int(fault)
        if belief is None:
            if fault:
                continue
            batch.append(pose)
            batch_t.append(t)
            if t - batch_t[0] >= cfg.estimator.init_batch:
                if prior is None:
                    belief = supervisor._initial_belief(cfg, params, batch, batch_t)
                else:
                    s = cfg.estimator.pass_std
                    P0 = est.initial_covariance({"sigma": s, "offset": s, "mu": s})
                    belief = est.initial_belief(batch, batch_t, P0=P0, sigma0=prior.sigma,
                                                offset0=prior.offset, mu0=prior.mu)
        else:
            belief = est.propagate(belief, t - belief.t, noise)
            belief, _ = est.update(belief, pose, fit, noise)
        if belief is not None:
            trace.add(t, *belief.mean_vector(), *np.diag(belief.P), fit.eps, int(fault),
                      est.convergence_metric(belief))
    return belief, trace, faults


def cmd_estimate(cfg, args, out):
    """Run the estimator over a recorded scan log."""
    if not cfg.inputs.scan_log:
        raise InputError("inputs.scan_log is required for the estimate stage")
    path = _resolve(cfg.inputs.scan_log, args.config)
    try:
        scans = vision.read_scan_log(path)
    except (OSError, KeyError, ValueError) as exc:
        raise InputError(f"cannot read scan log {path}: {exc}") from exc
    if len(scans) < 2:
        raise InputError("scan log needs at least two epochs")
    model = supervisor.target_model(cfg)
    _, params, _ = supervisor.truth(cfg)
    noise = supervisor.noise_config(cfg, model, args.seed)
    epochs = []
    for t, scan in scans:
        try:
            pose, fit = vision.register_scan(scan, model)
        except (vision.RegistrationError, IndexError) as exc:
            raise InputError(f"scan at t={t} does not match the model: {exc}") from exc
        epochs.append((t, pose, fit))
    belief = None
    for _ in range(cfg.estimator.passes):
        belief, trace, faults = _filter_pass(cfg, params, noise, epochs, belief)
        if belief is None:
            raise InputError("scan log is shorter than estimator.init_batch")
    trace.write(out / "estimator.csv")
    summary = {"epochs": len(scans), "faults": faults, "passes": cfg.estimator.passes, "t": belief.t,
               "sigma": belief.sigma, "offset": belief.offset, "mu": belief.mu,
               "w": belief.w, "r": belief.r, "v": belief.v, "q": belief.q,
               "P_norm": est.convergence_metric(belief),
               "sigma_error": float(np.max(np.abs(belief.sigma - params.sigma))),
               "offset_error": float(np.linalg.norm(belief.offset - params.offset))}
    _write_json(out / "summary.json", summary)
    print(f"estimate: epochs={len(scans)} sigma={belief.sigma} sigma_error={summary['sigma_error']:.3e}")
    return EXIT_OK


def cmd_plan_pre(cfg, args, out):
    """Plan the rendezvous from a snapshot of the belief mean and the chaser state."""
    snap = _load_snapshot(cfg, args.config)
    state = target.TargetState(q=so3.normalize(_vec(snap, "q", 4, so3.IDENTITY)),
                               w=_vec(snap, "w", 3, (0, 0, 0)), r=_vec(snap, "r", 3),
                               v=_vec(snap, "v", 3, (0, 0, 0)))
    pred = pre.GraspPrediction(state, _vec(snap, "sigma", 2, (0, 0)), _vec(snap, "offset", 3, (0, 0, 0)))
    chaser = pre.ChaserState(_vec(snap, "chaser_r", 3), _vec(snap, "chaser_rd", 3, (0, 0, 0)))
    t0 = float(snap.get("t0", 0.0))
    pcfg = supervisor._plan_config(cfg)
    try:
        plan = pre.solve(chaser, pred, pcfg, t0=t0)
    except pre.NoConvergenceError as exc:
        _write_json(out / "summary.json", {"converged": False, "error": str(exc)})
        print(f"plan-pre: {exc}", file=sys.stderr)
        return EXIT_ABORT
    s = plan.samples
    tr = supervisor.Trace(["t", "r_x", "r_y", "r_z", "rd_x", "rd_y", "rd_z", "u_x", "u_y", "u_z",
                           "rho_x", "rho_y", "rho_z", "cos_alpha"])
    for i in range(len(s["t"])):
        tr.add(s["t"][i], *s["r"][i], *s["rd"][i], *s["u"][i], *s["rho"][i], s["cos_alpha"][i])
    tr.write(out / "precapture_plan.csv")
    summary = {"converged": plan.converged, "t0": plan.t0, "t1": plan.t1, "duration": plan.duration,
               "residual": plan.residual, "iterations": plan.iterations, "a1": plan.a1,
               "a2": plan.a2, "cos_alpha": plan.cos_alpha}
    _write_json(out / "summary.json", summary)
    print(f"plan-pre: t1 - t0 = {plan.duration:.6f} s residual={plan.residual:.2e}")
    return EXIT_OK


def cmd_plan_post(cfg, args, out):
    """Plan the detumbling from a capture snapshot."""
    snap = _load_snapshot(cfg, args.config)
    s1 = post.CoupledState(upsilon=_vec(snap, "upsilon", 3), w=_vec(snap, "w", 3),
                           q=so3.normalize(_vec(snap, "q", 4, so3.IDENTITY)))
    params = post.DetumbleParams(supervisor.detumble_limits(cfg), _vec(snap, "sigma", 2, (0, 0)),
                                 _vec(snap, "offset", 3, (0, 0, 0)))
    t1 = float(snap.get("t1", 0.0))
    try:
        plan = post.solve(s1, params, t1=t1, dt=cfg.mission.dt, tol=cfg.postcapture.tol)
    except post.NoConvergenceError as exc:
        _write_json(out / "summary.json", {"converged": False, "error": str(exc)})
        print(f"plan-post: {exc}", file=sys.stderr)
        return EXIT_ABORT
    post.write_plan_csv(out / "detumble_plan.csv", plan)
    summary = {"converged": plan.converged, "t1": plan.t1, "t2": plan.t2, "duration": plan.duration,
               "residual": plan.residual, "function_evaluations": plan.nfev, "mode": plan.mode,
               "costate": plan.lam1}
    _write_json(out / "summary.json", summary)
    print(f"plan-post: t2 - t1 = {plan.duration:.6f} s residual={plan.residual:.2e}")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "estimate": cmd_estimate, "plan-pre": cmd_plan_pre,
            "plan-post": cmd_plan_post}


def _seed(text):
    try:
        return rngmod.check_seed(int(text, 0))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser():
    p = argparse.ArgumentParser(prog="tumblecap", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="scenario file (section.key = value)")
    p.add_argument("--seed", type=_seed, default=0, help="unsigned 64-bit seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--jobs", type=int, default=1, help="parallel missions for batch runs")
    p.add_argument("--missions", type=int, default=1,
                   help="run this many missions with consecutive seeds (run only)")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if args.jobs < 1 or args.missions < 1:
        print("error: --jobs and --missions must be at least 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        out = _prepare_out(args.out)
    except (OSError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = cfgmod.load(args.config)
    except cfgmod.ConfigError as exc:
        write_manifest(out, args, error=str(exc))
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    write_manifest(out, args, cfg)
    try:
        return COMMANDS[args.command](cfg, args, out)
    except (InputError, OSError, cfgmod.ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
