"""Scenario configuration: flat ``section.key = value`` text, SI units.

``#`` starts a comment. Vectors are written as comma- or space-separated
numbers, optionally in brackets; booleans as ``true``/``false``. Every key
has a default, so an empty file is the nominal scenario.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


@dataclass(frozen=True)
class TargetSection:
    inertia: tuple = (400.0, 500.0, 700.0)      # principal moments, kg m^2
    mass: float = 1600.0                         # kg
    offset: tuple = (-0.25, -0.1, 0.05)          # grasp offset in body frame, m
    mu_v: tuple = (0.0, 0.0, 0.0)                # fixture misalignment, vector part
    q0: tuple = (0.1, 0.2, -0.1, 1.0)            # body-to-camera attitude (normalized on use)
    w0: tuple = (0.05, 0.1, 0.08)                # body rate, rad/s
    r0: tuple = (2.0, 0.3, 0.1)                  # CoM position in camera frame, m
    v0: tuple = (-0.002, 0.001, 0.0)             # CoM velocity, m/s


@dataclass(frozen=True)
class ChaserSection:
    r0: tuple = (1.0, -0.6, 0.4)                 # end-effector start, camera frame, m
    v0: tuple = (0.0, 0.0, 0.0)


@dataclass(frozen=True)
class VisionSection:
    model: str = "box"                           # "box" or a path to an x y z point file
    box_size: tuple = (1.0, 0.8, 0.6)            # m
    spacing: float = 0.1                         # m
    noise_std: float = 0.005                     # per-coordinate scan noise, m
    outlier_rate: float = 0.0
    rate_hz: float = 2.0
    icp_iterations: int = 0                      # 0 uses the scan's known pairing
    calibration_samples: int = 200
    eps_factor: float = 5.0                      # eps* = factor x clean median eps


@dataclass(frozen=True)
class EstimatorSection:
    sigma_tau: float = 1e-4
    sigma_f: float = 1e-4
    eps_star: float = 0.0                        # 0 selects calibration
    r_diag: tuple = ()                           # empty selects calibration
    gate: bool = True
    joseph: bool = False
    cov_substeps: int = 1
    init_batch: float = 20.0                     # s of poses for the batch initializer
    known_parameters: bool = False               # start sigma, offset, mu at truth
    known_std: float = 1e-9
    convergence_threshold: float = 1e-4          # Frobenius norm of P
    passes: int = 1                              # estimate stage: filter passes over the log
    pass_std: float = 0.01                       # parameter prior std on passes after the first


@dataclass(frozen=True)
class OcclusionSection:
    mode: str = "auto"                           # auto | window | off
    cone_deg: float = 10.0
    range: float = 0.5                           # m, end-effector to grasp point
    window: tuple = (0.0, 0.0)                   # s, used by mode = window
    fraction: float = 0.4
    shift: float = 0.2                           # m, occluder displacement toward the hand


@dataclass(frozen=True)
class PreCaptureSection:
    a_max: float = 0.01
    w: float = 0.0
    k: tuple = (1.0, 0.0, 0.0)
    transversality: str = "classic"
    replan: bool = True
    min_horizon: float = 1.0                     # s; no re-planning closer to t1


@dataclass(frozen=True)
class PostCaptureSection:
    f_max: float = 7.0
    tau_max: float = 8.0
    mass_bound: float = 1700.0
    trace_bound: float = 1800.0
    a2_max: float = 0.0035                       # 0 derives f_max / mass_bound
    gamma_max: float = 0.0045                    # 0 derives tau_max / trace_bound
    tol: float = 1e-6


@dataclass(frozen=True)
class MissionSection:
    dt: float = 0.01
    margin: float = 5.0                          # s between convergence and approach
    capture_envelope: float = 0.04               # m
    velocity_envelope: float = 0.01              # m/s
    learning_timeout: float = 400.0              # s
    plan_retries: int = 2


@dataclass(frozen=True)
class InputsSection:
    scan_log: str = ""                           # CSV of timed scans, for the estimate stage
    snapshot: str = ""                           # JSON snapshot, for the planner stages


@dataclass(frozen=True)
class ScenarioConfig:
    target: TargetSection = field(default_factory=TargetSection)
    chaser: ChaserSection = field(default_factory=ChaserSection)
    vision: VisionSection = field(default_factory=VisionSection)
    estimator: EstimatorSection = field(default_factory=EstimatorSection)
    occlusion: OcclusionSection = field(default_factory=OcclusionSection)
    precapture: PreCaptureSection = field(default_factory=PreCaptureSection)
    postcapture: PostCaptureSection = field(default_factory=PostCaptureSection)
    mission: MissionSection = field(default_factory=MissionSection)
    inputs: InputsSection = field(default_factory=InputsSection)

    def validate(self):
        t, m, o = self.target, self.mission, self.occlusion
        _length(t, "inertia", 3), _length(t, "offset", 3), _length(t, "mu_v", 3)
        _length(t, "q0", 4), _length(t, "w0", 3), _length(t, "r0", 3), _length(t, "v0", 3)
        _length(self.chaser, "r0", 3), _length(self.chaser, "v0", 3)
        _length(self.precapture, "k", 3), _length(o, "window", 2)
        if self.estimator.r_diag and len(self.estimator.r_diag) != 6:
            raise ConfigError("estimator.r_diag needs 6 entries or none")
        if np.linalg.norm(t.q0) == 0:
            raise ConfigError("target.q0 must be non-zero")
        if m.capture_envelope <= 0 or m.velocity_envelope <= 0:
            raise ConfigError("capture envelopes must be positive")
        if m.margin < 0 or m.dt <= 0:
            raise ConfigError("mission.margin must be >= 0 and mission.dt > 0")
        if self.vision.rate_hz <= 0 or self.vision.noise_std < 0:
            raise ConfigError("vision.rate_hz must be positive and noise_std non-negative")
        if o.mode not in ("auto", "window", "off"):
            raise ConfigError("occlusion.mode must be auto, window or off")
        if not 0.0 <= o.fraction <= 1.0:
            raise ConfigError("occlusion.fraction must lie in [0, 1]")
        if self.precapture.transversality not in ("classic", "exact"):
            raise ConfigError("precapture.transversality must be classic or exact")
        if self.estimator.init_batch <= 0 or self.estimator.convergence_threshold <= 0:
            raise ConfigError("estimator.init_batch and convergence_threshold must be positive")
        if self.estimator.passes < 1 or self.estimator.pass_std <= 0:
            raise ConfigError("estimator.passes must be >= 1 and pass_std positive")
        p = self.postcapture
        if min(p.f_max, p.tau_max, p.mass_bound, p.trace_bound) <= 0 or p.a2_max < 0 or p.gamma_max < 0:
            raise ConfigError("post-capture limits must be positive")
        return self


def _length(section, key, n):
    if len(getattr(section, key)) != n:
        raise ConfigError(f"{key} needs {n} entries")


def _parse_value(text, default, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(text)
            return low == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            body = text.strip("[]() ")
            if not body:
                return ()
            return tuple(float(v) for v in body.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse {text!r}") from exc


def parse(text: str) -> ScenarioConfig:
    """Parse configuration text into a validated ``ScenarioConfig``."""
    sections = {f.name: {} for f in fields(ScenarioConfig)}
    defaults = ScenarioConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'section.key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.count(".") != 1:
            raise ConfigError(f"{where}: key {key!r} must be 'section.key'")
        sec, name = key.split(".")
        if sec not in sections:
            raise ConfigError(f"{where}: unknown section {sec!r}")
        default_sec = getattr(defaults, sec)
        if name not in {f.name for f in fields(default_sec)}:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in sections[sec]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        sections[sec][name] = _parse_value(value, getattr(default_sec, name), where)
    cfg = ScenarioConfig(**{s: replace(getattr(defaults, s), **kv) for s, kv in sections.items()})
    return cfg.validate()


def load(path) -> ScenarioConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse(text)


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(repr(float(x)) for x in v)
    return str(v)


def dump(cfg: ScenarioConfig) -> str:
    """Echo every key; ``parse(dump(cfg)) == cfg``."""
    lines = []
    for sec in fields(cfg):
        section = getattr(cfg, sec.name)
        for f in fields(section):
            lines.append(f"{sec.name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: ScenarioConfig) -> str:
    return hashlib.sha256(dump(cfg).encode("utf-8")).hexdigest()
