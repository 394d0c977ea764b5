import json

import numpy as np
import pytest

from tumblecap import cli, config, rng, so3, target, vision
from tumblecap import supervisor as sv


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# --- config -------------------------------------------------------------------

def test_empty_config_is_nominal():
    cfg = config.parse("# nothing\n\n")
    assert cfg == config.ScenarioConfig()
    assert cfg.target.inertia == (400.0, 500.0, 700.0)
    assert cfg.mission.margin == 5.0 and cfg.mission.capture_envelope == 0.04


def test_parse_values_and_round_trip():
    cfg = config.parse("""
    target.w0 = [0.1, -0.2, 0.3]   # rad/s
    estimator.gate = false
    estimator.cov_substeps = 4
    precapture.transversality = exact
    vision.model = box
    estimator.r_diag = 1e-6 1e-6 1e-6 1e-8 1e-8 1e-8
    """)
    assert cfg.target.w0 == (0.1, -0.2, 0.3)
    assert cfg.estimator.gate is False and cfg.estimator.cov_substeps == 4
    assert config.parse(config.dump(cfg)) == cfg
    assert config.config_hash(cfg) != config.config_hash(config.ScenarioConfig())


@pytest.mark.parametrize("text", [
    "target.bogus = 1",
    "nosection.key = 1",
    "target.mass = heavy",
    "target.mass = 1\ntarget.mass = 2",
    "justtext",
    "estimator.gate = maybe",
    "target.w0 = 1, 2",
    "mission.capture_envelope = 0",
    "occlusion.mode = sometimes",
    "estimator.r_diag = 1 2 3",
    "estimator.passes = 0",
])
def test_malformed_config_rejected(text):
    with pytest.raises(config.ConfigError):
        config.parse(text)


def test_load_missing_file(tmp_path):
    with pytest.raises(config.ConfigError):
        config.load(tmp_path / "absent.cfg")


# --- random streams ---------------------------------------------------------------

def test_streams_are_reproducible_and_independent():
    a = rng.generator(42, "vision", 3).standard_normal(4)
    b = rng.generator(42, "vision", 3).standard_normal(4)
    c = rng.generator(42, "vision", 4).standard_normal(4)
    d = rng.generator(42, "calibration").standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c) and not np.array_equal(a, d)
    assert rng.stream_id("vision") == rng.stream_id("vision")


def test_seed_range():
    rng.check_seed(rng.U64_MAX)
    with pytest.raises(ValueError):
        rng.check_seed(-1)
    with pytest.raises(ValueError):
        rng.check_seed(rng.U64_MAX + 1)


# --- command line -------------------------------------------------------------------

def test_run_writes_manifest_events_and_traces(tmp_path):
    cfg = write(tmp_path, "nominal.cfg", "")
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg), "--seed", "42", "--out", str(out)]) == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 42 and manifest["subcommand"] == "run"
    assert manifest["config_hash"] == config.config_hash(config.load(cfg))
    events = json.loads((out / "events.json").read_text())
    assert events["events"]["phase"] == "DONE"
    for name in ("truth", "estimator", "vision", "chaser", "replans", "postcapture", "detumble_plan"):
        assert (out / f"{name}.csv").exists()


def test_malformed_config_leaves_only_manifest(tmp_path):
    cfg = write(tmp_path, "bad.cfg", "target.mass = -\n")
    out = tmp_path / "bad"
    assert cli.main(["run", "--config", str(cfg), "--seed", "1", "--out", str(out)]) == cli.EXIT_INPUT
    assert sorted(p.name for p in out.iterdir()) == ["manifest.json"]
    assert "error" in json.loads((out / "manifest.json").read_text())


def test_aborted_run_exit_code(tmp_path):
    cfg = write(tmp_path, "timeout.cfg", "estimator.convergence_threshold = 1e-30\nmission.learning_timeout = 25\n")
    assert cli.main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == cli.EXIT_ABORT


def test_bad_seed_and_jobs(tmp_path, capsys):
    cfg = write(tmp_path, "c.cfg", "")
    with pytest.raises(SystemExit):
        cli.main(["run", "--config", str(cfg), "--seed", "-3", "--out", str(tmp_path / "o")])
    assert cli.main(["run", "--config", str(cfg), "--jobs", "0", "--out", str(tmp_path / "o")]) == cli.EXIT_INPUT


def test_plan_post_pure_translation(tmp_path):
    write(tmp_path, "snap.json", json.dumps({"upsilon": [0.07, 0, 0], "w": [0, 0, 0], "offset": [0, 0, 0],
                                             "sigma": [-0.5, 0.6]}))
    cfg = write(tmp_path, "post.cfg", "inputs.snapshot = snap.json\n")
    out = tmp_path / "post"
    assert cli.main(["plan-post", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["duration"] == pytest.approx(20.0, abs=0.02)
    assert (out / "detumble_plan.csv").exists()


def test_plan_pre_stationary_target(tmp_path):
    write(tmp_path, "snap.json", json.dumps({"r": [0.5, 0, 0], "chaser_r": [0, 0, 0]}))
    cfg = write(tmp_path, "pre.cfg", "inputs.snapshot = snap.json\n")
    out = tmp_path / "pre"
    assert cli.main(["plan-pre", "--config", str(cfg), "--out", str(out)]) == cli.EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert abs(s["duration"] - 14.142) / 14.142 < 1e-3
    data = np.genfromtxt(out / "precapture_plan.csv", delimiter=",", names=True)
    assert data["t"][-1] == pytest.approx(s["t1"])


def test_stage_inputs_missing(tmp_path):
    cfg = write(tmp_path, "c.cfg", "")
    for cmd in ("estimate", "plan-pre", "plan-post"):
        assert cli.main([cmd, "--config", str(cfg), "--out", str(tmp_path / cmd)]) == cli.EXIT_INPUT
    cfg = write(tmp_path, "d.cfg", "inputs.snapshot = nothere.json\n")
    assert cli.main(["plan-post", "--config", str(cfg), "--out", str(tmp_path / "x")]) == cli.EXIT_INPUT
    write(tmp_path, "partial.json", json.dumps({"w": [0, 0, 0]}))
    cfg = write(tmp_path, "e.cfg", "inputs.snapshot = partial.json\n")
    assert cli.main(["plan-post", "--config", str(cfg), "--out", str(tmp_path / "y")]) == cli.EXIT_INPUT


def noiseless_log(path, cfg, duration):
    model = sv.target_model(cfg)
    _, params, state = sv.truth(cfg)
    x = state.as_array()
    entries = []
    for k in range(int(duration * 2) + 1):
        s = target.TargetState.from_array(x)
        rho = s.r + so3.rotation_matrix(s.q) @ params.offset
        eta = so3.quat_product(params.mu, s.q)
        entries.append((0.5 * k, vision.synth_scan(rho, eta, model, rng=rng.generator(0, "log", k))))
        x = target.propagate_array(x, params.sigma, 0.5)
    vision.write_scan_log(path, entries)


def test_estimate_on_noiseless_log(tmp_path):
    text = ("vision.noise_std = 0\ninputs.scan_log = scans.csv\nestimator.sigma_tau = 1e-9\n"
            "estimator.sigma_f = 1e-9\nestimator.cov_substeps = 50\nestimator.passes = 3\n")
    cfg_path = write(tmp_path, "est.cfg", text)
    noiseless_log(tmp_path / "scans.csv", config.parse(text), 100.0)
    out = tmp_path / "est"
    assert cli.main(["estimate", "--config", str(cfg_path), "--out", str(out)]) == cli.EXIT_OK
    s = json.loads((out / "summary.json").read_text())
    assert s["sigma_error"] < 1e-6 and s["offset_error"] < 1e-6
    assert (out / "estimator.csv").exists()


def test_same_seed_gives_identical_files(tmp_path):
    cfg = write(tmp_path, "c.cfg", "")
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        cli.main(["run", "--config", str(cfg), "--seed", "7", "--out", str(o)])
    for f in sorted(outs[0].glob("*.csv")) + [outs[0] / "events.json"]:
        assert f.read_bytes() == (outs[1] / f.name).read_bytes(), f.name


def test_batch_runs_in_parallel(tmp_path):
    cfg = write(tmp_path, "c.cfg", "")
    out = tmp_path / "batch"
    code = cli.main(["run", "--config", str(cfg), "--seed", "1", "--missions", "2", "--jobs", "2",
                     "--out", str(out)])
    assert code == cli.EXIT_OK
    batch = json.loads((out / "batch.json").read_text())
    assert sorted(batch) == ["1", "2"]
    single = sv.run_mission(config.load(cfg), 1).events.to_dict()
    assert batch["1"] == json.loads(json.dumps(single))
