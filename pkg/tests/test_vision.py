import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tumblecap import so3, vision

MODEL = vision.box_model()
FOUR = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]])


def rot_err(a, b):
    return so3.rotation_angle(a, b)


def test_identity_pose():
    pose, fit = vision.qmethod_register(MODEL, MODEL)
    assert np.allclose(pose.eta, so3.IDENTITY, atol=1e-15)
    assert np.allclose(pose.rho, 0.0, atol=1e-14)
    assert fit.eps < 1e-28


def test_four_point_forward_transform():
    eta = np.array([0.0, 0.0, np.sqrt(0.5), np.sqrt(0.5)])
    rho = np.array([1.0, 0.0, 0.0])
    scan = FOUR @ so3.rotation_matrix(eta).T + rho
    pose, fit = vision.qmethod_register(FOUR, scan)
    assert np.allclose(pose.eta, eta, atol=1e-14)
    assert np.allclose(pose.rho, rho, atol=1e-14)
    assert fit.eps < 1e-20


def test_noiseless_recovery_100_poses(rng):
    for _ in range(100):
        eta = so3.random_quaternion(rng)
        rho = rng.uniform(-3, 3, 3)
        pose, fit = vision.register_scan(vision.synth_scan(rho, eta, MODEL, rng=rng), MODEL)
        assert rot_err(pose.eta, eta) < 1e-10
        assert np.linalg.norm(pose.rho - rho) < 1e-12
        assert fit.eps < 1e-20


def test_solution_is_local_minimum(rng):
    eta = so3.random_quaternion(rng)
    rho = np.array([2.0, 0.3, 0.1])
    scan = vision.synth_scan(rho, eta, MODEL, noise_std=0.005, rng=rng)
    c = MODEL[scan.index]
    pose, fit = vision.qmethod_register(c, scan.points)
    for _ in range(1000):
        de = so3.from_vector_part(1e-4 * rng.standard_normal(3))
        e2 = so3.quat_product(pose.eta, de)
        r2 = pose.rho + 1e-4 * rng.standard_normal(3)
        assert vision.fit_error(c, scan.points, r2, e2) >= fit.eps - 1e-18


def test_registration_equivariance(rng):
    scan = vision.synth_scan(np.array([1.0, 0.5, 0.0]), so3.random_quaternion(rng), MODEL, noise_std=0.01, rng=rng)
    c = MODEL[scan.index]
    _, fit = vision.qmethod_register(c, scan.points)
    R = so3.rotation_matrix(so3.random_quaternion(rng))
    _, fit2 = vision.qmethod_register(c @ R.T, scan.points @ R.T)
    assert abs(fit.eps - fit2.eps) < 1e-12


def test_outliers_separate_from_clean(rng):
    clean, dirty = [], []
    for _ in range(100):
        eta, rho = so3.random_quaternion(rng), rng.uniform(-2, 2, 3)
        clean.append(vision.register_scan(vision.synth_scan(rho, eta, MODEL, 0.005, rng=rng), MODEL)[1].eps)
        dirty.append(vision.register_scan(vision.synth_scan(rho, eta, MODEL, 0.005, 0.1, rng=rng), MODEL)[1].eps)
    med = np.median(clean)
    assert np.all(np.array(dirty) >= 10 * med)
    assert np.all(np.array(dirty) > np.array(clean))


def test_occlusion_halves_point_count(rng):
    scan = vision.synth_scan(np.zeros(3), so3.IDENTITY, MODEL, occlusion_fraction=0.5, rng=rng)
    assert abs(len(scan) - len(MODEL) / 2) <= 1


def test_occluder_shift_keeps_pairing_and_corrupts_fit(rng):
    scan = vision.synth_scan(np.zeros(3), so3.IDENTITY, MODEL, occlusion_fraction=0.4, rng=rng,
                             occluder_shift=np.array([0.0, 0.0, -0.2]))
    assert len(scan) == len(MODEL)
    _, fit = vision.register_scan(scan, MODEL)
    assert fit.eps > 1e-3


def test_fixed_seed_is_bit_identical():
    a = vision.synth_scan(np.ones(3), so3.IDENTITY, MODEL, 0.01, 0.1, 0.2, np.random.default_rng(7))
    b = vision.synth_scan(np.ones(3), so3.IDENTITY, MODEL, 0.01, 0.1, 0.2, np.random.default_rng(7))
    assert a.points.tobytes() == b.points.tobytes()
    assert np.array_equal(a.index, b.index)


def test_synth_scan_argument_checks(rng):
    with pytest.raises(ValueError):
        vision.synth_scan(np.zeros(3), so3.IDENTITY, MODEL, outlier_rate=1.5, rng=rng)
    with pytest.raises(ValueError):
        vision.synth_scan(np.zeros(3), so3.IDENTITY, MODEL, noise_std=-1.0, rng=rng)
    with pytest.raises(vision.DegenerateScanError):
        vision.synth_scan(np.zeros(3), so3.IDENTITY, MODEL, occlusion_fraction=1.0, rng=rng)


def test_degenerate_correspondences():
    with pytest.raises(vision.RegistrationError):
        vision.qmethod_register(FOUR[:2], FOUR[:2])
    line = np.outer(np.arange(5.0), [1.0, 2.0, 3.0])
    with pytest.raises(vision.RegistrationError):
        vision.qmethod_register(line, line)


def test_eig_max_diagonal():
    lam, v = vision.eig_max_sym4(np.diag([1.0, 2.0, 3.0, 4.0]))
    assert lam == pytest.approx(4.0, abs=1e-15)
    assert np.allclose(np.abs(v), [0, 0, 0, 1], atol=1e-15)
    with pytest.raises(ValueError):
        vision.eig_max_sym4(np.arange(16.0).reshape(4, 4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_eig_max_matches_characteristic_polynomial(seed):
    r = np.random.default_rng(seed)
    M = r.standard_normal((4, 4))
    G = M + M.T
    lam, v = vision.eig_max_sym4(G)
    roots = np.roots(np.poly(G)).real
    assert abs(lam - roots.max()) < 1e-9 * max(1.0, np.abs(roots).max())
    assert np.linalg.norm(G @ v - lam * v) < 1e-10 * np.linalg.norm(G)


def test_davenport_eigenvector_is_true_quaternion(rng):
    eta = so3.random_quaternion(rng)
    d = MODEL @ so3.rotation_matrix(eta).T
    G, _ = vision.davenport_matrix(MODEL, d)
    _, v = vision.eig_max_sym4(G)
    assert min(np.linalg.norm(v - eta), np.linalg.norm(v + eta)) < 1e-12


def test_icp_refine_recovers_pose_from_nearby_guess(rng):
    eta = so3.from_axis_angle([0, 0, 1], 0.3)
    rho = np.array([0.5, 0.0, 0.2])
    scan = vision.synth_scan(rho, eta, MODEL, rng=rng)
    guess = vision.PoseMeasurement(rho=rho + 0.01, eta=so3.from_axis_angle([0, 0, 1], 0.31))
    pose, fit = vision.icp_refine(scan.points, MODEL, guess, iterations=5)
    assert rot_err(pose.eta, eta) < 1e-8
    assert fit.eps < 1e-16


def test_model_and_scan_log_round_trip(tmp_path, rng):
    p = tmp_path / "model.txt"
    vision.save_model(p, MODEL)
    assert np.array_equal(vision.load_model(p), MODEL)
    scans = [(0.5 * k, vision.synth_scan(np.ones(3), so3.IDENTITY, MODEL, 0.01, rng=rng)) for k in range(3)]
    log = tmp_path / "scans.csv"
    vision.write_scan_log(log, scans)
    back = vision.read_scan_log(log)
    assert [t for t, _ in back] == [t for t, _ in scans]
    for (_, a), (_, b) in zip(scans, back):
        assert np.array_equal(a.points, b.points) and np.array_equal(a.index, b.index)
