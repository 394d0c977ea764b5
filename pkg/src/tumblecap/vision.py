"""Synthetic 3-D scans and closed-form (q-method) pose registration.

Registration solves

    ε = min (1/m) Σ ‖A(η) c_i + ρ - d_i‖²,   ηᵀη = 1

for model points ``c`` (fixture frame) paired with scan points ``d`` (camera
frame), so ``(ρ, η)`` is the fixture pose in the camera frame. The optimal
quaternion is the dominant eigenvector of the 4×4 matrix ``G`` built from the
centred cross-covariance, and ``ε`` (mean squared residual, m²) is the
statistic the estimator's fault gate thresholds.

Scans are generated by the same model, ``d_i = A(η) c_i + ρ + noise``, so a
clean scan registers to the true pose.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import so3


class RegistrationError(ValueError):
    """Too few or degenerate correspondences."""


class DegenerateScanError(ValueError):
    """A scan with no retained points."""


@dataclass
class PoseMeasurement:
    rho: np.ndarray
    eta: np.ndarray

    @property
    def y(self):
        """6-vector measurement ``[ρ, η_v]``."""
        return np.concatenate([self.rho, self.eta[:3]])


@dataclass
class FitError:
    eps: float
    m_used: int


@dataclass
class Scan:
    """Point cloud plus the model index each point is paired with."""

    points: np.ndarray
    index: np.ndarray

    def __len__(self):
        return len(self.points)


def box_model(size=(1.0, 0.8, 0.6), spacing=0.1, center=(0.0, 0.0, 0.0)):
    """Surface samples of a rectangular bus, used as the default target model."""
    size = np.asarray(size, float)
    half = 0.5 * size
    axes = [np.linspace(-h, h, max(2, int(round(2 * h / spacing)) + 1)) for h in half]
    pts = []
    for k in range(3):
        i, j = [a for a in range(3) if a != k]
        gi, gj = np.meshgrid(axes[i], axes[j], indexing="ij")
        for s in (-1.0, 1.0):
            p = np.zeros(gi.shape + (3,))
            p[..., i] = gi
            p[..., j] = gj
            p[..., k] = s * half[k]
            pts.append(p.reshape(-1, 3))
    pts = np.unique(np.round(np.concatenate(pts), 12), axis=0)
    return pts + np.asarray(center, float)


def load_model(path):
    """Read ``x y z`` rows (m); ``#`` starts a comment."""
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(v) for v in line.replace(",", " ").split()])
    pts = np.array(rows, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"{path}: expected non-empty rows of 3 coordinates")
    return pts


def save_model(path, points):
    with open(path, "w") as fh:
        fh.write("# x y z (m)\n")
        for p in points:
            fh.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")


def _sector_order(model, start):
    c = model - model.mean(axis=0)
    ang = np.mod(np.arctan2(c[:, 1], c[:, 0]) - start, 2.0 * np.pi)
    return np.argsort(ang, kind="stable")


def synth_scan(rho, eta, model, noise_std=0.0, outlier_rate=0.0,
               occlusion_fraction=0.0, rng=None, occluder_shift=None,
               occlusion_start=None):
    """Generate one scan of ``model`` seen at pose ``(ρ, η)``.

    Occlusion takes a contiguous azimuthal sector (about the model z axis)
    covering ``occlusion_fraction`` of the points. Without ``occluder_shift``
    those points are dropped; with it (a 3-vector in scan coordinates) they are
    displaced by the shift plus 5 cm scatter while keeping their model pairing,
    which is how a hand entering the view corrupts registration.
    Outliers replace ``outlier_rate`` of the remaining returns by points drawn
    uniformly in the scan's bounding box inflated 1.5x.
    """
    if not (0.0 <= outlier_rate <= 1.0 and 0.0 <= occlusion_fraction <= 1.0):
        raise ValueError("rates must lie in [0, 1]")
    if noise_std < 0:
        raise ValueError("noise_std must be non-negative")
    rng = np.random.default_rng(0) if rng is None else rng
    model = np.asarray(model, float)
    m = len(model)
    A = so3.rotation_matrix(eta)

    start = rng.uniform(0.0, 2.0 * np.pi) if occlusion_start is None else occlusion_start
    order = _sector_order(model, start)
    n_occ = int(round(occlusion_fraction * m))
    occluded = np.sort(order[:n_occ])
    visible = np.sort(order[n_occ:])

    index = np.arange(m) if occluder_shift is not None else visible
    if len(index) == 0:
        raise DegenerateScanError("scan retains no points")
    pts = model[index] @ A.T + np.asarray(rho, float)
    if noise_std > 0:
        pts = pts + noise_std * rng.standard_normal(pts.shape)

    if occluder_shift is not None and n_occ > 0:
        jitter = 0.05 * rng.standard_normal((n_occ, 3))
        pts[occluded] += np.asarray(occluder_shift, float) + jitter

    n_out = int(round(outlier_rate * len(index)))
    if n_out > 0:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        mid, half = 0.5 * (lo + hi), 0.75 * (hi - lo)
        pick = np.sort(rng.choice(len(index), size=n_out, replace=False))
        pts[pick] = mid + half * rng.uniform(-1.0, 1.0, size=(n_out, 3))
    return Scan(points=pts, index=index.copy())


def eig_max_sym4(G):
    """Largest eigenpair of a symmetric 4×4 matrix (LAPACK ``syevd``)."""
    G = np.asarray(G, float)
    if G.shape != (4, 4) or np.max(np.abs(G - G.T)) > 1e-10 * max(1.0, np.max(np.abs(G))):
        raise ValueError("G must be a symmetric 4x4 matrix")
    try:
        vals, vecs = np.linalg.eigh(0.5 * (G + G.T))
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ArithmeticError(f"eigen-decomposition did not converge: {exc}") from exc
    return float(vals[-1]), vecs[:, -1]


def davenport_matrix(c, d):
    """The 4×4 ``G`` of the q-method for paired points ``c`` (model) and ``d`` (scan)."""
    cc = c - c.mean(axis=0)
    dd = d - d.mean(axis=0)
    D = cc.T @ dd
    z = np.cross(cc, dd).sum(axis=0)
    trD = np.trace(D)
    G = np.empty((4, 4))
    G[:3, :3] = D + D.T - trD * np.eye(3)
    G[:3, 3] = z
    G[3, :3] = z
    G[3, 3] = trD
    return G, D


def fit_error(model_points, scan_points, rho, eta):
    r = model_points @ so3.rotation_matrix(eta).T + rho - scan_points
    return float(np.mean(np.sum(r * r, axis=1)))


def qmethod_register(model_points, scan_points):
    """Closed-form pose ``(ρ, η)`` minimizing the fit error ``A(η) c + ρ ≈ d``.

    Returns ``(PoseMeasurement, FitError)``; raises ``RegistrationError`` for
    fewer than three pairs or a rank-deficient cross-covariance.
    """
    c = np.asarray(model_points, float)
    d = np.asarray(scan_points, float)
    if len(c) < 3 or len(c) != len(d):
        raise RegistrationError("need at least three paired points")
    G, D = davenport_matrix(c, d)
    sv = np.linalg.svd(D, compute_uv=False)
    if sv[0] <= 0 or sv[1] <= 1e-12 * sv[0]:
        raise RegistrationError("correspondences are collinear or coincident")
    _, eta = eig_max_sym4(G)
    eta = so3.canonical(eta / np.linalg.norm(eta))
    rho = d.mean(axis=0) - so3.rotation_matrix(eta) @ c.mean(axis=0)
    return PoseMeasurement(rho=rho, eta=eta), FitError(fit_error(c, d, rho, eta), len(c))


def register_scan(scan: Scan, model):
    return qmethod_register(np.asarray(model)[scan.index], scan.points)


def icp_refine(points, model, pose: PoseMeasurement, iterations=5):
    """Fixed-iteration nearest-neighbour re-pairing around an initial pose.

    Each iteration maps the scan into the fixture frame through the current
    pose, pairs every point with its nearest model point and re-solves the
    q-method.
    """
    model = np.asarray(model, float)
    tree = cKDTree(model)
    fit = None
    for _ in range(iterations):
        mapped = (points - pose.rho) @ so3.rotation_matrix(pose.eta)
        _, idx = tree.query(mapped)
        pose, fit = qmethod_register(model[idx], points)
    return pose, fit


def write_scan_log(path, entries):
    """CSV ``t, point index, x, y, z`` for an iterable of ``(t, Scan)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "index", "x", "y", "z"])
        for t, scan in entries:
            for i, p in zip(scan.index, scan.points):
                w.writerow([f"{t:.6f}", int(i), f"{p[0]:.17g}", f"{p[1]:.17g}", f"{p[2]:.17g}"])


def read_scan_log(path):
    """Inverse of ``write_scan_log``: list of ``(t, Scan)`` in file order."""
    groups = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            t = float(row["t"])
            groups.setdefault(t, ([], []))
            groups[t][0].append(int(row["index"]))
            groups[t][1].append([float(row["x"]), float(row["y"]), float(row["z"])])
    return [(t, Scan(points=np.array(p), index=np.array(i, dtype=int)))
            for t, (i, p) in groups.items()]
