"""Cover segmentation and pose estimation from noisy point clouds.

The pipeline: estimate per-point normals, cluster them (K=2) to split
panel from cover, keep the smaller cluster, prune isolated points, then
build the cover frame from the mean normal and the known panel y-axis.
The estimated centre is deliberately allowed to be wrong along the
cover's x-axis (edge dropout pulls it around); the contact probe in the
control module measures and removes that error.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .errors import (AmbiguousCoverError, ClusterConvergenceError,
                     DegenerateGeometryError, EmptyCloudError, PerceptionError)
from .geometry import CAMERA, COVER, Pose, Rotation, cover_x_axis, rotation_from_axes

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PointCloud:
    """Points in meters, optional unit normals and validity flags."""

    points: np.ndarray
    normals: np.ndarray | None = None
    valid: np.ndarray | None = None
    frame: str = CAMERA

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if len(nrm) != len(pts):
                raise PerceptionError("normals and points differ in length")
            lengths = np.linalg.norm(nrm, axis=1)
            ok = self.valid if self.valid is not None else np.ones(len(pts), bool)
            if np.any(np.abs(lengths[np.asarray(ok, bool)] - 1.0) > 1e-6):
                raise PerceptionError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)
        if self.valid is not None:
            v = np.asarray(self.valid, dtype=bool).reshape(-1)
            if len(v) != len(pts):
                raise PerceptionError("validity flags and points differ in length")
            object.__setattr__(self, "valid", v)

    def __len__(self) -> int:
        return len(self.points)

    def select(self, mask) -> "PointCloud":
        mask = np.asarray(mask)
        return PointCloud(
            self.points[mask],
            None if self.normals is None else self.normals[mask],
            None if self.valid is None else self.valid[mask],
            self.frame,
        )


@dataclass(frozen=True)
class CoverEstimate:
    """Cover centre and frame in camera coordinates, plus diagnostics."""

    center: np.ndarray
    normal: np.ndarray
    pose: Pose
    cluster_size: int
    plane_fit_angle: float  # rad between mean-normal and position-plane-fit


@dataclass(frozen=True)
class AttemptResult:
    """Contact-probe outcome: commanded standoff, measured travel, correction."""

    x1: float
    x2: float
    xe: float


# --------------------------------------------------------------------------
# PLY import/export (ascii, vertex element with x y z [nx ny nz])
# --------------------------------------------------------------------------

def save_ply(cloud: PointCloud, path) -> None:
    with_normals = cloud.normals is not None
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"comment frame {cloud.frame}\n")
        fh.write(f"element vertex {len(cloud)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        if with_normals:
            fh.write("property float nx\nproperty float ny\nproperty float nz\n")
        fh.write("end_header\n")
        for i in range(len(cloud)):
            row = list(cloud.points[i])
            if with_normals:
                row += list(cloud.normals[i])
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_ply(path, frame: str = CAMERA) -> PointCloud:
    with open(path, "r", encoding="ascii") as fh:
        header = []
        for line in fh:
            header.append(line.strip())
            if line.strip() == "end_header":
                break
        props = [h.split()[-1] for h in header if h.startswith("property")]
        counts = [int(h.split()[-1]) for h in header if h.startswith("element vertex")]
        if not counts:
            raise PerceptionError(f"{path}: missing vertex element")
        n = counts[0]
        rows = [fh.readline().split() for _ in range(n)]
    data = np.asarray(rows, dtype=float) if n else np.zeros((0, len(props)))
    has_normals = {"nx", "ny", "nz"} <= set(props)
    idx = {p: i for i, p in enumerate(props)}
    pts = data[:, [idx["x"], idx["y"], idx["z"]]] if n else np.zeros((0, 3))
    normals = None
    if has_normals and n:
        normals = data[:, [idx["nx"], idx["ny"], idx["nz"]]]
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        lengths[lengths == 0] = 1.0
        normals = normals / lengths
    return PointCloud(pts, normals, None, frame)


# --------------------------------------------------------------------------
# Cloud operations
# --------------------------------------------------------------------------

def estimate_normals(cloud: PointCloud, k: int = 12) -> PointCloud:
    """Per-point normals from k-NN covariance, oriented toward the sensor.

    Each normal is the smallest-eigenvalue eigenvector of its local
    covariance, flipped to point at the camera origin (and to negative z
    when the point sits on a plane through the origin).  Neighborhoods
    with rank < 2 covariance are flagged invalid.
    """
    if k < 3:
        raise PerceptionError("need k >= 3 neighbors for a plane fit")
    if len(cloud) < k + 1:
        raise PerceptionError(f"cloud has {len(cloud)} points, need at least {k + 1}")
    tree = cKDTree(cloud.points)
    _, idx = tree.query(cloud.points, k=k + 1)
    nb = cloud.points[idx]                     # (N, k+1, 3)
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nij,nik->njk", centered, centered) / (k + 1)
    w, v = np.linalg.eigh(cov)                 # ascending eigenvalues
    normals = v[:, :, 0]
    scale = w[:, 2]
    valid = w[:, 1] > np.maximum(1e-12 * scale, 1e-18)
    # orient toward the sensor origin; break ties toward -z
    dots = np.einsum("ni,ni->n", normals, cloud.points)
    flip = dots > 1e-12
    tie = np.abs(dots) <= 1e-12
    flip |= tie & (normals[:, 2] > 0)
    normals[flip] *= -1.0
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    lengths[lengths == 0] = 1.0
    normals = normals / lengths
    return PointCloud(cloud.points, normals, valid, cloud.frame)


def crop(cloud: PointCloud, lower, upper) -> PointCloud:
    """Keep points strictly inside an axis-aligned box; error on empty result."""
    lo = np.asarray(lower, dtype=float).reshape(3)
    hi = np.asarray(upper, dtype=float).reshape(3)
    if np.any(lo >= hi):
        raise PerceptionError("crop bounds are inverted or empty")
    mask = np.all((cloud.points > lo) & (cloud.points < hi), axis=1)
    if not mask.any():
        raise EmptyCloudError("crop produced an empty cloud")
    return cloud.select(mask)


def remove_isolated(cloud: PointCloud, radius: float, min_neighbors: int = 3) -> PointCloud:
    if radius <= 0:
        raise PerceptionError("radius must be positive")
    tree = cKDTree(cloud.points)
    counts = tree.query_ball_point(cloud.points, r=radius, return_length=True)
    mask = (counts - 1) >= min_neighbors
    return cloud.select(mask)


def _kmeans_pp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [data[rng.integers(len(data))]]
    for _ in range(1, k):
        d2 = np.min(((data[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total <= 0:
            raise ClusterConvergenceError("fewer distinct values than clusters")
        probs = d2 / total
        centers.append(data[rng.choice(len(data), p=probs)])
    return np.asarray(centers)


def segment_by_normal_kmeans(cloud: PointCloud, k: int = 2, seed: int = 0,
                             restarts: int = 8, max_iter: int = 60,
                             min_separation: float = 0.21) -> list[PointCloud]:
    """K-means over unit normals (chord metric), deterministic under seed.

    Points are canonically ordered before seeding so the partition does
    not depend on input order.  The lowest-inertia restart wins, ties
    broken by restart index.  Raises when the normals do not support k
    distinct clusters or, for k=2, when the cluster centres are closer
    than ``min_separation`` radians (degenerate split).
    """
    if cloud.normals is None:
        raise PerceptionError("cloud has no normals; run estimate_normals first")
    restarts = min(max(1, restarts), 50)
    ok = cloud.valid if cloud.valid is not None else np.ones(len(cloud), bool)
    usable = np.flatnonzero(ok)
    if len(usable) < k:
        raise ClusterConvergenceError(f"only {len(usable)} valid points for k={k}")
    data = cloud.normals[usable]
    order = np.lexsort((data[:, 2], data[:, 1], data[:, 0]))
    data = data[order]
    if len(np.unique(np.round(data, 12), axis=0)) < k:
        raise ClusterConvergenceError("fewer distinct normals than clusters")

    rng = np.random.default_rng(seed)
    best = None
    for restart in range(restarts):
        centers = _kmeans_pp_init(data, k, rng)
        labels = None
        for _ in range(max_iter):
            d2 = ((data[:, None, :] - centers[None]) ** 2).sum(-1)
            new_labels = d2.argmin(axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for j in range(k):
                sel = labels == j
                if sel.any():
                    centers[j] = data[sel].mean(axis=0)
        inertia = float(d2[np.arange(len(data)), labels].sum())
        if best is None or inertia < best[0] - 1e-15:
            best = (inertia, labels.copy(), centers.copy())
    _, labels, centers = best

    if k == 2:
        c0, c1 = centers
        n0, n1 = np.linalg.norm(c0), np.linalg.norm(c1)
        if n0 < 1e-12 or n1 < 1e-12:
            raise ClusterConvergenceError("cluster centre collapsed to zero")
        cosang = np.clip((c0 @ c1) / (n0 * n1), -1.0, 1.0)
        sep = math.acos(cosang)
        if sep < min_separation:
            raise ClusterConvergenceError(
                f"normal clusters separated by only {math.degrees(sep):.1f} deg")

    # undo the canonical ordering, then map back onto the full cloud
    inv = np.empty(len(order), dtype=int)
    inv[order] = np.arange(len(order))
    labels_full = np.full(len(cloud), -1, dtype=int)
    labels_full[usable] = labels[inv]
    return [cloud.select(labels_full == j) for j in range(k)]


def select_cover_cluster(clusters, max_ratio: float = 0.8) -> PointCloud:
    """Pick the smaller of two clusters as the cover; error when ambiguous."""
    if len(clusters) != 2:
        raise PerceptionError(f"expected exactly 2 clusters, got {len(clusters)}")
    sizes = [len(c) for c in clusters]
    small, large = min(sizes), max(sizes)
    if large == 0:
        raise EmptyCloudError("both clusters are empty")
    ratio = small / large
    if ratio > max_ratio:
        raise AmbiguousCoverError(
            f"cluster size ratio {ratio:.2f} exceeds {max_ratio}; cover not distinguishable")
    log.debug("cover cluster selected: sizes %s, ratio %.3f", sizes, ratio)
    return clusters[int(np.argmin(sizes))]


def cover_pose(cloud_b: PointCloud, r_cw: Rotation, y_plane_world,
               trim_fraction: float = 0.2) -> CoverEstimate:
    """Cover frame from a segmented cloud: mean normal + panel y-axis.

    The z-axis is the trimmed mean of the per-point normals (points whose
    normal strays furthest from the initial mean are dropped, which keeps
    hinge-adjacent blends from tilting the estimate).  The y-axis is the
    panel y-axis rotated into camera coordinates and projected orthogonal
    to z; x completes the frame.  A position plane-fit runs as a
    cross-check and its angular disagreement is recorded.
    """
    if len(cloud_b) == 0:
        raise EmptyCloudError("cover cloud is empty")
    if cloud_b.normals is None:
        raise PerceptionError("cover cloud has no normals")
    ok = cloud_b.valid if cloud_b.valid is not None else np.ones(len(cloud_b), bool)
    normals = cloud_b.normals[ok]
    if len(normals) == 0:
        raise EmptyCloudError("cover cloud has no valid normals")

    mean0 = normals.mean(axis=0)
    mean0 /= np.linalg.norm(mean0)
    if trim_fraction > 0 and len(normals) > 10:
        dots = normals @ mean0
        keep = dots >= np.quantile(dots, trim_fraction)
        normals = normals[keep]
    z_axis = normals.mean(axis=0)
    z_axis /= np.linalg.norm(z_axis)

    y_cp = r_cw.apply(np.asarray(y_plane_world, dtype=float))
    y_proj = y_cp - (y_cp @ z_axis) * z_axis
    ny = np.linalg.norm(y_proj)
    if ny < 1e-6:
        raise DegenerateGeometryError("panel y-axis is parallel to the cover normal")
    y_axis = y_proj / ny
    x_axis = cover_x_axis(y_axis, z_axis)
    rot = rotation_from_axes(x_axis, y_axis, z_axis)
    center = cloud_b.points.mean(axis=0)

    # independent sanity check: plane fit over positions
    centered = cloud_b.points - center
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    fit_n = vt[2]
    if fit_n @ z_axis < 0:
        fit_n = -fit_n
    fit_angle = math.acos(np.clip(fit_n @ z_axis, -1.0, 1.0))
    log.debug("cover pose: %d pts, plane-fit disagreement %.2f deg",
              len(cloud_b), math.degrees(fit_angle))

    pose = Pose(rot, center, (cloud_b.frame, COVER))
    return CoverEstimate(center, z_axis, pose, len(cloud_b), fit_angle)


def attempt_correction(x1: float, x2: float) -> AttemptResult:
    """Signed correction recovered by the contact probe: xe = -(x2 - x1)."""
    if x2 < 0:
        raise PerceptionError("measured travel x2 cannot be negative")
    return AttemptResult(float(x1), float(x2), -(float(x2) - float(x1)))


def shifted_estimate(est: CoverEstimate, offset: float) -> CoverEstimate:
    """Estimate with its centre displaced along the cover x-axis (error injection)."""
    delta = est.pose.rotation.matrix[:, 0] * offset
    center = est.center + delta
    return replace(est, center=center,
                   pose=Pose(est.pose.rotation, center, est.pose.frames))
