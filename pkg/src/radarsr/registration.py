"""Rigid registration (point-to-point ICP) and RTE / RRE / RR scoring."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry
from .pointcloud import PointCloud, RigidTransform, transform


@dataclass(frozen=True)
class IcpConfig:
    max_iters: int = 50
    tol: float = 1e-8            # stop when mean residual change is below this
    voxel_size: float = 0.2      # meters; 0 disables downsampling
    gate: float = 1.0            # correspondence distance gate, inf disables
    gate_decay: float = 0.9      # gate anneal factor per iteration
    gate_floor: float = 0.2


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """Keep one centroid per occupied voxel of edge length leaf."""
    if leaf <= 0 or len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.xyz / leaf).astype(np.int64)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    n_vox = inv.max() + 1
    sums = np.zeros((n_vox, 3))
    np.add.at(sums, inv, cloud.xyz)
    counts = np.bincount(inv, minlength=n_vox).astype(np.float64)
    return PointCloud(sums / counts[:, None])


def kabsch(source_pts, target_pts):
    """Least-squares rigid fit mapping source points onto target points."""
    if source_pts.shape[0] < 3:
        raise DegenerateGeometry("need at least 3 correspondences")
    cs = source_pts.mean(axis=0)
    ct = target_pts.mean(axis=0)
    h = (source_pts - cs).T @ (target_pts - ct)
    u, s, vt = np.linalg.svd(h)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise DegenerateGeometry("rank-deficient cross-covariance")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rot, ct - rot @ cs)


@dataclass(frozen=True)
class IcpResult:
    transform: RigidTransform
    residuals: list        # mean gated correspondence residual per iteration
    iterations: int
    converged: bool


def icp(source: PointCloud, target: PointCloud,
        init: RigidTransform = RigidTransform.identity(),
        cfg: IcpConfig = IcpConfig()) -> IcpResult:
    """Point-to-point ICP with annealed correspondence gating."""
    if len(source) < 3 or len(target) < 3:
        raise DegenerateGeometry("ICP needs at least 3 points per cloud")
    src = voxel_downsample(source, cfg.voxel_size).xyz
    tgt = voxel_downsample(target, cfg.voxel_size).xyz
    tree = cKDTree(tgt)
    current = init
    gate = cfg.gate
    residuals = []
    converged = False
    for it in range(cfg.max_iters):
        moved = current.apply(src)
        dist, idx = tree.query(moved)
        keep = dist <= gate
        if keep.sum() < 3:
            raise DegenerateGeometry("fewer than 3 gated correspondences")
        residuals.append(float(dist[keep].mean()))
        step = kabsch(moved[keep], tgt[idx[keep]])
        current = step.compose(current)
        gate = max(gate * cfg.gate_decay, cfg.gate_floor)
        if len(residuals) >= 2 and abs(residuals[-2] - residuals[-1]) < cfg.tol:
            converged = True
            break
    return IcpResult(current, residuals, len(residuals), converged)


def rte(est: RigidTransform, gt: RigidTransform):
    """Relative translation error, meters."""
    return float(np.linalg.norm(est.translation - gt.translation))


def rre(est: RigidTransform, gt: RigidTransform):
    """Relative rotation error: geodesic angle between rotations, degrees."""
    cos = (np.trace(est.rotation.T @ gt.rotation) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, cos))))


@dataclass(frozen=True)
class RegistrationResult:
    estimated: RigidTransform
    ground_truth: RigidTransform
    rte: float
    rre: float
    success: bool

    @classmethod
    def evaluate(cls, est, gt, rte_thresh=0.5, rre_thresh=5.0):
        e_t, e_r = rte(est, gt), rre(est, gt)
        return cls(est, gt, e_t, e_r, e_t < rte_thresh and e_r < rre_thresh)

    @classmethod
    def failed(cls, gt):
        """Attempt that produced no pose (e.g. degenerate correspondences)."""
        return cls(RigidTransform.identity(), gt, float("inf"), 180.0, False)


@dataclass(frozen=True)
class RecallSummary:
    recall: float
    rte_succ: float
    rte_all: float
    rre_succ: float
    rre_all: float
    n_success: int
    n_total: int


def registration_recall(results, rte_thresh=0.5, rre_thresh=5.0) -> RecallSummary:
    """Fraction of pairs under both thresholds, plus succ./all error means."""
    results = list(results)
    if not results:
        raise ValueError("registration_recall requires results")
    succ = [r for r in results
            if r.rte < rte_thresh and r.rre < rre_thresh]
    mean = lambda vals: float(np.mean(vals)) if vals else 0.0
    return RecallSummary(
        recall=len(succ) / len(results),
        rte_succ=mean([r.rte for r in succ]),
        rte_all=mean([r.rte for r in results]),
        rre_succ=mean([r.rre for r in succ]),
        rre_all=mean([r.rre for r in results]),
        n_success=len(succ),
        n_total=len(results),
    )


def select_pairs(poses, min_distance=1.0, max_distance=10.0):
    """Ordered index pairs (i, j), i < j, whose pose translations are more
    than min_distance apart (and at most max_distance, so pairs overlap)."""
    pairs = []
    for i in range(len(poses)):
        for j in range(i + 1, len(poses)):
            d = np.linalg.norm(poses[i].translation - poses[j].translation)
            if min_distance < d <= max_distance:
                pairs.append((i, j))
    return pairs


def save_pair_results(pairs, results, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["i", "j", "rte", "rre", "success"])
        for (i, j), r in zip(pairs, results):
            writer.writerow([i, j, f"{r.rte:.17g}", f"{r.rre:.17g}", int(r.success)])


def format_recall(label_summaries):
    """Summary table shaped like RR / RTE[succ./all] / RRE[succ./all]."""
    lines = [f"{'case':<16} {'RR(%)':>7} {'RTE(m)[succ./all]':>20} {'RRE(deg)[succ./all]':>22}"]
    for label, s in label_summaries:
        lines.append(
            f"{label:<16} {100.0 * s.recall:>7.2f} "
            f"{s.rte_succ:>9.2f}/{s.rte_all:.2f} "
            f"{s.rre_succ:>11.2f}/{s.rre_all:.2f}"
        )
    return "\n".join(lines)
