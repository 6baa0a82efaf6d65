"""Point-cloud quality metrics: Chamfer, Modified Hausdorff, and their
unidirectional (LiDAR -> enhanced) variants, in 2D (x, y) or 3D.

Nearest-neighbor distances come from a k-d tree by default; an exact
brute-force path is kept as the verification oracle.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyCloud, EmptyReference
from .pointcloud import PointCloud


def _coords(cloud: PointCloud, dims):
    if dims == 2:
        return cloud.xyz[:, :2]
    if dims == 3:
        return cloud.xyz
    raise ValueError("dims must be 2 or 3")


def nn_dists(a: PointCloud, b: PointCloud, dims=3, method="kdtree"):
    """Distance from each point of a to its nearest neighbor in b."""
    if len(b) == 0:
        raise EmptyReference("nearest-neighbor query against an empty cloud")
    pa, pb = _coords(a, dims), _coords(b, dims)
    if len(a) == 0:
        return np.zeros(0)
    if method == "kdtree":
        dist, _ = cKDTree(pb).query(pa)
        return np.asarray(dist, dtype=np.float64)
    if method == "brute":
        diff = pa[:, None, :] - pb[None, :, :]
        return np.sqrt(np.sum(diff**2, axis=2)).min(axis=1)
    raise ValueError(f"unknown method {method!r}")


def _require_nonempty(*clouds):
    for c in clouds:
        if len(c) == 0:
            raise EmptyCloud("metric requires nonempty clouds")


def chamfer(a: PointCloud, b: PointCloud, dims=3, method="kdtree"):
    """Symmetric Chamfer distance: mean of the two directed mean NN distances."""
    _require_nonempty(a, b)
    return 0.5 * (nn_dists(a, b, dims, method).mean()
                  + nn_dists(b, a, dims, method).mean())


def mhd(a: PointCloud, b: PointCloud, dims=3, method="kdtree"):
    """Modified Hausdorff: mean of the two directed median NN distances."""
    _require_nonempty(a, b)
    return 0.5 * (np.median(nn_dists(a, b, dims, method))
                  + np.median(nn_dists(b, a, dims, method)))


def ucd(lidar: PointCloud, enhanced: PointCloud, dims=3, method="kdtree"):
    """Unidirectional Chamfer: mean NN distance from lidar into enhanced only."""
    _require_nonempty(lidar, enhanced)
    return float(nn_dists(lidar, enhanced, dims, method).mean())


def umhd(lidar: PointCloud, enhanced: PointCloud, dims=3, method="kdtree"):
    """Unidirectional Modified Hausdorff: median NN distance, lidar -> enhanced."""
    _require_nonempty(lidar, enhanced)
    return float(np.median(nn_dists(lidar, enhanced, dims, method)))


@dataclass(frozen=True)
class MetricReport:
    cd: float
    mhd: float
    ucd: float
    umhd: float
    dims: int
    label: str = ""

    @classmethod
    def compute(cls, lidar: PointCloud, enhanced: PointCloud, dims=3, label=""):
        return cls(
            cd=float(chamfer(lidar, enhanced, dims)),
            mhd=float(mhd(lidar, enhanced, dims)),
            ucd=ucd(lidar, enhanced, dims),
            umhd=umhd(lidar, enhanced, dims),
            dims=dims,
            label=label,
        )


def save_reports(reports, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["label", "dims", "cd", "mhd", "ucd", "umhd"])
        for r in reports:
            writer.writerow([r.label, r.dims, f"{r.cd:.17g}", f"{r.mhd:.17g}",
                             f"{r.ucd:.17g}", f"{r.umhd:.17g}"])


def format_reports(reports):
    """Pretty table in the CD / MHD / UCD / UMHD column order."""
    lines = [f"{'label':<20} {'CD':>8} {'MHD':>8} {'UCD':>8} {'UMHD':>8}"]
    for r in reports:
        lines.append(f"{r.label:<20} {r.cd:>8.4f} {r.mhd:>8.4f} "
                     f"{r.ucd:>8.4f} {r.umhd:>8.4f}")
    return "\n".join(lines)
