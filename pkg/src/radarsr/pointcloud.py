"""Point cloud containers, rigid transforms, and preprocessing steps.

Clouds are stored as (N, 3) float64 arrays with an optional per-point
intensity channel. All operations are pure: they return new clouds and
never mutate their inputs.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import PlaneFitFailure


@dataclass(frozen=True)
class PointCloud:
    """An unordered set of 3D points in meters, optionally with intensity."""

    xyz: np.ndarray
    intensity: np.ndarray | None = None
    frame_id: str = ""

    def __post_init__(self):
        xyz = np.asarray(self.xyz, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "xyz", xyz)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if inten.shape[0] != xyz.shape[0]:
                raise ValueError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)
        if xyz.size and not np.all(np.isfinite(xyz)):
            raise ValueError("point coordinates must be finite")

    def __len__(self):
        return self.xyz.shape[0]

    @classmethod
    def empty(cls, frame_id=""):
        return cls(np.zeros((0, 3)), frame_id=frame_id)

    def select(self, mask):
        """New cloud keeping the points where mask is True."""
        inten = self.intensity[mask] if self.intensity is not None else None
        return PointCloud(self.xyz[mask], inten, self.frame_id)


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) transform applied point-wise as rotation @ p + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        tra = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", tra)
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("rotation must be orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation must be proper (det = +1)")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw_deg(cls, yaw_deg, translation=(0.0, 0.0, 0.0)):
        a = math.radians(yaw_deg)
        c, s = math.cos(a), math.sin(a)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.asarray(translation, dtype=np.float64))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self applied after other: (self @ other)(p) = self(other(p))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def apply(self, xyz: np.ndarray) -> np.ndarray:
        return np.asarray(xyz) @ self.rotation.T + self.translation


def transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    """Apply a rigid transform to every point; intensity is preserved."""
    return replace(cloud, xyz=T.apply(cloud.xyz))


@dataclass(frozen=True)
class GroundCfg:
    """RANSAC single-plane ground removal settings."""

    iterations: int = 200
    inlier_threshold: float = 0.1   # meters, point-to-plane distance
    height_margin: float = 0.2      # meters above the plane to keep
    min_inlier_fraction: float = 0.2
    on_failure: str = "raise"       # "raise" or "passthrough"
    seed: int = 0


def _fit_plane_ransac(xyz, cfg):
    """Return (normal, d) of the best plane n.p + d = 0, or None.

    The normal is oriented so +z is the 'above' side.
    """
    n_pts = xyz.shape[0]
    if n_pts < 3:
        return None
    rng = np.random.default_rng(cfg.seed)
    best = None
    best_count = -1
    for _ in range(cfg.iterations):
        idx = rng.choice(n_pts, size=3, replace=False)
        p0, p1, p2 = xyz[idx]
        normal = np.cross(p1 - p0, p2 - p0)
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal = normal / norm
        if normal[2] < 0:
            normal = -normal
        d = -normal @ p0
        dist = np.abs(xyz @ normal + d)
        count = int(np.sum(dist < cfg.inlier_threshold))
        if count > best_count:
            best_count = count
            best = (normal, d)
    if best is None or best_count < cfg.min_inlier_fraction * n_pts:
        return None
    # refine with a least-squares fit over the inliers
    normal, d = best
    inliers = np.abs(xyz @ normal + d) < cfg.inlier_threshold
    pts = xyz[inliers]
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    normal = vt[2]
    if normal[2] < 0:
        normal = -normal
    return normal, -normal @ centroid


def remove_ground(cloud: PointCloud, cfg: GroundCfg = GroundCfg()) -> PointCloud:
    """Drop points at or below height_margin above the RANSAC-fitted ground plane."""
    if len(cloud) == 0:
        raise ValueError("remove_ground requires a nonempty cloud")
    plane = _fit_plane_ransac(cloud.xyz, cfg)
    if plane is None:
        if cfg.on_failure == "passthrough":
            return cloud
        raise PlaneFitFailure(
            f"no plane with >= {cfg.min_inlier_fraction:.0%} inliers found"
        )
    normal, d = plane
    height = cloud.xyz @ normal + d
    return cloud.select(height > cfg.height_margin)


def filter_fov(cloud: PointCloud, yaw_min_deg: float, yaw_max_deg: float) -> PointCloud:
    """Keep points whose yaw atan2(y, x) lies in [yaw_min, yaw_max] degrees, inclusive."""
    if not yaw_min_deg < yaw_max_deg:
        raise ValueError("yaw_min must be < yaw_max")
    yaw = np.degrees(np.arctan2(cloud.xyz[:, 1], cloud.xyz[:, 0]))
    return cloud.select((yaw >= yaw_min_deg) & (yaw <= yaw_max_deg))


def aggregate(frames) -> PointCloud:
    """Concatenate frames after mapping each into the shared reference frame.

    frames: sequence of (PointCloud, RigidTransform into the reference frame).
    Intensity survives only if every frame carries it.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("aggregate requires at least one frame")
    clouds = [transform(cloud, pose) for cloud, pose in frames]
    xyz = np.concatenate([c.xyz for c in clouds], axis=0)
    if all(c.intensity is not None for c in clouds):
        inten = np.concatenate([c.intensity for c in clouds])
    else:
        inten = None
    return PointCloud(xyz, inten, clouds[0].frame_id)


def save_poses(poses, path):
    """One pose per line: row-major rotation then translation (12 numbers)."""
    with open(path, "w") as f:
        f.write("# r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n")
        for p in poses:
            vals = np.concatenate([p.rotation.ravel(), p.translation])
            f.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def load_poses(path):
    poses = []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            vals = [float(v) for v in line.split()]
            if len(vals) != 12:
                raise ValueError(f"bad pose line in {path!r}: {line!r}")
            poses.append(RigidTransform(np.array(vals[:9]).reshape(3, 3), vals[9:]))
    return poses


# ---------------------------------------------------------------------------
# file formats: plain text "x y z [intensity]" and binary "PCB1"

_BINARY_MAGIC = b"PCB1"


def save_cloud_text(cloud: PointCloud, path):
    with open(path, "w") as f:
        f.write("# x y z" + (" intensity" if cloud.intensity is not None else "") + "\n")
        for i in range(len(cloud)):
            vals = [f"{v:.17g}" for v in cloud.xyz[i]]
            if cloud.intensity is not None:
                vals.append(f"{cloud.intensity[i]:.17g}")
            f.write(" ".join(vals) + "\n")


def load_cloud_text(path) -> PointCloud:
    xyz, inten = [], []
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) not in (3, 4):
                raise ValueError(f"bad point line in {path!r}: {line!r}")
            xyz.append([float(v) for v in parts[:3]])
            if len(parts) == 4:
                inten.append(float(parts[3]))
    if inten and len(inten) != len(xyz):
        raise ValueError(f"mixed intensity columns in {path!r}")
    arr = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return PointCloud(arr, np.asarray(inten) if inten else None)


def save_cloud_binary(cloud: PointCloud, path):
    n = len(cloud)
    with open(path, "wb") as f:
        f.write(_BINARY_MAGIC)
        f.write(struct.pack("<I", n))
        if cloud.intensity is not None:
            data = np.column_stack([cloud.xyz, cloud.intensity]).astype("<f4")
        else:
            data = cloud.xyz.astype("<f4")
        f.write(data.tobytes())


def load_cloud_binary(path) -> PointCloud:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _BINARY_MAGIC:
            raise ValueError(f"{path!r}: bad magic {magic!r}")
        (n,) = struct.unpack("<I", f.read(4))
        payload = f.read()
    if len(payload) == n * 16:
        data = np.frombuffer(payload, dtype="<f4").reshape(n, 4).astype(np.float64)
        return PointCloud(data[:, :3], data[:, 3])
    if len(payload) == n * 12:
        data = np.frombuffer(payload, dtype="<f4").reshape(n, 3).astype(np.float64)
        return PointCloud(data)
    raise ValueError(f"{path!r}: payload size {len(payload)} does not match count {n}")


def load_cloud(path) -> PointCloud:
    """Dispatch on the binary magic, falling back to the text reader."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == _BINARY_MAGIC:
        return load_cloud_binary(path)
    return load_cloud_text(path)
