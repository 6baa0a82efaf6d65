"""Synthetic paired-scene generator: dense LiDAR-like clouds plus sparse,
noisy, ghost-ridden radar-like counterparts, and simple trajectories.

Surfaces are sampled on a fixed lattice so point density is reproducible;
all randomness flows through the spec seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pointcloud import PointCloud, RigidTransform, transform


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    x_range: tuple = (-15.0, 15.0)
    y_range: tuple = (0.0, 30.0)
    z_range: tuple = (-0.8, 1.7)
    n_boxes: int = 4
    n_walls: int = 2
    n_cylinders: int = 2
    p_keep: float = 0.1          # radar subsampling probability
    n_ghosts: int = 30
    noise_std: float = 0.02      # meters, radar per-point jitter
    lattice: float = 0.05        # meters, surface sampling pitch
    include_ground: bool = False
    # "point": keep points independently; "column": keep whole vertical
    # columns of column_cell meters, mimicking radar angular-cell dropout
    keep_mode: str = "point"
    column_cell: float = 0.3

    def __post_init__(self):
        if not 0 < self.p_keep <= 1:
            raise ValueError("p_keep must be in (0, 1]")
        if min(self.n_boxes, self.n_walls, self.n_cylinders, self.n_ghosts) < 0:
            raise ValueError("object and ghost counts must be >= 0")


def _lattice(lo, hi, pitch):
    n = max(int(np.floor((hi - lo) / pitch)) + 1, 1)
    return lo + np.arange(n) * pitch


def _box_surface(center, size, pitch):
    """Vertical faces and top of an axis-aligned box, lattice-sampled."""
    cx, cy, cz = center
    sx, sy, sz = size
    xs = _lattice(cx - sx / 2, cx + sx / 2, pitch)
    ys = _lattice(cy - sy / 2, cy + sy / 2, pitch)
    zs = _lattice(cz - sz / 2, cz + sz / 2, pitch)
    pts = []
    for x_face in (cx - sx / 2, cx + sx / 2):
        yy, zz = np.meshgrid(ys, zs)
        pts.append(np.column_stack([np.full(yy.size, x_face), yy.ravel(), zz.ravel()]))
    for y_face in (cy - sy / 2, cy + sy / 2):
        xx, zz = np.meshgrid(xs, zs)
        pts.append(np.column_stack([xx.ravel(), np.full(xx.size, y_face), zz.ravel()]))
    xx, yy = np.meshgrid(xs, ys)
    pts.append(np.column_stack([xx.ravel(), yy.ravel(), np.full(xx.size, cz + sz / 2)]))
    return np.concatenate(pts)


def _wall(start, end, height_range, pitch):
    length = np.linalg.norm(np.subtract(end, start)[:2])
    n = max(int(length / pitch) + 1, 2)
    line = np.linspace(start, end, n)
    zs = _lattice(height_range[0], height_range[1], pitch)
    pts = np.repeat(line, len(zs), axis=0)
    pts[:, 2] = np.tile(zs, n)
    return pts


def _cylinder(center, radius, height_range, pitch):
    circumference = 2 * np.pi * radius
    n_ang = max(int(circumference / pitch), 8)
    ang = np.linspace(0, 2 * np.pi, n_ang, endpoint=False)
    ring = np.column_stack([
        center[0] + radius * np.cos(ang),
        center[1] + radius * np.sin(ang),
    ])
    zs = _lattice(height_range[0], height_range[1], pitch)
    pts = np.repeat(np.column_stack([ring, np.zeros(n_ang)]), len(zs), axis=0)
    pts[:, 2] = np.tile(zs, n_ang)
    return pts


def _build_layout(spec: SceneSpec, rng):
    """Place objects inside the scene extent; returns (points, layout dict)."""
    x_lo, x_hi = spec.x_range
    y_lo, y_hi = spec.y_range
    z_lo, z_hi = spec.z_range
    margin = 1.5
    parts, layout = [], {"boxes": [], "walls": [], "cylinders": []}
    for _ in range(spec.n_boxes):
        center = [rng.uniform(x_lo + margin, x_hi - margin),
                  rng.uniform(y_lo + margin, y_hi - margin),
                  rng.uniform(0.2, 0.6)]
        size = [rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 1.5)]
        parts.append(_box_surface(center, size, spec.lattice))
        layout["boxes"].append((center, size))
    for _ in range(spec.n_walls):
        start = [rng.uniform(x_lo + margin, x_hi - margin),
                 rng.uniform(y_lo + margin, y_hi - margin), 0.0]
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(3.0, 8.0)
        end = [start[0] + length * np.cos(ang), start[1] + length * np.sin(ang), 0.0]
        parts.append(_wall(start, end, (0.0, min(2.0, z_hi)), spec.lattice))
        layout["walls"].append((start, end))
    for _ in range(spec.n_cylinders):
        center = [rng.uniform(x_lo + margin, x_hi - margin),
                  rng.uniform(y_lo + margin, y_hi - margin)]
        radius = rng.uniform(0.2, 0.8)
        parts.append(_cylinder(center, radius, (0.0, min(1.5, z_hi)), spec.lattice))
        layout["cylinders"].append((center, radius))
    if spec.include_ground:
        xs = _lattice(x_lo, x_hi, spec.lattice * 4)
        ys = _lattice(y_lo, y_hi, spec.lattice * 4)
        xx, yy = np.meshgrid(xs, ys)
        parts.append(np.column_stack([xx.ravel(), yy.ravel(), np.zeros(xx.size)]))
    if not parts:
        return np.zeros((0, 3)), layout
    pts = np.concatenate(parts)
    keep = (
        (pts[:, 0] >= x_lo) & (pts[:, 0] <= x_hi)
        & (pts[:, 1] >= y_lo) & (pts[:, 1] <= y_hi)
        & (pts[:, 2] >= z_lo) & (pts[:, 2] <= z_hi)
    )
    return pts[keep], layout


def degrade(lidar: PointCloud, spec: SceneSpec, rng) -> PointCloud:
    """Radar-like degradation: subsample, jitter, and add uniform ghosts."""
    if spec.keep_mode == "column":
        keys = np.floor(lidar.xyz[:, :2] / spec.column_cell).astype(np.int64)
        _, inv = np.unique(keys, axis=0, return_inverse=True)
        col_keep = rng.random(inv.max() + 1) < spec.p_keep
        keep = col_keep[inv]
    else:
        keep = rng.random(len(lidar)) < spec.p_keep
    pts = lidar.xyz[keep]
    if spec.noise_std > 0:
        pts = pts + rng.normal(0.0, spec.noise_std, size=pts.shape)
    if spec.n_ghosts > 0:
        ghosts = np.column_stack([
            rng.uniform(spec.x_range[0], spec.x_range[1], spec.n_ghosts),
            rng.uniform(spec.y_range[0], spec.y_range[1], spec.n_ghosts),
            rng.uniform(spec.z_range[0], spec.z_range[1], spec.n_ghosts),
        ])
        pts = np.concatenate([pts, ghosts])
    return PointCloud(pts, frame_id=lidar.frame_id)


def generate_scene(spec: SceneSpec):
    """Deterministic (lidar, radar, layout) triple for the given spec seed."""
    rng = np.random.default_rng(spec.seed)
    pts, layout = _build_layout(spec, rng)
    lidar = PointCloud(pts, frame_id=f"scene-{spec.seed}")
    if spec.p_keep == 1.0 and spec.noise_std == 0 and spec.n_ghosts == 0:
        return lidar, lidar, layout
    return lidar, degrade(lidar, spec, rng), layout


def generate_trajectory(spec: SceneSpec, n_frames, step):
    """Observe a static scene from poses advancing by `step` meters in y,
    with small random yaw. Returns a list of (lidar, radar, pose) with the
    per-frame clouds expressed in the moving sensor frame; pose maps sensor
    coordinates into the world frame.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    rng = np.random.default_rng(spec.seed)
    pts, _ = _build_layout(spec, rng)
    world = PointCloud(pts)
    frames = []
    for k in range(n_frames):
        yaw = rng.uniform(-2.0, 2.0) if k > 0 else 0.0
        pose = RigidTransform.from_yaw_deg(yaw, (0.0, k * step, 0.0))
        lidar = transform(world, pose.inverse())
        lidar = PointCloud(lidar.xyz, frame_id=f"frame-{k:03d}")
        radar = degrade(lidar, spec, rng)
        frames.append((lidar, radar, pose))
    return frames
