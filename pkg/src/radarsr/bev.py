"""Bird's-eye-view rasterization of point clouds and back-projection.

Pixel values encode the highest point in each cell:
    g = clip((z_max_in_cell - gamma), 0, range_z) / range_z
stored normalized in [0, 1] and exported as 8-bit grayscale.

Grid orientation: row 0 sits at y = y_max (far edge), column 0 at x = x_min.
Points exactly on a max boundary are clamped into the last cell.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .pointcloud import PointCloud


@dataclass(frozen=True)
class BevGrid:
    width: int = 256
    height: int = 256
    x_range: tuple = (-15.0, 15.0)
    y_range: tuple = (0.0, 30.0)
    z_range: tuple = (-0.8, 1.7)
    gamma: float | None = None  # height threshold; defaults to z_min

    def __post_init__(self):
        if not (self.x_range[1] > self.x_range[0]
                and self.y_range[1] > self.y_range[0]
                and self.z_range[1] > self.z_range[0]):
            raise ValueError("ranges must have max > min")
        if self.gamma is None:
            object.__setattr__(self, "gamma", float(self.z_range[0]))

    @property
    def range_z(self):
        return self.z_range[1] - self.z_range[0]

    @property
    def cell_x(self):
        return (self.x_range[1] - self.x_range[0]) / self.width

    @property
    def cell_y(self):
        return (self.y_range[1] - self.y_range[0]) / self.height


@dataclass(frozen=True)
class BevImage:
    grid: BevGrid
    pixels: np.ndarray  # (height, width) float64 in [0, 1]

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.shape != (self.grid.height, self.grid.width):
            raise ValueError("pixel array does not match grid dimensions")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")
        object.__setattr__(self, "pixels", px)

    @classmethod
    def zeros(cls, grid: BevGrid):
        return cls(grid, np.zeros((grid.height, grid.width)))


def rasterize(cloud: PointCloud, grid: BevGrid) -> BevImage:
    """Project a cloud to a BEV grayscale image; out-of-range points are dropped."""
    xyz = cloud.xyz
    x, y, z = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    keep = (
        (x >= grid.x_range[0]) & (x <= grid.x_range[1])
        & (y >= grid.y_range[0]) & (y <= grid.y_range[1])
        & (z >= grid.z_range[0]) & (z <= grid.z_range[1])
    )
    x, y, z = x[keep], y[keep], z[keep]
    cols = np.minimum(
        ((x - grid.x_range[0]) / grid.cell_x).astype(np.int64), grid.width - 1
    )
    rows = np.minimum(
        ((grid.y_range[1] - y) / grid.cell_y).astype(np.int64), grid.height - 1
    )
    top = np.full((grid.height, grid.width), -np.inf)
    np.maximum.at(top, (rows, cols), z)
    pixels = np.zeros((grid.height, grid.width))
    hit = np.isfinite(top)
    pixels[hit] = np.clip(top[hit] - grid.gamma, 0.0, grid.range_z) / grid.range_z
    return BevImage(grid, pixels)


def back_project(img: BevImage, threshold: float = 1.0 / 255.0) -> PointCloud:
    """One point per pixel above threshold, at the pixel center, height from gray."""
    grid = img.grid
    rows, cols = np.nonzero(img.pixels > threshold)
    if rows.size == 0:
        return PointCloud.empty()
    g = img.pixels[rows, cols]
    x = grid.x_range[0] + (cols + 0.5) * grid.cell_x
    y = grid.y_range[1] - (rows + 0.5) * grid.cell_y
    z = g * grid.range_z + grid.gamma
    return PointCloud(np.column_stack([x, y, z]))


def mask_of(img: BevImage):
    """Occupied/blank masks (M, M_bar) as 0/1 float arrays; M + M_bar = 1."""
    m = (img.pixels > 0).astype(np.float64)
    return m, 1.0 - m


# ---------------------------------------------------------------------------
# image file I/O: 8-bit grayscale PGM (P5) and PNG, plus a grid sidecar

def quantize(img: BevImage) -> np.ndarray:
    """Normalized pixels to 8-bit gray, round(v * 255)."""
    return np.round(img.pixels * 255.0).astype(np.uint8)


def save_bev(img: BevImage, path):
    """Write PGM or PNG depending on the file extension."""
    path = str(path)
    data = quantize(img)
    if path.endswith(".pgm"):
        with open(path, "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (img.grid.width, img.grid.height))
            f.write(data.tobytes())
    elif path.endswith(".png"):
        Image.fromarray(data, mode="L").save(path)
    else:
        raise ValueError(f"unsupported image extension: {path!r}")


def load_bev(path, grid: BevGrid | None = None) -> BevImage:
    path = str(path)
    if path.endswith(".pgm"):
        with open(path, "rb") as f:
            if f.readline().strip() != b"P5":
                raise ValueError(f"{path!r}: not a binary PGM")
            dims = f.readline().split()
            width, height = int(dims[0]), int(dims[1])
            maxval = int(f.readline())
            if maxval != 255:
                raise ValueError(f"{path!r}: expected 8-bit PGM")
            data = np.frombuffer(f.read(width * height), dtype=np.uint8)
            data = data.reshape(height, width)
    elif path.endswith(".png"):
        with Image.open(path) as im:
            data = np.asarray(im.convert("L"))
        height, width = data.shape
    else:
        raise ValueError(f"unsupported image extension: {path!r}")
    if grid is None:
        grid = BevGrid(width=width, height=height)
    elif (grid.width, grid.height) != (width, height):
        raise ValueError(f"{path!r}: image size does not match grid")
    return BevImage(grid, data.astype(np.float64) / 255.0)


def save_grid_sidecar(grid: BevGrid, path):
    with open(path, "w") as f:
        f.write(f"width = {grid.width}\n")
        f.write(f"height = {grid.height}\n")
        f.write(f"x_min = {grid.x_range[0]:.17g}\n")
        f.write(f"x_max = {grid.x_range[1]:.17g}\n")
        f.write(f"y_min = {grid.y_range[0]:.17g}\n")
        f.write(f"y_max = {grid.y_range[1]:.17g}\n")
        f.write(f"z_min = {grid.z_range[0]:.17g}\n")
        f.write(f"z_max = {grid.z_range[1]:.17g}\n")
        f.write(f"gamma = {grid.gamma:.17g}\n")


def load_grid_sidecar(path) -> BevGrid:
    kv = {}
    with open(path) as f:
        for line in f:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            kv[key.strip()] = val.strip()
    return BevGrid(
        width=int(kv["width"]),
        height=int(kv["height"]),
        x_range=(float(kv["x_min"]), float(kv["x_max"])),
        y_range=(float(kv["y_min"]), float(kv["y_max"])),
        z_range=(float(kv["z_min"]), float(kv["z_max"])),
        gamma=float(kv["gamma"]),
    )
