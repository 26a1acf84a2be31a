"""Toy point datasets and the binary / CSV matrix formats."""

from __future__ import annotations

import csv
import math
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MATRIX_MAGIC = b"VAPD"
MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class MatrixFormatError(ValueError):
    """Raised for malformed, truncated or corrupt matrix files."""


@dataclass
class Dataset:
    """An ``N x D`` point cloud, optionally stored in standardized coordinates.

    When ``mean``/``scale`` are set, ``points`` holds ``(raw - mean) / scale``.
    """

    points: np.ndarray
    name: str = "data"
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 1 or self.points.shape[1] < 1:
            raise ValueError(f"points must be a non-empty N x D matrix, got shape {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if (self.mean is None) != (self.scale is None):
            raise ValueError("mean and scale must be given together")
        if self.scale is not None and np.any(np.asarray(self.scale) <= 0):
            raise ValueError("standardization scale must be positive")

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    def __len__(self):
        return len(self.points)

    def to_model_space(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        return raw if self.mean is None else (raw - self.mean) / self.scale

    def to_data_space(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z if self.mean is None else z * self.scale + self.mean

    def raw_points(self):
        return self.to_data_space(self.points)


def _require_n(n):
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")


def ring_centers(modes=8, radius=2.0):
    angles = 2.0 * np.pi * np.arange(modes) / modes
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def make_ring(n, modes=8, radius=2.0, mode_std=0.1, seed=0) -> Dataset:
    """Uniform mixture of ``modes`` isotropic Gaussians evenly spaced on a circle."""
    _require_n(n)
    if modes < 1:
        raise ValueError("modes must be at least 1")
    rng = np.random.default_rng(seed)
    centers = ring_centers(modes, radius)
    which = rng.integers(0, modes, size=n)
    pts = centers[which] + mode_std * rng.standard_normal((n, 2))
    return Dataset(pts, name=f"ring{modes}",
                   meta={"mode_centers": centers.tolist(), "mode_std": mode_std})


def make_moons(n, noise_std=0.05, seed=0) -> Dataset:
    """Two interleaving half circles with Gaussian jitter."""
    _require_n(n)
    rng = np.random.default_rng(seed)
    n_outer = (n + 1) // 2
    theta = np.pi * rng.random(n)
    outer = np.stack([np.cos(theta), np.sin(theta)], axis=1)
    inner = np.stack([1.0 - np.cos(theta), 0.5 - np.sin(theta)], axis=1)
    pts = np.where((np.arange(n) < n_outer)[:, None], outer, inner)
    pts = pts + noise_std * rng.standard_normal((n, 2))
    return Dataset(pts, name="moons")


def checkerboard_centers():
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    return np.array([[-1.5 + i, -1.5 + j] for i, j in cells])


def make_checkerboard(n, seed=0) -> Dataset:
    """Uniform density on the 8 dark cells of a 4 x 4 board covering [-2, 2]^2."""
    _require_n(n)
    rng = np.random.default_rng(seed)
    centers = checkerboard_centers()
    which = rng.integers(0, len(centers), size=n)
    pts = centers[which] + rng.random((n, 2)) - 0.5
    return Dataset(pts, name="checkerboard", meta={"mode_centers": centers.tolist()})


TOYS = {
    "ring8": lambda n, seed: make_ring(n, seed=seed),
    "moons": lambda n, seed: make_moons(n, seed=seed),
    "checkerboard": lambda n, seed: make_checkerboard(n, seed=seed),
}


def make_toy(name, n, seed) -> Dataset:
    try:
        return TOYS[name](n, seed)
    except KeyError:
        raise ValueError(f"unknown toy dataset {name!r}; choose from {sorted(TOYS)}") from None


def standardize(ds: Dataset) -> Dataset:
    """Per-dimension zero mean and unit variance; the transform is kept for inversion."""
    raw = ds.raw_points()
    mean = raw.mean(axis=0)
    scale = raw.std(axis=0)
    if np.any(scale <= 1e-12 * np.maximum(1.0, np.abs(mean))):
        raise ValueError("cannot standardize a zero-variance dimension")
    return replace(ds, points=(raw - mean) / scale, mean=mean, scale=scale)


def save_matrix(ds_or_points, path) -> None:
    """Write raw points in the VAPD format.

    Layout: magic ``VAPD``, u32 version, u64 N, u32 D, row-major little-endian
    float64 body, u32 CRC32 of the body.
    """
    pts = ds_or_points.raw_points() if isinstance(ds_or_points, Dataset) else ds_or_points
    pts = np.asarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise ValueError("refusing to save an empty matrix")
    if not np.all(np.isfinite(pts)):
        raise ValueError("matrix contains non-finite values")
    body = np.ascontiguousarray(pts, dtype="<f8").tobytes()
    Path(path).write_bytes(_HEADER.pack(MATRIX_MAGIC, MATRIX_VERSION, pts.shape[0], pts.shape[1])
                           + body + struct.pack("<I", zlib.crc32(body)))


def read_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MATRIX_MAGIC:
        raise MatrixFormatError(f"{path}: bad magic")
    if len(data) < _HEADER.size:
        raise MatrixFormatError(f"{path}: truncated header")
    _, version, n, d = _HEADER.unpack_from(data)
    if version != MATRIX_VERSION:
        raise MatrixFormatError(f"{path}: unsupported version {version}")
    if n == 0 or d == 0:
        raise MatrixFormatError(f"{path}: empty matrix")
    size = 8 * n * d
    if len(data) < _HEADER.size + size + 4:
        raise MatrixFormatError(f"{path}: truncated (expected {_HEADER.size + size + 4} bytes, "
                                f"got {len(data)})")
    if len(data) > _HEADER.size + size + 4:
        raise MatrixFormatError(f"{path}: trailing bytes after footer")
    body = data[_HEADER.size:_HEADER.size + size]
    (crc,) = struct.unpack_from("<I", data, _HEADER.size + size)
    if zlib.crc32(body) != crc:
        raise MatrixFormatError(f"{path}: CRC mismatch")
    pts = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(n, d)
    if not np.all(np.isfinite(pts)):
        raise MatrixFormatError(f"{path}: non-finite values")
    return pts


def load_matrix(path, name=None) -> Dataset:
    return Dataset(read_matrix(path), name=name or Path(path).stem)


def format_float(v: float) -> str:
    return f"{v:.9g}"


def write_csv(points, path, dim=None, extra_columns=None) -> None:
    """Write points with header ``x0,...,x{D-1}``; ``extra_columns`` are prepended integer columns."""
    pts = np.asarray(points, dtype=np.float64)
    if dim is None:
        dim = pts.shape[1]
    pts = pts.reshape(-1, dim)
    extra = extra_columns or {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(extra) + [f"x{j}" for j in range(dim)])
        for i, row in enumerate(pts):
            w.writerow([str(int(col[i])) for col in extra.values()] + [format_float(v) for v in row])


def read_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header = rows[0]
    cols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    if not cols:
        raise ValueError(f"{path}: no x0..x{{D-1}} columns")
    pts = np.array([[float(r[i]) for i in cols] for r in rows[1:]], dtype=np.float64)
    return pts.reshape(-1, len(cols))


def load_points(path) -> Dataset:
    """Load a ``.csv`` or VAPD matrix file by extension."""
    p = Path(path)
    if p.suffix.lower() == ".csv":
        pts = read_csv(p)
        if len(pts) == 0:
            raise ValueError(f"{path}: no rows")
        return Dataset(pts, name=p.stem)
    return load_matrix(p)


def split(ds: Dataset, frac: float, seed) -> tuple[Dataset, Dataset]:
    """Random split into ``(first, rest)`` with ``round(frac * N)`` points in the first part."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ds))
    k = int(math.floor(frac * len(ds) + 0.5))
    return replace(ds, points=ds.points[perm[:k]]), replace(ds, points=ds.points[perm[k:]])
