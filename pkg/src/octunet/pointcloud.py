"""Point cloud utilities: normalization, noise, augmentation, and file I/O.

A point cloud is a float64 numpy array of shape (n, 3). All randomness is
driven by explicit seeds so every operation is reproducible.
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import FormatError, InputError

PCB_MAGIC = b"PCB1"

# Points produced by noise/augmentation are kept strictly inside the cube so
# octree construction never sees a coordinate on the open boundary.
CUBE_EPS = 1e-6


def as_points(arr) -> np.ndarray:
    pts = np.asarray(arr, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise InputError(f"expected (n, 3) point array, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise InputError("point cloud contains non-finite coordinates")
    return pts


def normalize_unit_cube(pts: np.ndarray) -> tuple[np.ndarray, tuple[float, np.ndarray]]:
    """Uniformly scale and center a cloud into [-1, 1]^3.

    Returns the normalized cloud and a (scale, offset) pair with
    ``out = pts * scale + offset``; the longest bounding-box axis maps onto
    [-1, 1]. A degenerate cloud (zero extent) is centered with scale 1.
    """
    pts = as_points(pts)
    if len(pts) == 0:
        raise InputError("cannot normalize an empty point cloud")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float((hi - lo).max())
    scale = 1.0 if extent == 0.0 else 2.0 / extent
    center = (lo + hi) / 2.0
    offset = -center * scale
    return pts * scale + offset, (scale, offset)


def denormalize(pts: np.ndarray, transform: tuple[float, np.ndarray]) -> np.ndarray:
    scale, offset = transform
    return (as_points(pts) - offset) / scale


def bounding_sphere_radius(pts: np.ndarray) -> float:
    """Max distance from the centroid; cheap bounding-sphere approximation."""
    pts = as_points(pts)
    if len(pts) == 0:
        raise InputError("empty point cloud has no bounding sphere")
    centroid = pts.mean(axis=0)
    return float(np.sqrt(((pts - centroid) ** 2).sum(axis=1).max()))


def add_gaussian_noise(pts: np.ndarray, sigma_fraction: float, seed: int) -> np.ndarray:
    """Perturb each coordinate by i.i.d. Gaussian noise.

    The standard deviation is ``sigma_fraction`` times the bounding-sphere
    radius. Results are clamped into the open unit cube so downstream octree
    construction stays valid; input/output correspondence by index is kept.
    """
    pts = as_points(pts)
    if len(pts) == 0:
        raise InputError("cannot add noise to an empty point cloud")
    if sigma_fraction < 0:
        raise InputError("sigma_fraction must be non-negative")
    if sigma_fraction == 0:
        return pts.copy()
    sigma = sigma_fraction * bounding_sphere_radius(pts)
    rng = np.random.Generator(np.random.PCG64(seed))
    noisy = pts + rng.normal(0.0, sigma, size=pts.shape)
    return np.clip(noisy, -1.0 + CUBE_EPS, 1.0 - CUBE_EPS)


def _elastic_field(rng: np.random.Generator, spacing: float, magnitude: float):
    """Random displacement vectors on a coarse grid covering [-1, 1]^3."""
    # One cell of margin on each side so trilinear lookups never leave the grid.
    coords = np.arange(-1.0 - spacing, 1.0 + 2 * spacing, spacing)
    vecs = rng.normal(0.0, magnitude, size=(len(coords),) * 3 + (3,))
    return coords, vecs


def _trilinear(coords: np.ndarray, vecs: np.ndarray, pts: np.ndarray) -> np.ndarray:
    spacing = coords[1] - coords[0]
    rel = (pts - coords[0]) / spacing
    i0 = np.clip(np.floor(rel).astype(int), 0, len(coords) - 2)
    frac = rel - i0
    out = np.zeros_like(pts)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (
                    (frac[:, 0] if dx else 1 - frac[:, 0])
                    * (frac[:, 1] if dy else 1 - frac[:, 1])
                    * (frac[:, 2] if dz else 1 - frac[:, 2])
                )
                out += w[:, None] * vecs[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    return out


def augment_pair(
    a: np.ndarray,
    b: np.ndarray,
    seed: int,
    mirror_prob: float = 0.5,
    elastic_spacing: float = 0.4,
    elastic_magnitude: float = 0.08,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one random mirror + elastic deformation to both clouds.

    Both members see the exact same transform, preserving their geometric
    correspondence. Deterministic per seed.
    """
    a = as_points(a)
    b = as_points(b)
    rng = np.random.Generator(np.random.PCG64(seed))
    flips = np.where(rng.random(3) < mirror_prob, -1.0, 1.0)
    a = a * flips
    b = b * flips
    if elastic_magnitude > 0:
        coords, vecs = _elastic_field(rng, elastic_spacing, elastic_magnitude)
        a = a + _trilinear(coords, vecs, a)
        b = b + _trilinear(coords, vecs, b)
    bound = 1.0 - CUBE_EPS
    return np.clip(a, -bound, bound), np.clip(b, -bound, bound)


# ---------------------------------------------------------------------------
# File formats: ASCII .xyz and binary .pcb
# ---------------------------------------------------------------------------

def write_xyz(path, pts: np.ndarray) -> None:
    pts = as_points(pts)
    with open(path, "w") as f:
        for x, y, z in pts:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            parts = stripped.split()
            if len(parts) != 3:
                raise FormatError(f"{path}: line {lineno}: expected 3 values, got {len(parts)}")
            try:
                rows.append([float(v) for v in parts])
            except ValueError as exc:
                raise FormatError(f"{path}: line {lineno}: {exc}") from exc
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def write_pcb(path, pts: np.ndarray) -> None:
    pts = as_points(pts).astype("<f4")
    with open(path, "wb") as f:
        f.write(PCB_MAGIC)
        f.write(struct.pack("<Q", len(pts)))
        f.write(pts.tobytes())


def read_pcb(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != PCB_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {PCB_MAGIC!r}")
        (count,) = struct.unpack("<Q", f.read(8))
        raw = f.read(count * 12)
        if len(raw) != count * 12:
            raise FormatError(f"{path}: truncated payload ({len(raw)} bytes for {count} points)")
    return np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(-1, 3)


def _format_of(path: str) -> str:
    if path.endswith(".pcb"):
        return "pcb"
    if path.endswith(".xyz"):
        return "xyz"
    raise InputError(f"{path}: unsupported point-cloud extension (expected .xyz or .pcb)")


def read_points(path) -> np.ndarray:
    path = str(path)
    return read_pcb(path) if _format_of(path) == "pcb" else read_xyz(path)


def write_points(path, pts: np.ndarray) -> None:
    path = str(path)
    if _format_of(path) == "pcb":
        write_pcb(path, pts)
    else:
        write_xyz(path, pts)
