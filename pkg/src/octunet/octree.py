"""Linear Morton-key octree over [-1, 1]^3.

Nodes at every level are stored as sorted arrays of (sample id, Morton code)
pairs. Levels up to ``full_depth`` contain all 8^l cells per sample; deeper
levels contain exactly the cells occupied by points. All structures are
immutable after construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, InputError, ShapeMismatchError

SENTINEL = -1

_SID_SHIFT = np.uint64(48)  # codes use at most 3*16 bits
MAX_LEVEL = 21  # bit spreading supports 21 bits per axis

# x-major offset ordering for the 3x3x3 stencil: k = (dx+1)*9 + (dy+1)*3 + (dz+1)
NEIGHBOR_OFFSETS = np.array(
    [(dx, dy, dz) for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
    dtype=np.int64,
)


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits after each of the low 21 bits."""
    x = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact_bits(c: np.ndarray) -> np.ndarray:
    x = c.astype(np.uint64) & np.uint64(0x1249249249249249)
    x = (x | (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def morton_encode(x, y, z, level: int) -> np.ndarray:
    """Interleave integer cell coordinates into a Morton code (x most significant)."""
    if not 0 <= level <= MAX_LEVEL:
        raise DomainError(f"level {level} out of range [0, {MAX_LEVEL}]")
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    z = np.asarray(z, dtype=np.int64)
    limit = 1 << level
    for name, v in (("x", x), ("y", y), ("z", z)):
        if np.any(v < 0) or np.any(v >= limit):
            raise DomainError(f"{name} index out of range [0, {limit}) at level {level}")
    return (_spread_bits(x) << np.uint64(2)) | (_spread_bits(y) << np.uint64(1)) | _spread_bits(z)


def morton_decode(code, level: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0 <= level <= MAX_LEVEL:
        raise DomainError(f"level {level} out of range [0, {MAX_LEVEL}]")
    c = np.asarray(code, dtype=np.uint64)
    if 3 * level < 64 and np.any(c >= np.uint64(1) << np.uint64(3 * level)):
        raise DomainError(f"code out of range for level {level}")
    x = _compact_bits(c >> np.uint64(2)).astype(np.int64)
    y = _compact_bits(c >> np.uint64(1)).astype(np.int64)
    z = _compact_bits(c).astype(np.int64)
    return x, y, z


def point_cells(pts: np.ndarray, level: int) -> np.ndarray:
    """Morton code of the cell containing each point at the given level."""
    pts = np.asarray(pts, dtype=np.float64)
    if np.any(pts < -1.0) or np.any(pts > 1.0):
        raise DomainError("point outside [-1, 1]^3")
    n_cells = 1 << level
    idx = np.floor((pts + 1.0) * 0.5 * n_cells).astype(np.int64)
    np.clip(idx, 0, n_cells - 1, out=idx)  # points on the upper face join the last cell
    return morton_encode(idx[:, 0], idx[:, 1], idx[:, 2], level)


@dataclass
class NodeSet:
    """A sorted collection of octree nodes at one level, possibly multi-sample."""

    level: int
    codes: np.ndarray  # uint64
    sample_ids: np.ndarray  # int64, non-decreasing
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.uint64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        if len(self.codes) != len(self.sample_ids):
            raise ShapeMismatchError("codes and sample_ids length mismatch")

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def keys(self) -> np.ndarray:
        """Combined (sample id, code) key; strictly increasing."""
        k = self._cache.get("keys")
        if k is None:
            k = (self.sample_ids.astype(np.uint64) << _SID_SHIFT) | self.codes
            self._cache["keys"] = k
        return k

    def lookup(self, keys: np.ndarray) -> np.ndarray:
        """Row index of each combined key, SENTINEL where absent."""
        own = self.keys
        pos = np.searchsorted(own, keys)
        pos_c = np.minimum(pos, len(own) - 1) if len(own) else np.zeros_like(pos)
        hit = (len(own) > 0) & (own[pos_c] == keys)
        return np.where(hit, pos_c, SENTINEL).astype(np.int64)

    def cell_geometry(self) -> tuple[np.ndarray, float]:
        """(centers, half_size) of every cell in this set."""
        x, y, z = morton_decode(self.codes, self.level)
        half = 1.0 / (1 << self.level)
        centers = (np.stack([x, y, z], axis=1).astype(np.float64) * 2 + 1) * half - 1.0
        return centers, half

    def sample_slices(self) -> list[tuple[int, int, int]]:
        """(sample_id, start, stop) for each contiguous sample block."""
        if len(self) == 0:
            return []
        ids, starts = np.unique(self.sample_ids, return_index=True)
        stops = np.append(starts[1:], len(self))
        return [(int(i), int(a), int(b)) for i, a, b in zip(ids, starts, stops)]

    def neighbor_table(self) -> np.ndarray:
        """(n, 27) rows of the 3^3 stencil neighbors; SENTINEL where absent.

        Entry 13 (offset 0,0,0) is the node itself. Neighbors never cross
        sample ids or the cube boundary.
        """
        tab = self._cache.get("neighbors")
        if tab is not None:
            return tab
        n = len(self)
        x, y, z = morton_decode(self.codes, self.level)
        limit = 1 << self.level
        tab = np.full((n, 27), SENTINEL, dtype=np.int64)
        sid_part = self.sample_ids.astype(np.uint64) << _SID_SHIFT
        for k, (dx, dy, dz) in enumerate(NEIGHBOR_OFFSETS):
            nx, ny, nz = x + dx, y + dy, z + dz
            ok = (
                (nx >= 0) & (nx < limit) & (ny >= 0) & (ny < limit)
                & (nz >= 0) & (nz < limit)
            )
            if not ok.any():
                continue
            codes = morton_encode(nx[ok], ny[ok], nz[ok], self.level)
            rows = self.lookup(sid_part[ok] | codes)
            col = np.full(n, SENTINEL, dtype=np.int64)
            col[ok] = rows
            tab[:, k] = col
        self._cache["neighbors"] = tab
        return tab

    def children(self) -> "NodeSet":
        """All 8 child slots of every node, in sorted key order."""
        n = len(self)
        slots = np.tile(np.arange(8, dtype=np.uint64), n)
        codes = (np.repeat(self.codes, 8) << np.uint64(3)) | slots
        sids = np.repeat(self.sample_ids, 8)
        return NodeSet(self.level + 1, codes, sids)

    def parent_keys(self) -> np.ndarray:
        return (self.sample_ids.astype(np.uint64) << _SID_SHIFT) | (self.codes >> np.uint64(3))

    def child_slots(self) -> np.ndarray:
        return (self.codes & np.uint64(7)).astype(np.int64)

    def subset(self, mask_or_rows) -> "NodeSet":
        return NodeSet(self.level, self.codes[mask_or_rows], self.sample_ids[mask_or_rows])


def full_grid(level: int, num_samples: int = 1) -> NodeSet:
    codes = np.tile(np.arange(8**level, dtype=np.uint64), num_samples)
    sids = np.repeat(np.arange(num_samples, dtype=np.int64), 8**level)
    return NodeSet(level, codes, sids)


@dataclass
class Octree:
    """Linear octree: one NodeSet per level, full up to full_depth."""

    max_depth: int
    full_depth: int
    num_samples: int
    levels: list  # NodeSet per level 0..max_depth

    def level(self, l: int) -> NodeSet:
        return self.levels[l]


def build_octree(pts: np.ndarray, max_depth: int, full_depth: int) -> Octree:
    """Construct a single-sample octree from points in [-1, 1]^3."""
    pts = np.asarray(pts, dtype=np.float64)
    if len(pts) == 0:
        raise InputError("cannot build an octree from an empty point cloud")
    if not 0 <= full_depth <= max_depth:
        raise ConfigError(f"need 0 <= full_depth <= max_depth, got {full_depth}, {max_depth}")
    deepest = point_cells(pts, max_depth)
    levels = []
    for l in range(max_depth + 1):
        if l <= full_depth:
            levels.append(full_grid(l, 1))
        else:
            codes = np.unique(deepest >> np.uint64(3 * (max_depth - l)))
            levels.append(NodeSet(l, codes, np.zeros(len(codes), dtype=np.int64)))
    return Octree(max_depth, full_depth, 1, levels)


def batch_octrees(octrees: list) -> Octree:
    """Concatenate single-sample octrees; sample ids follow list order."""
    if not octrees:
        raise InputError("cannot batch zero octrees")
    d, fd = octrees[0].max_depth, octrees[0].full_depth
    for o in octrees:
        if (o.max_depth, o.full_depth) != (d, fd):
            raise ConfigError("all octrees in a batch must share max_depth and full_depth")
    levels = []
    for l in range(d + 1):
        codes = np.concatenate([o.levels[l].codes for o in octrees])
        sids = np.concatenate(
            [np.full(len(o.levels[l]), i, dtype=np.int64) for i, o in enumerate(octrees)]
        )
        levels.append(NodeSet(l, codes, sids))
    return Octree(d, fd, len(octrees), levels)


def unbatch_octree(oct: Octree) -> list:
    out = []
    for i in range(oct.num_samples):
        levels = []
        for l in range(oct.max_depth + 1):
            ns = oct.levels[l]
            mask = ns.sample_ids == i
            levels.append(NodeSet(l, ns.codes[mask], np.zeros(int(mask.sum()), dtype=np.int64)))
        out.append(Octree(oct.max_depth, oct.full_depth, 1, levels))
    return out


def leaf_local_means(oct: Octree, points_per_sample: list) -> np.ndarray:
    """Mean of contained points per deepest-level node, in half-cell units.

    Returns (n_leaf, 3) values in [-1, 1] (up to floating slack). Every leaf
    is occupied by construction, so counts are always positive.
    """
    leaf = oct.levels[oct.max_depth]
    sums = np.zeros((len(leaf), 3), dtype=np.float64)
    counts = np.zeros(len(leaf), dtype=np.int64)
    for sid, pts in enumerate(points_per_sample):
        pts = np.asarray(pts, dtype=np.float64)
        codes = point_cells(pts, oct.max_depth)
        keys = (np.uint64(sid) << _SID_SHIFT) | codes
        rows = leaf.lookup(keys)
        if np.any(rows == SENTINEL):
            raise InputError("points are inconsistent with the octree leaves")
        np.add.at(sums, rows, pts)
        np.add.at(counts, rows, 1)
    if np.any(counts == 0):
        raise InputError("octree has leaves not covered by the given points")
    means = sums / counts[:, None]
    centers, half = leaf.cell_geometry()
    return (means - centers) / half


@dataclass
class SupervisionTargets:
    """Per-level occupancy labels at the decoder's prediction sites.

    node_sets[full_depth] is the complete grid; each deeper node_sets[l] holds
    the 8 child slots of occupied level-(l-1) nodes. labels[l] marks which of
    those sites contain ground-truth points. local_coords aligns with the
    occupied deepest-level nodes (the ground-truth octree leaves).
    """

    full_depth: int
    max_depth: int
    node_sets: dict
    labels: dict
    local_coords: np.ndarray


def extract_targets(gt_oct: Octree, gt_points_per_sample: list) -> SupervisionTargets:
    fd, d = gt_oct.full_depth, gt_oct.max_depth
    node_sets, labels = {}, {}
    site = gt_oct.levels[fd]  # full grid at full_depth
    for l in range(fd, d + 1):
        occupied_keys = gt_oct.levels[l].keys if l > fd else None
        if l == fd:
            # Occupied cells at full_depth come from the point distribution.
            occ_codes = [
                np.unique(point_cells(np.asarray(p), fd)) for p in gt_points_per_sample
            ]
            occupied_keys = np.concatenate(
                [
                    (np.uint64(i) << _SID_SHIFT) | c
                    for i, c in enumerate(occ_codes)
                ]
            )
            occupied_keys.sort()
        lab = np.isin(site.keys, occupied_keys).astype(np.int64)
        node_sets[l] = site
        labels[l] = lab
        if l < d:
            site = site.subset(lab == 1).children()
    local = leaf_local_means(gt_oct, gt_points_per_sample)
    return SupervisionTargets(fd, d, node_sets, labels, local)


def points_from_octree(leaves: NodeSet, displacements: np.ndarray) -> np.ndarray:
    """One point per leaf: cell center + clamped displacement in half-cell units."""
    disp = np.asarray(displacements, dtype=np.float64)
    if disp.shape != (len(leaves), 3):
        raise ShapeMismatchError(
            f"displacements shape {disp.shape} does not match {len(leaves)} leaves"
        )
    centers, half = leaves.cell_geometry()
    return centers + np.clip(disp, -1.5, 1.5) * half
