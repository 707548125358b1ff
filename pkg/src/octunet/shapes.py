"""Analytic surfaces: signed-distance evaluation and seeded surface sampling.

These stand in for mesh datasets. Every kind provides a signed distance that
is exactly zero on sampled points, so they double as ground-truth references
for point-to-surface evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError

KINDS = ("sphere", "torus", "box", "superellipsoid")


@dataclass(frozen=True)
class ShapeSpec:
    """Analytic surface description with an optional rigid pose.

    params by kind:
      sphere:         r
      torus:          R (major), r (minor)
      box:            hx, hy, hz (half extents)
      superellipsoid: ax, ay, az (semi-axes), e (exponent, >= 1)
    """

    kind: str
    params: dict = field(default_factory=dict)
    rotation: tuple | None = None  # 3x3 row-major, None = identity
    offset: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown shape kind {self.kind!r}; expected one of {KINDS}")
        for key, val in self.params.items():
            if key != "e" and val <= 0:
                raise ConfigError(f"{self.kind} parameter {key}={val} must be positive")
        if self.kind == "superellipsoid" and self.params.get("e", 2.0) < 1.0:
            raise ConfigError("superellipsoid exponent e must be >= 1")

    def rot(self) -> np.ndarray:
        return np.eye(3) if self.rotation is None else np.asarray(self.rotation, dtype=np.float64)


def _sdf_sphere(p, r):
    return np.linalg.norm(p, axis=1) - r


def _sdf_torus(p, R, r):
    q = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - R
    return np.sqrt(q**2 + p[:, 2] ** 2) - r


def _sdf_box(p, h):
    q = np.abs(p) - h
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _sdf_superellipsoid(p, a, e):
    # Radial signed distance: exact zero on the surface and correctly signed,
    # but not the Euclidean distance away from it.
    norm = np.linalg.norm(p, axis=1)
    f = (np.abs(p / a) ** e).sum(axis=1)
    safe = np.maximum(norm, 1e-300)
    f = np.maximum(f, 1e-300)
    return np.where(norm == 0.0, -a.min(), safe * (1.0 - f ** (-1.0 / e)))


def sdf(spec: ShapeSpec, pts: np.ndarray) -> np.ndarray:
    """Signed distance of each point to the surface (negative inside)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    local = (pts - np.asarray(spec.offset)) @ spec.rot()
    p = spec.params
    if spec.kind == "sphere":
        return _sdf_sphere(local, p["r"])
    if spec.kind == "torus":
        return _sdf_torus(local, p["R"], p["r"])
    if spec.kind == "box":
        return _sdf_box(local, np.array([p["hx"], p["hy"], p["hz"]]))
    return _sdf_superellipsoid(local, np.array([p["ax"], p["ay"], p["az"]]), p["e"])


def _unit_dirs(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_sphere(rng, n, r):
    return r * _unit_dirs(rng, n)


def _sample_torus(rng, n, R, r):
    # Area-weighted: accept v with probability proportional to (R + r*cos v).
    out = np.empty((0, 3))
    while len(out) < n:
        m = max(2 * (n - len(out)), 64)
        u = rng.uniform(0.0, 2 * np.pi, m)
        v = rng.uniform(0.0, 2 * np.pi, m)
        accept = rng.random(m) < (R + r * np.cos(v)) / (R + r)
        u, v = u[accept], v[accept]
        ring = R + r * np.cos(v)
        pts = np.stack([ring * np.cos(u), ring * np.sin(u), r * np.sin(v)], axis=1)
        out = np.concatenate([out, pts])
    return out[:n]


def _sample_box(rng, n, h):
    areas = np.array([h[1] * h[2], h[0] * h[2], h[0] * h[1]], dtype=np.float64)
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    side = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * h
    pts[np.arange(n), face_axis] = side * h[face_axis]
    return pts


def _sample_superellipsoid(rng, n, a, e):
    d = _unit_dirs(rng, n)
    t = ((np.abs(d / a) ** e).sum(axis=1)) ** (-1.0 / e)
    return t[:, None] * d


def sample_surface(spec: ShapeSpec, n: int, seed: int) -> np.ndarray:
    """Draw n points on the surface; deterministic per seed."""
    if n < 1:
        raise InputError(f"sample count must be >= 1, got {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    p = spec.params
    if spec.kind == "sphere":
        local = _sample_sphere(rng, n, p["r"])
    elif spec.kind == "torus":
        local = _sample_torus(rng, n, p["R"], p["r"])
    elif spec.kind == "box":
        local = _sample_box(rng, n, np.array([p["hx"], p["hy"], p["hz"]]))
    else:
        local = _sample_superellipsoid(rng, n, np.array([p["ax"], p["ay"], p["az"]]), p["e"])
    return local @ spec.rot().T + np.asarray(spec.offset)


def parse_shape(text: str) -> ShapeSpec:
    """Parse a CLI shape string like 'sphere:r=0.8' or 'torus:R=0.6,r=0.25'."""
    kind, _, rest = text.partition(":")
    kind = kind.strip()
    if kind not in KINDS:
        raise ConfigError(f"unknown shape kind {kind!r} in {text!r}")
    params = {}
    if rest:
        for item in rest.split(","):
            key, _, val = item.partition("=")
            if not val:
                raise ConfigError(f"malformed shape parameter {item!r} in {text!r}")
            params[key.strip()] = float(val)
    defaults = {
        "sphere": {"r": 0.8},
        "torus": {"R": 0.6, "r": 0.25},
        "box": {"hx": 0.7, "hy": 0.5, "hz": 0.4},
        "superellipsoid": {"ax": 0.7, "ay": 0.6, "az": 0.5, "e": 4.0},
    }[kind]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown {kind} parameter(s) {sorted(unknown)} in {text!r}")
    defaults.update(params)
    return ShapeSpec(kind, defaults)


def shape_to_dict(spec: ShapeSpec) -> dict:
    return {"kind": spec.kind, "params": dict(spec.params), "offset": list(spec.offset)}


def shape_from_dict(d: dict) -> ShapeSpec:
    return ShapeSpec(d["kind"], dict(d["params"]), offset=tuple(d.get("offset", (0, 0, 0))))
