"""The full octree U-Net: encoder, coarse-to-fine decoder, loss, and
checkpoint serialization.

Training uses teacher forcing: the decoder grows along the ground-truth
octree while every occupancy logit stays supervised. Inference grows the
octree from the network's own predictions.
"""
from __future__ import annotations

import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import Binding, ParamStore, Value
from .errors import ConfigError, FormatError, InputError
from .octree import (
    Octree,
    SupervisionTargets,
    leaf_local_means,
    points_from_octree,
)

CKPT_MAGIC = b"OUNT"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    channels[i] is the width at level full_depth + i, so the deepest level is
    last (the paper-scale preset is [256, 256, 128, 128, 64, 64, 32] for
    levels 2..8 with the narrow end at depth 8).
    """

    max_depth: int = 8
    full_depth: int = 2
    channels: tuple = (256, 256, 128, 128, 64, 64, 32)
    norm: str = "gn"
    group_size: int = 8
    blocks: int = 2

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != self.max_depth - self.full_depth + 1:
            raise ConfigError(
                f"channels needs {self.max_depth - self.full_depth + 1} entries "
                f"for levels {self.full_depth}..{self.max_depth}, got {len(self.channels)}"
            )
        if self.norm not in ("gn", "bn"):
            raise ConfigError(f"norm must be 'gn' or 'bn', got {self.norm!r}")

    def width(self, level: int) -> int:
        return self.channels[level - self.full_depth]

    def to_dict(self) -> dict:
        return {
            "max_depth": self.max_depth,
            "full_depth": self.full_depth,
            "channels": list(self.channels),
            "norm": self.norm,
            "group_size": self.group_size,
            "blocks": self.blocks,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            d["max_depth"], d["full_depth"], tuple(d["channels"]),
            d["norm"], d["group_size"], d["blocks"],
        )


@dataclass
class LossBreakdown:
    """Structure losses per level plus the displacement regression loss."""

    structure: dict  # level -> float
    regression: float
    total: float


@dataclass
class InferResult:
    points: np.ndarray
    sample_ids: np.ndarray
    degenerate: bool = False

    def per_sample(self, num_samples: int) -> list:
        return [self.points[self.sample_ids == i] for i in range(num_samples)]


class Model:
    """Parameter store plus forward passes."""

    def __init__(self, cfg: ModelConfig, store: ParamStore):
        self.cfg = cfg
        self.store = store
        self.training = True

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int, dtype=np.float32) -> "Model":
        rng = np.random.Generator(np.random.PCG64(seed))
        store = ParamStore(dtype)
        fd, d = cfg.full_depth, cfg.max_depth
        layers.init_conv(store, "enc.stem", 1, 3, cfg.width(d), rng)
        for l in range(d, fd - 1, -1):
            for b in range(cfg.blocks):
                layers.init_residual_block(store, f"enc.l{l}.b{b}", cfg.width(l), cfg.norm, rng)
            if l > fd:
                layers.init_conv(store, f"enc.down{l}", 8, cfg.width(l), cfg.width(l - 1), rng)
        for l in range(fd, d + 1):
            for b in range(cfg.blocks):
                layers.init_residual_block(store, f"dec.l{l}.b{b}", cfg.width(l), cfg.norm, rng)
            if l > fd:
                layers.init_conv(store, f"dec.up{l}", 8, cfg.width(l - 1), cfg.width(l), rng)
            layers.init_head(store, f"head.occ{l}", cfg.width(l), 2, rng)
        layers.init_head(store, "head.disp", cfg.width(d), 3, rng)
        return cls(cfg, store)

    # -- forward ------------------------------------------------------------

    def _blocks(self, ctx, x, nodes, prefix):
        for b in range(self.cfg.blocks):
            x = layers.residual_block(
                ctx, x, nodes, f"{prefix}.b{b}", self.cfg.norm, self.cfg.group_size,
                self.training,
            )
        return x

    def encode(self, ctx: Binding, oct: Octree, points_per_sample: list) -> dict:
        """Bottom-up feature extraction; returns per-level features on the
        input octree's node sets (levels max_depth down to full_depth)."""
        cfg = self.cfg
        if oct.max_depth != cfg.max_depth or oct.full_depth != cfg.full_depth:
            raise ConfigError("octree depths do not match the model config")
        local = leaf_local_means(oct, points_per_sample).astype(self.store.dtype)
        x = layers.linear(ctx, ad.constant(local), "enc.stem")
        feats = {}
        for l in range(cfg.max_depth, cfg.full_depth - 1, -1):
            nodes = oct.level(l)
            x = self._blocks(ctx, x, nodes, f"enc.l{l}")
            feats[l] = x
            if l > cfg.full_depth:
                x = layers.downsample(ctx, x, oct.level(l - 1), nodes, f"enc.down{l}")
        return feats

    def _decode(self, ctx, enc_feats, input_oct, targets: SupervisionTargets | None):
        """Shared decoder loop. With targets the growth is teacher forced and
        losses are produced; without, occupancy predictions drive the growth."""
        cfg = self.cfg
        fd, d = cfg.full_depth, cfg.max_depth
        nodes = input_oct.level(fd)  # the complete grid at full_depth
        x = enc_feats[fd]
        struct_losses = {}
        degenerate = False
        for l in range(fd, d + 1):
            if l > fd:
                children = parents.children()
                x = layers.upsample(ctx, x, parents, children, f"dec.up{l}")
                nodes = children
            x = self._blocks(ctx, x, nodes, f"dec.l{l}")
            logits = layers.head(ctx, x, f"head.occ{l}")
            if targets is not None:
                status = targets.labels[l]
                struct_losses[l] = ad.softmax_cross_entropy(logits, status)
            else:
                status = (logits.data[:, 1] >= logits.data[:, 0]).astype(np.int64)
            keep = np.flatnonzero(status == 1)
            if len(keep) == 0:
                degenerate = True
                break
            parents = nodes.subset(keep)
            x = ad.gather_rows(x, keep, unique_per_col=True)
            x = layers.guided_skip(x, enc_feats[l], parents, input_oct.level(l))
        if degenerate:
            return struct_losses, None, nodes, None, True
        disp = layers.head(ctx, x, "head.disp")
        return struct_losses, disp, parents, x, False

    def decode_train(
        self, ctx: Binding, enc_feats: dict, input_oct: Octree, targets: SupervisionTargets
    ) -> tuple[Value, LossBreakdown]:
        """Teacher-forced decode; returns the scalar total loss Value and its
        breakdown (sum of per-level structure losses plus regression)."""
        struct_losses, disp, leaves, _, degenerate = self._decode(
            ctx, enc_feats, input_oct, targets
        )
        if degenerate:
            raise InputError("teacher-forced decode met an all-empty level")
        reg = ad.mse(disp, ad.constant(targets.local_coords.astype(self.store.dtype)))
        total = reg
        for l in sorted(struct_losses):
            total = ad.add(total, struct_losses[l])
        breakdown = LossBreakdown(
            {l: float(v.data) for l, v in sorted(struct_losses.items())},
            float(reg.data),
            float(total.data),
        )
        return total, breakdown

    def decode_infer(self, ctx: Binding, enc_feats: dict, input_oct: Octree) -> InferResult:
        """Free-running decode; always returns a point cloud."""
        _, disp, leaves, _, degenerate = self._decode(ctx, enc_feats, input_oct, None)
        if degenerate:
            warnings.warn("degenerate decode: no node predicted non-empty; emitting cell centers")
            centers, _ = leaves.cell_geometry()
            return InferResult(centers, leaves.sample_ids.copy(), True)
        pts = points_from_octree(leaves, disp.data.astype(np.float64))
        return InferResult(pts, leaves.sample_ids.copy(), False)

    def forward_train(self, input_oct, input_points, targets):
        ctx = self.store.binding()
        enc = self.encode(ctx, input_oct, input_points)
        total, breakdown = self.decode_train(ctx, enc, input_oct, targets)
        return ctx, total, breakdown

    def infer(self, input_oct, input_points) -> InferResult:
        was_training = self.training
        self.training = False
        try:
            ctx = self.store.binding()
            enc = self.encode(ctx, input_oct, input_points)
            return self.decode_infer(ctx, enc, input_oct)
        finally:
            self.training = was_training


def count_match(pts: np.ndarray, target_count: int, seed: int = 0) -> np.ndarray:
    """Resample a cloud to an exact point count.

    Excess points are removed by farthest point sampling; missing points are
    filled by duplicating random points with tiny Gaussian jitter.
    """
    from .metrics import farthest_point_sample

    pts = np.asarray(pts, dtype=np.float64)
    if target_count < 1:
        raise InputError("target_count must be >= 1")
    if len(pts) == 0:
        raise InputError("cannot count-match an empty cloud")
    if len(pts) == target_count:
        return pts.copy()
    if len(pts) > target_count:
        return farthest_point_sample(pts, target_count, start=0)
    rng = np.random.Generator(np.random.PCG64(seed))
    extra_idx = rng.integers(0, len(pts), size=target_count - len(pts))
    extra = pts[extra_idx] + rng.normal(0.0, 1e-4, size=(len(extra_idx), 3))
    return np.concatenate([pts, extra])


# ---------------------------------------------------------------------------
# Checkpoint format: magic "OUNT", u32 version, u32 JSON header length, JSON
# header, then per-tensor records (u16 name length, name, u8 rank, u64 dims,
# f32 little-endian row-major data). Bit-exact round-trip.
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, step: int = 0) -> None:
    header = json.dumps(
        {"config": model.cfg.to_dict(), "step": step}, sort_keys=True
    ).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", CKPT_VERSION, len(header)))
        f.write(header)
        for name, param in model.store.items():
            data = np.ascontiguousarray(param.data, dtype="<f4")
            encoded = name.encode()
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[Model, int]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12 : 12 + header_len])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: corrupt checkpoint header") from exc
    cfg = ModelConfig.from_dict(header["config"])
    reference = Model.init(cfg, seed=0, dtype=dtype)
    offset = 12 + header_len
    loaded = {}
    while offset < len(blob):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset : offset + name_len].decode()
        offset += name_len
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        dims = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims)
        offset += 4 * size
        loaded[name] = data
    for name, param in reference.store.items():
        if name not in loaded:
            raise FormatError(f"{path}: missing tensor {name!r}")
        if loaded[name].shape != param.data.shape:
            raise FormatError(f"{path}: tensor {name!r} has wrong shape")
        param.data[...] = loaded[name].astype(dtype)
    return reference, int(header["step"])
