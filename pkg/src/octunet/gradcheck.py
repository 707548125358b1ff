"""Finite-difference validation of every layer and the full network.

All checks run in float64; the training dtype (float32) is too coarse for
central differences.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import layers
from .autodiff import ParamStore, grad_check
from .model import Model, ModelConfig
from .octree import build_octree
from .shapes import ShapeSpec
from .train import assemble_batch, make_sample

TOL = 1e-4


def _toy_nodes(seed: int, depth: int = 3, full_depth: int = 1, n_points: int = 40):
    rng = np.random.Generator(np.random.PCG64(seed))
    pts = rng.uniform(-0.95, 0.95, size=(n_points, 3))
    oct = build_octree(pts, depth, full_depth)
    return oct, pts


def _weighted_sum(out, rng):
    """Reduce a matrix output to a scalar through a fixed random weighting."""
    w = ad.constant(rng.normal(size=out.data.shape))
    return ad.sum_all(ad.mul(out, w))


def check_layer(name: str, seed: int = 0) -> dict:
    """Gradient-check one named layer on a toy octree."""
    rng = np.random.Generator(np.random.PCG64(seed))
    oct, _ = _toy_nodes(seed)
    nodes = oct.level(oct.max_depth)
    coarse = oct.level(oct.max_depth - 1)
    c = 8
    x_data = rng.normal(size=(len(nodes), c))
    store = ParamStore(np.float64)

    if name == "octree_conv":
        layers.init_conv(store, "conv", 27, c, c, rng)
        fn = lambda ctx: _weighted_sum(
            layers.octree_conv(ctx, ad.constant(x_data), nodes, "conv"), _r(seed)
        )
    elif name == "downsample":
        layers.init_conv(store, "down", 8, c, c, rng)
        fn = lambda ctx: _weighted_sum(
            layers.downsample(ctx, ad.constant(x_data), coarse, nodes, "down"), _r(seed)
        )
    elif name == "upsample":
        layers.init_conv(store, "up", 8, c, c, rng)
        xc = rng.normal(size=(len(coarse), c))
        fn = lambda ctx: _weighted_sum(
            layers.upsample(ctx, ad.constant(xc), coarse, nodes, "up"), _r(seed)
        )
    elif name in ("norm_gn", "norm_bn"):
        kind = name.split("_")[1]
        layers.init_norm(store, "norm", c, kind)
        fn = lambda ctx: _weighted_sum(
            layers.octree_norm(ctx, ad.constant(x_data), nodes, "norm", kind, 4, True),
            _r(seed),
        )
    elif name == "residual_block":
        layers.init_residual_block(store, "blk", c, "gn", rng)
        # Bias offset keeps relu inputs away from the kink.
        fn = lambda ctx: _weighted_sum(
            layers.residual_block(ctx, ad.constant(x_data), nodes, "blk", "gn", 4, True),
            _r(seed),
        )
    elif name == "occupancy_head":
        layers.init_head(store, "occ", c, 2, rng)
        labels = _r(seed).integers(0, 2, size=len(nodes))
        fn = lambda ctx: ad.softmax_cross_entropy(
            layers.head(ctx, ad.constant(x_data), "occ"), labels
        )
    elif name == "displacement_head":
        layers.init_head(store, "disp", c, 3, rng)
        target = _r(seed).normal(size=(len(nodes), 3))
        fn = lambda ctx: ad.mse(
            layers.head(ctx, ad.constant(x_data), "disp"), ad.constant(target)
        )
    elif name == "guided_skip":
        layers.init_conv(store, "lift", 1, c, c, rng)
        enc_data = rng.normal(size=(len(nodes), c))
        sub = nodes.subset(np.arange(0, len(nodes), 2))
        fn = lambda ctx: _weighted_sum(
            layers.guided_skip(
                layers.linear(ctx, ad.constant(x_data[:: 2]), "lift"),
                ad.constant(enc_data),
                sub,
                nodes,
            ),
            _r(seed),
        )
    else:
        raise ValueError(f"unknown layer {name!r}")
    report = grad_check(fn, store, _r(seed + 1), coords_per_param=3, tol=TOL)
    report["layer"] = name
    return report


def _r(seed):
    return np.random.Generator(np.random.PCG64(seed + 977))


LAYER_NAMES = (
    "octree_conv",
    "downsample",
    "upsample",
    "norm_gn",
    "norm_bn",
    "residual_block",
    "occupancy_head",
    "displacement_head",
    "guided_skip",
)


def check_full_model(seed: int = 0, toy_depth: int = 4) -> dict:
    """Gradient-check the complete loss on a toy two-sample batch."""
    full_depth = 2
    channels = [16] * (toy_depth - full_depth) + [8]
    cfg = ModelConfig(toy_depth, full_depth, tuple(channels), norm="gn", blocks=2)
    model = Model.init(cfg, seed=seed, dtype=np.float64)
    shapes = [ShapeSpec("sphere", {"r": 0.7}), ShapeSpec("torus", {"R": 0.55, "r": 0.2})]
    samples = [
        make_sample(shapes[0], "clean", (40, 80), 0.02, seed + 1, augment=False),
        make_sample(shapes[1], "upsample", (40, 80), 0.0, seed + 2, augment=False),
    ]
    input_oct, input_points, targets = assemble_batch(samples, cfg)

    def fn(ctx):
        enc = model.encode(ctx, input_oct, input_points)
        total, _ = model.decode_train(ctx, enc, input_oct, targets)
        return total

    report = grad_check(fn, model.store, _r(seed + 3), coords_per_param=2, tol=TOL)
    report["layer"] = "full_model"
    return report


def run_all(seed: int = 0, toy_depth: int = 4) -> list:
    reports = [check_layer(name, seed) for name in LAYER_NAMES]
    reports.append(check_full_model(seed, toy_depth))
    return reports
