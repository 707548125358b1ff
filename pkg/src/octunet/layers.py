"""Octree network building blocks: sparse convolutions, level-changing
resampling, normalization, residual blocks, prediction heads, and the
output-guided skip connection.

Every layer is a pure function of (binding, inputs); parameters live in a
ParamStore and are referenced by name prefix.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Binding, Value
from .errors import ConfigError
from .octree import SENTINEL, NodeSet, _SID_SHIFT


# ---------------------------------------------------------------------------
# Parameter creation
# ---------------------------------------------------------------------------

def init_conv(store, name: str, taps: int, c_in: int, c_out: int, rng) -> None:
    std = np.sqrt(2.0 / (taps * c_in))
    store.add(f"{name}.weight", rng.normal(0.0, std, size=(taps * c_in, c_out)))
    store.add(f"{name}.bias", np.zeros((1, c_out)))


def init_norm(store, name: str, channels: int, kind: str) -> None:
    store.add(f"{name}.gamma", np.ones((1, channels)))
    store.add(f"{name}.beta", np.zeros((1, channels)))
    if kind == "bn":
        store.add(f"{name}.running_mean", np.zeros(channels), trainable=False)
        store.add(f"{name}.running_var", np.ones(channels), trainable=False)


def init_head(store, name: str, c_in: int, c_out: int, rng) -> None:
    hidden = max(2, c_in // 2)
    init_conv(store, f"{name}.fc1", 1, c_in, hidden, rng)
    init_conv(store, f"{name}.fc2", 1, hidden, c_out, rng)


def init_residual_block(store, name: str, channels: int, kind: str, rng) -> None:
    init_norm(store, f"{name}.norm1", channels, kind)
    init_conv(store, f"{name}.conv1", 27, channels, channels, rng)
    init_norm(store, f"{name}.norm2", channels, kind)
    init_conv(store, f"{name}.conv2", 27, channels, channels, rng)
    # Zero-init the residual branch's last conv so each block starts as
    # relu(x); a randomly initialized branch can drive relu(x + f(x)) into an
    # all-dead region at the narrow finest level, which gradients cannot leave.
    store[f"{name}.conv2.weight"].data[:] = 0.0


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def linear(ctx: Binding, x: Value, name: str) -> Value:
    return ad.add(ad.matmul(x, ctx[f"{name}.weight"]), ctx[f"{name}.bias"])


def octree_conv(ctx: Binding, x: Value, nodes: NodeSet, name: str) -> Value:
    """3x3x3 convolution over occupied nodes; absent neighbors contribute zero."""
    taps = ad.gather_rows(x, nodes.neighbor_table(), unique_per_col=True)
    return ad.add(ad.matmul(taps, ctx[f"{name}.weight"]), ctx[f"{name}.bias"])


def child_rows(parents: NodeSet, children: NodeSet) -> np.ndarray:
    """(n_parent, 8) rows of each parent's children; SENTINEL where absent."""
    n = len(parents)
    slots = np.tile(np.arange(8, dtype=np.uint64), n)
    codes = (np.repeat(parents.codes, 8) << np.uint64(3)) | slots
    sids = np.repeat(parents.sample_ids.astype(np.uint64), 8)
    return children.lookup((sids << _SID_SHIFT) | codes).reshape(n, 8)


def downsample(ctx: Binding, x: Value, parents: NodeSet, children: NodeSet, name: str) -> Value:
    """Strided 2^3 convolution aggregating <=8 children into each parent."""
    taps = ad.gather_rows(x, child_rows(parents, children), unique_per_col=True)
    return ad.add(ad.matmul(taps, ctx[f"{name}.weight"]), ctx[f"{name}.bias"])


def upsample(ctx: Binding, x: Value, parents: NodeSet, children: NodeSet, name: str) -> Value:
    """Transposed 2^3 convolution: each child gets its parent's feature through
    the projection of its child slot. Weight row block s serves slot s, making
    this the adjoint of ``downsample`` under tied (transposed) weights."""
    c_in = x.data.shape[1]
    parent_idx = parents.lookup(children.parent_keys())
    slots = children.child_slots()
    weight = ctx[f"{name}.weight"]
    out = None
    for s in range(8):
        idx = np.where(slots == s, parent_idx, SENTINEL)
        if not np.any(idx >= 0):
            continue
        gathered = ad.gather_rows(x, idx, unique_per_col=True)
        proj = ad.matmul(gathered, ad.slice_rows(weight, s * c_in, (s + 1) * c_in))
        out = proj if out is None else ad.add(out, proj)
    if out is None:
        out = ad.constant(
            np.zeros((len(children), ctx[f"{name}.bias"].data.shape[1]), dtype=x.data.dtype)
        )
    return ad.add(out, ctx[f"{name}.bias"])


def octree_norm(
    ctx: Binding,
    x: Value,
    nodes: NodeSet,
    name: str,
    kind: str,
    group_size: int,
    training: bool,
) -> Value:
    """Group (per sample) or batch (whole-batch) normalization with affine."""
    channels = x.data.shape[1]
    if kind == "gn":
        if channels % group_size != 0:
            raise ConfigError(f"{channels} channels not divisible by group size {group_size}")
        groups = channels // group_size
        xhat = ad.group_norm(x, nodes.sample_slices(), groups)
    elif kind == "bn":
        xhat = ad.batch_norm(
            x,
            ctx.store[f"{name}.running_mean"].data,
            ctx.store[f"{name}.running_var"].data,
            training,
        )
    else:
        raise ConfigError(f"unknown norm kind {kind!r}")
    return ad.add(ad.mul(xhat, ctx[f"{name}.gamma"]), ctx[f"{name}.beta"])


def residual_block(
    ctx: Binding,
    x: Value,
    nodes: NodeSet,
    name: str,
    kind: str,
    group_size: int,
    training: bool,
) -> Value:
    h = octree_norm(ctx, x, nodes, f"{name}.norm1", kind, group_size, training)
    h = octree_conv(ctx, h, nodes, f"{name}.conv1")
    h = ad.relu(h)
    h = octree_norm(ctx, h, nodes, f"{name}.norm2", kind, group_size, training)
    h = octree_conv(ctx, h, nodes, f"{name}.conv2")
    return ad.relu(ad.add(x, h))


def head(ctx: Binding, x: Value, name: str) -> Value:
    """Two-layer per-node network (1x1 convolutions)."""
    return linear(ctx, ad.relu(linear(ctx, x, f"{name}.fc1")), f"{name}.fc2")


def guided_skip(dec: Value, enc: Value, dec_nodes: NodeSet, enc_nodes: NodeSet) -> Value:
    """Add encoder features to decoder rows whose key exists in the input octree.

    Callers pass only non-empty decoder rows, realizing the rule: skip where
    the output node is non-empty and an input node occupies the same location.
    """
    rows = enc_nodes.lookup(dec_nodes.keys)
    return ad.add(dec, ad.gather_rows(enc, rows, unique_per_col=True))
