"""Reverse-mode automatic differentiation over dense matrices.

Values form an implicit tape through parent links; ``backward`` walks the
graph once in reverse topological order and accumulates gradients additively
across fan-out. Training runs in float32; gradient checking uses float64.
"""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, NumericError, ShapeMismatchError

SENTINEL = -1


class Value:
    """A node in the computation graph: data plus a gradient slot."""

    __slots__ = ("data", "grad", "_parents", "_bw")

    def __init__(self, data, parents=(), bw=None):
        self.data = np.asarray(data)
        self.grad = None
        self._parents = parents
        self._bw = bw

    @property
    def shape(self):
        return self.data.shape

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.data) if self.grad is None else self.grad


def _accum(v: Value, g: np.ndarray) -> None:
    if v.grad is None:
        v.grad = np.array(np.broadcast_to(g, v.data.shape))
    else:
        v.grad += g


def backward(root: Value) -> None:
    """Populate d(root)/d(v) for every value reachable from the scalar root."""
    if root.data.size != 1:
        raise ShapeMismatchError(f"backward root must be scalar, got shape {root.shape}")
    topo: list[Value] = []
    seen: set[int] = set()
    stack: list[tuple[Value, bool]] = [(root, False)]
    while stack:
        v, expanded = stack.pop()
        if expanded:
            topo.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p in v._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data)
    for v in reversed(topo):
        if v._bw is not None and v.grad is not None:
            v._bw(v.grad)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def constant(data) -> Value:
    return Value(np.asarray(data))


def add(a: Value, b: Value) -> Value:
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return Value(a.data + b.data, (a, b), bw)


def mul(a: Value, b: Value) -> Value:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return Value(a.data * b.data, (a, b), bw)


def scale(a: Value, c: float) -> Value:
    def bw(g):
        _accum(a, g * c)

    return Value(a.data * c, (a,), bw)


def matmul(a: Value, b: Value) -> Value:
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul shapes {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return Value(a.data @ b.data, (a, b), bw)


# When set to a list, relu records its activation pattern there. grad_check
# uses this to exclude finite-difference stencils that straddle a kink.
_relu_trace: list | None = None


def relu(a: Value) -> Value:
    mask = a.data > 0
    if _relu_trace is not None:
        _relu_trace.append(hash(mask.tobytes()))

    def bw(g):
        _accum(a, g * mask)

    return Value(a.data * mask, (a,), bw)


def gather_rows(x: Value, idx: np.ndarray, unique_per_col: bool = False) -> Value:
    """Select rows of x; SENTINEL entries yield zero rows.

    A 2D index (n, k) returns the k gathered rows concatenated per output row,
    giving shape (n, k*C) with tap-major column blocks. unique_per_col may be
    set when no row index repeats within a column (true for all stencil
    tables, where each tap is an injective node map); the backward pass then
    uses direct indexed addition instead of the slower np.add.at.
    """
    idx = np.asarray(idx, dtype=np.int64)
    idx2 = idx.reshape(len(idx), -1)
    n_cols = x.data.shape[1]
    flat_idx = idx2.reshape(-1)
    invalid = np.flatnonzero(flat_idx < 0)
    all_valid = len(invalid) == 0
    safe = flat_idx if all_valid else np.where(flat_idx < 0, 0, flat_idx)
    out = x.data[safe]
    if not all_valid:
        out[invalid] = 0
    out = out.reshape(idx2.shape[0], idx2.shape[1] * n_cols)
    if idx.ndim == 1:
        out = out.reshape(idx.shape[0], n_cols)

    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        if unique_per_col:
            g3 = g.reshape(idx2.shape[0], idx2.shape[1], n_cols)
            for k in range(idx2.shape[1]):
                col = idx2[:, k]
                if all_valid:
                    x.grad[col] += g3[:, k]
                else:
                    keep = col >= 0
                    x.grad[col[keep]] += g3[keep, k]
        else:
            g2 = g.reshape(-1, n_cols)
            if all_valid:
                np.add.at(x.grad, flat_idx, g2)
            else:
                keep = flat_idx >= 0
                np.add.at(x.grad, flat_idx[keep], g2[keep])

    return Value(out, (x,), bw)


def scatter_add_rows(x: Value, idx: np.ndarray, num_rows: int) -> Value:
    """out[idx[i]] += x[i]; SENTINEL source rows are dropped."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape != (x.data.shape[0],):
        raise ShapeMismatchError("scatter index must be one entry per input row")
    valid = idx >= 0
    out = np.zeros((num_rows, x.data.shape[1]), dtype=x.data.dtype)
    np.add.at(out, idx[valid], x.data[valid])

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[valid] = g[idx[valid]]
        _accum(x, gx)

    return Value(out, (x,), bw)


def concat_cols(values: list) -> Value:
    splits = np.cumsum([v.data.shape[1] for v in values])[:-1]

    def bw(g):
        for v, gpart in zip(values, np.split(g, splits, axis=1)):
            _accum(v, gpart)

    return Value(np.concatenate([v.data for v in values], axis=1), tuple(values), bw)


def slice_cols(x: Value, start: int, stop: int) -> Value:
    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[:, start:stop] += g

    return Value(x.data[:, start:stop].copy(), (x,), bw)


def slice_rows(x: Value, start: int, stop: int) -> Value:
    def bw(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.data)
        x.grad[start:stop] += g

    return Value(x.data[start:stop].copy(), (x,), bw)


def mean_all(x: Value) -> Value:
    inv = 1.0 / x.data.size

    def bw(g):
        _accum(x, np.full_like(x.data, float(g) * inv))

    return Value(np.asarray(x.data.mean()), (x,), bw)


def sum_all(x: Value) -> Value:
    def bw(g):
        _accum(x, np.full_like(x.data, float(g)))

    return Value(np.asarray(x.data.sum()), (x,), bw)


def group_norm(x: Value, sample_slices: list, num_groups: int, eps: float = 1e-5) -> Value:
    """Normalize per (sample, channel group) over that sample's rows.

    sample_slices lists (sample_id, start, stop) row blocks; statistics never
    mix samples, so the output is invariant to batch composition.
    """
    n, c = x.data.shape
    if c % num_groups != 0:
        raise ConfigError(f"{c} channels not divisible by {num_groups} groups")
    gsize = c // num_groups
    xhat = np.empty_like(x.data)
    inv_stds = []
    for _, a, b in sample_slices:
        sub = x.data[a:b].reshape(b - a, num_groups, gsize)
        mu = sub.mean(axis=(0, 2), keepdims=True)
        var = sub.var(axis=(0, 2), keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat[a:b] = ((sub - mu) * inv).reshape(b - a, c)
        inv_stds.append(inv)

    def bw(g):
        gx = np.empty_like(x.data)
        for (_, a, b), inv in zip(sample_slices, inv_stds):
            gs = g[a:b].reshape(b - a, num_groups, gsize)
            xh = xhat[a:b].reshape(b - a, num_groups, gsize)
            m1 = gs.mean(axis=(0, 2), keepdims=True)
            m2 = (gs * xh).mean(axis=(0, 2), keepdims=True)
            gx[a:b] = (inv * (gs - m1 - xh * m2)).reshape(b - a, c)
        _accum(x, gx)

    return Value(xhat, (x,), bw)


def batch_norm(
    x: Value,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Value:
    """Normalize per channel over ALL rows of the batch.

    In training mode the batch statistics are used and the running buffers
    updated in place; in eval mode the running buffers are used.
    """
    if training:
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def bw(g):
        if training:
            m1 = g.mean(axis=0)
            m2 = (g * xhat).mean(axis=0)
            gx = inv * (g - m1 - xhat * m2)
        else:
            gx = inv * g
        _accum(x, gx)

    return Value(xhat, (x,), bw)


def softmax_cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean cross-entropy of integer labels against row-wise softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    z = logits.data
    if labels.shape != (z.shape[0],):
        raise ShapeMismatchError("one label per logit row required")
    m = z.max(axis=1, keepdims=True)
    expz = np.exp(z - m)
    p = expz / expz.sum(axis=1, keepdims=True)
    logp = (z - m) - np.log(expz.sum(axis=1, keepdims=True))
    n = z.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        gz = p.copy()
        gz[np.arange(n), labels] -= 1.0
        _accum(logits, gz * (float(g) / n))

    return Value(np.asarray(loss, dtype=z.dtype), (logits,), bw)


def mse(a: Value, b: Value) -> Value:
    """Mean of squared differences over all entries."""
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(f"mse shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    inv = 2.0 / diff.size

    def bw(g):
        _accum(a, diff * (inv * float(g)))
        _accum(b, diff * (-inv * float(g)))

    return Value(np.asarray((diff**2).mean()), (a, b), bw)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class Param:
    """Named tensor with gradient and AdamW moment buffers."""

    __slots__ = ("data", "grad", "m", "v", "trainable")

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.data = np.asarray(data)
        self.grad = np.zeros_like(self.data)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.trainable = trainable


class ParamStore:
    """Registry of named parameters; shapes are frozen after creation."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Param] = {}

    def add(self, name: str, data: np.ndarray, trainable: bool = True) -> Param:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        p = Param(np.asarray(data, dtype=self.dtype), trainable)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return sorted(self._params.items())

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0

    def binding(self) -> "Binding":
        return Binding(self)


class Binding:
    """Per-forward-pass leaf Values for parameters.

    harvest() adds the accumulated leaf gradients back into the store after
    backward(); bindings are single-use.
    """

    def __init__(self, store: ParamStore):
        self.store = store
        self._leaves: dict[str, Value] = {}

    def __getitem__(self, name: str) -> Value:
        leaf = self._leaves.get(name)
        if leaf is None:
            leaf = Value(self.store[name].data)
            self._leaves[name] = leaf
        return leaf

    def harvest(self) -> None:
        for name, leaf in self._leaves.items():
            if leaf.grad is not None:
                self.store[name].grad += leaf.grad


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def grad_check(
    loss_fn,
    store: ParamStore,
    rng: np.random.Generator,
    coords_per_param: int = 3,
    h_scale: float = 1e-5,
    tol: float = 1e-4,
) -> dict:
    """Compare tape gradients against central finite differences.

    loss_fn(binding) must rebuild the forward pass from the given binding and
    return a scalar Value. Coordinates whose perturbation flips any relu
    activation (a nondifferentiable stencil) are excluded from the check.
    """
    global _relu_trace
    if store.dtype != np.float64:
        raise ConfigError("grad_check requires a float64 parameter store")

    def traced_eval() -> tuple[float, tuple]:
        global _relu_trace
        _relu_trace = []
        try:
            val = float(loss_fn(store.binding()).data)
            return val, tuple(_relu_trace)
        finally:
            _relu_trace = None

    ctx = store.binding()
    root = loss_fn(ctx)
    f0 = float(root.data)
    if not np.isfinite(f0):
        raise NumericError("non-finite loss in grad_check")
    backward(root)
    ctx.harvest()
    _, trace0 = traced_eval()

    max_err = 0.0
    checked = excluded = 0
    failures = []
    for name, param in store.items():
        if not param.trainable:
            continue
        flat = param.data.reshape(-1)
        gflat = param.grad.reshape(-1)
        n_coords = min(coords_per_param, flat.size)
        picks = rng.choice(flat.size, size=n_coords, replace=False)
        for i in picks:
            w0 = flat[i]
            h = h_scale * (1.0 + abs(w0))
            flat[i] = w0 + h
            fp, trace_p = traced_eval()
            flat[i] = w0 - h
            fm, trace_m = traced_eval()
            flat[i] = w0
            if trace_p != trace0 or trace_m != trace0:
                excluded += 1
                continue
            central = (fp - fm) / (2 * h)
            err = relative_error(float(gflat[i]), central)
            checked += 1
            if err > max_err:
                max_err = err
            if err > tol:
                failures.append((name, int(i), float(gflat[i]), central, err))
    store.zero_grads()
    return {
        "max_rel_err": max_err,
        "checked": checked,
        "excluded": excluded,
        "failures": failures,
        "pass": not failures,
    }
