"""Joint-task training: sample assembly, AdamW with polynomial learning-rate
decay, the step loop, and the patch-based ablation helpers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InputError, NumericError
from .metrics import farthest_point_sample
from .model import Model, save_checkpoint
from .octree import batch_octrees, build_octree, extract_targets
from .pointcloud import add_gaussian_noise, augment_pair, normalize_unit_cube
from .shapes import ShapeSpec, sample_surface

CUBE_BOUND = 1.0 - 1e-6


@dataclass
class TrainConfig:
    lr0: float = 5e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    total_steps: int = 1000
    poly_power: float = 0.9
    seed: int = 0
    task_mix: float = 0.5  # probability of the upsample task per sample
    noise_levels: tuple = (0.01, 0.02)
    augment: bool = True

    def __post_init__(self):
        if self.lr0 <= 0 or self.total_steps < 1 or self.batch_size < 1:
            raise InputError("need lr0 > 0, total_steps >= 1, batch_size >= 1")

    def lr_at(self, t: int) -> float:
        """Polynomial decay: lr0 * (1 - t/T)^power, lr(0) = lr0, lr(T) = 0."""
        frac = min(max(t / self.total_steps, 0.0), 1.0)
        return self.lr0 * (1.0 - frac) ** self.poly_power


@dataclass
class TrainSample:
    input: np.ndarray
    gt: np.ndarray
    task: str  # "upsample" | "clean"


def make_sample(
    spec: ShapeSpec,
    task: str,
    counts: tuple[int, int],
    noise_fraction: float,
    seed: int,
    augment: bool = True,
) -> TrainSample:
    """Build one training pair on an analytic surface.

    counts is (n_sparse, n_dense). Upsampling pairs are independent draws of
    the same surface; cleaning pairs share indices (input = noisy gt). Both
    clouds get one normalization (from the ground truth) and one augmentation.
    """
    n_sparse, n_dense = counts
    if task == "upsample":
        gt = sample_surface(spec, n_dense, seed)
        raw_in = sample_surface(spec, n_sparse, seed + 1)
        gt, transform = normalize_unit_cube(gt)
        scale, offset = transform
        inp = np.clip(raw_in * scale + offset, -CUBE_BOUND, CUBE_BOUND)
    elif task == "clean":
        gt = sample_surface(spec, n_dense, seed)
        gt, _ = normalize_unit_cube(gt)
        inp = add_gaussian_noise(gt, noise_fraction, seed + 1)
    else:
        raise InputError(f"unknown task {task!r}")
    if augment:
        inp, gt = augment_pair(inp, gt, seed + 2)
    # Normalization can overshoot the cube by float rounding; clamp both.
    return TrainSample(
        np.clip(inp, -CUBE_BOUND, CUBE_BOUND), np.clip(gt, -CUBE_BOUND, CUBE_BOUND), task
    )


class ShapeDataset:
    """Draws training samples from a pool of analytic shapes."""

    def __init__(
        self,
        shapes: list,
        n_sparse: int,
        n_dense: int,
        task_mix: float = 0.5,
        noise_levels: tuple = (0.01, 0.02),
        augment: bool = True,
        patch_size: int = 0,
    ):
        if not shapes:
            raise InputError("dataset needs at least one shape")
        self.shapes = list(shapes)
        self.counts = (n_sparse, n_dense)
        self.task_mix = task_mix
        self.noise_levels = tuple(noise_levels)
        self.augment = augment
        self.patch_size = patch_size

    def draw(self, rng: np.random.Generator) -> TrainSample:
        spec = self.shapes[int(rng.integers(len(self.shapes)))]
        task = "upsample" if rng.random() < self.task_mix else "clean"
        noise = float(self.noise_levels[int(rng.integers(len(self.noise_levels)))])
        seed = int(rng.integers(2**31))
        sample = make_sample(spec, task, self.counts, noise, seed, self.augment)
        if self.patch_size:
            sample = crop_patch(sample, rng, self.patch_size)
        return sample


class FileDataset:
    """Draws training samples from a gen-data directory (manifest.json)."""

    def __init__(
        self,
        data_dir,
        task_mix: float = 0.5,
        noise_levels: tuple = (0.01, 0.02),
        augment: bool = True,
        patch_size: int = 0,
    ):
        from pathlib import Path

        from .pointcloud import read_pcb

        base = Path(data_dir)
        manifest = json.loads((base / "manifest.json").read_text())
        self.pairs = []
        for entry in manifest["samples"]:
            dense = read_pcb(base / entry["dense_file"])
            sparse = read_pcb(base / entry["sparse_file"])
            self.pairs.append((sparse, dense))
        if not self.pairs:
            raise InputError(f"no samples in manifest at {data_dir}")
        self.task_mix = task_mix
        self.noise_levels = tuple(noise_levels)
        self.augment = augment
        self.patch_size = patch_size

    def draw(self, rng: np.random.Generator) -> TrainSample:
        sparse, dense = self.pairs[int(rng.integers(len(self.pairs)))]
        task = "upsample" if rng.random() < self.task_mix else "clean"
        seed = int(rng.integers(2**31))
        if task == "upsample":
            inp, gt = sparse, dense
        else:
            noise = float(self.noise_levels[int(rng.integers(len(self.noise_levels)))])
            gt = dense
            inp = add_gaussian_noise(dense, noise, seed)
        if self.augment:
            inp, gt = augment_pair(inp, gt, seed + 1)
        sample = TrainSample(np.clip(inp, -CUBE_BOUND, CUBE_BOUND),
                             np.clip(gt, -CUBE_BOUND, CUBE_BOUND), task)
        if self.patch_size:
            sample = crop_patch(sample, rng, self.patch_size)
        return sample


# ---------------------------------------------------------------------------
# Patch-mode ablation helpers
# ---------------------------------------------------------------------------

def crop_patch(sample: TrainSample, rng: np.random.Generator, patch_size: int) -> TrainSample:
    """Crop a training pair to one k-NN patch around a random input point."""
    inp, gt = sample.input, sample.gt
    k = min(patch_size, len(inp))
    center = inp[int(rng.integers(len(inp)))]
    d_in = ((inp - center) ** 2).sum(axis=1)
    patch_in = inp[np.argsort(d_in, kind="stable")[:k]]
    radius2 = d_in[np.argsort(d_in, kind="stable")[k - 1]] * 1.21
    d_gt = ((gt - center) ** 2).sum(axis=1)
    patch_gt = gt[d_gt <= radius2]
    if len(patch_gt) == 0:
        patch_gt = gt[np.argsort(d_gt, kind="stable")[:k]]
    both = np.concatenate([patch_in, patch_gt])
    _, (scale, offset) = normalize_unit_cube(both)
    to_cube = lambda p: np.clip(p * scale + offset, -CUBE_BOUND, CUBE_BOUND)
    return TrainSample(to_cube(patch_in), to_cube(patch_gt), sample.task)


def patch_split(pts: np.ndarray, num_seeds: int = 8, patch_size: int = 512) -> list:
    """Split a cloud into k-NN patches around FPS-selected seed points."""
    seeds = farthest_point_sample(pts, min(num_seeds, len(pts)), start=0)
    patches = []
    for center in seeds:
        d = ((pts - center) ** 2).sum(axis=1)
        patches.append(pts[np.argsort(d, kind="stable")[: min(patch_size, len(pts))]])
    return patches


def patch_merge(patches: list, target_count: int) -> np.ndarray:
    """Stitch per-patch outputs through concatenation + FPS."""
    merged = np.concatenate(patches)
    if len(merged) <= target_count:
        return merged
    return farthest_point_sample(merged, target_count, start=0)


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------

def adamw_step(store, lr: float, cfg: TrainConfig, t: int) -> None:
    """Decoupled-weight-decay Adam update with bias-corrected moments (t >= 1)."""
    if t < 1:
        raise InputError("AdamW step count starts at 1")
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in store.items():
        if not p.trainable:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"non-finite gradient in parameter {name!r}")
        p.m *= cfg.beta1
        p.m += (1.0 - cfg.beta1) * p.grad
        p.v *= cfg.beta2
        p.v += (1.0 - cfg.beta2) * p.grad**2
        m_hat = p.m / bc1
        v_hat = p.v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * p.data)


def assemble_batch(samples: list, cfg) -> tuple:
    """Batch octrees and supervision targets for a list of training samples."""
    input_octs = [build_octree(s.input, cfg.max_depth, cfg.full_depth) for s in samples]
    gt_octs = [build_octree(s.gt, cfg.max_depth, cfg.full_depth) for s in samples]
    input_oct = batch_octrees(input_octs)
    gt_oct = batch_octrees(gt_octs)
    targets = extract_targets(gt_oct, [s.gt for s in samples])
    return input_oct, [s.input for s in samples], targets


def train_loop(
    dataset,
    model: Model,
    tcfg: TrainConfig,
    log_file=None,
    ckpt_path=None,
    ckpt_interval: int = 0,
) -> list:
    """Run the full optimization; returns the per-step loss history.

    Deterministic for a fixed seed. The loss logged at step k is the value
    before the step-k parameter update. One JSON object per log line.
    """
    from . import autodiff as ad

    rng = np.random.Generator(np.random.PCG64(tcfg.seed))
    history = []
    if log_file is not None:
        header = {
            "type": "header",
            "lr0": tcfg.lr0,
            "poly_power": tcfg.poly_power,
            "weight_decay": tcfg.weight_decay,
            "batch_size": tcfg.batch_size,
            "total_steps": tcfg.total_steps,
            "seed": tcfg.seed,
            "config": model.cfg.to_dict(),
        }
        log_file.write(json.dumps(header, sort_keys=True) + "\n")
    model.training = True
    for step in range(tcfg.total_steps):
        samples = [dataset.draw(rng) for _ in range(tcfg.batch_size)]
        input_oct, input_points, targets = assemble_batch(samples, model.cfg)
        model.store.zero_grads()
        ctx, total, breakdown = model.forward_train(input_oct, input_points, targets)
        if not np.isfinite(breakdown.total):
            raise NumericError(f"non-finite loss at step {step}")
        ad.backward(total)
        ctx.harvest()
        lr = tcfg.lr_at(step)
        try:
            adamw_step(model.store, lr, tcfg, step + 1)
        except NumericError as exc:
            raise NumericError(f"step {step}: {exc}") from exc
        task_counts = {
            "upsample": sum(s.task == "upsample" for s in samples),
            "clean": sum(s.task == "clean" for s in samples),
        }
        record = {
            "step": step,
            "lr": lr,
            "loss_total": breakdown.total,
            "loss_struct": [breakdown.structure[l] for l in sorted(breakdown.structure)],
            "loss_reg": breakdown.regression,
            "task_counts": task_counts,
        }
        history.append(record)
        if log_file is not None:
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
        if ckpt_path and ckpt_interval and (step + 1) % ckpt_interval == 0:
            save_checkpoint(ckpt_path, model, step + 1)
    if ckpt_path:
        save_checkpoint(ckpt_path, model, tcfg.total_steps)
    return history
