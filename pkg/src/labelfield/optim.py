"""Joint loss, Adam, pixel-batch construction and the online mapping step.

One mapping step renders a small batch of rays spread over the keyframes,
scores depth, colour and (where labelled) semantics, backpropagates by hand
and applies one Adam update. Frames that recently scored badly get more of
the pixel budget; every stored annotation rides along in every batch so
sparse clicks are never starved.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import FieldParams, accumulate_grads
from .keyframes import AnnotationStore, Keyframe
from .rendering import RenderConfig, pixels_to_rays, render_backward, render_rays
from .semantics import ClassRegistry, LabelTree, encode_hier_label, flat_loss, hier_loss

VAR_FLOOR = 1e-6
BUDGET_EPSILON = 0.05


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the three loss terms."""

    photometric: float = 5.0
    semantic: float = 8.0
    colour_enabled: bool = True  # drop the photometric term when False

    def as_dict(self) -> dict:
        return {
            "photometric": self.photometric,
            "semantic": self.semantic,
            "colour_enabled": self.colour_enabled,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossWeights":
        return cls(**d)


@dataclass(frozen=True)
class OptimConfig:
    map_lr: float = 1e-3
    pose_lr: float = 3e-3  # reserved for pose refinement; poses stay fixed here
    batch_pixels: int = 160
    train_samples: int = 24  # samples per ray during optimisation
    grid_cells: int = 8  # per-frame loss grid is grid_cells x grid_cells
    ema_decay: float = 0.8
    high_loss_fraction: float = 0.5  # share of a frame's budget aimed at bad cells
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def as_dict(self) -> dict:
        return {
            "map_lr": self.map_lr,
            "pose_lr": self.pose_lr,
            "batch_pixels": self.batch_pixels,
            "train_samples": self.train_samples,
            "grid_cells": self.grid_cells,
            "ema_decay": self.ema_decay,
            "high_loss_fraction": self.high_loss_fraction,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimConfig":
        return cls(**d)


class AdamState:
    """First/second moment accumulators matching a FieldParams layout."""

    def __init__(self, params: FieldParams):
        self.step = 0
        self.m = {name: np.zeros_like(arr) for name, arr in params.arrays()}
        self.v = {name: np.zeros_like(arr) for name, arr in params.arrays()}

    def update(self, params: FieldParams, grads: FieldParams, cfg: OptimConfig) -> None:
        """One in-place Adam step with bias correction."""
        self.step += 1
        b1, b2 = cfg.beta1, cfg.beta2
        correction1 = 1.0 - b1**self.step
        correction2 = 1.0 - b2**self.step
        for (name, p), (_, g) in zip(params.arrays(), grads.arrays()):
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / correction1
            v_hat = v / correction2
            p -= (cfg.map_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name in self.m:
            out.append((f"m.{name}", self.m[name]))
        for name in self.v:
            out.append((f"v.{name}", self.v[name]))
        return out


@dataclass
class FrameStats:
    """Loss bookkeeping for one keyframe, used to steer pixel sampling."""

    ema_loss: float = 1.0  # start high so fresh frames get attention
    cell_loss: np.ndarray = field(default_factory=lambda: np.ones((8, 8)))

    def observe(self, us, vs, losses, shape, decay: float) -> None:
        h, w = shape
        gc = self.cell_loss.shape[0]
        self.ema_loss = decay * self.ema_loss + (1.0 - decay) * float(np.mean(losses))
        ci = np.minimum((np.asarray(vs) * gc) // h, gc - 1).astype(int)
        cj = np.minimum((np.asarray(us) * gc) // w, gc - 1).astype(int)
        for i, j, loss in zip(ci, cj, losses):
            self.cell_loss[i, j] = decay * self.cell_loss[i, j] + (1.0 - decay) * float(loss)


@dataclass
class PixelBatch:
    """Flattened training batch across frames, annotations appended last."""

    frame_ids: np.ndarray  # (B,)
    us: np.ndarray  # (B,)
    vs: np.ndarray  # (B,)
    rgb: np.ndarray  # (B, 3)
    depth: np.ndarray  # (B,)
    sem_valid: np.ndarray  # (B,) bool
    flat_ids: np.ndarray  # (B,) int, -1 where unlabelled
    hier_targets: np.ndarray  # (B, L)
    hier_mask: np.ndarray  # (B, L)

    def __len__(self) -> int:
        return self.frame_ids.shape[0]


def _frame_budgets(frames: list, stats: dict, total: int, rng) -> dict:
    """Pixels per frame, proportional to epsilon + recent mean loss."""
    scores = np.array([BUDGET_EPSILON + stats[kf.frame_id].ema_loss for kf in frames])
    share = scores / scores.sum()
    counts = np.floor(share * total).astype(int)
    # Hand out the remainder by largest fractional part, ties broken by rng.
    remainder = total - counts.sum()
    if remainder > 0:
        frac = share * total - counts
        order = np.argsort(-(frac + 1e-9 * rng.random(len(frames))))
        for i in order[:remainder]:
            counts[i] += 1
    return {kf.frame_id: int(c) for kf, c in zip(frames, counts)}


def _sample_frame_pixels(kf: Keyframe, stat: FrameStats, count: int, cfg: OptimConfig, rng):
    """Mix of uniform pixels and pixels from the worst loss-grid cells."""
    h, w = kf.shape
    n_hard = int(round(cfg.high_loss_fraction * count))
    n_uniform = count - n_hard
    us = [rng.integers(0, w, size=n_uniform)]
    vs = [rng.integers(0, h, size=n_uniform)]
    if n_hard > 0:
        gc = stat.cell_loss.shape[0]
        flat = stat.cell_loss.ravel()
        probs = flat / flat.sum()
        cells = rng.choice(gc * gc, size=n_hard, p=probs)
        ci, cj = cells // gc, cells % gc
        cell_h, cell_w = h / gc, w / gc
        vs.append(np.minimum((ci + rng.random(n_hard)) * cell_h, h - 1).astype(np.int64))
        us.append(np.minimum((cj + rng.random(n_hard)) * cell_w, w - 1).astype(np.int64))
    return np.concatenate(us), np.concatenate(vs)


@dataclass
class LabelSpace:
    """Which label algebra is active and its current extent."""

    mode: str = "flat"  # "flat" or "hierarchical"
    registry: ClassRegistry | None = None
    tree: LabelTree | None = None

    def encode(self, label, max_dim: int) -> tuple[int, np.ndarray, np.ndarray]:
        if self.mode == "flat":
            return int(label), np.zeros(max_dim), np.zeros(max_dim)
        targets, mask = encode_hier_label(str(label), max_dim)
        return -1, targets, mask


def sample_pixel_batch(
    frames: list,
    stats: dict,
    annotations: AnnotationStore,
    label_space: LabelSpace,
    semantic_dim: int,
    cfg: OptimConfig,
    rng: np.random.Generator,
) -> PixelBatch:
    """Budgeted random pixels plus, always, every stored annotation."""
    if not frames:
        raise ValueError("no keyframes to sample from")
    by_id = {kf.frame_id: kf for kf in frames}
    budgets = _frame_budgets(frames, stats, cfg.batch_pixels, rng)

    fids, us, vs = [], [], []
    for kf in frames:
        count = budgets[kf.frame_id]
        if count == 0:
            continue
        fu, fv = _sample_frame_pixels(kf, stats[kf.frame_id], count, cfg, rng)
        us.append(fu)
        vs.append(fv)
        fids.append(np.full(fu.shape[0], kf.frame_id, dtype=np.int64))

    ann_list = [a for a in annotations if a.frame_id in by_id]
    fids.append(np.array([a.frame_id for a in ann_list], dtype=np.int64))
    us.append(np.array([a.u for a in ann_list], dtype=np.int64))
    vs.append(np.array([a.v for a in ann_list], dtype=np.int64))

    fids = np.concatenate(fids)
    us = np.concatenate(us)
    vs = np.concatenate(vs)
    B = fids.shape[0]

    rgb = np.zeros((B, 3), dtype=np.float64)
    depth = np.zeros(B, dtype=np.float64)
    for i in range(B):
        kf = by_id[int(fids[i])]
        rgb[i] = kf.rgb[vs[i], us[i]]
        depth[i] = kf.depth[vs[i], us[i]]

    sem_valid = np.zeros(B, dtype=bool)
    flat_ids = np.full(B, -1, dtype=np.int64)
    hier_targets = np.zeros((B, semantic_dim))
    hier_mask = np.zeros((B, semantic_dim))
    offset = B - len(ann_list)
    for j, ann in enumerate(ann_list):
        i = offset + j
        sem_valid[i] = True
        fid, targets, mask = label_space.encode(ann.label, semantic_dim)
        flat_ids[i] = fid
        hier_targets[i] = targets
        hier_mask[i] = mask

    return PixelBatch(
        frame_ids=fids,
        us=us,
        vs=vs,
        rgb=rgb,
        depth=depth,
        sem_valid=sem_valid,
        flat_ids=flat_ids,
        hier_targets=hier_targets,
        hier_mask=hier_mask,
    )


@dataclass
class RenderedPixels:
    """Composited per-pixel outputs, possibly stitched from several frames."""

    depth: np.ndarray  # (B,)
    depth_var: np.ndarray  # (B,)
    colour: np.ndarray  # (B, 3)
    logits: np.ndarray  # (B, n)


@dataclass
class LossReport:
    total: float
    geometric: float
    photometric: float
    semantic: float
    n_pixels: int
    n_valid_depth: int
    n_labelled: int
    per_pixel: np.ndarray  # (B,) geometric + photometric contribution
    skipped: bool = False

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "geometric": self.geometric,
            "photometric": self.photometric,
            "semantic": self.semantic,
            "n_pixels": self.n_pixels,
            "n_valid_depth": self.n_valid_depth,
            "n_labelled": self.n_labelled,
            "skipped": self.skipped,
        }


def pixel_losses(
    rendered: RenderedPixels,
    batch: PixelBatch,
    weights: LossWeights,
    label_space: LabelSpace,
) -> tuple[LossReport, np.ndarray, np.ndarray, np.ndarray]:
    """Score a rendered batch and return cotangents on (depth, colour, logits).

    Depth error is scaled by the rendered depth spread, which is treated as
    a constant during backprop: composited depth far from the measurement
    counts for more when the ray is confident about where the surface is.
    Geometric and photometric terms average over their contributing pixels;
    the semantic term averages over labelled pixels.
    """
    B = len(batch)
    d_depth = np.zeros(B)
    d_colour = np.zeros((B, 3))
    d_logits = np.zeros((B, rendered.logits.shape[-1]))

    depth_valid = batch.depth > 0
    n_depth = int(depth_valid.sum())
    norm = np.sqrt(np.maximum(rendered.depth_var, VAR_FLOOR))
    resid = rendered.depth - batch.depth
    geo_each = np.where(depth_valid, np.abs(resid) / norm, 0.0)
    geometric = float(geo_each.sum() / max(n_depth, 1))
    if n_depth:
        d_depth = np.where(depth_valid, np.sign(resid) / norm, 0.0) / n_depth

    photometric = 0.0
    per_pixel = geo_each.copy()
    if weights.colour_enabled:
        cresid = rendered.colour - batch.rgb
        photo_each = np.abs(cresid).sum(axis=-1)
        photometric = float(photo_each.mean())
        d_colour = weights.photometric * np.sign(cresid) / B
        per_pixel = per_pixel + weights.photometric * photo_each

    semantic = 0.0
    n_labelled = int(batch.sem_valid.sum())
    if n_labelled:
        idx = np.nonzero(batch.sem_valid)[0]
        logits = rendered.logits[idx]
        if label_space.mode == "flat":
            n_classes = label_space.registry.num_classes
            losses, grads = flat_loss(logits, batch.flat_ids[idx], n_classes)
        else:
            losses, grads = hier_loss(logits, batch.hier_targets[idx], batch.hier_mask[idx])
        semantic = float(losses.mean())
        d_logits[idx] = weights.semantic * grads / n_labelled

    total = geometric + weights.photometric * photometric + weights.semantic * semantic
    return (
        LossReport(
            total=total,
            geometric=geometric,
            photometric=photometric,
            semantic=semantic,
            n_pixels=B,
            n_valid_depth=n_depth,
            n_labelled=n_labelled,
            per_pixel=per_pixel,
        ),
        d_depth,
        d_colour,
        d_logits,
    )


def mapping_step(
    params: FieldParams,
    adam: AdamState,
    frames: list,
    stats: dict,
    annotations: AnnotationStore,
    label_space: LabelSpace,
    weights: LossWeights,
    opt_cfg: OptimConfig,
    render_cfg: RenderConfig,
    rng: np.random.Generator,
) -> LossReport:
    """One joint optimisation step over all keyframes; updates params in place.

    A step whose gradients are not finite is skipped entirely so one bad
    batch cannot poison the field.
    """
    batch = sample_pixel_batch(
        frames, stats, annotations, label_space, params.semantic_dim, opt_cfg, rng
    )
    by_id = {kf.frame_id: kf for kf in frames}

    total_grads = params.zeros_like()
    # Render per frame: rays in one frame share a pose and intrinsics.
    order = []
    outs = {}
    for fid in sorted(set(int(f) for f in batch.frame_ids)):
        sel = np.nonzero(batch.frame_ids == fid)[0]
        kf = by_id[fid]
        uv = np.stack([batch.us[sel], batch.vs[sel]], axis=-1).astype(np.float64)
        origins, dirs = pixels_to_rays(uv, kf.intrinsics, kf.pose)
        rendered, cache = render_rays(
            params,
            origins,
            dirs,
            render_cfg,
            rng,
            depth_measurements=batch.depth[sel],
            n_samples=opt_cfg.train_samples,
            want_cache=True,
        )
        outs[fid] = (sel, rendered, cache)
        order.append(fid)

    # Losses are defined over the whole batch, so stitch outputs together.
    B = len(batch)
    stitched = RenderedPixels(
        depth=np.zeros(B),
        depth_var=np.zeros(B),
        colour=np.zeros((B, 3)),
        logits=np.zeros((B, params.semantic_dim)),
    )
    for fid in order:
        sel, rendered, _ = outs[fid]
        stitched.depth[sel] = rendered.depth
        stitched.depth_var[sel] = rendered.depth_var
        stitched.colour[sel] = rendered.colour
        stitched.logits[sel] = rendered.logits

    report, d_depth, d_colour, d_logits = pixel_losses(stitched, batch, weights, label_space)

    for fid in order:
        sel, rendered, cache = outs[fid]
        grads = render_backward(
            params, rendered, cache, d_depth[sel], d_colour[sel], d_logits[sel]
        )
        accumulate_grads(total_grads, grads)

    if not total_grads.all_finite():
        report.skipped = True
        return report

    adam.update(params, total_grads, opt_cfg)

    # Update sampling statistics from this batch's per-pixel losses.
    for fid in order:
        sel, _, _ = outs[fid]
        stats[fid].observe(
            batch.us[sel], batch.vs[sel], report.per_pixel[sel], by_id[fid].shape, opt_cfg.ema_decay
        )
    return report


def new_frame_stats(grid_cells: int = 8) -> FrameStats:
    return FrameStats(ema_loss=1.0, cell_loss=np.ones((grid_cells, grid_cells)))
