"""Hands-free label acquisition: uncertainty maps and query proposals.

The engine renders per-pixel semantic uncertainty for every keyframe on a
strided grid, accumulates it per frame, and proposes the next pixel a user
should be asked to label: frames are drawn with probability proportional to
their total uncertainty, and the pixel is drawn uniformly from the frame's
top-K most uncertain positions (minus an exclusion zone around pixels that
already carry annotations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .field import FieldParams
from .keyframes import AnnotationStore
from .rendering import RenderConfig, grid_shape, render_image
from .semantics import PROB_FLOOR, LabelTree, hier_uncertainty, softmax

MEASURES = ("entropy", "least_confidence", "margin")
DEFAULT_K_FRACTION = 0.05
DEFAULT_STRIDE = 4
DEFAULT_REFRESH_EVERY = 20
DEFAULT_QUERY_SAMPLES = 16
DEFAULT_EXCLUSION_RADIUS = 5.0


@dataclass
class QueryConfig:
    """Knobs for the hands-free query loop."""

    measure: str = "entropy"
    k_fraction: float = DEFAULT_K_FRACTION
    stride: int = DEFAULT_STRIDE
    refresh_every: int = DEFAULT_REFRESH_EVERY
    n_samples: int = DEFAULT_QUERY_SAMPLES
    exclusion_radius: float = DEFAULT_EXCLUSION_RADIUS

    def __post_init__(self):
        if self.measure not in MEASURES:
            raise ValueError(f"unknown uncertainty measure {self.measure!r}")
        if not 0.0 < self.k_fraction <= 1.0:
            raise ValueError("k_fraction must be in (0, 1]")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    def as_dict(self) -> dict:
        return {
            "measure": self.measure,
            "k_fraction": self.k_fraction,
            "stride": self.stride,
            "refresh_every": self.refresh_every,
            "n_samples": self.n_samples,
            "exclusion_radius": self.exclusion_radius,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QueryConfig":
        return cls(**d)


def pixel_uncertainty(probs: np.ndarray, measure: str) -> np.ndarray | float:
    """Uncertainty of probability vectors along the last axis.

    entropy: -sum p log p, in [0, ln C]
    least_confidence: 1 - max p, in [0, 1 - 1/C]
    margin: 1 - (p1 - p2) for the two largest entries, in [0, 1]
    Scalar in, scalar out; batched arrays map elementwise over leading axes.
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] < 1:
        raise ValueError("probability vector must have at least one entry")
    if measure == "entropy":
        out = -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)
    elif measure == "least_confidence":
        out = 1.0 - np.max(p, axis=-1)
    elif measure == "margin":
        if p.shape[-1] == 1:
            out = np.zeros(p.shape[:-1])
        else:
            top2 = -np.partition(-p, 1, axis=-1)[..., :2]
            out = 1.0 - (top2[..., 0] - top2[..., 1])
    else:
        raise ValueError(f"unknown uncertainty measure {measure!r}")
    return float(out) if out.ndim == 0 else out


@dataclass
class UncertaintyMap:
    """Per-pixel uncertainty for one keyframe on a strided grid."""

    frame_id: int
    values: np.ndarray  # (rows, cols) float64
    measure: str
    stride: int
    snapshot: int = 0

    @property
    def frame_total(self) -> float:
        return float(self.values.sum())


@dataclass
class QueryProposal:
    """One suggested click: ask the user for the label at (u, v)."""

    frame_id: int
    u: int
    v: int
    value: float
    measure: str
    snapshot: int = 0

    def as_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "u": self.u,
            "v": self.v,
            "value": self.value,
            "measure": self.measure,
            "snapshot": self.snapshot,
        }


def semantic_probs(
    logits: np.ndarray,
    num_classes: int | None = None,
    tree: LabelTree | None = None,
) -> np.ndarray:
    """Probabilities the uncertainty measures consume.

    Flat mode softmaxes the active class logits. Hierarchical mode has no
    single categorical distribution, so callers should use map_uncertainty
    instead; this helper is flat-only.
    """
    if tree is not None:
        raise ValueError("hierarchical mode has no flat probability vector")
    n = num_classes if num_classes is not None else logits.shape[-1]
    if n < 1:
        raise ValueError("need at least one active class")
    return softmax(logits[..., :n])


def map_uncertainty(
    logits: np.ndarray,
    measure: str,
    num_classes: int | None = None,
    tree: LabelTree | None = None,
) -> np.ndarray:
    """Per-pixel uncertainty from raw composited logits.

    Hierarchical mode uses mean per-level binary entropy for every measure;
    the flat measures assume one categorical distribution, which a label
    tree does not provide.
    """
    if tree is not None and len(tree.nodes) > 0:
        return hier_uncertainty(logits, tree)
    return np.asarray(pixel_uncertainty(semantic_probs(logits, num_classes), measure))


def refresh_maps(
    params: FieldParams,
    frames: list,
    render_cfg: RenderConfig,
    query_cfg: QueryConfig,
    num_classes: int | None = None,
    tree: LabelTree | None = None,
    snapshot: int = 0,
) -> dict[int, UncertaintyMap]:
    """Render every keyframe's uncertainty map on the strided grid.

    Deterministic given a parameter snapshot: the render uses fixed strata
    midpoints, so two refreshes of the same snapshot agree exactly.
    """
    maps: dict[int, UncertaintyMap] = {}
    for kf in frames:
        out = render_image(
            params,
            kf.intrinsics,
            kf.pose,
            render_cfg,
            stride=query_cfg.stride,
            n_samples=query_cfg.n_samples,
        )
        rows, cols = grid_shape(kf.intrinsics, query_cfg.stride)
        unc = map_uncertainty(out.logits, query_cfg.measure, num_classes, tree)
        maps[kf.frame_id] = UncertaintyMap(
            frame_id=kf.frame_id,
            values=unc.reshape(rows, cols),
            measure=query_cfg.measure,
            stride=query_cfg.stride,
            snapshot=snapshot,
        )
    return maps


def _excluded_cells(
    umap: UncertaintyMap, annotations: AnnotationStore | None, radius: float
) -> np.ndarray:
    """Boolean grid of map cells within ``radius`` full-res pixels of a click."""
    rows, cols = umap.values.shape
    banned = np.zeros((rows, cols), dtype=bool)
    if annotations is None:
        return banned
    anns = annotations.for_frame(umap.frame_id)
    if not anns:
        return banned
    s = umap.stride
    vv, uu = np.meshgrid(np.arange(rows) * s, np.arange(cols) * s, indexing="ij")
    for ann in anns:
        banned |= (uu - ann.u) ** 2 + (vv - ann.v) ** 2 <= radius**2
    return banned


def select_query(
    maps: dict[int, UncertaintyMap],
    rng: np.random.Generator,
    query_cfg: QueryConfig | None = None,
    annotations: AnnotationStore | None = None,
) -> QueryProposal:
    """Propose the next pixel to ask about.

    Frame choice is proportional to total map uncertainty; within the frame
    the pixel is uniform over the top-K pool (K = k_fraction of the map)
    after dropping cells near existing annotations. A frame whose pool is
    empty is discarded and the draw repeats over the remainder.
    """
    cfg = query_cfg or QueryConfig()
    if not maps:
        raise ValueError("no uncertainty maps to query from")
    candidates = dict(maps)
    while candidates:
        ids = sorted(candidates)
        totals = np.array([candidates[i].frame_total for i in ids], dtype=np.float64)
        if totals.sum() <= 0:
            probs = np.full(len(ids), 1.0 / len(ids))
        else:
            probs = totals / totals.sum()
        fid = ids[int(rng.choice(len(ids), p=probs))]
        umap = candidates[fid]
        banned = _excluded_cells(umap, annotations, cfg.exclusion_radius)
        values = np.where(banned, -np.inf, umap.values).ravel()
        k = max(1, int(round(cfg.k_fraction * values.size)))
        pool = np.argsort(-values, kind="stable")[:k]
        pool = pool[np.isfinite(values[pool])]
        if pool.size == 0:
            del candidates[fid]
            continue
        pick = int(pool[int(rng.integers(pool.size))])
        rows, cols = umap.values.shape
        r, c = divmod(pick, cols)
        return QueryProposal(
            frame_id=fid,
            u=int(c * umap.stride),
            v=int(r * umap.stride),
            value=float(umap.values[r, c]),
            measure=umap.measure,
            snapshot=umap.snapshot,
        )
    raise ValueError("every frame's query pool is excluded")
