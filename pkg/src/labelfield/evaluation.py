"""Evaluation harness: mIoU-versus-clicks curves for scripted and
hands-free labelling strategies on synthetic ground-truth scenes.

A run owns one engine session, feeds it clicks according to a strategy,
and scores rendered keyframe semantics against analytic ground truth at
fixed click-count checkpoints. Aggregation emits deterministic CSV/JSON
curve files.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .field import EncodingConfig
from .optim import OptimConfig
from .query import QueryConfig
from .rendering import RenderConfig, grid_shape, render_image
from .session import LabelSession, SessionConfig
from .synthetic import (
    SyntheticScene,
    centroid_clicks,
    default_intrinsics,
    error_guided_click,
    make_arc_poses,
    make_keyframes,
)

STRATEGIES = (
    "scripted_manual",
    "auto_entropy",
    "auto_least_conf",
    "auto_margin",
    "auto_random",
)
STRATEGY_MEASURES = {
    "auto_entropy": "entropy",
    "auto_least_conf": "least_confidence",
    "auto_margin": "margin",
}
DEFAULT_CHECKPOINTS = (0, 4, 8, 12, 20, 40)


@dataclass
class IoUReport:
    """Segmentation quality at one click count of one run."""

    per_class: dict[int, float]
    miou: float
    clicks: int
    strategy: str
    seed: int
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "miou": self.miou,
            "clicks": self.clicks,
            "strategy": self.strategy,
            "seed": self.seed,
            "seconds": self.seconds,
        }


@dataclass
class CurvePoint:
    """One aggregated point of an mIoU-versus-clicks curve."""

    clicks: int
    mean: float
    std: float
    n_seeds: int


@dataclass
class EvalConfig:
    """Everything a harness run is parameterised by."""

    n_frames: int = 6
    width: int = 160
    height: int = 120
    far: float = 6.5
    num_bands: int = 10
    warmup_steps: int = 300
    steps_per_round: int = 700  # scripted strategies, one round = one click per class
    steps_per_click: int = 80  # hands-free strategies
    checkpoints: tuple = DEFAULT_CHECKPOINTS
    eval_stride: int = 2
    eval_samples: int = 48
    policy: str = "centroid"  # scripted click placement: centroid | error_guided
    colour_enabled: bool = True
    train_samples: int = 32
    guided_sigma: float = 0.05
    k_fraction: float = 0.05
    query_stride: int = 4
    query_samples: int = 16

    def __post_init__(self):
        if self.policy not in ("centroid", "error_guided"):
            raise ValueError(f"unknown click policy {self.policy!r}")
        if list(self.checkpoints) != sorted(set(self.checkpoints)):
            raise ValueError("checkpoints must be strictly increasing")

    def as_dict(self) -> dict:
        return {
            "n_frames": self.n_frames,
            "width": self.width,
            "height": self.height,
            "far": self.far,
            "num_bands": self.num_bands,
            "warmup_steps": self.warmup_steps,
            "steps_per_round": self.steps_per_round,
            "steps_per_click": self.steps_per_click,
            "checkpoints": list(self.checkpoints),
            "eval_stride": self.eval_stride,
            "eval_samples": self.eval_samples,
            "policy": self.policy,
            "colour_enabled": self.colour_enabled,
            "train_samples": self.train_samples,
            "guided_sigma": self.guided_sigma,
            "k_fraction": self.k_fraction,
            "query_stride": self.query_stride,
            "query_samples": self.query_samples,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        d = dict(d)
        if "checkpoints" in d:
            d["checkpoints"] = tuple(d["checkpoints"])
        return cls(**d)


def compute_miou(
    pred: np.ndarray,
    gt: np.ndarray,
    num_classes: int,
    ignore_label: int = -1,
) -> tuple[float, dict[int, float]]:
    """(mIoU, per-class IoU) over non-ignored pixels.

    Classes absent from the ground truth are excluded from the mean;
    their IoU is reported as NaN.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    if np.any((g < 0) | (g >= num_classes)):
        raise ValueError("gt labels outside [0, num_classes)")
    if np.any((p < 0) | (p >= num_classes)):
        raise ValueError("pred labels outside [0, num_classes)")
    conf = np.bincount(g * num_classes + p, minlength=num_classes**2).reshape(
        num_classes, num_classes
    )
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    present = conf.sum(1) > 0
    per_class = {}
    for c in range(num_classes):
        if present[c]:
            per_class[c] = float(inter[c] / union[c]) if union[c] else 0.0
        else:
            per_class[c] = float("nan")
    miou = float(np.mean([per_class[c] for c in range(num_classes) if present[c]]))
    return miou, per_class


class EvalRun:
    """One strategy run over a scene with ground truth; owns the session.

    Pass frames/views/class_names/bounds to evaluate a pre-built labelled
    sequence instead of rendering a synthetic scene.
    """

    def __init__(
        self,
        scene: SyntheticScene | None,
        strategy: str,
        seed: int,
        cfg: EvalConfig,
        frames: list | None = None,
        views: list | None = None,
        class_names: list | None = None,
        bounds: tuple | None = None,
    ):
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.scene = scene
        self.strategy = strategy
        self.seed = seed
        self.cfg = cfg
        if frames is None:
            intr = default_intrinsics(cfg.width, cfg.height)
            poses = make_arc_poses(cfg.n_frames)
            frames, views = make_keyframes(scene, poses, intr, far=cfg.far)
            class_names = scene.class_names
            bounds = (scene.bound_min, scene.bound_max)
        elif views is None or class_names is None or bounds is None:
            raise ValueError("pre-built runs need frames, views, class_names and bounds")
        self.frames, self.views = frames, views
        measure = STRATEGY_MEASURES.get(strategy, "entropy")
        session_cfg = SessionConfig(
            mode="flat",
            colour_enabled=cfg.colour_enabled,
            seed=seed,
            encoding=EncodingConfig(
                bound_min=tuple(bounds[0]),
                bound_max=tuple(bounds[1]),
                num_bands=cfg.num_bands,
            ),
            optim=OptimConfig(train_samples=cfg.train_samples),
            render=RenderConfig(far=cfg.far, guided_sigma=cfg.guided_sigma),
            query=QueryConfig(
                measure=measure,
                k_fraction=cfg.k_fraction,
                stride=cfg.query_stride,
                n_samples=cfg.query_samples,
            ),
        )
        self.session = LabelSession(session_cfg)
        for kf in self.frames:
            self.session.add_keyframe(kf)
        for name in class_names:
            self.session.define_class(name)
        self.num_classes = len(class_names)

    # -- scoring -----------------------------------------------------------

    def predicted_maps(self) -> list[np.ndarray]:
        """Rendered argmax class ids for every keyframe at eval resolution."""
        cfg = self.cfg
        ev = RenderConfig(far=cfg.far, deterministic=True)
        maps = []
        for kf in self.frames:
            out = render_image(
                self.session.params,
                kf.intrinsics,
                kf.pose,
                ev,
                stride=cfg.eval_stride,
                n_samples=cfg.eval_samples,
            )
            shape = grid_shape(kf.intrinsics, cfg.eval_stride)
            maps.append(
                np.argmax(out.logits[:, : self.num_classes], axis=-1).reshape(shape)
            )
        return maps

    def evaluate(self, clicks: int, t0: float) -> IoUReport:
        stride = self.cfg.eval_stride
        pred = np.stack(self.predicted_maps())
        gt = np.stack([v.labels[::stride, ::stride] for v in self.views])
        miou, per_class = compute_miou(pred, gt, self.num_classes)
        return IoUReport(
            per_class=per_class,
            miou=miou,
            clicks=clicks,
            strategy=self.strategy,
            seed=self.seed,
            seconds=time.time() - t0,
        )

    # -- click sources -------------------------------------------------------

    def _scripted_round(self, round_index: int) -> list:
        if self.cfg.policy == "centroid":
            return centroid_clicks(
                self.views, list(range(self.num_classes)), round_index
            )
        labelled = {(a.frame_id, a.u, a.v) for a in self.session.annotations}
        predicted = None
        clicks = []
        for _ in range(self.num_classes):
            if predicted is None:
                stride = self.cfg.eval_stride
                predicted = []
                for pm in self.predicted_maps():
                    full = np.repeat(np.repeat(pm, stride, 0), stride, 1)
                    predicted.append(
                        full[: self.views[0].labels.shape[0], : self.views[0].labels.shape[1]]
                    )
            ann = error_guided_click(self.views, predicted, labelled)
            if ann is None:
                break
            clicks.append(ann)
            labelled.add((ann.frame_id, ann.u, ann.v))
        return clicks

    def _answer_gt(self, frame_id: int, u: int, v: int) -> int:
        label = int(self.views[frame_id].labels[v, u])
        if label < 0:
            # no surface at the queried pixel; fall back to the commonest class
            label = int(np.bincount(self.views[frame_id].labels.ravel().clip(0)).argmax())
        return label

    def _auto_click(self) -> None:
        if self.strategy == "auto_random":
            rng = self.session.rng
            taken = {(a.frame_id, a.u, a.v) for a in self.session.annotations}
            h, w = self.views[0].labels.shape
            while True:
                fid = int(rng.integers(len(self.frames)))
                u = int(rng.integers(w))
                v = int(rng.integers(h))
                if (fid, u, v) not in taken:
                    break
            self.session.annotate(
                fid, u, v, self._answer_gt(fid, u, v), source="query_answer",
                timestamp=0.0,
            )
        else:
            q = self.session.suggest_query()
            self.session.answer_query(self._answer_gt(q.frame_id, q.u, q.v), timestamp=0.0)

    # -- main loop ----------------------------------------------------------

    def run(self, budget: int) -> list[IoUReport]:
        """Run to ``budget`` clicks, scoring at every configured checkpoint."""
        t0 = time.time()
        cfg = self.cfg
        checkpoints = [c for c in cfg.checkpoints if c <= budget]
        reports = []
        self.session.step(cfg.warmup_steps)
        clicks = 0
        if checkpoints and checkpoints[0] == 0:
            reports.append(self.evaluate(0, t0))
            checkpoints = checkpoints[1:]
        if self.strategy == "scripted_manual":
            round_index = 0
            while clicks < budget:
                for ann in self._scripted_round(round_index):
                    if clicks >= budget:
                        break
                    self.session.annotate(
                        ann.frame_id, ann.u, ann.v, int(ann.label),
                        source=ann.source, timestamp=0.0,
                    )
                    clicks += 1
                round_index += 1
                self.session.step(cfg.steps_per_round)
                while checkpoints and clicks >= checkpoints[0]:
                    reports.append(self.evaluate(checkpoints.pop(0), t0))
        else:
            while clicks < budget:
                self._auto_click()
                clicks += 1
                self.session.step(cfg.steps_per_click)
                while checkpoints and clicks >= checkpoints[0]:
                    reports.append(self.evaluate(checkpoints.pop(0), t0))
        return reports


def run_session(
    scene: SyntheticScene,
    strategy: str,
    budget: int,
    seed: int,
    cfg: EvalConfig | None = None,
) -> list[IoUReport]:
    """Convenience wrapper: build an EvalRun and execute it."""
    return EvalRun(scene, strategy, seed, cfg or EvalConfig()).run(budget)


def aggregate_curves(reports: list[IoUReport]) -> dict[str, list[CurvePoint]]:
    """Group per-seed reports into mean/std curves keyed by strategy."""
    by_strategy: dict[str, dict[int, list[float]]] = {}
    for r in reports:
        by_strategy.setdefault(r.strategy, {}).setdefault(r.clicks, []).append(r.miou)
    curves = {}
    for strategy, points in sorted(by_strategy.items()):
        curves[strategy] = [
            CurvePoint(
                clicks=clicks,
                mean=float(np.mean(vals)),
                std=float(np.std(vals)),
                n_seeds=len(vals),
            )
            for clicks, vals in sorted(points.items())
        ]
    return curves


def emit_curves(reports: list[IoUReport], csv_path, json_path) -> None:
    """Write the aggregate table (CSV) and per-seed detail (JSON).

    Output is deterministic for fixed inputs: rows are sorted by
    (strategy, clicks, seed) and floats are serialised with repr.
    """
    if not reports:
        raise ValueError("no reports to emit")
    curves = aggregate_curves(reports)
    lines = ["strategy,clicks,mean_miou,std_miou,n_seeds"]
    for strategy, points in curves.items():
        for p in points:
            lines.append(f"{strategy},{p.clicks},{p.mean!r},{p.std!r},{p.n_seeds}")
    with open(csv_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    detail = {
        "curves": {
            strategy: [
                {"clicks": p.clicks, "mean": p.mean, "std": p.std, "n_seeds": p.n_seeds}
                for p in points
            ]
            for strategy, points in curves.items()
        },
        "reports": [
            r.as_dict()
            for r in sorted(reports, key=lambda r: (r.strategy, r.clicks, r.seed))
        ],
    }
    for rec in detail["reports"]:
        rec.pop("seconds")  # wall-clock would break byte-identical reruns
    with open(json_path, "w") as f:
        json.dump(detail, f, sort_keys=True, indent=1)
        f.write("\n")
