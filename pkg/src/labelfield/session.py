"""The labelling coordinator: keyframes, clicks, previews, persistence.

A LabelSession owns everything one interactive labelling run needs: the
field parameters and their optimiser state, the registered keyframes, the
annotation store, the label schema (flat registry or hierarchy), query
state, and the random stream. All mutation goes through the session's
lock so a background optimiser thread and foreground annotate/preview
calls can interleave safely.
"""

from __future__ import annotations

import json
import struct
import threading
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .field import EncodingConfig, FieldParams, init_params
from .keyframes import Annotation, AnnotationStore, Keyframe, check_pose
from .optim import (
    AdamState,
    FrameStats,
    LabelSpace,
    LossReport,
    LossWeights,
    OptimConfig,
    mapping_step,
    new_frame_stats,
)
from .query import QueryConfig, QueryProposal, refresh_maps, select_query
from .rendering import CameraIntrinsics, RenderConfig, grid_shape, render_image_refined
from .semantics import (
    ClassRegistry,
    LabelTree,
    class_colour,
    decode_hier_batch,
    hier_blend_colour,
)
from .query import map_uncertainty

SESSION_MAGIC = b"LFSS"
SESSION_VERSION = 1
PREVIEW_KINDS = ("colour", "depth", "semantics", "uncertainty", "overlay")


@dataclass
class SessionConfig:
    """Everything a labelling run is parameterised by."""

    mode: str = "flat"  # "flat" or "hierarchical"
    colour_enabled: bool = True
    keyframe_stride: int = 1
    image_scale: float = 1.0
    seed: int = 0
    semantic_dim: int = 16
    encoding: EncodingConfig = dataclass_field(
        default_factory=lambda: EncodingConfig(
            bound_min=(-4.0, -4.0, -4.0), bound_max=(4.0, 4.0, 4.0)
        )
    )
    optim: OptimConfig = dataclass_field(default_factory=OptimConfig)
    render: RenderConfig = dataclass_field(default_factory=RenderConfig)
    query: QueryConfig = dataclass_field(default_factory=QueryConfig)
    overlay_opacity: float = 0.5

    def __post_init__(self):
        if self.mode not in ("flat", "hierarchical"):
            raise ValueError(f"unknown label mode {self.mode!r}")
        if self.keyframe_stride < 1:
            raise ValueError("keyframe_stride must be >= 1")
        if not 0.0 < self.image_scale <= 1.0:
            raise ValueError("image_scale must be in (0, 1]")

    def as_dict(self) -> dict:
        return {
            "mode": self.mode,
            "colour_enabled": self.colour_enabled,
            "keyframe_stride": self.keyframe_stride,
            "image_scale": self.image_scale,
            "seed": self.seed,
            "semantic_dim": self.semantic_dim,
            "encoding": self.encoding.as_dict(),
            "optim": self.optim.as_dict(),
            "render": self.render.as_dict(),
            "query": self.query.as_dict(),
            "overlay_opacity": self.overlay_opacity,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SessionConfig":
        return cls(
            mode=d["mode"],
            colour_enabled=bool(d["colour_enabled"]),
            keyframe_stride=int(d["keyframe_stride"]),
            image_scale=float(d["image_scale"]),
            seed=int(d["seed"]),
            semantic_dim=int(d["semantic_dim"]),
            encoding=EncodingConfig.from_dict(d["encoding"]),
            optim=OptimConfig.from_dict(d["optim"]),
            render=RenderConfig.from_dict(d["render"]),
            query=QueryConfig.from_dict(d["query"]),
            overlay_opacity=float(d["overlay_opacity"]),
        )


def _rescale_image(img: np.ndarray, scale: float) -> np.ndarray:
    """Nearest-neighbour resample; deterministic and depth-safe."""
    if scale == 1.0:
        return img
    h, w = img.shape[:2]
    nh, nw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    vi = np.minimum((np.arange(nh) / scale).astype(np.int64), h - 1)
    ui = np.minimum((np.arange(nw) / scale).astype(np.int64), w - 1)
    return img[vi][:, ui]


class LabelSession:
    """One interactive labelling run over a growing set of keyframes."""

    def __init__(self, config: SessionConfig):
        self.config = config
        self.lock = threading.RLock()
        self.rng = np.random.default_rng(config.seed)
        self.params = init_params(config.seed, config.semantic_dim, config.encoding)
        self.adam = AdamState(self.params)
        self.frames: list[Keyframe] = []
        self.stats: dict[int, FrameStats] = {}
        self.annotations = AnnotationStore()
        self.registry = ClassRegistry()
        self.tree = LabelTree()
        self.weights = LossWeights(colour_enabled=config.colour_enabled)
        self.total_steps = 0
        self.frames_offered = 0
        self.snapshot_version = 0
        self.last_loss: LossReport | None = None
        self._maps = {}
        self._maps_version = -1
        self._pending_query: QueryProposal | None = None

    # -- label space ---------------------------------------------------

    @property
    def label_space(self) -> LabelSpace:
        if self.config.mode == "flat":
            return LabelSpace(mode="flat", registry=self.registry)
        return LabelSpace(mode="hierarchical", tree=self.tree)

    def frame(self, frame_id: int) -> Keyframe:
        for kf in self.frames:
            if kf.frame_id == frame_id:
                return kf
        raise KeyError(f"unknown keyframe {frame_id}")

    # -- ingest ----------------------------------------------------------

    def ingest_frame(
        self,
        rgb: np.ndarray,
        depth: np.ndarray,
        pose: np.ndarray,
        intrinsics: CameraIntrinsics,
    ) -> int | None:
        """Offer one posed RGB-D frame; every stride-th offer is kept.

        Returns the new keyframe id, or None when the frame is skipped.
        Images are downscaled by config.image_scale on ingest.
        """
        rgb = np.asarray(rgb, dtype=np.float32)
        depth = np.asarray(depth, dtype=np.float32)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise ValueError("rgb must be (H, W, 3)")
        if depth.shape != rgb.shape[:2]:
            raise ValueError("rgb and depth sizes differ")
        pose = check_pose(pose)
        with self.lock:
            offer_index = self.frames_offered
            self.frames_offered += 1
            if offer_index % self.config.keyframe_stride != 0:
                return None
            scale = self.config.image_scale
            if scale != 1.0:
                rgb = _rescale_image(rgb, scale)
                depth = _rescale_image(depth, scale)
                intrinsics = intrinsics.scaled(scale)
            fid = len(self.frames)
            kf = Keyframe(
                frame_id=fid, rgb=rgb, depth=depth, pose=pose, intrinsics=intrinsics
            )
            self.frames.append(kf)
            self.stats[fid] = new_frame_stats(self.config.optim.grid_cells)
            self.snapshot_version += 1
            return fid

    def add_keyframe(self, kf: Keyframe) -> int:
        """Register an already-built keyframe verbatim (no stride, no scaling)."""
        with self.lock:
            if any(f.frame_id == kf.frame_id for f in self.frames):
                raise ValueError(f"keyframe {kf.frame_id} already registered")
            self.frames.append(kf)
            self.stats[kf.frame_id] = new_frame_stats(self.config.optim.grid_cells)
            self.frames_offered += 1
            self.snapshot_version += 1
            return kf.frame_id

    # -- annotations -----------------------------------------------------

    def define_class(self, name: str) -> int:
        if self.config.mode != "flat":
            raise ValueError("flat classes cannot be defined in hierarchical mode")
        with self.lock:
            cid = self.registry.create_class(name)
            self.snapshot_version += 1
            return cid

    def define_node(self, path: str, name: str):
        if self.config.mode != "hierarchical":
            raise ValueError("tree nodes cannot be defined in flat mode")
        with self.lock:
            node = self.tree.create_node(path, name)
            self.snapshot_version += 1
            return node

    def annotate(
        self,
        frame_id: int,
        u: int,
        v: int,
        label,
        source: str = "user",
        timestamp: float | None = None,
    ) -> int:
        """Record one click; returns the annotation count.

        Flat mode accepts a known class id or a class name (an unseen name
        defines the class on the fly). Hierarchical mode accepts a tree
        path whose node must already exist.
        """
        kf = self.frame(frame_id)
        h, w = kf.shape
        if not (0 <= u < w and 0 <= v < h):
            raise ValueError(f"pixel ({u}, {v}) outside {w}x{h} frame")
        with self.lock:
            if self.config.mode == "flat":
                if isinstance(label, str):
                    if self.registry.has(label):
                        label = self.registry.id_by_name(label)
                    else:
                        label = self.registry.create_class(label)
                label = int(label)
                if not 0 <= label < len(self.registry):
                    raise ValueError(f"unknown class id {label}")
                if label >= self.params.semantic_dim:
                    raise ValueError("class id exceeds the field's semantic width")
            else:
                label = str(label)
                if label not in self.tree.nodes:
                    raise ValueError(f"unknown tree node {label!r}")
            stamp = time.time() if timestamp is None else float(timestamp)
            self.annotations.add(
                Annotation(
                    frame_id=frame_id, u=u, v=v, label=label,
                    source=source, timestamp=stamp,
                )
            )
            self.snapshot_version += 1
            return len(self.annotations)

    def delete_annotation(self, frame_id: int, u: int, v: int) -> bool:
        with self.lock:
            removed = self.annotations.remove(frame_id, u, v)
            if removed:
                self.snapshot_version += 1
            return removed

    # -- optimisation ----------------------------------------------------

    def step(self, n: int = 1) -> LossReport | None:
        """Run n mapping steps; returns the last loss report."""
        if not self.frames:
            raise ValueError("no keyframes to optimise against")
        report = None
        for _ in range(n):
            with self.lock:
                report = mapping_step(
                    self.params,
                    self.adam,
                    self.frames,
                    self.stats,
                    self.annotations,
                    self.label_space,
                    self.weights,
                    self.config.optim,
                    self.config.render,
                    self.rng,
                )
                self.total_steps += 1
                self.snapshot_version += 1
                self.last_loss = report
        return report

    # -- previews ----------------------------------------------------------

    def _active_classes(self) -> int:
        return max(1, len(self.registry))

    def _label_image(self, logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(ids, palette colours in [0,1]) for a flat or hierarchical field."""
        if self.config.mode == "flat":
            ids = np.argmax(logits[..., : self._active_classes()], axis=-1)
            colours = class_colour(ids).astype(np.float64) / 255.0
            return ids, colours
        ids = decode_hier_batch(logits, self.tree)
        return ids, hier_blend_colour(logits, self.tree)

    def render_preview(
        self, frame_id: int, what: str = "overlay", stride: int = 2
    ) -> np.ndarray:
        """Render one preview image from the current snapshot.

        colour: (h, w, 3) float in [0, 1]; depth: (h, w) metres;
        semantics: (h, w, 3) palette colours; uncertainty: (h, w) scalars;
        overlay: colour blended with semantics at config.overlay_opacity.
        Never mutates the field.
        """
        if what not in PREVIEW_KINDS:
            raise ValueError(f"unknown preview kind {what!r}")
        kf = self.frame(frame_id)
        with self.lock:
            out = render_image_refined(
                self.params, kf.intrinsics, kf.pose, self.config.render, stride=stride
            )
        rows, cols = grid_shape(kf.intrinsics, stride)
        if what == "colour":
            return out.colour.reshape(rows, cols, 3)
        if what == "depth":
            return out.depth.reshape(rows, cols)
        logits = out.logits.reshape(rows, cols, -1)
        if what == "semantics":
            return self._label_image(logits)[1]
        if what == "uncertainty":
            tree = self.tree if self.config.mode == "hierarchical" else None
            return map_uncertainty(
                logits, self.config.query.measure, self._active_classes(), tree
            )
        alpha = self.config.overlay_opacity
        colour = out.colour.reshape(rows, cols, 3)
        return (1.0 - alpha) * colour + alpha * self._label_image(logits)[1]

    # -- hands-free queries ----------------------------------------------

    @property
    def pending_query(self):
        return self._pending_query

    def suggest_query(self) -> QueryProposal:
        """Propose the next pixel to label, refreshing stale maps first."""
        if not self.frames:
            raise ValueError("no keyframes to query")
        with self.lock:
            stale = (
                not self._maps
                or self.total_steps - self._maps_version >= self.config.query.refresh_every
            )
            if stale:
                tree = self.tree if self.config.mode == "hierarchical" else None
                self._maps = refresh_maps(
                    self.params,
                    self.frames,
                    self.config.render,
                    self.config.query,
                    num_classes=self._active_classes(),
                    tree=tree,
                    snapshot=self.snapshot_version,
                )
                self._maps_version = self.total_steps
            proposal = select_query(
                self._maps, self.rng, self.config.query, self.annotations
            )
            self._pending_query = proposal
            return proposal

    def answer_query(self, label, timestamp: float | None = None) -> int:
        """Answer the outstanding proposal with a label."""
        with self.lock:
            if self._pending_query is None:
                raise ValueError("no query is pending")
            q = self._pending_query
            self._pending_query = None
            return self.annotate(
                q.frame_id, q.u, q.v, label, source="query_answer", timestamp=timestamp
            )

    # -- snapshots and persistence ----------------------------------------

    def snapshot_state(self) -> dict:
        """Point-in-time summary for UIs and services."""
        with self.lock:
            schema = (
                self.registry.as_dict()
                if self.config.mode == "flat"
                else self.tree.as_dict()
            )
            return {
                "version": self.snapshot_version,
                "mode": self.config.mode,
                "steps": self.total_steps,
                "frames": [kf.frame_id for kf in self.frames],
                "annotations": len(self.annotations),
                "schema": schema,
                "last_loss": self.last_loss.as_dict() if self.last_loss else None,
                "pending_query": (
                    self._pending_query.as_dict() if self._pending_query else None
                ),
            }

    def save(self, path) -> None:
        """Serialise the whole session; loading restores it bit-for-bit."""
        with self.lock:
            arrays: list[tuple[str, np.ndarray]] = []
            for name, arr in self.params.arrays():
                arrays.append((f"params/{name}", arr))
            for name in self.adam.m:
                arrays.append((f"adam/m/{name}", self.adam.m[name]))
            for name in self.adam.v:
                arrays.append((f"adam/v/{name}", self.adam.v[name]))
            for kf in self.frames:
                arrays.append((f"frame/{kf.frame_id}/rgb", kf.rgb))
                arrays.append((f"frame/{kf.frame_id}/depth", kf.depth))
                arrays.append((f"frame/{kf.frame_id}/pose", kf.pose))
                arrays.append(
                    (f"stats/{kf.frame_id}/cell_loss", self.stats[kf.frame_id].cell_loss)
                )
            manifest = {
                "config": self.config.as_dict(),
                "registry": self.registry.as_dict(),
                "tree": self.tree.as_dict(),
                "annotations": self.annotations.as_list(),
                "frames": [
                    {
                        "frame_id": kf.frame_id,
                        "intrinsics": kf.intrinsics.as_dict(),
                        "ema_loss": self.stats[kf.frame_id].ema_loss,
                    }
                    for kf in self.frames
                ],
                "adam_step": self.adam.step,
                "total_steps": self.total_steps,
                "frames_offered": self.frames_offered,
                "snapshot_version": self.snapshot_version,
                "rng_state": self.rng.bit_generator.state,
                "arrays": [
                    {"name": name, "dtype": str(a.dtype), "shape": list(a.shape)}
                    for name, a in arrays
                ],
            }
            blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
            with open(path, "wb") as f:
                f.write(SESSION_MAGIC)
                f.write(struct.pack("<IQ", SESSION_VERSION, len(blob)))
                f.write(blob)
                for _, a in arrays:
                    f.write(np.ascontiguousarray(a).tobytes())

    @classmethod
    def load(cls, path) -> "LabelSession":
        with open(path, "rb") as f:
            magic = f.read(4)
            if magic != SESSION_MAGIC:
                raise ValueError("not a session file")
            version, blob_len = struct.unpack("<IQ", f.read(12))
            if version != SESSION_VERSION:
                raise ValueError(f"unsupported session version {version}")
            manifest = json.loads(f.read(blob_len).decode())
            data: dict[str, np.ndarray] = {}
            for spec_ in manifest["arrays"]:
                n = int(np.prod(spec_["shape"])) if spec_["shape"] else 1
                dtype = np.dtype(spec_["dtype"])
                buf = f.read(n * dtype.itemsize)
                if len(buf) != n * dtype.itemsize:
                    raise ValueError("session file truncated")
                data[spec_["name"]] = np.frombuffer(buf, dtype=dtype).reshape(
                    spec_["shape"]
                ).copy()
            if f.read(1):
                raise ValueError("trailing bytes in session file")

        config = SessionConfig.from_dict(manifest["config"])
        session = cls(config)
        for name, arr in session.params.arrays():
            arr[...] = data[f"params/{name}"]
        session.adam.step = int(manifest["adam_step"])
        for name in session.adam.m:
            session.adam.m[name][...] = data[f"adam/m/{name}"]
            session.adam.v[name][...] = data[f"adam/v/{name}"]
        session.registry = ClassRegistry.from_dict(manifest["registry"])
        session.tree = LabelTree.from_dict(manifest["tree"])
        for rec in manifest["frames"]:
            fid = int(rec["frame_id"])
            kf = Keyframe(
                frame_id=fid,
                rgb=data[f"frame/{fid}/rgb"],
                depth=data[f"frame/{fid}/depth"],
                pose=data[f"frame/{fid}/pose"],
                intrinsics=CameraIntrinsics.from_dict(rec["intrinsics"]),
            )
            session.frames.append(kf)
            stat = new_frame_stats(config.optim.grid_cells)
            stat.ema_loss = float(rec["ema_loss"])
            stat.cell_loss[...] = data[f"stats/{fid}/cell_loss"]
            session.stats[fid] = stat
        session.annotations = AnnotationStore.from_list(manifest["annotations"])
        session.total_steps = int(manifest["total_steps"])
        session.frames_offered = int(manifest["frames_offered"])
        session.snapshot_version = int(manifest["snapshot_version"])
        session.rng.bit_generator.state = manifest["rng_state"]
        return session


class MappingLoop:
    """Background optimiser thread for interactive services."""

    def __init__(self, session: LabelSession, settle: float = 0.0):
        self.session = session
        self.settle = settle
        self._stop = threading.Event()
        self._pause = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> None:
        if self._thread is not None:
            raise RuntimeError("loop already started")
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.is_set():
            if self._pause.is_set() or not self.session.frames:
                time.sleep(0.01)
                continue
            self.session.step(1)
            if self.settle:
                time.sleep(self.settle)

    def pause(self) -> None:
        self._pause.set()

    def resume(self) -> None:
        self._pause.clear()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
            self._thread = None

    @property
    def running(self) -> bool:
        return self._thread is not None and not self._stop.is_set()
