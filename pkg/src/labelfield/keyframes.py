"""Keyframe and click-annotation containers shared across the package."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rendering import CameraIntrinsics

POSE_ORTHONORMAL_TOL = 1e-4


def check_pose(pose: np.ndarray) -> np.ndarray:
    """Validate a 4x4 world-from-camera matrix; returns it as float64."""
    T = np.asarray(pose, dtype=np.float64)
    if T.shape != (4, 4):
        raise ValueError(f"pose must be 4x4, got {T.shape}")
    if not np.allclose(T[3], [0, 0, 0, 1], atol=1e-9):
        raise ValueError("pose bottom row must be [0, 0, 0, 1]")
    R = T[:3, :3]
    err = np.abs(R @ R.T - np.eye(3)).max()
    if err > POSE_ORTHONORMAL_TOL:
        raise ValueError(f"rotation not orthonormal (max deviation {err:.2e})")
    if np.linalg.det(R) < 0:
        raise ValueError("rotation must be right-handed")
    return T


@dataclass
class Keyframe:
    """One posed RGB-D view; rgb in [0, 1], depth in metres with 0 = missing."""

    frame_id: int
    rgb: np.ndarray  # (H, W, 3) float32
    depth: np.ndarray  # (H, W) float32
    pose: np.ndarray  # (4, 4) world-from-camera
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.pose = check_pose(self.pose)
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise ValueError("rgb and depth sizes differ")
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError("intrinsics do not match image size")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float32)
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.depth.shape


@dataclass(frozen=True)
class Annotation:
    """A labelled pixel. ``label`` is a class id (flat) or a tree path (hier)."""

    frame_id: int
    u: int
    v: int
    label: object  # int or str
    source: str = "user"  # "user" or "query_answer"
    timestamp: float = 0.0

    def key(self) -> tuple[int, int, int]:
        return (self.frame_id, self.v, self.u)

    def as_dict(self) -> dict:
        return {
            "frame_id": self.frame_id,
            "u": self.u,
            "v": self.v,
            "label": self.label,
            "source": self.source,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Annotation":
        return cls(
            frame_id=int(d["frame_id"]),
            u=int(d["u"]),
            v=int(d["v"]),
            label=d["label"],
            source=str(d.get("source", "user")),
            timestamp=float(d.get("timestamp", 0.0)),
        )


@dataclass
class AnnotationStore:
    """Ordered annotations with last-write-wins per pixel."""

    entries: list = field(default_factory=list)

    def add(self, ann: Annotation) -> None:
        # A later click on the same pixel replaces the earlier label.
        self.entries = [e for e in self.entries if e.key() != ann.key()]
        self.entries.append(ann)

    def for_frame(self, frame_id: int) -> list:
        return [e for e in self.entries if e.frame_id == frame_id]

    def remove(self, frame_id: int, u: int, v: int) -> bool:
        """Delete the annotation at a pixel; True if one was there."""
        key = (frame_id, v, u)
        kept = [e for e in self.entries if e.key() != key]
        removed = len(kept) != len(self.entries)
        self.entries = kept
        return removed

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def as_list(self) -> list:
        return [e.as_dict() for e in self.entries]

    @classmethod
    def from_list(cls, items: list) -> "AnnotationStore":
        store = cls()
        for d in items:
            store.add(Annotation.from_dict(d))
        return store
