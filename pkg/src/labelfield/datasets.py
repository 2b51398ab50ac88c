"""On-disk RGB-D sequence format: manifest.json + poses.txt + PNG images.

Layout of a sequence directory:

    manifest.json     intrinsics, depth scale, far plane, per-frame paths
    poses.txt         one 4x4 world-from-camera matrix per line, row-major
    rgb/000000.png    8-bit RGB
    depth/000000.png  16-bit single channel, depth / depth_scale
    labels/000000.png optional 8-bit class ids + 1 (0 means unlabelled)

Frames are loaded lazily; poses are validated on load.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .keyframes import Keyframe, check_pose
from .rendering import CameraIntrinsics

MANIFEST_VERSION = 1
DEFAULT_DEPTH_SCALE = 0.001  # metres per stored unit (millimetres)


def _save_rgb(path: Path, rgb: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _load_rgb(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _save_depth(path: Path, depth: np.ndarray, scale: float) -> None:
    units = np.round(np.asarray(depth, dtype=np.float64) / scale)
    if np.any(units > 65535):
        raise ValueError("depth exceeds the 16-bit range at this depth scale")
    Image.fromarray(units.astype(np.uint16)).save(path)


def _load_depth(path: Path, scale: float) -> np.ndarray:
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.uint16)
    return (arr.astype(np.float32)) * scale


def _save_labels(path: Path, labels: np.ndarray) -> None:
    ids = np.asarray(labels, dtype=np.int32)
    if ids.min() < -1 or ids.max() > 253:
        raise ValueError("label ids must be in [-1, 253]")
    Image.fromarray((ids + 1).astype(np.uint8), mode="L").save(path)


def _load_labels(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path), dtype=np.int32)
    return arr - 1


def write_sequence(
    root,
    frames: list,
    labels: list | None = None,
    far: float = 6.0,
    depth_scale: float = DEFAULT_DEPTH_SCALE,
    extra: dict | None = None,
) -> Path:
    """Write keyframes (and optional ground-truth label maps) to ``root``."""
    root = Path(root)
    for sub in ("rgb", "depth") + (("labels",) if labels is not None else ()):
        (root / sub).mkdir(parents=True, exist_ok=True)
    if labels is not None and len(labels) != len(frames):
        raise ValueError("need one label map per frame")

    manifest_frames = []
    pose_lines = []
    for i, kf in enumerate(frames):
        stem = f"{kf.frame_id:06d}.png"
        _save_rgb(root / "rgb" / stem, kf.rgb)
        _save_depth(root / "depth" / stem, kf.depth, depth_scale)
        entry = {"frame_id": kf.frame_id, "rgb": f"rgb/{stem}", "depth": f"depth/{stem}"}
        if labels is not None:
            _save_labels(root / "labels" / stem, labels[i])
            entry["labels"] = f"labels/{stem}"
        manifest_frames.append(entry)
        pose_lines.append(" ".join(f"{x:.17g}" for x in kf.pose.ravel()))

    (root / "poses.txt").write_text("\n".join(pose_lines) + "\n")
    manifest = {
        "version": MANIFEST_VERSION,
        "intrinsics": frames[0].intrinsics.as_dict(),
        "depth_scale": depth_scale,
        "far": far,
        "frames": manifest_frames,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


class SequenceDataset:
    """Lazy reader over a sequence directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no manifest.json under {self.root}")
        self.manifest = json.loads(manifest_path.read_text())
        if self.manifest.get("version") != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {self.manifest.get('version')}")
        self.intrinsics = CameraIntrinsics.from_dict(self.manifest["intrinsics"])
        self.depth_scale = float(self.manifest.get("depth_scale", DEFAULT_DEPTH_SCALE))
        self.far = float(self.manifest.get("far", 6.0))
        rows = np.loadtxt(self.root / "poses.txt", dtype=np.float64, ndmin=2)
        if rows.shape != (len(self.manifest["frames"]), 16):
            raise ValueError("poses.txt does not match the manifest frame count")
        self.poses = [check_pose(row.reshape(4, 4)) for row in rows]

    def __len__(self) -> int:
        return len(self.manifest["frames"])

    def frame_ids(self) -> list:
        return [entry["frame_id"] for entry in self.manifest["frames"]]

    def load_frame(self, index: int) -> Keyframe:
        entry = self.manifest["frames"][index]
        rgb = _load_rgb(self.root / entry["rgb"])
        depth = _load_depth(self.root / entry["depth"], self.depth_scale)
        return Keyframe(
            frame_id=int(entry["frame_id"]),
            rgb=rgb,
            depth=depth,
            pose=self.poses[index],
            intrinsics=self.intrinsics,
        )

    def load_labels(self, index: int) -> np.ndarray | None:
        entry = self.manifest["frames"][index]
        if "labels" not in entry:
            return None
        return _load_labels(self.root / entry["labels"])

    def load_all(self) -> list:
        return [self.load_frame(i) for i in range(len(self))]


def load_sequence(root) -> SequenceDataset:
    return SequenceDataset(root)
