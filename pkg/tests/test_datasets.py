"""Sequence read/write round-trip and validation tests."""

import json

import numpy as np
import pytest

from labelfield.datasets import load_sequence, write_sequence
from labelfield.synthetic import (
    DEMO_FAR,
    build_demo_room,
    default_intrinsics,
    make_arc_poses,
    make_keyframes,
)


@pytest.fixture(scope="module")
def small_sequence():
    scene = build_demo_room()
    intr = default_intrinsics(40, 30)
    frames, views = make_keyframes(scene, make_arc_poses(3), intr, far=DEMO_FAR)
    return frames, [v.labels for v in views]


class TestRoundTrip:
    def test_images_and_poses_survive(self, small_sequence, tmp_path):
        frames, labels = small_sequence
        write_sequence(tmp_path / "seq", frames, labels, far=DEMO_FAR)
        ds = load_sequence(tmp_path / "seq")
        assert len(ds) == 3
        assert ds.frame_ids() == [0, 1, 2]
        assert ds.far == DEMO_FAR
        for i, kf in enumerate(frames):
            loaded = ds.load_frame(i)
            assert loaded.frame_id == kf.frame_id
            # 8-bit colour and millimetre depth quantisation.
            np.testing.assert_allclose(loaded.rgb, kf.rgb, atol=0.5 / 255)
            np.testing.assert_allclose(loaded.depth, kf.depth, atol=5.1e-4)
            np.testing.assert_allclose(loaded.pose, kf.pose, atol=1e-15)
            assert loaded.intrinsics == kf.intrinsics
            np.testing.assert_array_equal(ds.load_labels(i), labels[i])

    def test_labels_are_optional(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        write_sequence(tmp_path / "seq", frames, far=DEMO_FAR)
        ds = load_sequence(tmp_path / "seq")
        assert ds.load_labels(0) is None

    def test_extra_manifest_fields(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        write_sequence(tmp_path / "seq", frames, extra={"scene": {"kind": "room"}})
        ds = load_sequence(tmp_path / "seq")
        assert ds.manifest["scene"] == {"kind": "room"}

    def test_loading_is_lazy(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        write_sequence(tmp_path / "seq", frames)
        for p in (tmp_path / "seq" / "rgb").iterdir():
            p.unlink()
        ds = load_sequence(tmp_path / "seq")  # metadata only, must not fail
        assert len(ds) == 3
        with pytest.raises(FileNotFoundError):
            ds.load_frame(0)


class TestValidation:
    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_sequence(tmp_path)

    def test_bad_version(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        root = write_sequence(tmp_path / "seq", frames)
        manifest = json.loads((root / "manifest.json").read_text())
        manifest["version"] = 99
        (root / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(ValueError, match="version"):
            load_sequence(root)

    def test_pose_count_mismatch(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        root = write_sequence(tmp_path / "seq", frames)
        lines = (root / "poses.txt").read_text().strip().splitlines()
        (root / "poses.txt").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValueError, match="frame count"):
            load_sequence(root)

    def test_corrupt_pose_rejected(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        root = write_sequence(tmp_path / "seq", frames)
        lines = (root / "poses.txt").read_text().strip().splitlines()
        vals = [float(x) for x in lines[0].split()]
        vals[0] = 2.0  # break orthonormality
        lines[0] = " ".join(f"{x:.17g}" for x in vals)
        (root / "poses.txt").write_text("\n".join(lines) + "\n")
        with pytest.raises(ValueError, match="orthonormal"):
            load_sequence(root)

    def test_depth_beyond_16bit_rejected(self, small_sequence, tmp_path):
        frames, _ = small_sequence
        big = frames[0]
        big.depth[0, 0] = 70.0  # 70 m in millimetres overflows uint16
        try:
            with pytest.raises(ValueError, match="16-bit"):
                write_sequence(tmp_path / "seq", [big])
        finally:
            big.depth[0, 0] = 2.0

    def test_label_range_enforced(self, small_sequence, tmp_path):
        frames, labels = small_sequence
        bad = labels[0].copy()
        bad[0, 0] = 255
        with pytest.raises(ValueError, match="label ids"):
            write_sequence(tmp_path / "seq", frames[:1], [bad])
