"""Session coordinator: ingest, annotate, previews, persistence, threading."""

import time

import numpy as np
import pytest

from labelfield.field import EncodingConfig
from labelfield.rendering import CameraIntrinsics
from labelfield.session import LabelSession, MappingLoop, SessionConfig

INTR = CameraIntrinsics(width=16, height=12, fx=8.0, fy=8.0, cx=7.5, cy=5.5)


def tiny_config(**kw):
    enc = EncodingConfig(bound_min=(-2, -2, 0), bound_max=(2, 2, 4), num_bands=2)
    return SessionConfig(seed=3, encoding=enc, **kw)


def frame_arrays(shade=0.5, depth_value=1.5):
    rgb = np.full((12, 16, 3), shade, dtype=np.float32)
    depth = np.full((12, 16), depth_value, dtype=np.float32)
    return rgb, depth


def make_session(**kw):
    s = LabelSession(tiny_config(**kw))
    rgb, depth = frame_arrays()
    s.ingest_frame(rgb, depth, np.eye(4), INTR)
    return s


class TestSessionConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="mode"):
            tiny_config(mode="multilabel")
        with pytest.raises(ValueError, match="stride"):
            tiny_config(keyframe_stride=0)
        with pytest.raises(ValueError, match="image_scale"):
            tiny_config(image_scale=0.0)
        with pytest.raises(ValueError, match="image_scale"):
            tiny_config(image_scale=1.2)

    def test_round_trip(self):
        cfg = tiny_config(mode="hierarchical", colour_enabled=False, image_scale=0.5)
        assert SessionConfig.from_dict(cfg.as_dict()) == cfg


class TestIngest:
    def test_stride_keeps_every_nth_offer(self):
        s = LabelSession(tiny_config(keyframe_stride=5))
        rgb, depth = frame_arrays()
        kept = [s.ingest_frame(rgb, depth, np.eye(4), INTR) for _ in range(10)]
        assert [k for k in kept if k is not None] == [0, 1]
        assert [kf.frame_id for kf in s.frames] == [0, 1]

    def test_ids_dense_and_monotone(self):
        s = LabelSession(tiny_config())
        rgb, depth = frame_arrays()
        ids = [s.ingest_frame(rgb, depth, np.eye(4), INTR) for _ in range(4)]
        assert ids == [0, 1, 2, 3]

    def test_malformed_frames_rejected(self):
        s = LabelSession(tiny_config())
        rgb, depth = frame_arrays()
        with pytest.raises(ValueError, match="rgb"):
            s.ingest_frame(rgb[..., :2], depth, np.eye(4), INTR)
        with pytest.raises(ValueError, match="sizes"):
            s.ingest_frame(rgb, depth[:6], np.eye(4), INTR)
        bad_pose = np.eye(4)
        bad_pose[0, 0] = 2.0
        with pytest.raises(ValueError, match="orthonormal"):
            s.ingest_frame(rgb, depth, bad_pose, INTR)
        assert s.frames == []

    def test_image_scale_downsamples_on_ingest(self):
        s = LabelSession(tiny_config(image_scale=0.5))
        rgb, depth = frame_arrays()
        s.ingest_frame(rgb, depth, np.eye(4), INTR)
        kf = s.frame(0)
        assert kf.shape == (6, 8)
        assert kf.intrinsics.width == 8
        assert kf.intrinsics.fx == pytest.approx(4.0)

    def test_rejected_offer_does_not_bump_version(self):
        s = LabelSession(tiny_config(keyframe_stride=2))
        rgb, depth = frame_arrays()
        s.ingest_frame(rgb, depth, np.eye(4), INTR)
        v = s.snapshot_version
        assert s.ingest_frame(rgb, depth, np.eye(4), INTR) is None
        assert s.snapshot_version == v


class TestAnnotate:
    def test_first_click_defines_class_on_the_fly(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        assert s.registry.id_by_name("mug") == 0
        assert len(s.annotations) == 1

    def test_known_name_reuses_id(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        s.annotate(0, 5, 4, "mug")
        assert len(s.registry) == 1
        assert len(s.annotations) == 2

    def test_same_pixel_overwrites(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        s.annotate(0, 3, 4, "desk")
        assert len(s.annotations) == 1
        assert s.annotations.entries[0].label == 1

    def test_bad_inputs_rejected(self):
        s = make_session()
        with pytest.raises(KeyError, match="keyframe"):
            s.annotate(9, 0, 0, "mug")
        with pytest.raises(ValueError, match="outside"):
            s.annotate(0, 16, 0, "mug")
        with pytest.raises(ValueError, match="unknown class id"):
            s.annotate(0, 0, 0, 5)

    def test_hier_mode_takes_paths_only(self):
        s = LabelSession(tiny_config(mode="hierarchical"))
        rgb, depth = frame_arrays()
        s.ingest_frame(rgb, depth, np.eye(4), INTR)
        s.define_node("0", "background")
        s.annotate(0, 1, 1, "0")
        with pytest.raises(ValueError, match="unknown tree node"):
            s.annotate(0, 1, 2, "1")

    def test_mode_mismatch_on_schema_edits(self):
        s = make_session()
        with pytest.raises(ValueError, match="flat mode"):
            s.define_node("0", "x")
        h = LabelSession(tiny_config(mode="hierarchical"))
        with pytest.raises(ValueError, match="hierarchical mode"):
            h.define_class("x")

    def test_delete_annotation(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        assert s.delete_annotation(0, 3, 4) is True
        assert s.delete_annotation(0, 3, 4) is False
        assert len(s.annotations) == 0


class TestStepAndPreview:
    def test_step_without_frames_raises(self):
        s = LabelSession(tiny_config())
        with pytest.raises(ValueError, match="no keyframes"):
            s.step()

    def test_preview_shapes_and_kinds(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        s.step(2)
        assert s.render_preview(0, "colour", stride=4).shape == (3, 4, 3)
        assert s.render_preview(0, "depth", stride=4).shape == (3, 4)
        assert s.render_preview(0, "semantics", stride=4).shape == (3, 4, 3)
        assert s.render_preview(0, "uncertainty", stride=4).shape == (3, 4)
        assert s.render_preview(0, "overlay", stride=4).shape == (3, 4, 3)

    def test_unknown_kind_and_frame_rejected(self):
        s = make_session()
        with pytest.raises(ValueError, match="preview"):
            s.render_preview(0, "normals")
        with pytest.raises(KeyError, match="keyframe"):
            s.render_preview(3, "colour")

    def test_preview_never_mutates_params(self):
        s = make_session()
        s.step(1)
        before = [a.copy() for _, a in s.params.arrays()]
        s.render_preview(0, "overlay", stride=4)
        for (_, now), then in zip(s.params.arrays(), before):
            np.testing.assert_array_equal(now, then)

    def test_opacity_zero_overlay_equals_colour(self):
        s = make_session()
        s.config.overlay_opacity = 0.0
        s.step(1)
        np.testing.assert_allclose(
            s.render_preview(0, "overlay", stride=4),
            s.render_preview(0, "colour", stride=4),
            atol=1e-12,
        )

    def test_semantics_preview_without_clicks_is_valid(self):
        s = make_session()
        img = s.render_preview(0, "semantics", stride=4)
        assert np.all(img >= 0) and np.all(img <= 1)

    def test_hier_preview_smoke(self):
        s = LabelSession(tiny_config(mode="hierarchical"))
        rgb, depth = frame_arrays()
        s.ingest_frame(rgb, depth, np.eye(4), INTR)
        s.define_node("0", "background")
        s.define_node("1", "foreground")
        s.annotate(0, 1, 1, "1")
        s.step(1)
        assert s.render_preview(0, "semantics", stride=4).shape == (3, 4, 3)
        assert s.render_preview(0, "uncertainty", stride=4).shape == (3, 4)


class TestQueries:
    def test_suggest_then_answer_records_query_answer(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        s.step(1)
        q = s.suggest_query()
        n = s.answer_query("desk")
        assert n == 2
        latest = s.annotations.entries[-1]
        assert (latest.frame_id, latest.u, latest.v) == (q.frame_id, q.u, q.v)
        assert latest.source == "query_answer"

    def test_answer_without_pending_raises(self):
        s = make_session()
        with pytest.raises(ValueError, match="pending"):
            s.answer_query("mug")

    def test_maps_cached_until_cadence(self):
        s = make_session()
        s.annotate(0, 3, 4, "mug")
        s.step(1)
        s.suggest_query()
        first = s._maps_version
        s.suggest_query()
        assert s._maps_version == first
        s.step(s.config.query.refresh_every)
        s.suggest_query()
        assert s._maps_version > first


class TestPersistence:
    def test_save_load_byte_identical(self, tmp_path):
        s = make_session()
        s.annotate(0, 3, 4, "mug", timestamp=11.0)
        s.step(3)
        p1, p2 = tmp_path / "a.session", tmp_path / "b.session"
        s.save(p1)
        LabelSession.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_resume_identical_next_step_loss(self, tmp_path):
        s = make_session()
        s.annotate(0, 3, 4, "mug", timestamp=11.0)
        s.step(2)
        path = tmp_path / "mid.session"
        s.save(path)
        t = LabelSession.load(path)
        assert s.step(1).total == t.step(1).total

    def test_load_restores_schema_and_counters(self, tmp_path):
        s = make_session()
        s.annotate(0, 3, 4, "mug", timestamp=1.0)
        s.annotate(0, 5, 6, "desk", timestamp=2.0)
        s.step(2)
        path = tmp_path / "s.session"
        s.save(path)
        t = LabelSession.load(path)
        assert t.registry.name_of(1) == "desk"
        assert t.total_steps == 2
        assert len(t.annotations) == 2
        assert t.frame(0).shape == (12, 16)

    def test_corrupt_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.session"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(ValueError, match="session file"):
            LabelSession.load(path)

    def test_truncated_file_rejected(self, tmp_path):
        s = make_session()
        path = tmp_path / "s.session"
        s.save(path)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) - 64])
        with pytest.raises(ValueError, match="truncated"):
            LabelSession.load(path)

    def test_hier_session_round_trip(self, tmp_path):
        s = LabelSession(tiny_config(mode="hierarchical"))
        rgb, depth = frame_arrays()
        s.ingest_frame(rgb, depth, np.eye(4), INTR)
        s.define_node("0", "background")
        s.define_node("00", "wall")
        s.annotate(0, 2, 2, "00", timestamp=5.0)
        s.step(1)
        p1, p2 = tmp_path / "h1.session", tmp_path / "h2.session"
        s.save(p1)
        t = LabelSession.load(p1)
        assert t.tree.nodes["00"].name == "wall"
        t.save(p2)
        assert p1.read_bytes() == p2.read_bytes()


class TestMappingLoop:
    def test_background_steps_accumulate_and_stop(self):
        s = make_session()
        loop = MappingLoop(s)
        loop.start()
        deadline = time.time() + 5.0
        while s.total_steps < 3 and time.time() < deadline:
            time.sleep(0.01)
        assert loop.running
        loop.stop()
        assert not loop.running
        assert s.total_steps >= 3
        settled = s.total_steps
        time.sleep(0.05)
        assert s.total_steps == settled

    def test_annotate_while_optimising(self):
        s = make_session()
        loop = MappingLoop(s)
        loop.start()
        try:
            for i in range(5):
                s.annotate(0, 2 + i, 3, "mug")
            assert len(s.annotations) == 5
        finally:
            loop.stop()

    def test_pause_halts_progress(self):
        s = make_session()
        loop = MappingLoop(s)
        loop.pause()
        loop.start()
        time.sleep(0.05)
        assert s.total_steps == 0
        loop.resume()
        deadline = time.time() + 5.0
        while s.total_steps < 1 and time.time() < deadline:
            time.sleep(0.01)
        loop.stop()
        assert s.total_steps >= 1

    def test_double_start_rejected(self):
        s = make_session()
        loop = MappingLoop(s)
        loop.start()
        try:
            with pytest.raises(RuntimeError, match="started"):
                loop.start()
        finally:
            loop.stop()
