"""Loss algebra, Adam, batch construction and mapping-step tests."""

import numpy as np
import pytest
from helpers import central_difference, params_to_vector, relative_error

from labelfield.field import EncodingConfig, init_params
from labelfield.keyframes import Annotation, AnnotationStore, Keyframe
from labelfield.optim import (
    AdamState,
    LabelSpace,
    LossWeights,
    OptimConfig,
    RenderedPixels,
    FrameStats,
    mapping_step,
    new_frame_stats,
    pixel_losses,
    sample_pixel_batch,
)
from labelfield.rendering import CameraIntrinsics, RenderConfig
from labelfield.semantics import ClassRegistry, LabelTree

ENC = EncodingConfig(bound_min=(-2, -2, -0.5), bound_max=(2, 2, 4), num_bands=2)
INTR = CameraIntrinsics(fx=20.0, fy=20.0, cx=8.0, cy=6.0, width=16, height=12)


def flat_space(n=3):
    reg = ClassRegistry()
    for i in range(n):
        reg.create_class(f"c{i}")
    return LabelSpace(mode="flat", registry=reg)


def make_frame(frame_id=0, depth_value=2.0):
    rgb = np.zeros((12, 16, 3), dtype=np.float32)
    rgb[..., 0] = 0.3
    rgb[..., 1] = 0.5
    rgb[..., 2] = 0.7
    depth = np.full((12, 16), depth_value, dtype=np.float32)
    return Keyframe(frame_id=frame_id, rgb=rgb, depth=depth, pose=np.eye(4), intrinsics=INTR)


class TestLossWeights:
    def test_default_term_weights(self):
        w = LossWeights()
        assert w.photometric == 5.0
        assert w.semantic == 8.0
        assert w.colour_enabled

    def test_round_trip(self):
        w = LossWeights(photometric=2.0, semantic=1.0, colour_enabled=False)
        assert LossWeights.from_dict(w.as_dict()) == w


class TestAdam:
    def reference(self, p0, grads, cfg):
        # Elementwise textbook update, one array.
        p = p0.astype(np.float64).copy()
        m = np.zeros_like(p)
        v = np.zeros_like(p)
        for t, g in enumerate(grads, start=1):
            g = g.astype(np.float64)
            m = cfg.beta1 * m + (1 - cfg.beta1) * g
            v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            p = p - cfg.map_lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        return p

    def test_matches_reference_over_three_steps(self):
        cfg = OptimConfig()
        params = init_params(0, 4, ENC, hidden_width=8, dtype=np.float64)
        state = AdamState(params)
        rng = np.random.default_rng(0)
        grad_seqs = []
        start = {name: arr.copy() for name, arr in params.arrays()}
        for _ in range(3):
            g = params.zeros_like()
            for _, arr in g.arrays():
                arr[:] = rng.standard_normal(arr.shape)
            grad_seqs.append({name: arr.copy() for name, arr in g.arrays()})
            state.update(params, g, cfg)
        for name, arr in params.arrays():
            expected = self.reference(start[name], [gs[name] for gs in grad_seqs], cfg)
            np.testing.assert_allclose(arr, expected, rtol=1e-12, atol=1e-12)

    def test_first_step_magnitude(self):
        # With bias correction the first update is ~lr per coordinate.
        cfg = OptimConfig(map_lr=1e-3)
        params = init_params(1, 2, ENC, hidden_width=8, dtype=np.float64)
        before = params.hidden[0].weight.copy()
        g = params.zeros_like()
        for _, arr in g.arrays():
            arr[:] = 1.0
        AdamState(params).update(params, g, cfg)
        step = before - params.hidden[0].weight
        np.testing.assert_allclose(step, cfg.map_lr, rtol=1e-6)

    def test_learning_rates_defaults(self):
        cfg = OptimConfig()
        assert cfg.map_lr == 1e-3
        assert cfg.pose_lr == 3e-3


class TestFrameStats:
    def test_ema_update(self):
        st = new_frame_stats()
        st.observe([0], [0], np.array([3.0]), (12, 16), decay=0.8)
        assert abs(st.ema_loss - (0.8 * 1.0 + 0.2 * 3.0)) < 1e-12

    def test_cell_assignment(self):
        st = new_frame_stats(grid_cells=4)
        st.observe([15], [11], np.array([9.0]), (12, 16), decay=0.5)
        assert st.cell_loss[3, 3] == 0.5 * 1.0 + 0.5 * 9.0
        assert st.cell_loss[0, 0] == 1.0


class TestBatchSampling:
    def test_batch_contains_all_annotations(self):
        frames = [make_frame(0), make_frame(1)]
        stats = {0: new_frame_stats(), 1: new_frame_stats()}
        store = AnnotationStore()
        store.add(Annotation(frame_id=0, u=2, v=3, label=1))
        store.add(Annotation(frame_id=1, u=5, v=1, label=2))
        cfg = OptimConfig(batch_pixels=20)
        batch = sample_pixel_batch(frames, stats, store, flat_space(), 16, cfg, np.random.default_rng(0))
        assert len(batch) == 22
        assert batch.sem_valid.sum() == 2
        # Annotations ride at the end, in store order.
        assert batch.us[-2] == 2 and batch.vs[-2] == 3 and batch.flat_ids[-2] == 1
        assert batch.us[-1] == 5 and batch.flat_ids[-1] == 2

    def test_pixels_within_bounds_and_targets_match(self):
        frames = [make_frame(0, depth_value=1.5)]
        stats = {0: new_frame_stats()}
        cfg = OptimConfig(batch_pixels=64)
        batch = sample_pixel_batch(
            frames, stats, AnnotationStore(), flat_space(), 16, cfg, np.random.default_rng(1)
        )
        assert np.all(batch.us >= 0) and np.all(batch.us < 16)
        assert np.all(batch.vs >= 0) and np.all(batch.vs < 12)
        np.testing.assert_allclose(batch.depth, 1.5)
        np.testing.assert_allclose(batch.rgb, np.tile([0.3, 0.5, 0.7], (64, 1)), atol=1e-7)

    def test_budget_follows_loss(self):
        frames = [make_frame(0), make_frame(1)]
        hot = new_frame_stats()
        hot.ema_loss = 10.0
        cold = new_frame_stats()
        cold.ema_loss = 0.01
        stats = {0: cold, 1: hot}
        cfg = OptimConfig(batch_pixels=100)
        batch = sample_pixel_batch(
            frames, stats, AnnotationStore(), flat_space(), 16, cfg, np.random.default_rng(2)
        )
        n_hot = int(np.sum(batch.frame_ids == 1))
        n_cold = int(np.sum(batch.frame_ids == 0))
        assert n_hot + n_cold == 100
        assert n_hot > 3 * n_cold

    def test_hier_labels_encoded(self):
        tree = LabelTree(max_depth=8)
        tree.create_node("0", "a")
        tree.create_node("01", "b")
        space = LabelSpace(mode="hierarchical", tree=tree)
        frames = [make_frame(0)]
        stats = {0: new_frame_stats()}
        store = AnnotationStore()
        store.add(Annotation(frame_id=0, u=1, v=1, label="01"))
        cfg = OptimConfig(batch_pixels=4)
        batch = sample_pixel_batch(frames, stats, store, space, 8, cfg, np.random.default_rng(3))
        np.testing.assert_array_equal(batch.hier_targets[-1], [0, 1, 0, 0, 0, 0, 0, 0])
        np.testing.assert_array_equal(batch.hier_mask[-1], [1, 1, 0, 0, 0, 0, 0, 0])

    def test_deterministic_given_rng(self):
        frames = [make_frame(0)]
        stats = {0: new_frame_stats()}
        cfg = OptimConfig(batch_pixels=32)
        a = sample_pixel_batch(frames, stats, AnnotationStore(), flat_space(), 16, cfg, np.random.default_rng(7))
        b = sample_pixel_batch(frames, stats, AnnotationStore(), flat_space(), 16, cfg, np.random.default_rng(7))
        np.testing.assert_array_equal(a.us, b.us)
        np.testing.assert_array_equal(a.vs, b.vs)


def tiny_batch():
    from labelfield.optim import PixelBatch

    return PixelBatch(
        frame_ids=np.zeros(2, dtype=np.int64),
        us=np.array([0, 1]),
        vs=np.array([0, 0]),
        rgb=np.array([[0.2, 0.2, 0.2], [0.8, 0.1, 0.5]]),
        depth=np.array([2.0, 0.0]),  # second pixel has no depth
        sem_valid=np.array([False, True]),
        flat_ids=np.array([-1, 1]),
        hier_targets=np.zeros((2, 4)),
        hier_mask=np.zeros((2, 4)),
    )


class TestPixelLosses:
    def test_hand_computed_geometric_term(self):
        batch = tiny_batch()
        rendered = RenderedPixels(
            depth=np.array([2.5, 1.0]),
            depth_var=np.array([0.04, 0.01]),
            colour=batch.rgb.copy(),  # no photometric error
            logits=np.zeros((2, 4)),
        )
        w = LossWeights(photometric=5.0, semantic=8.0)
        report, d_depth, d_colour, d_logits = pixel_losses(
            rendered, batch, w, flat_space(3)
        )
        # Only pixel 0 has depth: |2.5 - 2.0| / sqrt(0.04) = 2.5.
        assert abs(report.geometric - 2.5) < 1e-12
        assert report.photometric == 0.0
        # Gradient: sign(+0.5)/0.2 averaged over the single valid pixel.
        np.testing.assert_allclose(d_depth, [5.0, 0.0])
        assert not d_colour.any()

    def test_variance_floor_prevents_blowup(self):
        batch = tiny_batch()
        rendered = RenderedPixels(
            depth=np.array([2.1, 0.0]),
            depth_var=np.array([0.0, 0.0]),  # degenerate spread
            colour=batch.rgb.copy(),
            logits=np.zeros((2, 4)),
        )
        report, d_depth, _, _ = pixel_losses(rendered, batch, LossWeights(), flat_space(3))
        expected = 0.1 / np.sqrt(1e-6)
        np.testing.assert_allclose(report.geometric, expected, rtol=1e-9)
        assert np.isfinite(d_depth).all()

    def test_photometric_term_and_gradient(self):
        batch = tiny_batch()
        rendered = RenderedPixels(
            depth=batch.depth.copy(),
            depth_var=np.full(2, 1.0),
            colour=np.array([[0.5, 0.2, 0.2], [0.8, 0.1, 0.5]]),
            logits=np.zeros((2, 4)),
        )
        report, _, d_colour, _ = pixel_losses(rendered, batch, LossWeights(), flat_space(3))
        # Pixel 0 off by +0.3 in one channel; mean over 2 pixels.
        np.testing.assert_allclose(report.photometric, 0.3 / 2, rtol=1e-12)
        np.testing.assert_allclose(d_colour[0], [5.0 * 1 / 2, 0, 0])
        np.testing.assert_allclose(d_colour[1], 0.0)

    def test_colour_disabled_drops_term(self):
        batch = tiny_batch()
        rendered = RenderedPixels(
            depth=batch.depth.copy(),
            depth_var=np.full(2, 1.0),
            colour=np.zeros((2, 3)),  # would give a big error
            logits=np.zeros((2, 4)),
        )
        w = LossWeights(colour_enabled=False)
        report, _, d_colour, _ = pixel_losses(rendered, batch, w, flat_space(3))
        assert report.photometric == 0.0
        assert not d_colour.any()

    def test_semantic_term_only_on_labelled_pixels(self):
        batch = tiny_batch()
        rendered = RenderedPixels(
            depth=batch.depth.copy(),
            depth_var=np.full(2, 1.0),
            colour=batch.rgb.copy(),
            logits=np.array([[9.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0]]),
        )
        space = flat_space(3)
        report, _, _, d_logits = pixel_losses(rendered, batch, LossWeights(), space)
        assert abs(report.semantic - np.log(3.0)) < 1e-9  # uniform over 3 classes
        assert not d_logits[0].any()  # unlabelled pixel
        assert d_logits[1, :3].any()
        assert not d_logits[1, 3:].any()  # inactive class slots

    def test_cotangents_match_finite_differences(self):
        rng = np.random.default_rng(11)
        batch = tiny_batch()
        base_depth = np.array([2.3, 1.2])
        base_var = np.array([0.05, 0.2])
        base_colour = rng.uniform(0.1, 0.9, (2, 3))
        base_logits = rng.standard_normal((2, 4))
        w = LossWeights()
        space = flat_space(3)

        def total(depth, colour, logits):
            r = RenderedPixels(depth=depth, depth_var=base_var, colour=colour, logits=logits)
            rep, _, _, _ = pixel_losses(r, batch, w, space)
            return rep.geometric + w.photometric * rep.photometric + w.semantic * rep.semantic

        rendered = RenderedPixels(
            depth=base_depth, depth_var=base_var, colour=base_colour, logits=base_logits
        )
        _, d_depth, d_colour, d_logits = pixel_losses(rendered, batch, w, space)

        num_depth = central_difference(
            lambda x: total(x, base_colour, base_logits), base_depth.copy(), eps=1e-6
        )
        np.testing.assert_allclose(d_depth, num_depth, rtol=1e-6, atol=1e-9)
        num_colour = central_difference(
            lambda x: total(base_depth, x.reshape(2, 3), base_logits), base_colour.ravel(), eps=1e-6
        )
        np.testing.assert_allclose(d_colour.ravel(), num_colour, rtol=1e-5, atol=1e-9)
        num_logits = central_difference(
            lambda x: total(base_depth, base_colour, x.reshape(2, 4)), base_logits.ravel(), eps=1e-6
        )
        np.testing.assert_allclose(d_logits.ravel(), num_logits, rtol=1e-6, atol=1e-9)


class TestMappingStep:
    RENDER = RenderConfig(near=0.2, far=4.0, n_samples=8)
    OPT = OptimConfig(batch_pixels=48, train_samples=8)

    def run_steps(self, n_steps, weights=LossWeights(), with_clicks=True, seed=0):
        params = init_params(3, 16, ENC, hidden_width=16, dtype=np.float32)
        adam = AdamState(params)
        frames = [make_frame(0)]
        stats = {0: new_frame_stats()}
        store = AnnotationStore()
        space = flat_space(2)
        if with_clicks:
            store.add(Annotation(frame_id=0, u=3, v=3, label=0))
            store.add(Annotation(frame_id=0, u=12, v=9, label=1))
        rng = np.random.default_rng(seed)
        reports = []
        for _ in range(n_steps):
            reports.append(
                mapping_step(
                    params, adam, frames, stats, store, space, weights, self.OPT, self.RENDER, rng
                )
            )
        return params, reports

    def test_loss_decreases(self):
        params, reports = self.run_steps(80)
        early = np.mean([r.total for r in reports[:10]])
        late = np.mean([r.total for r in reports[-10:]])
        assert late < 0.5 * early
        assert params.all_finite()

    def test_semantic_loss_decreases_with_clicks(self):
        _, reports = self.run_steps(80)
        early = np.mean([r.semantic for r in reports[:5]])
        late = np.mean([r.semantic for r in reports[-5:]])
        assert late < early

    def test_reports_batch_composition(self):
        _, reports = self.run_steps(1)
        assert reports[0].n_pixels == 48 + 2
        assert reports[0].n_labelled == 2
        assert reports[0].n_valid_depth == 50

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_batch_skips_update(self):
        params = init_params(3, 16, ENC, hidden_width=16, dtype=np.float32)
        params.hidden[0].weight[0, 0] = np.nan  # poisons every gradient
        before = params.hidden[1].weight.copy()
        adam = AdamState(params)
        frames = [make_frame(0)]
        stats = {0: new_frame_stats()}
        report = mapping_step(
            params,
            adam,
            frames,
            stats,
            AnnotationStore(),
            flat_space(2),
            LossWeights(),
            self.OPT,
            self.RENDER,
            np.random.default_rng(0),
        )
        assert report.skipped
        np.testing.assert_array_equal(params.hidden[1].weight, before)

    def test_deterministic_given_seed(self):
        p1, _ = self.run_steps(5, seed=9)
        p2, _ = self.run_steps(5, seed=9)
        for (_, a), (_, b) in zip(p1.arrays(), p2.arrays()):
            np.testing.assert_array_equal(a, b)
