"""Acceptance criteria with pinned thresholds, runnable headless.

Each criterion is a small function returning a CriterionResult; the CLI
`acceptance` subcommand and the acceptance test module both dispatch
through run_criteria so thresholds live in exactly one place.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .evaluation import EvalConfig, EvalRun, compute_miou, emit_curves, run_session
from .field import EncodingConfig, init_params
from .meshing import extract_mesh
from .optim import (
    LabelSpace,
    LossWeights,
    OptimConfig,
    PixelBatch,
    RenderedPixels,
    pixel_losses,
)
from .rendering import (
    RenderConfig,
    SampleSet,
    composite,
    render_backward,
    render_image_refined,
    render_rays,
)
from .semantics import (
    ClassRegistry,
    LabelTree,
    decode_hier,
    encode_hier_label,
    entropy,
    flat_probs,
    hier_loss,
    softmax,
)
from .session import LabelSession, SessionConfig
from .synthetic import (
    build_cluttered_room,
    build_demo_room,
    default_intrinsics,
    make_arc_poses,
    make_keyframes,
)

# Scaled-experiment knobs shared by every heavy criterion. Pinned by pilot
# runs; the thresholds below assume exactly these settings.
SCENE_WIDTH = 160
SCENE_HEIGHT = 120
N_FRAMES = 6
WARMUP_STEPS = 300
STEPS_PER_ROUND = 700
STEPS_PER_CLICK = 80
ACTIVE_SEEDS = (0, 1, 2, 3, 4)
ACTIVE_BUDGET = 40

# Pinned thresholds.
GRAD_REL_TOL = 1e-4
COMPOSITE_ABS_TOL = 1e-10
TELESCOPE_TOL_F32 = 1e-6
SOFTMAX_SUM_TOL = 1e-6
ENTROPY_TOL = 1e-9
BCE_TOL = 1e-9
DEPTH_ERR_M = 0.02
DEPTH_FRACTION = 0.95
MESH_RESOLUTION = 64
MESH_TOL_DIAGONALS = 1.5
CLICK_CURVE_MIN = {4: 0.60, 8: 0.75, 12: 0.80}
CHANCE_CEILING = 0.30
MONOTONE_SLACK = 0.05
SINGLE_CLICK_RECALL = 0.70
ABLATION_TARGET = 0.75
ABLATION_MAX_CLICKS = 12  # 1.5x the 8 clicks at which the colour run must hit 0.75


@dataclass
class CriterionResult:
    name: str
    passed: bool
    details: str
    seconds: float

    def line(self) -> str:
        word = "PASS" if self.passed else "FAIL"
        return f"[{word}] {self.name}: {self.details} ({self.seconds:.1f}s)"


def _scaled_config(**overrides) -> EvalConfig:
    base = dict(
        n_frames=N_FRAMES,
        width=SCENE_WIDTH,
        height=SCENE_HEIGHT,
        warmup_steps=WARMUP_STEPS,
        steps_per_round=STEPS_PER_ROUND,
        steps_per_click=STEPS_PER_CLICK,
    )
    base.update(overrides)
    return EvalConfig(**base)


# -- fast oracle criteria ----------------------------------------------------


def check_gradients(ctx: dict) -> CriterionResult:
    """Full-loss analytic gradients vs central differences, tiny field."""
    t0 = time.time()
    enc = EncodingConfig(bound_min=(-2.0,) * 3, bound_max=(2.0,) * 3, num_bands=2)
    params = init_params(5, 4, enc, hidden_width=8, dtype=np.float64)
    cfg = RenderConfig(near=0.5, far=3.0, n_samples=4, deterministic=True)
    origins = np.zeros((3, 3))
    dirs = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.0, 0.1, 1.0]])
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    registry = ClassRegistry()
    for name in ("a", "b", "c"):
        registry.create_class(name)
    space = LabelSpace(mode="flat", registry=registry, tree=LabelTree())
    weights = LossWeights()
    # one pixel carries each term: ray 0 depth, ray 1 colour, ray 2 a label
    batch = PixelBatch(
        frame_ids=np.zeros(3, dtype=np.int64),
        us=np.arange(3),
        vs=np.arange(3),
        rgb=np.array([[0.0, 0.0, 0.0], [0.2, 0.7, 0.4], [0.0, 0.0, 0.0]]),
        depth=np.array([1.7, 0.0, 0.0]),
        sem_valid=np.array([False, False, True]),
        flat_ids=np.array([-1, -1, 2]),
        hier_targets=np.zeros((3, 4)),
        hier_mask=np.zeros((3, 4)),
    )
    base_batch = render_rays(params, origins, dirs, cfg)
    base_var = base_batch.depth_var.copy()  # normaliser is a constant in the objective

    def loss_of(p) -> float:
        out = render_rays(p, origins, dirs, cfg)
        rendered = RenderedPixels(
            depth=out.depth, depth_var=base_var, colour=out.colour, logits=out.logits
        )
        rep, _, _, _ = pixel_losses(rendered, batch, weights, space)
        return rep.total

    out, cache = render_rays(params, origins, dirs, cfg, want_cache=True)
    rendered = RenderedPixels(
        depth=out.depth, depth_var=base_var, colour=out.colour, logits=out.logits
    )
    _, d_depth, d_colour, d_logits = pixel_losses(rendered, batch, weights, space)
    grads = render_backward(params, out, cache, d_depth, d_colour, d_logits)

    worst = 0.0
    eps = 1e-6
    grad_by_name = dict(grads.arrays())
    for name, arr in params.arrays():
        flat = arr.reshape(-1)
        gflat = grad_by_name[name].reshape(-1)
        for i in range(flat.shape[0]):
            keep = flat[i]
            flat[i] = keep + eps
            hi = loss_of(params)
            flat[i] = keep - eps
            lo = loss_of(params)
            flat[i] = keep
            num = (hi - lo) / (2 * eps)
            denom = max(abs(num), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(num - gflat[i]) / denom)
    seconds = time.time() - t0
    return CriterionResult(
        "gradient_check",
        worst < GRAD_REL_TOL and seconds < 10.0,
        f"max rel err {worst:.2e} (tol {GRAD_REL_TOL:.0e})",
        seconds,
    )


def _composite_reference(depths, densities, colours, logits, last_delta):
    """Independent long-double compositing, loop-form."""
    ld = np.longdouble
    n = depths.shape[0]
    deltas = np.empty(n, dtype=ld)
    deltas[:-1] = np.diff(depths.astype(ld))
    deltas[-1] = ld(last_delta)
    occ = 1 - np.exp(-densities.astype(ld) * deltas)
    weights = np.empty(n, dtype=ld)
    trans = ld(1.0)
    for i in range(n):
        weights[i] = occ[i] * trans
        trans = trans * (1 - occ[i])
    depth = (weights * depths.astype(ld)).sum()
    colour = (weights[:, None] * colours.astype(ld)).sum(0)
    sem = (weights[:, None] * logits.astype(ld)).sum(0)
    var = (weights * (depths.astype(ld) - depth) ** 2).sum()
    return weights, depth, var, colour, sem


def check_compositing(ctx: dict) -> CriterionResult:
    t0 = time.time()
    rng = np.random.default_rng(17)
    worst = 0.0
    worst_tel = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        depths = np.sort(rng.uniform(0.1, 5.0, n))
        densities = rng.uniform(0.0, 8.0, n)
        colours = rng.uniform(0.0, 1.0, (n, 3))
        logits = rng.standard_normal((n, 4))
        last_delta = float(rng.uniform(0.05, 0.5))
        got = composite(
            SampleSet(depths=depths, densities=densities, colours=colours, logits=logits),
            last_delta,
        )
        w_ref, d_ref, v_ref, c_ref, s_ref = _composite_reference(
            depths, densities, colours, logits, last_delta
        )
        worst = max(
            worst,
            float(np.max(np.abs(got.weights - w_ref.astype(np.float64)))),
            abs(got.depth - float(d_ref)),
            abs(got.depth_var - float(v_ref)),
            float(np.max(np.abs(got.colour - c_ref.astype(np.float64)))),
            float(np.max(np.abs(got.logits - s_ref.astype(np.float64)))),
        )
        # telescoping identity in single precision
        got32 = composite(
            SampleSet(
                depths=depths.astype(np.float32),
                densities=densities.astype(np.float32),
                colours=colours.astype(np.float32),
                logits=logits.astype(np.float32),
            ),
            last_delta,
        )
        tel = abs(got32.weights.sum() - (1.0 - np.prod(1.0 - got32.occupancies)))
        worst_tel = max(worst_tel, float(tel))
    seconds = time.time() - t0
    ok = worst < COMPOSITE_ABS_TOL and worst_tel < TELESCOPE_TOL_F32 and seconds < 5.0
    return CriterionResult(
        "compositing_oracle",
        ok,
        f"max abs err {worst:.2e} (tol 1e-10), telescoping f32 {worst_tel:.2e} (tol 1e-6)",
        seconds,
    )


def check_semantics(ctx: dict) -> CriterionResult:
    t0 = time.time()
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((500, 9))
    probs = softmax(logits)
    sum_err = float(np.max(np.abs(probs.sum(-1) - 1.0)))

    ent_err = 0.0
    for c in (2, 3, 7, 16):
        ent_err = max(ent_err, abs(float(entropy(flat_probs(np.zeros(c), c))) - np.log(c)))

    # exhaustive encode/decode round trip: every node of the full depth-4
    # tree, which contains every possible path of any tree of depth <= 4
    tree = LabelTree(max_depth=4)
    paths = []
    for depth in range(1, 5):
        for bits in range(2**depth):
            path = format(bits, f"0{depth}b")
            tree.create_node(path, path)
            paths.append(path)
    roundtrip_ok = True
    for path in paths:
        targets, mask = encode_hier_label(path, tree.max_depth)
        hard = (2.0 * targets - 1.0) * 10.0 * mask
        roundtrip_ok &= decode_hier(hard, tree) == path
    n_paths = len(paths)

    # masked BCE at sigma=0.5: every active level contributes ln 2
    bce_err = 0.0
    for L in (1, 2, 3, 4):
        losses, _ = hier_loss(np.zeros(L), np.zeros(L), np.ones(L))
        bce_err = max(bce_err, abs(float(losses) - L * np.log(2.0)))

    seconds = time.time() - t0
    ok = (
        sum_err < SOFTMAX_SUM_TOL
        and ent_err < ENTROPY_TOL
        and roundtrip_ok
        and bce_err < BCE_TOL
        and seconds < 5.0
    )
    return CriterionResult(
        "semantics_algebra",
        ok,
        f"softmax sum err {sum_err:.1e}, entropy err {ent_err:.1e}, "
        f"{n_paths} paths round-trip, BCE err {bce_err:.1e}",
        seconds,
    )


# -- scaled experiments -------------------------------------------------------


def check_toy_reconstruction(ctx: dict) -> CriterionResult:
    """Geometry-only quality: depth error and mesh-sphere agreement."""
    t0 = time.time()
    scene = build_demo_room()
    intr = default_intrinsics(SCENE_WIDTH, SCENE_HEIGHT)
    frames, views = make_keyframes(scene, make_arc_poses(N_FRAMES), intr, far=6.5)
    cfg = SessionConfig(
        seed=0,
        encoding=EncodingConfig(
            bound_min=scene.bound_min, bound_max=scene.bound_max, num_bands=10
        ),
        # the eval harness's tight guided band, plus a denser ray batch: the
        # step count is fixed, so supervision per step is the only axis left,
        # and this geometry-only run has wall-time to spend on it (the
        # semantics experiments keep the lighter default batch)
        render=RenderConfig(far=6.5, guided_sigma=0.05),
        optim=OptimConfig(train_samples=32, batch_pixels=480),
    )
    session = LabelSession(cfg)
    for kf in frames:
        session.add_keyframe(kf)
    session.step(2000)

    # depth error over valid pixels of every keyframe
    good = 0
    valid = 0
    for kf in frames:
        # second fine round re-centres the band, which grazing rays need
        out = render_image_refined(
            session.params,
            kf.intrinsics,
            kf.pose,
            cfg.render,
            stride=2,
            fine_samples=64,
            fine_sigma=0.05,
            fine_rounds=2,
        )
        measured = kf.depth[::2, ::2].reshape(-1)
        mask = measured > 0
        err = np.abs(out.depth[mask] - measured[mask])
        good += int((err < DEPTH_ERR_M).sum())
        valid += int(mask.sum())
    depth_frac = good / valid

    # sphere surface agreement at 64^3 over the scene box
    sphere = next(o.shape for o in scene.objects if o.name == "sphere")
    mesh = extract_mesh(
        session.params,
        registry=session.registry,
        resolution=MESH_RESOLUTION,
        frames=frames,
    )
    spacing = (np.asarray(scene.bound_max) - np.asarray(scene.bound_min)) / MESH_RESOLUTION
    diag = float(np.linalg.norm(spacing))
    tol = MESH_TOL_DIAGONALS * diag
    centre = np.asarray(sphere.centre)
    r = sphere.radius
    near_sphere = np.linalg.norm(mesh.vertices - centre, axis=-1) <= r + 3 * diag
    off_floor = mesh.vertices[:, 1] < -0.1  # y points down; floor band excluded
    ball = mesh.vertices[near_sphere & off_floor]
    dist_err = np.abs(np.linalg.norm(ball - centre, axis=-1) - r)
    surface_ok = float((dist_err <= tol).mean()) if len(ball) else 0.0
    # coverage: the visible sphere is actually reconstructed, not just clean
    rng = np.random.default_rng(0)
    pts = rng.standard_normal((2000, 3))
    pts = centre + r * pts / np.linalg.norm(pts, axis=-1, keepdims=True)
    front = pts[pts[:, 2] < centre[2]]  # camera side of the sphere
    d_to_mesh = np.array(
        [np.min(np.linalg.norm(mesh.vertices - p, axis=-1)) for p in front]
    )
    coverage = float((d_to_mesh <= tol).mean())

    seconds = time.time() - t0
    ok = (
        depth_frac >= DEPTH_FRACTION
        and surface_ok >= 0.95
        and coverage >= 0.95
        and seconds < 900.0
    )
    ctx["toy_session"] = session
    return CriterionResult(
        "toy_reconstruction",
        ok,
        f"depth<2cm at {depth_frac:.1%} of valid px (need 95%), "
        f"sphere verts within 1.5 diag: {surface_ok:.1%}, visible-surface coverage {coverage:.1%}",
        seconds,
    )


def check_click_propagation(ctx: dict) -> CriterionResult:
    t0 = time.time()
    scene = build_demo_room()
    # seed 7: the fixed experiment the curve floors were pinned against
    run = EvalRun(scene, "scripted_manual", 7, _scaled_config(checkpoints=(0, 4, 8, 12)))
    reports = run.run(12)
    curve = {r.clicks: r.miou for r in reports}
    ok = curve[0] < CHANCE_CEILING
    for clicks, floor in CLICK_CURVE_MIN.items():
        ok &= curve[clicks] >= floor
    pts = [curve[c] for c in sorted(curve)]
    mono = all(b >= a - MONOTONE_SLACK for a, b in zip(pts, pts[1:]))
    seconds = time.time() - t0
    detail = ", ".join(f"{c}:{curve[c]:.3f}" for c in sorted(curve))
    return CriterionResult(
        "click_propagation",
        ok and mono and seconds < 1800.0,
        f"mIoU {detail} (need <0.30 then >=0.60/0.75/0.80, slack 0.05)",
        seconds,
    )


def check_single_click(ctx: dict) -> CriterionResult:
    """One click per object (all on one frame) must propagate the sphere
    label to >=70% of its GT pixels in the five unclicked keyframes."""
    t0 = time.time()
    scene = build_demo_room()
    run = EvalRun(scene, "scripted_manual", 0, _scaled_config(checkpoints=(4,)))
    run.run(4)
    clicked = {a.frame_id for a in run.session.annotations}
    sid = scene.class_names.index("sphere")
    stride = run.cfg.eval_stride
    hit = total = 0
    for fid, pred in enumerate(run.predicted_maps()):
        if fid in clicked:
            continue
        gt = run.views[fid].labels[::stride, ::stride]
        mask = gt == sid
        hit += int((pred[mask] == sid).sum())
        total += int(mask.sum())
    recall = hit / total
    seconds = time.time() - t0
    return CriterionResult(
        "single_click_propagation",
        recall >= SINGLE_CLICK_RECALL and len(clicked) == 1,
        f"sphere recall {recall:.1%} in {N_FRAMES - len(clicked)} held-out frames (need 70%)",
        seconds,
    )


def check_active_vs_random(ctx: dict) -> CriterionResult:
    t0 = time.time()
    # cluttered room: five extra objects at 0.3..2.4% pixel share each, so
    # blanket random clicking misses classes inside the 40-click budget
    scene = build_cluttered_room()
    cfg = _scaled_config(checkpoints=(0, ACTIVE_BUDGET))
    finals = {"auto_entropy": [], "auto_random": []}
    for strategy in finals:
        for seed in ACTIVE_SEEDS:
            reports = run_session(scene, strategy, ACTIVE_BUDGET, seed, cfg)
            finals[strategy].append(reports[-1].miou)
    mean_e = float(np.mean(finals["auto_entropy"]))
    mean_r = float(np.mean(finals["auto_random"]))
    gap = mean_e - mean_r
    seconds = time.time() - t0
    return CriterionResult(
        "active_vs_random",
        mean_e >= mean_r and seconds < 3600.0,
        f"mean mIoU entropy {mean_e:.3f} vs random {mean_r:.3f} over "
        f"{len(ACTIVE_SEEDS)} seeds at {ACTIVE_BUDGET} clicks; gap {gap:+.3f}",
        seconds,
    )


def check_colour_ablation(ctx: dict) -> CriterionResult:
    t0 = time.time()
    scene = build_demo_room()
    cfg = _scaled_config(colour_enabled=False, checkpoints=(0, 4, 8, 12))
    reports = run_session(scene, "scripted_manual", ABLATION_MAX_CLICKS, 0, cfg)
    curve = {r.clicks: r.miou for r in reports}
    reached = [c for c, m in curve.items() if m >= ABLATION_TARGET]
    first = min(reached) if reached else None
    seconds = time.time() - t0
    detail = ", ".join(f"{c}:{curve[c]:.3f}" for c in sorted(curve))
    return CriterionResult(
        "colour_ablation",
        first is not None and first <= ABLATION_MAX_CLICKS,
        f"colour off mIoU {detail}; first >=0.75 at {first} clicks (allowed {ABLATION_MAX_CLICKS})",
        seconds,
    )


def check_determinism(ctx: dict) -> CriterionResult:
    import tempfile

    t0 = time.time()
    scene = build_demo_room()
    cfg = EvalConfig(
        n_frames=2,
        width=48,
        height=36,
        warmup_steps=20,
        steps_per_round=20,
        checkpoints=(0, 4),
        eval_stride=4,
        eval_samples=8,
        query_samples=8,
    )
    blobs = []
    with tempfile.TemporaryDirectory() as tmp:
        for tag in ("a", "b"):
            reports = run_session(scene, "scripted_manual", 4, 123, cfg)
            csv_path = f"{tmp}/{tag}.csv"
            json_path = f"{tmp}/{tag}.json"
            emit_curves(reports, csv_path, json_path)
            blobs.append(
                (open(csv_path, "rb").read(), open(json_path, "rb").read())
            )
    identical = blobs[0] == blobs[1]

    # save/load resumes with an identical next-step loss
    session_cfg = SessionConfig(
        seed=9,
        encoding=EncodingConfig(
            bound_min=scene.bound_min, bound_max=scene.bound_max, num_bands=4
        ),
        render=RenderConfig(far=6.5, n_samples=8),
        optim=OptimConfig(batch_pixels=32, train_samples=8),
    )
    session = LabelSession(session_cfg)
    intr = default_intrinsics(48, 36)
    frames, _ = make_keyframes(scene, make_arc_poses(2), intr, far=6.5)
    for kf in frames:
        session.add_keyframe(kf)
    session.define_class("floor")
    session.annotate(0, 10, 10, 0)
    session.step(30)
    with tempfile.TemporaryDirectory() as tmp:
        session.save(f"{tmp}/mid.lfs")
        resumed = LabelSession.load(f"{tmp}/mid.lfs")
    session.step(1)
    resumed.step(1)
    same_loss = session.last_loss.total == resumed.last_loss.total

    seconds = time.time() - t0
    return CriterionResult(
        "determinism_persistence",
        identical and same_loss,
        f"curve files bit-identical: {identical}; resumed next-step loss equal: {same_loss}",
        seconds,
    )


CRITERIA = {
    "gradient_check": check_gradients,
    "compositing_oracle": check_compositing,
    "semantics_algebra": check_semantics,
    "toy_reconstruction": check_toy_reconstruction,
    "click_propagation": check_click_propagation,
    "single_click_propagation": check_single_click,
    "active_vs_random": check_active_vs_random,
    "colour_ablation": check_colour_ablation,
    "determinism_persistence": check_determinism,
}
FAST_CRITERIA = ("gradient_check", "compositing_oracle", "semantics_algebra")


def run_criteria(names=None, progress=None) -> list[CriterionResult]:
    """Run the named criteria (default: all) and return their results."""
    results = []
    ctx: dict = {}
    for name in names or CRITERIA:
        if name not in CRITERIA:
            raise ValueError(f"unknown criterion {name!r}")
        result = CRITERIA[name](ctx)
        results.append(result)
        if progress:
            progress(result.line())
    return results
