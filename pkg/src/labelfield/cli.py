"""Command line: experiment runs, curve aggregation, acceptance, serving.

Subcommands: run / eval / curves / serve / acceptance. Any threshold
check requested with --assert makes the process exit nonzero on failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .evaluation import (
    STRATEGIES,
    EvalConfig,
    EvalRun,
    IoUReport,
    aggregate_curves,
    emit_curves,
)
from .synthetic import SyntheticScene, SyntheticView, build_cluttered_room, build_demo_room


def _load_scene(spec: str) -> SyntheticScene:
    if spec == "demo":
        return build_demo_room()
    if spec == "cluttered":
        return build_cluttered_room()
    return SyntheticScene.from_dict(json.loads(Path(spec).read_text()))


def _dataset_inputs(root: str) -> dict:
    """Frames, GT views, class names and bounds from a labelled sequence."""
    from .datasets import load_sequence
    from .rendering import pixels_to_rays

    ds = load_sequence(root)
    frames, views = [], []
    for i in range(len(ds)):
        kf = ds.load_frame(i)
        labels = ds.load_labels(i)
        if labels is None:
            raise SystemExit(f"dataset frame {kf.frame_id} has no label map; "
                             "the harness needs ground truth")
        kf = replace(kf, frame_id=i)  # harness indexes frames densely
        frames.append(kf)
        views.append(SyntheticView(rgb=kf.rgb, depth=kf.depth, labels=labels))
    names = ds.manifest.get("classes")
    if names is None:
        names = [f"class_{c}" for c in range(int(max(v.labels.max() for v in views)) + 1)]
    if "bound_min" in ds.manifest:
        bounds = (tuple(ds.manifest["bound_min"]), tuple(ds.manifest["bound_max"]))
    else:
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        for kf in frames:
            h, w = kf.depth.shape
            us, vs = np.meshgrid(np.arange(0, w, 8), np.arange(0, h, 8))
            coords = np.stack([us.ravel(), vs.ravel()], axis=-1)
            origins, dirs = pixels_to_rays(coords, kf.intrinsics, kf.pose)
            depth = kf.depth[vs.ravel(), us.ravel()]
            pts = origins + depth[:, None] * dirs
            pts = pts[depth > 0]
            lo = np.minimum(lo, pts.min(axis=0))
            hi = np.maximum(hi, pts.max(axis=0))
        bounds = (tuple(lo - 0.5), tuple(hi + 0.5))
    return dict(frames=frames, views=views, class_names=names, bounds=bounds,
                far=ds.far)


def _parse_checkpoints(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t != "")


def cmd_run(args) -> int:
    cfg = (
        EvalConfig.from_dict(json.loads(Path(args.config).read_text()))
        if args.config
        else EvalConfig()
    )
    if args.checkpoints:
        cfg = replace(cfg, checkpoints=_parse_checkpoints(args.checkpoints))
    if args.policy:
        cfg = replace(cfg, policy=args.policy)
    if args.no_colour:
        cfg = replace(cfg, colour_enabled=False)

    extra = {}
    scene = None
    if args.dataset:
        extra = _dataset_inputs(args.dataset)
        cfg = replace(cfg, far=extra.pop("far"))
    else:
        scene = _load_scene(args.scene)
    run = EvalRun(scene, args.strategy, args.seed, cfg, **extra)
    reports = run.run(args.budget)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "strategy": args.strategy,
        "seed": args.seed,
        "budget": args.budget,
        "scene": args.dataset or args.scene,
        "config": cfg.as_dict(),
        "reports": [r.as_dict() for r in reports],
    }
    path = out_dir / f"run_{args.strategy}_seed{args.seed}.json"
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    for r in reports:
        print(f"{args.strategy} seed={args.seed} clicks={r.clicks} miou={r.miou:.4f}")
    print(f"wrote {path}")
    if args.check:
        return _assert_run(payload)
    return 0


def _assert_run(payload: dict) -> int:
    """Threshold checks on a single run; 0 when they hold."""
    from .acceptance import CHANCE_CEILING, CLICK_CURVE_MIN, MONOTONE_SLACK

    curve = {r["clicks"]: r["miou"] for r in payload["reports"]}
    pts = [curve[c] for c in sorted(curve)]
    failures = []
    for a, b in zip(pts, pts[1:]):
        if b < a - MONOTONE_SLACK:
            failures.append(f"curve drops {a:.3f} -> {b:.3f} beyond slack {MONOTONE_SLACK}")
    if payload["strategy"] == "scripted_manual":
        if 0 in curve and curve[0] >= CHANCE_CEILING:
            failures.append(f"mIoU@0 {curve[0]:.3f} not near chance (<{CHANCE_CEILING})")
        for clicks, floor in CLICK_CURVE_MIN.items():
            if clicks in curve and curve[clicks] < floor:
                failures.append(f"mIoU@{clicks} {curve[clicks]:.3f} below {floor}")
    for line in failures:
        print(f"ASSERT FAIL: {line}", file=sys.stderr)
    return 1 if failures else 0


def _load_reports(dirs) -> list[IoUReport]:
    reports = []
    for d in dirs:
        for path in sorted(Path(d).glob("run_*.json")):
            payload = json.loads(path.read_text())
            for r in payload["reports"]:
                reports.append(
                    IoUReport(
                        per_class={int(k): v for k, v in r["per_class"].items()},
                        miou=r["miou"],
                        clicks=r["clicks"],
                        strategy=r["strategy"],
                        seed=r["seed"],
                        seconds=r.get("seconds", 0.0),
                    )
                )
    if not reports:
        raise SystemExit("no run_*.json files found")
    return reports


def cmd_eval(args) -> int:
    reports = _load_reports([args.session_dir])
    by_run = {}
    for r in reports:
        by_run.setdefault((r.strategy, r.seed), []).append(r)
    failures = 0
    for (strategy, seed), rs in sorted(by_run.items()):
        rs.sort(key=lambda r: r.clicks)
        curve = " ".join(f"{r.clicks}:{r.miou:.3f}" for r in rs)
        print(f"{strategy} seed={seed} {curve}")
        if args.check:
            payload = {
                "strategy": strategy,
                "reports": [{"clicks": r.clicks, "miou": r.miou} for r in rs],
            }
            failures += _assert_run(payload)
    return 1 if failures else 0


def cmd_curves(args) -> int:
    reports = _load_reports(args.dirs)
    emit_curves(reports, args.csv, args.json_out)
    print(f"wrote {args.csv} and {args.json_out}")
    if not args.check:
        return 0
    curves = aggregate_curves(reports)
    if "auto_entropy" not in curves or "auto_random" not in curves:
        print("ASSERT FAIL: need auto_entropy and auto_random runs", file=sys.stderr)
        return 1
    ent = {p.clicks: p.mean for p in curves["auto_entropy"]}
    rnd = {p.clicks: p.mean for p in curves["auto_random"]}
    shared = sorted(set(ent) & set(rnd))
    if not shared:
        print("ASSERT FAIL: no shared checkpoint between strategies", file=sys.stderr)
        return 1
    last = shared[-1]
    gap = ent[last] - rnd[last]
    print(f"entropy {ent[last]:.3f} vs random {rnd[last]:.3f} at {last} clicks; gap {gap:+.3f}")
    if gap < 0:
        print("ASSERT FAIL: entropy below random", file=sys.stderr)
        return 1
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_app

    app = build_app(
        scene=args.scene,
        dataset=args.dataset,
        mode=args.mode,
        width=args.width,
        height=args.height,
        n_frames=args.n_frames,
        seed=args.seed,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def cmd_acceptance(args) -> int:
    from .acceptance import CRITERIA, run_criteria

    if args.list:
        for name in CRITERIA:
            print(name)
        return 0
    names = list(CRITERIA)
    if args.only:
        names = [n for n in args.only.split(",") if n]
    if args.skip:
        skip = set(args.skip.split(","))
        names = [n for n in names if n not in skip]
    results = run_criteria(names, progress=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    if args.check and failed:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelfield",
        description="Interactive neural-field scene labelling toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one labelling strategy and record its curve")
    p_run.add_argument("--scene", default="demo", help="'demo' or a scene JSON file")
    p_run.add_argument("--dataset", help="labelled sequence directory (overrides --scene)")
    p_run.add_argument("--strategy", choices=STRATEGIES, default="scripted_manual")
    p_run.add_argument("--budget", type=int, default=12)
    p_run.add_argument("--seed", type=int, default=0)
    p_run.add_argument("--out", required=True, help="output directory for run_*.json")
    p_run.add_argument("--config", help="EvalConfig JSON file")
    p_run.add_argument("--policy", choices=("centroid", "error_guided"))
    p_run.add_argument("--no-colour", action="store_true", help="disable the photometric term")
    p_run.add_argument("--checkpoints", help="comma-separated click counts")
    p_run.add_argument("--assert", dest="check", action="store_true",
                       help="exit nonzero if pinned thresholds fail")
    p_run.set_defaults(func=cmd_run)

    p_eval = sub.add_parser("eval", help="summarise recorded runs in a session directory")
    p_eval.add_argument("session_dir")
    p_eval.add_argument("--assert", dest="check", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_curves = sub.add_parser("curves", help="aggregate run directories into curve files")
    p_curves.add_argument("dirs", nargs="+")
    p_curves.add_argument("--csv", default="curves.csv")
    p_curves.add_argument("--json", dest="json_out", default="curves.json")
    p_curves.add_argument("--assert", dest="check", action="store_true")
    p_curves.set_defaults(func=cmd_curves)

    p_serve = sub.add_parser("serve", help="start the HTTP label service")
    p_serve.add_argument("--port", type=int, default=8000)
    p_serve.add_argument("--host", default="127.0.0.1")
    p_serve.add_argument("--scene", default="demo")
    p_serve.add_argument("--dataset", help="sequence directory to label instead of a scene")
    p_serve.add_argument("--mode", choices=("flat", "hierarchical"), default="flat")
    p_serve.add_argument("--width", type=int, default=160)
    p_serve.add_argument("--height", type=int, default=120)
    p_serve.add_argument("--n-frames", type=int, default=6)
    p_serve.add_argument("--seed", type=int, default=0)
    p_serve.set_defaults(func=cmd_serve)

    p_acc = sub.add_parser("acceptance", help="run pinned acceptance criteria headless")
    p_acc.add_argument("--only", help="comma-separated criterion names")
    p_acc.add_argument("--skip", help="comma-separated criterion names to leave out")
    p_acc.add_argument("--list", action="store_true", help="list criterion names and exit")
    p_acc.add_argument("--assert", dest="check", action="store_true")
    p_acc.set_defaults(func=cmd_acceptance)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    # `labelfield --serve 8000` is shorthand for the serve subcommand
    if argv and argv[0] == "--serve":
        argv = ["serve", "--port", *argv[1:]] if len(argv) > 1 else ["serve"]
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
