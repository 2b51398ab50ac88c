"""HTTP label service: the session exposed to browser clients.

JSON for structured data, PNG for previews, PLY for meshes, and one SSE
channel that pushes snapshot-version bumps and query proposals so the UI
does not poll. Single-user: one session per process.
"""

from __future__ import annotations

import asyncio
import io
import json
import tempfile
import threading
import time
import uuid
from contextlib import asynccontextmanager

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse, StreamingResponse
from PIL import Image

from .field import EncodingConfig
from .meshing import extract_mesh, write_ply
from .rendering import RenderConfig
from .session import PREVIEW_KINDS, LabelSession, MappingLoop, SessionConfig
from .synthetic import (
    SyntheticScene,
    build_cluttered_room,
    build_demo_room,
    default_intrinsics,
    make_arc_poses,
    make_keyframes,
)

EVENT_POLL_SECONDS = 0.2


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def _encode_png(array: np.ndarray) -> bytes:
    """Lossless preview encoding: RGB8 for colour-like maps, 16-bit
    grayscale (millimetres) for depth, 8-bit grayscale for scalar maps."""
    if array.ndim == 3:
        img = Image.fromarray(np.rint(np.clip(array, 0.0, 1.0) * 255).astype(np.uint8), "RGB")
    elif array.dtype == np.uint16:
        img = Image.fromarray(array, "I;16")
    else:
        img = Image.fromarray(np.rint(np.clip(array, 0.0, 1.0) * 255).astype(np.uint8), "L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def build_session(
    scene: str = "demo",
    dataset: str | None = None,
    mode: str = "flat",
    width: int = 160,
    height: int = 120,
    n_frames: int = 6,
    seed: int = 0,
) -> LabelSession:
    """A session preloaded with keyframes from a scene or a sequence dir."""
    if dataset is not None:
        from .datasets import load_sequence
        from .rendering import pixels_to_rays

        ds = load_sequence(dataset)
        frames = ds.load_all()
        if "bound_min" in ds.manifest:
            lo = np.asarray(ds.manifest["bound_min"], dtype=np.float64)
            hi = np.asarray(ds.manifest["bound_max"], dtype=np.float64)
        else:
            lo = np.full(3, np.inf)
            hi = np.full(3, -np.inf)
            for kf in frames:
                h, w = kf.depth.shape
                us, vs = np.meshgrid(np.arange(0, w, 8), np.arange(0, h, 8))
                coords = np.stack([us.ravel(), vs.ravel()], axis=-1)
                origins, dirs = pixels_to_rays(coords, kf.intrinsics, kf.pose)
                depth = kf.depth[vs.ravel(), us.ravel()]
                pts = (origins + depth[:, None] * dirs)[depth > 0]
                lo = np.minimum(lo, pts.min(axis=0))
                hi = np.maximum(hi, pts.max(axis=0))
            lo -= 0.5
            hi += 0.5
        far = ds.far
    else:
        if scene == "demo":
            scene_obj = build_demo_room()
        elif scene == "cluttered":
            scene_obj = build_cluttered_room()
        else:
            scene_obj = SyntheticScene.from_dict(json.loads(open(scene).read()))
        intr = default_intrinsics(width, height)
        frames, _ = make_keyframes(scene_obj, make_arc_poses(n_frames), intr, far=6.5)
        lo = np.asarray(scene_obj.bound_min)
        hi = np.asarray(scene_obj.bound_max)
        far = 6.5
    cfg = SessionConfig(
        mode=mode,
        seed=seed,
        encoding=EncodingConfig(bound_min=tuple(lo), bound_max=tuple(hi)),
        render=RenderConfig(far=far),
    )
    session = LabelSession(cfg)
    for kf in frames:
        session.add_keyframe(kf)
    return session


class MeshJobs:
    """One mesh export at a time, built off the request thread."""

    def __init__(self):
        self.lock = threading.Lock()
        self.jobs: dict[str, dict] = {}

    def busy(self) -> bool:
        return any(j["status"] == "running" for j in self.jobs.values())

    def start(self, session: LabelSession, resolution: int, iso: float, label) -> str:
        job_id = uuid.uuid4().hex[:12]
        self.jobs[job_id] = {"status": "running", "data": None, "message": ""}

        def work():
            try:
                with session.lock:
                    params = session.params
                    registry = session.registry if session.config.mode == "flat" else None
                    tree = session.tree if session.config.mode == "hierarchical" else None
                    frames = list(session.frames)
                mesh = extract_mesh(
                    params, registry=registry, tree=tree,
                    resolution=resolution, level=iso, frames=frames,
                )
                if label is not None:
                    mesh = mesh.filtered(int(label))
                with tempfile.TemporaryDirectory() as tmp:
                    path = f"{tmp}/mesh.ply"
                    write_ply(path, mesh)
                    data = open(path, "rb").read()
                self.jobs[job_id] = {
                    "status": "done",
                    "data": data,
                    "message": f"{len(mesh.vertices)} vertices",
                }
            except Exception as exc:  # surfaced through the job endpoint
                self.jobs[job_id] = {"status": "failed", "data": None, "message": str(exc)}

        threading.Thread(target=work, daemon=True).start()
        return job_id


def build_app(
    scene: str = "demo",
    dataset: str | None = None,
    mode: str = "flat",
    width: int = 160,
    height: int = 120,
    n_frames: int = 6,
    seed: int = 0,
    optimise: bool = True,
    session: LabelSession | None = None,
) -> FastAPI:
    if session is None:
        session = build_session(scene, dataset, mode, width, height, n_frames, seed)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        if app.state.loop is not None and not app.state.loop.running:
            app.state.loop.start()
        yield
        if app.state.loop is not None:
            app.state.loop.stop()

    app = FastAPI(title="labelfield", docs_url=None, redoc_url=None, lifespan=lifespan)
    app.state.session = session
    app.state.loop = MappingLoop(session) if optimise else None
    app.state.started = time.time()
    app.state.mesh_jobs = MeshJobs()

    @app.get("/keyframes")
    def keyframes():
        with session.lock:
            frames = [
                {
                    "frame_id": kf.frame_id,
                    "width": int(kf.rgb.shape[1]),
                    "height": int(kf.rgb.shape[0]),
                }
                for kf in session.frames
            ]
        return {"frames": frames, "snapshot_version": session.snapshot_version}

    @app.get("/preview/{frame_id}")
    def preview(frame_id: int, kind: str = "colour", stride: int = 2):
        if kind not in PREVIEW_KINDS:
            return _error(400, "bad_kind", f"kind must be one of {PREVIEW_KINDS}")
        if stride < 1 or stride > 16:
            return _error(400, "bad_stride", "stride must be in [1, 16]")
        try:
            with session.lock:
                version = session.snapshot_version
                image = session.render_preview(frame_id, kind, stride=stride)
        except KeyError:
            return _error(404, "unknown_frame", f"no keyframe {frame_id}")
        if kind == "depth":
            image = np.round(np.clip(image, 0.0, 65.0) * 1000.0).astype(np.uint16)
        elif kind == "uncertainty":
            peak = float(image.max())
            image = image / peak if peak > 0 else image
        return Response(
            content=_encode_png(image),
            media_type="image/png",
            headers={"X-Snapshot-Version": str(version)},
        )

    @app.post("/clicks")
    async def clicks(request: Request):
        body = await request.json()
        try:
            frame_id = int(body["frame_id"])
            u = int(body["u"])
            v = int(body["v"])
            label = body["label"]
        except (KeyError, TypeError, ValueError):
            return _error(400, "bad_click", "need frame_id, u, v, label")
        try:
            count = session.annotate(frame_id, u, v, label)
        except KeyError as exc:
            return _error(404, "unknown_frame", str(exc))
        except ValueError as exc:
            return _error(400, "bad_click", str(exc))
        return {"annotations": count}

    @app.delete("/clicks")
    async def delete_click(request: Request):
        body = await request.json()
        try:
            removed = session.delete_annotation(
                int(body["frame_id"]), int(body["u"]), int(body["v"])
            )
        except (KeyError, TypeError, ValueError):
            return _error(400, "bad_click", "need frame_id, u, v")
        return {"removed": removed}

    @app.get("/schema")
    def get_schema():
        with session.lock:
            if session.config.mode == "flat":
                classes = [
                    {
                        "id": c,
                        "name": session.registry.name_of(c),
                        "colour": session.registry.colour_of(c).tolist(),
                    }
                    for c in range(session.registry.num_classes)
                ]
                return {"mode": "flat", "classes": classes}
            nodes = [
                {
                    "path": path,
                    "name": node.name,
                    "colour": session.tree.colour_of(path).tolist(),
                }
                for path, node in sorted(session.tree.nodes.items())
            ]
            return {"mode": "hierarchical", "max_depth": session.tree.max_depth, "nodes": nodes}

    @app.put("/schema")
    async def put_schema(request: Request):
        body = await request.json()
        added = []
        try:
            if "classes" in body:
                for name in body["classes"]:
                    added.append(session.define_class(str(name)))
            if "nodes" in body:
                for node in body["nodes"]:
                    session.define_node(str(node["path"]), str(node["name"]))
                    added.append(node["path"])
        except ValueError as exc:
            message = str(exc)
            code = "mode_mismatch" if "mode" in message else "bad_schema"
            return _error(409 if code == "mode_mismatch" else 400, code, message)
        return {"added": added}

    @app.get("/query/next")
    def next_query():
        try:
            proposal = session.suggest_query()
        except ValueError as exc:
            return _error(409, "no_query", str(exc))
        return proposal.as_dict()

    @app.post("/query/answer")
    async def answer_query(request: Request):
        body = await request.json()
        if "label" not in body:
            return _error(400, "bad_answer", "need a label")
        try:
            count = session.answer_query(body["label"])
        except ValueError as exc:
            return _error(409, "no_query", str(exc))
        return {"annotations": count}

    @app.post("/mesh")
    async def mesh_export(request: Request):
        body = await request.json() if int(request.headers.get("content-length") or 0) else {}
        jobs: MeshJobs = app.state.mesh_jobs
        if jobs.busy():
            return _error(409, "busy", "a mesh export is already running")
        resolution = int(body.get("resolution", 64))
        iso = float(body.get("iso", 0.5))
        if not 2 <= resolution <= 256:
            return _error(400, "bad_mesh", "resolution must be in [2, 256]")
        if not 0.0 < iso < 1.0:
            return _error(400, "bad_mesh", "iso must be in (0, 1)")
        job_id = jobs.start(session, resolution, iso, body.get("label"))
        return {"job_id": job_id}

    @app.get("/mesh/{job_id}")
    def mesh_job(job_id: str):
        job = app.state.mesh_jobs.jobs.get(job_id)
        if job is None:
            return _error(404, "unknown_job", f"no mesh job {job_id}")
        if job["status"] == "running":
            return JSONResponse(status_code=202, content={"status": "running"})
        if job["status"] == "failed":
            return _error(500, "mesh_failed", job["message"])
        return Response(
            content=job["data"],
            media_type="application/octet-stream",
            headers={"Content-Disposition": 'attachment; filename="labelfield.ply"'},
        )

    @app.get("/stats")
    def stats():
        with session.lock:
            loss = session.last_loss.as_dict() if session.last_loss else None
            return {
                "steps": session.total_steps,
                "annotations": len(session.annotations),
                "keyframes": len(session.frames),
                "snapshot_version": session.snapshot_version,
                "mode": session.config.mode,
                "last_loss": loss,
                "uptime_seconds": time.time() - app.state.started,
                "optimising": bool(app.state.loop and app.state.loop.running),
            }

    @app.get("/events")
    async def events(limit: int | None = None):
        # limit bounds the stream (handy for curl and non-streaming clients);
        # browsers omit it and hold the connection open
        async def stream():
            last_version = -1
            last_query = None
            emitted = 0
            while limit is None or emitted < limit:
                version = session.snapshot_version
                if version != last_version:
                    last_version = version
                    payload = {"snapshot_version": version, "steps": session.total_steps}
                    yield f"event: snapshot\ndata: {json.dumps(payload)}\n\n"
                    emitted += 1
                pending = session.pending_query
                key = pending and (pending.frame_id, pending.u, pending.v)
                if pending is not None and key != last_query:
                    last_query = key
                    yield f"event: query\ndata: {json.dumps(pending.as_dict())}\n\n"
                    emitted += 1
                if limit is not None and emitted >= limit:
                    break
                await asyncio.sleep(EVENT_POLL_SECONDS)

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
