"""JSON-over-HTTP service exposing loaded scenes to scripts and the browser UI.

Scene ids are content-addressed from the checkpoint path, so a restarted
service rebuilds identical sessions from disk. Preview renders answer inline
(coarse pass at quarter resolution, upscaled); full-quality renders return a
job id to poll so handlers never block on them. Mutating endpoints accept a
client-supplied request_id and replay the original response on retry.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from PIL import Image

from . import __version__
from .datastore import fmap_to_bytes, load_checkpoint, load_dataset
from .editor import ColorMap, RigidTransform, delete_edit, extract_edit, \
    recolor_edit, render_edit, transform_edit, warp_edit
from .errors import FeatFieldError, InputError
from .evaluator import segmentation_selection
from .query import DEFAULT_TAU, Selection, encode_patch_query, \
    encode_point_query, kmeans_features, selection_fn
from .renderer import render_view

OVERLAY_COLOR = (255, 80, 0)
PREVIEW_SCALE = 4


def _png_bytes(arr, mode="RGB") -> bytes:
    buf = io.BytesIO()
    a = np.asarray(arr)
    if a.dtype != np.uint8:
        a = (np.clip(a, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(a, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


def _camera_from_payload(scene, pose: dict, width: int, height: int,
                         requested=None):
    from .cli import _camera_from_pose
    pose = dict(pose)
    if requested is not None and "fx" in pose:
        # explicit intrinsics were stated for the requested size; rescale
        # them when rendering previews at reduced resolution
        sx = width / requested[0]
        sy = height / requested[1]
        for k, s in (("fx", sx), ("cx", sx), ("fy", sy), ("cy", sy)):
            if k in pose:
                pose[k] = pose[k] * s
    return _camera_from_pose(dict(pose, width=width, height=height),
                             near=scene.near, far=scene.far)


class Session:
    """All mutable service state, guarded by one lock."""

    def __init__(self, workers: int):
        self.lock = threading.Lock()
        self.scenes = {}        # scene_id -> {"scene", "path"}
        self.selections = {}    # selection_id -> {"scene_id", "selection"}
        self.edits = {}         # edit_id -> {"scene_id", "edited", "descriptor"}
        self.jobs = {}          # job_id -> {"status", "result", "error"}
        self.training = {}      # scene_id -> job_id
        self.replays = {}       # request_id -> response payload
        self.pool = ThreadPoolExecutor(max_workers=max(workers, 1))

    def scene(self, scene_id: str):
        with self.lock:
            entry = self.scenes.get(scene_id)
        if entry is None:
            raise KeyError(f"unknown scene {scene_id}")
        return entry["scene"]

    def require_idle(self, scene_id: str):
        with self.lock:
            job_id = self.training.get(scene_id)
            if job_id and self.jobs.get(job_id, {}).get("status") == "running":
                raise BusyError(f"scene {scene_id} is busy training")

    def submit(self, fn) -> str:
        job_id = uuid.uuid4().hex[:12]
        with self.lock:
            self.jobs[job_id] = {"status": "running", "result": None, "error": None}

        def run():
            try:
                result = fn()
                with self.lock:
                    self.jobs[job_id].update(status="done", result=result)
            except Exception as e:  # surfaced through the job status
                with self.lock:
                    self.jobs[job_id].update(status="error", error=str(e))

        self.pool.submit(run)
        return job_id


class BusyError(Exception):
    pass


def _scene_id_for(path: str) -> str:
    return hashlib.sha1(str(Path(path).resolve()).encode()).hexdigest()[:12]


def _render_payload(scene, body: dict) -> dict:
    width = int(body.get("width", 64))
    height = int(body.get("height", 64))
    channels = tuple(body.get("channels", ["rgb"]))
    seed = int(body.get("seed", 0))
    quality = body.get("quality", "preview")
    if quality not in ("preview", "full"):
        raise InputError("quality must be 'preview' or 'full'")
    if quality == "preview":
        pw = max(width // PREVIEW_SCALE, 8)
        ph = max(height // PREVIEW_SCALE, 8)
        cam = _camera_from_payload(scene, body["pose"], pw, ph,
                                   requested=(width, height))
        buf = render_view(scene, cam, mode="coarse", channels=channels,
                          n_coarse=int(body.get("n_coarse", 48)), seed=seed)
    else:
        cam = _camera_from_payload(scene, body["pose"], width, height)
        buf = render_view(scene, cam, mode="fine", channels=channels,
                          n_coarse=int(body.get("n_coarse", 64)),
                          n_fine=int(body.get("n_fine", 128)), seed=seed)
    out = {"width": width, "height": height, "quality": quality}
    if buf.rgb is not None:
        rgb = buf.rgb
        if rgb.shape[:2] != (height, width):
            from .datastore import bilinear_resize
            rgb = bilinear_resize(rgb, height, width)
        out["png_base64"] = _b64(_png_bytes(rgb))
    if buf.feature is not None:
        out["fmap_base64"] = _b64(fmap_to_bytes(buf.feature.astype(np.float32)))
    if buf.depth is not None:
        out["depth_range"] = [float(np.nanmin(buf.depth)), float(np.nanmax(buf.depth))]
    return out


def _overlay_png(scene, selection: Selection, body: dict) -> str:
    width = int(body.get("width", 64))
    height = int(body.get("height", 64))
    cam = _camera_from_payload(scene, body["pose"], width, height)
    buf = render_view(scene, cam, mode="fine", channels=("selection",),
                      n_coarse=int(body.get("n_coarse", 48)),
                      n_fine=int(body.get("n_fine", 64)),
                      seed=int(body.get("seed", 0)),
                      selection_fn=selection_fn(scene, selection))
    alpha = (np.clip(buf.selection, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    rgba = np.zeros((height, width, 4), dtype=np.uint8)
    rgba[..., :3] = OVERLAY_COLOR
    rgba[..., 3] = alpha
    return _b64(_png_bytes(rgba, mode="RGBA"))


def _nearest_label(scene, vector: np.ndarray):
    if scene.table is None:
        return None
    names = scene.table.names()
    m = scene.table.matrix(names)
    mn = m / np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
    v = vector / max(np.linalg.norm(vector), 1e-12)
    return names[int(np.argmax(mn @ v))]


def create_app(checkpoints=(), workers: int = 2, ui_dir=None) -> FastAPI:
    app = FastAPI(title="featfield", version=__version__)
    state = Session(workers=workers)
    app.state.session = state

    @app.exception_handler(RequestValidationError)
    async def malformed(_, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(FeatFieldError)
    async def domain_error(_, exc):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(KeyError)
    async def unknown_id(_, exc):
        return JSONResponse(status_code=404, content={"error": str(exc)})

    @app.exception_handler(BusyError)
    async def busy(_, exc):
        return JSONResponse(status_code=409, content={"error": str(exc)})

    def replay_or(request_id, build):
        if request_id:
            with state.lock:
                if request_id in state.replays:
                    return state.replays[request_id]
        payload = build()
        if request_id:
            with state.lock:
                state.replays[request_id] = payload
        return payload

    def load_scene_from(path: str) -> dict:
        scene_id = _scene_id_for(path)
        with state.lock:
            known = scene_id in state.scenes
        if not known:
            scene = load_checkpoint(path)
            with state.lock:
                state.scenes[scene_id] = {"scene": scene, "path": str(path)}
        scene = state.scene(scene_id)
        labels = scene.table.names() if scene.table else []
        return {"scene_id": scene_id, "labels": labels,
                "near": scene.near, "far": scene.far,
                "feature_dim": scene.feature_dim}

    for ckpt in checkpoints:
        load_scene_from(ckpt)

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "version": __version__}

    @app.get("/scenes")
    async def list_scenes():
        with state.lock:
            items = [{"scene_id": sid, "path": e["path"]}
                     for sid, e in state.scenes.items()]
        return {"scenes": items}

    @app.post("/scenes")
    async def post_scene(body: dict):
        if "checkpoint" not in body:
            raise InputError("body needs 'checkpoint'")
        return replay_or(body.get("request_id"),
                         lambda: load_scene_from(body["checkpoint"]))

    @app.get("/scenes/{scene_id}/labels")
    async def get_labels(scene_id: str):
        scene = state.scene(scene_id)
        return {"labels": scene.table.names() if scene.table else []}

    @app.post("/scenes/{scene_id}/render")
    async def post_render(scene_id: str, body: dict):
        scene = state.scene(scene_id)
        state.require_idle(scene_id)
        if "pose" not in body:
            raise InputError("render needs a pose")
        if body.get("quality", "preview") == "full":
            job_id = state.submit(lambda: _render_payload(scene, body))
            return {"job_id": job_id}
        return _render_payload(scene, body)

    @app.get("/jobs/{job_id}")
    async def get_job(job_id: str):
        with state.lock:
            job = state.jobs.get(job_id)
            if job is None:
                raise KeyError(f"unknown job {job_id}")
            return dict(job)

    @app.post("/scenes/{scene_id}/query")
    async def post_query(scene_id: str, body: dict):
        scene = state.scene(scene_id)
        state.require_idle(scene_id)

        def build():
            qtype = body.get("type")
            payload = body.get("payload", {})
            tau = float(payload.get("tau", DEFAULT_TAU))
            response = {"type": qtype}
            selection = None
            if qtype == "text":
                if scene.table is None:
                    raise InputError("scene has no label table")
                label = payload["label"]
                if payload.get("mode", "softmax") == "softmax":
                    selection = segmentation_selection(
                        scene.table, label, payload.get("negatives"))
                else:
                    selection = Selection(mode="threshold",
                                          positives=scene.table.vector(label),
                                          tau=tau, meta={"label": label})
                response["label"] = label
            elif qtype == "patch":
                fmap = _query_feature_map(scene, payload)
                r0, c0, r1, c1 = payload["rect"]
                vec = encode_patch_query(fmap, (r0, c0, r1, c1))
                selection = Selection(mode="threshold", positives=vec, tau=tau,
                                      meta={"source": "patch"})
                response["nearest_label"] = _nearest_label(scene, vec)
            elif qtype == "point":
                cam = _camera_from_payload(scene, payload["pose"],
                                           int(payload.get("width", 64)),
                                           int(payload.get("height", 64)))
                vec = encode_point_query(scene, cam, tuple(payload["pixel"]),
                                         n_coarse=int(payload.get("n_coarse", 48)),
                                         n_fine=int(payload.get("n_fine", 64)),
                                         seed=int(payload.get("seed", 0)))
                selection = Selection(mode="threshold", positives=vec, tau=tau,
                                      meta={"source": "point"})
                response["nearest_label"] = _nearest_label(scene, vec)
            elif qtype == "cluster":
                fmap = _query_feature_map(scene, payload)
                k = int(payload.get("k", 4))
                assign, centroids, _ = kmeans_features(
                    fmap, k, seed=int(payload.get("seed", 0)))
                counts = [int((assign == i).sum()) for i in range(k)]
                response["clusters"] = [
                    {"cluster_id": i, "size": counts[i]} for i in range(k)]
                palette = (np.asarray(
                    [[(37 * i) % 255, (91 * i) % 255, (151 * i) % 255]
                     for i in range(k)], dtype=np.uint8))
                response["assignment_png_base64"] = _b64(
                    _png_bytes(palette[assign]))
                pick = payload.get("pick")
                if pick is not None:
                    selection = Selection(mode="threshold",
                                          positives=centroids[int(pick)],
                                          tau=tau, meta={"source": "cluster",
                                                         "pick": int(pick)})
            else:
                raise InputError(f"unknown query type {qtype!r}")
            if selection is not None:
                selection_id = uuid.uuid4().hex[:12]
                with state.lock:
                    state.selections[selection_id] = {
                        "scene_id": scene_id, "selection": selection}
                response["selection_id"] = selection_id
                response["tau"] = selection.tau
                if "pose" in payload:
                    response["overlay_png_base64"] = _overlay_png(
                        scene, selection, payload)
            else:
                response["selection_id"] = None
            return response

        return replay_or(body.get("request_id"), build)

    def _query_feature_map(scene, payload: dict) -> np.ndarray:
        width = int(payload.get("width", 64))
        height = int(payload.get("height", 64))
        cam = _camera_from_payload(scene, payload["pose"], width, height)
        buf = render_view(scene, cam, mode="fine", channels=("feature",),
                          n_coarse=int(payload.get("n_coarse", 48)),
                          n_fine=int(payload.get("n_fine", 64)),
                          seed=int(payload.get("seed", 0)))
        return buf.feature

    @app.post("/scenes/{scene_id}/edits")
    async def post_edit(scene_id: str, body: dict):
        scene = state.scene(scene_id)
        state.require_idle(scene_id)

        def build():
            op = body.get("op")
            params = body.get("params", {})
            with state.lock:
                sel_entry = state.selections.get(body.get("selection_id"))
            if sel_entry is None:
                raise KeyError(f"unknown selection {body.get('selection_id')}")
            selection = sel_entry["selection"]
            base = scene
            if params.get("base_edit_id"):
                with state.lock:
                    base_entry = state.edits.get(params["base_edit_id"])
                if base_entry is None:
                    raise KeyError(f"unknown edit {params['base_edit_id']}")
                base = base_entry["edited"]
            transform = None
            if params.get("transform"):
                transform = RigidTransform.from_json(params["transform"])
            compositor = params.get("compositor", "sum")
            if op == "recolor":
                edited = recolor_edit(base, selection,
                                      ColorMap.from_json(params["color_map"]),
                                      compositor)
            elif op == "delete":
                edited = delete_edit(base, selection, compositor)
            elif op == "extract":
                edited = extract_edit(base, selection, transform, compositor)
            elif op == "transform":
                if transform is None:
                    raise InputError("transform edit needs params.transform")
                edited = transform_edit(base, selection, transform, compositor)
            elif op == "warp":
                target = state.scene(params["target_scene_id"])
                edited = warp_edit(base, selection, target, transform
                                   or RigidTransform.identity(), compositor)
            else:
                raise InputError(f"unknown edit op {op!r}")
            edit_id = uuid.uuid4().hex[:12]
            with state.lock:
                state.edits[edit_id] = {"scene_id": scene_id, "edited": edited,
                                        "descriptor": edited.descriptor}
            return {"edit_id": edit_id, "op": op}

        return replay_or(body.get("request_id"), build)

    @app.get("/edits/{edit_id}")
    async def get_edit(edit_id: str):
        with state.lock:
            entry = state.edits.get(edit_id)
        if entry is None:
            raise KeyError(f"unknown edit {edit_id}")
        return {"edit_id": edit_id, "scene_id": entry["scene_id"],
                "descriptor": entry["descriptor"]}

    @app.post("/edits/{edit_id}/render")
    async def post_edit_render(edit_id: str, body: dict):
        with state.lock:
            entry = state.edits.get(edit_id)
        if entry is None:
            raise KeyError(f"unknown edit {edit_id}")
        edited = entry["edited"]
        scene = state.scene(entry["scene_id"])
        if "pose" not in body:
            raise InputError("render needs a pose")

        def do_render():
            width = int(body.get("width", 64))
            height = int(body.get("height", 64))
            quality = body.get("quality", "preview")
            if quality == "preview":
                pw = max(width // PREVIEW_SCALE, 8)
                ph = max(height // PREVIEW_SCALE, 8)
                cam = _camera_from_payload(scene, body["pose"], pw, ph,
                                           requested=(width, height))
                buf = render_edit(edited, cam, channels=("rgb",),
                                  n_coarse=int(body.get("n_coarse", 32)),
                                  n_fine=int(body.get("n_fine", 32)),
                                  seed=int(body.get("seed", 0)))
            else:
                cam = _camera_from_payload(scene, body["pose"], width, height)
                buf = render_edit(edited, cam, channels=("rgb",),
                                  n_coarse=int(body.get("n_coarse", 64)),
                                  n_fine=int(body.get("n_fine", 96)),
                                  seed=int(body.get("seed", 0)))
            rgb = buf.rgb
            if rgb.shape[:2] != (height, width):
                from .datastore import bilinear_resize
                rgb = bilinear_resize(rgb, height, width)
            return {"png_base64": _b64(_png_bytes(rgb)), "width": width,
                    "height": height, "quality": quality}

        if body.get("quality", "preview") == "full":
            return {"job_id": state.submit(do_render)}
        return do_render()

    @app.post("/scenes/{scene_id}/train")
    async def post_train(scene_id: str, body: dict):
        scene = state.scene(scene_id)
        state.require_idle(scene_id)

        def build():
            from .distiller import TrainConfig, train
            from .field import FieldConfig
            dataset = load_dataset(body["data"])
            tc = TrainConfig.from_json({**TrainConfig.desk_scale().to_json(),
                                        **body.get("train", {})})
            fc = FieldConfig.from_json({**FieldConfig.desk_scale().to_json(),
                                        **body.get("field", {}),
                                        "feature_dim": dataset.feature_dim})

            def run():
                new_scene = train(dataset, fc, tc)
                with state.lock:
                    state.scenes[scene_id]["scene"] = new_scene
                return {"scene_id": scene_id, "iterations":
                        tc.phase1_iters + tc.phase2_iters}

            job_id = state.submit(run)
            with state.lock:
                state.training[scene_id] = job_id
            return {"job_id": job_id}

        return replay_or(body.get("request_id"), build)

    @app.get("/scenes/{scene_id}/train")
    async def get_train(scene_id: str):
        state.scene(scene_id)
        with state.lock:
            job_id = state.training.get(scene_id)
            job = state.jobs.get(job_id) if job_id else None
        return {"job_id": job_id, "status": job["status"] if job else "idle"}

    ui = ui_dir or Path(__file__).resolve().parents[2] / "frontend" / "dist"
    if Path(ui).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/ui", StaticFiles(directory=str(ui), html=True), name="ui")

        @app.get("/")
        async def root():
            from fastapi.responses import RedirectResponse
            return RedirectResponse("/ui/")

    return app
