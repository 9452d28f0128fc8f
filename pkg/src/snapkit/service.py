"""Session-oriented inference service.

Each session pins one scene and one domain: the backbone runs once at
creation and its output is cached, so clicks, auto-segmentation, and text
queries only pay for the decoder. Masks travel as run-length encodings over
point indices. Mutating requests within a session are serialized by a
per-session lock; distinct sessions run concurrently against the frozen
model weights.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .autoprompt import AutoPromptConfig, generate_auto_masks
from .model import SceneEncoding, SnapModel, encode_scene, predict_with_encoding
from .pcdata import DomainError, DomainId, SceneConsistencyError, SceneFormatError, \
    SceneSample, load_scene
from .promptenc import PromptSet
from .rle import rle_encode
from .textsem import HashEmbeddingProvider, open_vocab_query


class ScenePayload(BaseModel):
    positions: list  # N x 3
    instance_ids: "list[int] | None" = None
    class_ids: "list[int] | None" = None
    class_names: "list[str]" = Field(default_factory=list)
    scene_id: str = "inline"


class CreateSessionRequest(BaseModel):
    domain: str
    scene_path: "str | None" = None
    scene: "ScenePayload | None" = None


class ClickRequest(BaseModel):
    object_id: int
    point: "list[float]"  # x, y, z


class AutoSegmentRequest(BaseModel):
    v0: "float | None" = None
    k_max: "int | None" = None
    tau_s: "float | None" = None
    tau_nms: "float | None" = None


class TextQueryRequest(BaseModel):
    query: str
    tau_sim: float = 0.0


@dataclass
class Session:
    session_id: str
    scene: SceneSample
    domain: DomainId
    encoding: SceneEncoding
    objects: dict = field(default_factory=dict)        # object_id -> list[click xyz]
    object_masks: dict = field(default_factory=dict)   # object_id -> (mask, score)
    history: list = field(default_factory=list)        # undo stack of click events
    auto_result: "SegmentationResult | None" = None
    lock: threading.Lock = field(default_factory=threading.Lock)


def _mask_payload(mask: np.ndarray, score: float) -> dict:
    return {"mask": rle_encode(mask), "score": float(score),
            "point_count": int(np.count_nonzero(mask))}


def create_app(model: SnapModel, provider=None) -> FastAPI:
    app = FastAPI(title="snapkit inference service", version="0.1.0")
    sessions: dict[str, Session] = {}
    d_clip = model.cfg.d_clip if model is not None else 32
    provider = provider or HashEmbeddingProvider(dimension=d_clip)

    def get_session(session_id: str) -> Session:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def run_object(session: Session, object_id: int) -> dict:
        clicks = session.objects[object_id]
        prompts = PromptSet([np.asarray(clicks, dtype=np.float64)])
        pred = predict_with_encoding(model, session.encoding, prompts)
        mask = pred.binarized()[0]
        score = float(pred.score.detach()[0])
        session.object_masks[object_id] = (mask, score)
        return _mask_payload(mask, score)

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "sessions": len(sessions)}

    @app.post("/sessions")
    def create_session(req: CreateSessionRequest):
        if model is None:
            raise HTTPException(status_code=503, detail="model not loaded")
        try:
            domain = DomainId.parse(req.domain)
        except DomainError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        try:
            if req.scene_path is not None:
                scene = load_scene(req.scene_path)
            elif req.scene is not None:
                positions = np.asarray(req.scene.positions, dtype=np.float32)
                n = positions.shape[0] if positions.ndim == 2 else 0
                scene = SceneSample(
                    positions=positions,
                    instance_ids=np.asarray(
                        req.scene.instance_ids if req.scene.instance_ids is not None
                        else [-1] * n, dtype=np.int32),
                    class_ids=np.asarray(
                        req.scene.class_ids if req.scene.class_ids is not None
                        else [-1] * n, dtype=np.int32),
                    domain=domain,
                    class_names=req.scene.class_names,
                    scene_id=req.scene.scene_id,
                )
            else:
                raise HTTPException(status_code=400,
                                    detail="provide scene_path or an inline scene")
        except (SceneFormatError, SceneConsistencyError, DomainError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

        session_id = uuid.uuid4().hex
        encoding = encode_scene(model, scene, domain)
        sessions[session_id] = Session(
            session_id=session_id, scene=scene, domain=domain, encoding=encoding
        )
        return {"session_id": session_id, "status": "ready",
                "n_points": scene.n_points, "domain": domain.value}

    @app.post("/sessions/{session_id}/clicks")
    def add_click(session_id: str, req: ClickRequest):
        session = get_session(session_id)
        if len(req.point) != 3 or not all(np.isfinite(req.point)):
            raise HTTPException(status_code=400, detail="point must be a finite 3-vector")
        with session.lock:
            clicks = session.objects.setdefault(req.object_id, [])
            clicks.append([float(v) for v in req.point])
            session.history.append(req.object_id)
            payload = run_object(session, req.object_id)
            return {"object_id": req.object_id, "n_clicks": len(clicks), **payload}

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        session = get_session(session_id)
        with session.lock:
            if not session.history:
                return {"undone": False, "detail": "nothing to undo"}
            object_id = session.history.pop()
            session.objects[object_id].pop()
            if not session.objects[object_id]:
                del session.objects[object_id]
                session.object_masks.pop(object_id, None)
                return {"undone": True, "object_id": object_id, "object_removed": True}
            payload = run_object(session, object_id)
            return {"undone": True, "object_id": object_id, "object_removed": False,
                    "n_clicks": len(session.objects[object_id]), **payload}

    @app.post("/sessions/{session_id}/auto")
    def auto_segment(session_id: str, req: AutoSegmentRequest):
        session = get_session(session_id)
        with session.lock:
            cfg = AutoPromptConfig()
            if req.v0 is not None:
                cfg.v0[session.domain.value] = req.v0
            if req.k_max is not None:
                cfg.k_max = req.k_max
            if req.tau_s is not None:
                cfg.tau_s = req.tau_s
            if req.tau_nms is not None:
                cfg.tau_nms = req.tau_nms
            result = generate_auto_masks(model, session.scene, session.domain, cfg)
            session.auto_result = result
            return {
                "n_masks": result.n_masks,
                "masks": [rle_encode(m) for m in result.masks],
                "scores": [float(s) for s in result.scores],
                "provenance": [
                    {"iteration": it, "prompt_point": list(pt)}
                    for it, pt in result.provenance
                ],
            }

    @app.post("/sessions/{session_id}/text-query")
    def text_query(session_id: str, req: TextQueryRequest):
        session = get_session(session_id)
        with session.lock:
            if session.auto_result is None or session.auto_result.n_masks == 0:
                return {"matches": [], "detail": "no masks yet; run auto or add clicks"}
            ranked = open_vocab_query(session.auto_result, req.query, provider,
                                      req.tau_sim)
            return {"matches": [
                {"mask_index": idx, "similarity": sim,
                 "mask": rle_encode(session.auto_result.masks[idx])}
                for idx, sim in ranked
            ]}

    @app.get("/sessions/{session_id}/masks")
    def get_masks(session_id: str):
        session = get_session(session_id)
        with session.lock:
            objects = {
                str(oid): {"n_clicks": len(session.objects[oid]),
                           **_mask_payload(*session.object_masks[oid])}
                for oid in sorted(session.objects)
                if oid in session.object_masks
            }
            auto = None
            if session.auto_result is not None:
                auto = {
                    "masks": [rle_encode(m) for m in session.auto_result.masks],
                    "scores": [float(s) for s in session.auto_result.scores],
                }
            return {"objects": objects, "auto": auto}

    return app
