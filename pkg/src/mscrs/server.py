"""HTTP session API for interactive conversational recommendation.

Endpoints: POST /sessions, POST /sessions/{id}/utterances, GET
/sessions/{id}, GET /health. Model state is immutable and shared; each
session mutates under its own lock. Responses avoid wall-clock fields so a
scripted replay against a fixed checkpoint is byte-identical.
"""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from pydantic import BaseModel

from . import convgen as cg
from . import recsys as rs
from .pipeline import LoadedBundle
from .sessions import SessionError, SessionStore

log = logging.getLogger("mscrs.server")


class UtteranceRequest(BaseModel):
    text: str
    entities: list[int] | None = None
    k: int | None = None


def recognize_entities(text: str, names: list[str]) -> list[int]:
    """Exact name matching on token boundaries, longest names first."""
    tokens = text.lower().split()
    found = []
    order = sorted(range(len(names)), key=lambda i: -len(names[i].split()))
    for eid in order:
        name_tokens = names[eid].lower().split()
        n = len(name_tokens)
        if n == 0:
            continue
        for start in range(len(tokens) - n + 1):
            if tokens[start:start + n] == name_tokens:
                found.append(eid)
                break
    return sorted(found)


class EngineState:
    """Frozen models plus the session store; safe for concurrent reads."""

    def __init__(self, bundle: LoadedBundle, store: SessionStore,
                 top_k: int, max_new_tokens: int):
        if bundle.rec_model is None:
            raise ValueError("bundle has no recommendation checkpoint")
        self.bundle = bundle
        self.store = store
        self.top_k = top_k
        self.max_new_tokens = max_new_tokens
        item_final, scoring = bundle.rec_model.semantic_tables()
        self.item_final = item_final.detach()
        self.scoring = scoring.detach()
        self.registry = bundle.world.corpus.registry

    def rank(self, context_tokens: list[str], entities: list[int]) -> list[dict]:
        model = self.bundle.rec_model
        prompt, _, _ = model.encode(context_tokens, entities, self.scoring)
        probs, ranked = rs.score_items(model.user_vector(prompt), self.item_final,
                                       self.registry)
        out = []
        for eid in ranked:
            row = self.registry.item_index[eid]
            out.append({"item_id": eid, "name": self.registry.names[eid],
                        "score": float(probs[row])})
        return out

    def respond(self, context_tokens: list[str], entities: list[int],
                top: dict | None) -> list[str]:
        if self.bundle.gen_model is not None:
            inst = cg.GenInstance(-1, -1, context_tokens, entities, [])
            out = cg.generate_response(
                self.bundle.gen_model, inst,
                top["item_id"] if top else None,
                top["name"] if top else None,
                max_new_tokens=self.max_new_tokens)
            if out.tokens:
                return out.tokens
        # no generator, or it decoded straight to end-of-sequence
        name = top["name"] if top else "something"
        return ["you", "should", "watch", name, "tonight"]


def create_app(engine: EngineState | None, ui_dir: Path | None = None) -> FastAPI:
    app = FastAPI(title="mscrs", docs_url=None, redoc_url=None)

    def need_engine() -> EngineState:
        if engine is None:
            raise HTTPException(status_code=503, detail={
                "code": "no_model", "message": "no checkpoint loaded"})
        return engine

    @app.get("/health")
    def health():
        return {"status": "ok", "model_loaded": engine is not None}

    @app.post("/sessions")
    def create_session():
        eng = need_engine()
        sid = eng.store.create()
        return {"id": sid}

    @app.get("/sessions/{sid}")
    def get_session(sid: str):
        eng = need_engine()
        try:
            snap = eng.store.snapshot(sid)
        except SessionError:
            raise HTTPException(status_code=404, detail={
                "code": "unknown_session", "message": sid}) from None
        mentioned = {eid for turn in snap["turns"]
                     for eid in turn.get("entities", [])}
        snap["entity_names"] = {str(eid): eng.registry.names[eid]
                                for eid in sorted(mentioned)}
        return snap

    @app.post("/sessions/{sid}/utterances")
    def post_utterance(sid: str, req: UtteranceRequest):
        eng = need_engine()
        if not req.text.strip():
            raise HTTPException(status_code=400, detail={
                "code": "empty_text", "message": "utterance text is empty"})
        try:
            lock = eng.store.lock(sid)
        except SessionError:
            raise HTTPException(status_code=404, detail={
                "code": "unknown_session", "message": sid}) from None
        k = req.k if req.k is not None else eng.top_k
        if k < 1:
            raise HTTPException(status_code=400, detail={
                "code": "bad_k", "message": "k must be positive"})
        with lock:
            tokens = req.text.lower().split()
            if req.entities is not None:
                for eid in req.entities:
                    if not (0 <= eid < eng.registry.entity_count):
                        raise HTTPException(status_code=400, detail={
                            "code": "unknown_entity", "message": str(eid)})
                recognized = sorted(set(req.entities))
            else:
                recognized = recognize_entities(req.text, eng.registry.names)
            eng.store.add_turn(sid, {"role": "user", "tokens": tokens,
                                     "entities": recognized})
            sess = eng.store.get(sid)
            context = [t for turn in sess["turns"] for t in turn["tokens"]]
            entities = list(sess["entities"])
            ranking = eng.rank(context, entities)
            recs = ranking[:k]
            response_tokens = eng.respond(context, entities,
                                          recs[0] if recs else None)
            rec_entities = [r["item_id"] for r in recs[:1]
                            if r["name"] in response_tokens]
            eng.store.add_turn(sid, {"role": "system", "tokens": response_tokens,
                                     "entities": rec_entities,
                                     "recommendations": recs})
        return {"response_tokens": response_tokens, "recommendations": recs,
                "entities_recognized": [
                    {"id": eid, "name": eng.registry.names[eid]}
                    for eid in recognized]}

    if ui_dir is not None and (ui_dir / "index.html").exists():
        @app.get("/")
        def index():
            return FileResponse(ui_dir / "index.html")

        @app.get("/ui/{path:path}")
        def ui_assets(path: str):
            target = (ui_dir / path).resolve()
            if not str(target).startswith(str(ui_dir.resolve())) \
                    or not target.is_file():
                raise HTTPException(status_code=404, detail={"code": "not_found",
                                                             "message": path})
            return FileResponse(target)

    return app
