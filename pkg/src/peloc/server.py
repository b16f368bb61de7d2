"""Local HTTP review API backing the rater-verification UI.

The server is stateless between requests except for the append-only verdict
log: restarting it reproduces identical /api/stats from the log alone. It
binds localhost by default; session audio stays on the machine.
"""

from __future__ import annotations

import time
from pathlib import Path

from fastapi import FastAPI, HTTPException, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import core, ingest, supervision
from .errors import Conflict, EmptyReview, NotFound
from .supervision import RaterVerdict, VerdictStore

DEFAULT_AUDIO_PAD_S = 15.0
EXCERPT_HALF_WIDTH_S = 60.0


class VerdictBody(BaseModel):
    decision: str
    rater_id: str = "rater"
    corrected_start_s: float | None = None
    corrected_stop_s: float | None = None


class ReviewState:
    def __init__(self, corpus_root, tolerance_s: float = supervision.DEFAULT_TOLERANCE_S):
        root = Path(corpus_root)
        self.root = root
        self.tolerance_s = tolerance_s
        self.sessions = {s.id: s for s in core.load_manifest(root / "manifest.json")}
        proposals = supervision.load_proposals(root / "proposals.jsonl")
        self.store = VerdictStore(proposals, log_path=root / "verdicts.jsonl")

    def proposal(self, pid: str) -> supervision.ProposedAnnotation:
        p = self.store.proposals.get(pid)
        if p is None:
            raise NotFound(f"unknown proposal {pid!r}")
        return p


def _proposal_view(state: ReviewState, p: supervision.ProposedAnnotation) -> dict:
    verdict = state.store.verdict_for(p.proposal_id)
    return {
        "id": p.proposal_id, "session_id": p.session_id, "phase": p.phase.name,
        "description": p.description, "start_s": p.start_s, "stop_s": p.stop_s,
        "present": p.present, "source": p.source,
        "status": "finalized" if verdict else "pending",
        "decision": verdict.decision if verdict else None,
    }


def _excerpt(state: ReviewState, session: core.Session, t: float) -> list[dict]:
    sents = ingest.parse_transcript(session.transcript_path)
    lo = max(0.0, t - EXCERPT_HALF_WIDTH_S)
    hi = min(session.duration_s, t + EXCERPT_HALF_WIDTH_S)
    return [{"start": s.start_s, "end": s.end_s, "speaker": s.speaker, "text": s.text}
            for s in sents if s.start_s < hi and s.end_s > lo]


def create_app(corpus_root, tolerance_s: float = supervision.DEFAULT_TOLERANCE_S,
               ui_dir=None) -> FastAPI:
    state = ReviewState(corpus_root, tolerance_s)
    app = FastAPI(title="peloc review")
    app.state.review = state

    @app.exception_handler(RequestValidationError)
    def malformed_body(request: Request, exc: RequestValidationError):
        fields = [{"field": ".".join(str(x) for x in e["loc"]), "error": e["msg"]}
                  for e in exc.errors()]
        return JSONResponse(status_code=400, content={"detail": fields})

    @app.get("/api/queue")
    def queue():
        items = [_proposal_view(state, p) for p in state.store.proposals.values()]
        pending = [i for i in items if i["status"] == "pending"]
        return {"items": items, "pending": len(pending),
                "reviewed": len(items) - len(pending), "total": len(items),
                "tolerance_s": state.tolerance_s}

    @app.get("/api/proposal/{pid}")
    def proposal(pid: str):
        try:
            p = state.proposal(pid)
        except NotFound as e:
            raise HTTPException(404, str(e))
        session = state.sessions[p.session_id]
        view = _proposal_view(state, p)
        view["duration_s"] = session.duration_s
        view["start_excerpt"] = _excerpt(state, session, p.start_s)
        view["stop_excerpt"] = _excerpt(state, session, p.stop_s)
        return view

    @app.get("/api/proposal/{pid}/audio")
    def audio(pid: str, pad: float = DEFAULT_AUDIO_PAD_S, boundary: str = "start"):
        try:
            p = state.proposal(pid)
        except NotFound as e:
            raise HTTPException(404, str(e))
        if boundary not in ("start", "end"):
            raise HTTPException(400, "boundary must be 'start' or 'end'")
        if pad <= 0:
            raise HTTPException(400, "pad must be positive")
        session = state.sessions[p.session_id]
        t = p.start_s if boundary == "start" else p.stop_s
        t0 = max(0.0, t - pad)
        t1 = min(session.duration_s, t + pad)
        buf = ingest.load_wav(session.audio_path)
        clip = ingest.slice_audio(buf, t0, max(t1 - t0, 0.1))
        return Response(content=ingest.wav_bytes(clip), media_type="audio/wav",
                        headers={"X-Clip-Start-S": f"{t0:.2f}", "X-Clip-End-S": f"{t1:.2f}"})

    @app.post("/api/proposal/{pid}/verdict")
    def verdict(pid: str, body: VerdictBody):
        v = RaterVerdict(proposal_id=pid, decision=body.decision, rater_id=body.rater_id,
                         timestamp=time.time(), corrected_start_s=body.corrected_start_s,
                         corrected_stop_s=body.corrected_stop_s)
        try:
            ann = supervision.apply_verdict(state.store, v)
        except NotFound as e:
            raise HTTPException(404, str(e))
        except Conflict as e:
            raise HTTPException(409, str(e))
        except ValueError as e:
            raise HTTPException(400, str(e))
        return {"ok": True, "annotation": {
            "phase": ann.phase.name, "start": ann.start_s, "stop": ann.stop_s,
            "present": ann.present, "provenance": ann.provenance.value}}

    @app.get("/api/stats")
    def stats():
        try:
            s = supervision.compute_agreement(
                list(state.store.proposals.values()), state.store.verdicts, state.tolerance_s)
        except EmptyReview:
            return {"timestamp_accuracy": None, "label_accuracy": None,
                    "tolerance_s": state.tolerance_s, "n_timestamps": 0, "n_labels": 0}
        return {"timestamp_accuracy": s.timestamp_accuracy, "label_accuracy": s.label_accuracy,
                "tolerance_s": s.tolerance_s, "n_timestamps": s.n_timestamps,
                "n_labels": s.n_labels}

    if ui_dir and Path(ui_dir).is_dir():
        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve(corpus_root, host: str = "127.0.0.1", port: int = 8765,
          tolerance_s: float = supervision.DEFAULT_TOLERANCE_S, ui_dir=None) -> None:
    import uvicorn

    app = create_app(corpus_root, tolerance_s, ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
