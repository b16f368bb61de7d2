"""Soft-supervision pipeline: annotator clients that propose phase
timestamps from transcripts, an append-only verification log for human
raters, and agreement statistics between proposals and verified labels.

Two annotators ship: a deterministic mock that perturbs synthetic ground
truth with seeded jitter, and a generic HTTP client posting the transcript
to an external endpoint and expecting the same JSON schema back.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import urllib.request
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import PhaseAnnotation, PhaseKind, Provenance, Session
from .errors import AnnotatorError, Conflict, EmptyReview, NotFound, ParseError

DEFAULT_TOLERANCE_S = 5.0  # agreement band is 5-10 s; 5 is the strict end

ANNOTATOR_URL_ENV = "PELOC_ANNOTATOR_URL"
ANNOTATOR_TOKEN_ENV = "PELOC_ANNOTATOR_TOKEN"

INSTRUCTION_TEMPLATE = (
    "Identify the three protocol phases (1 orientation, 2 imaginal exposure, "
    "3 processing) in the transcript below. Respond with a JSON array of "
    '{"id", "description", "start", "stop", "present"} records, '
    "timestamps in seconds.\n\n{transcript}"
)

PHASE_DESCRIPTIONS = {
    PhaseKind.P1: "Therapist orients the client to the planned imaginal exposure.",
    PhaseKind.P2: "Imaginal lasted about 30-45 minutes (or about 15 for final imaginal).",
    PhaseKind.P3: "Therapist processes the imaginal exposure with the client.",
}


@dataclass(frozen=True)
class ProposedAnnotation:
    session_id: str
    phase: PhaseKind
    description: str
    start_s: float
    stop_s: float
    present: bool
    source: str

    @property
    def proposal_id(self) -> str:
        # colon keeps the id usable as a single URL path segment
        return f"{self.session_id}:{self.phase.name}"


@dataclass(frozen=True)
class RaterVerdict:
    proposal_id: str
    decision: str  # accept | correct | reject-label
    rater_id: str
    timestamp: float
    corrected_start_s: float | None = None
    corrected_stop_s: float | None = None

    def validate(self) -> None:
        if self.decision not in ("accept", "correct", "reject-label"):
            raise ValueError(f"unknown decision {self.decision!r}")
        if self.decision == "correct":
            if self.corrected_start_s is None or self.corrected_stop_s is None:
                raise ValueError("correct verdict requires corrected timestamps")
            if not self.corrected_start_s < self.corrected_stop_s:
                raise ValueError("corrected_start_s must be < corrected_stop_s")


@dataclass
class AgreementStats:
    timestamp_accuracy: float
    label_accuracy: float
    tolerance_s: float
    n_timestamps: int
    n_labels: int


# --- annotators ----------------------------------------------------------------

@dataclass
class AnnotationRequest:
    session_id: str
    duration_s: float
    transcript_text: str
    ground_truth: list[PhaseAnnotation] | None = None  # mock only


class MockAnnotator:
    """Deterministic stand-in: jitters the session's ground-truth timestamps
    by seeded uniform noise in [-jitter_s, +jitter_s]."""

    name = "mock"

    def __init__(self, jitter_s: float = 2.0, seed: int = 0):
        self.jitter_s = jitter_s
        self.seed = seed

    def propose(self, request: AnnotationRequest) -> str:
        if request.ground_truth is None:
            raise AnnotatorError("mock annotator needs ground-truth annotations")
        digest = hashlib.sha256(request.session_id.encode()).digest()
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, int.from_bytes(digest[:4], "little")]))
        rows = []
        for ann in sorted(request.ground_truth, key=lambda a: a.phase):
            start = min(max(ann.start_s + rng.uniform(-self.jitter_s, self.jitter_s), 0.0),
                        request.duration_s)
            stop = min(max(ann.stop_s + rng.uniform(-self.jitter_s, self.jitter_s), start + 0.01),
                       request.duration_s)
            rows.append({"id": int(ann.phase), "description": PHASE_DESCRIPTIONS[ann.phase],
                         "start": round(start, 2), "stop": round(stop, 2),
                         "present": "Yes" if ann.present else "No"})
        return json.dumps(rows)


class HttpAnnotator:
    """POSTs the instruction-plus-transcript to an external endpoint named by
    environment variables; the response body must be the annotation JSON."""

    name = "http"

    def __init__(self, url: str | None = None, timeout_s: float = 60.0):
        self.url = url or os.environ.get(ANNOTATOR_URL_ENV, "")
        self.timeout_s = timeout_s
        if not self.url:
            raise AnnotatorError(f"no annotator endpoint; set {ANNOTATOR_URL_ENV}")

    def propose(self, request: AnnotationRequest) -> str:
        # str.replace, not str.format: the instruction text contains JSON braces
        body = INSTRUCTION_TEMPLATE.replace("{transcript}", request.transcript_text).encode()
        req = urllib.request.Request(self.url, data=body, method="POST",
                                     headers={"Content-Type": "text/plain; charset=utf-8"})
        token = os.environ.get(ANNOTATOR_TOKEN_ENV)
        if token:
            req.add_header("Authorization", f"Bearer {token}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout_s) as resp:
                return resp.read().decode("utf-8")
        except Exception as e:
            raise AnnotatorError(f"annotator request failed: {e}")


def parse_annotator_json(payload: str, session_id: str = "",
                         source: str = "llm") -> list[ProposedAnnotation]:
    """Strict parse of the annotator response: exactly the fields
    {id, description, start, stop, present}, ids 1..3, decimal seconds,
    present as boolean or Yes/No."""
    try:
        raw = json.loads(payload)
    except json.JSONDecodeError as e:
        raise ParseError(f"annotator payload is not JSON: {e.msg}", line=e.lineno)
    if not isinstance(raw, list):
        raise ParseError("annotator payload must be a JSON array")
    proposals = []
    seen = set()
    for rec in raw:
        if not isinstance(rec, dict):
            raise ParseError("annotation record must be an object")
        if set(rec) != {"id", "description", "start", "stop", "present"}:
            raise ParseError(f"bad record keys {sorted(rec)}")
        if rec["id"] not in (1, 2, 3):
            raise ParseError(f"phase id must be 1, 2 or 3, got {rec['id']!r}", field="id")
        phase = PhaseKind(rec["id"])
        if phase in seen:
            raise ParseError(f"duplicate phase id {rec['id']}", field="id")
        seen.add(phase)
        for key in ("start", "stop"):
            if not isinstance(rec[key], (int, float)) or isinstance(rec[key], bool):
                raise ParseError(f"{key} must be a decimal number", field=key)
        present = rec["present"]
        if isinstance(present, str):
            if present not in ("Yes", "No"):
                raise ParseError(f"present must be Yes/No, got {present!r}", field="present")
            present = present == "Yes"
        elif not isinstance(present, bool):
            raise ParseError("present must be a boolean or Yes/No", field="present")
        start, stop = float(rec["start"]), float(rec["stop"])
        if present and not start < stop:
            raise ParseError(f"start {start} must be < stop {stop}", field="start")
        proposals.append(ProposedAnnotation(
            session_id=session_id, phase=phase, description=str(rec["description"]),
            start_s=start, stop_s=stop, present=present, source=source))
    return proposals


def annotate(session: Session, transcript_text: str, annotator) -> list[ProposedAnnotation]:
    """Run one annotator over a session transcript and validate the result:
    one proposal per phase, timestamps within the session."""
    request = AnnotationRequest(session.id, session.duration_s, transcript_text,
                                ground_truth=session.annotations or None)
    payload = annotator.propose(request)
    try:
        proposals = parse_annotator_json(payload, session.id, annotator.name)
    except ParseError as e:
        raise AnnotatorError(f"garbled annotator response: {e}", raw_payload=payload)
    got = {p.phase for p in proposals}
    if got != set(PhaseKind):
        missing = [p.name for p in PhaseKind if p not in got]
        raise AnnotatorError(f"incomplete response, missing {missing}", raw_payload=payload)
    for p in proposals:
        if not (0 <= p.start_s <= session.duration_s and 0 <= p.stop_s <= session.duration_s):
            raise AnnotatorError(
                f"{p.phase.name} timestamps outside [0, {session.duration_s}]",
                raw_payload=payload)
    return proposals


# --- verdict store ---------------------------------------------------------------

class VerdictStore:
    """Append-only verdict log; the current state is a fold over the log.
    Proposals finalize on their first verdict; an identical repeat is a no-op
    and a conflicting one raises. Appends are serialized (one writer at a
    time); reads take snapshots."""

    def __init__(self, proposals: list[ProposedAnnotation], log_path=None):
        self.proposals = {p.proposal_id: p for p in proposals}
        self.log_path = Path(log_path) if log_path else None
        self.verdicts: list[RaterVerdict] = []
        self._write_lock = threading.RLock()
        if self.log_path and self.log_path.exists():
            with open(self.log_path) as f:
                for line in f:
                    if line.strip():
                        self.verdicts.append(RaterVerdict(**json.loads(line)))

    def verdict_for(self, proposal_id: str) -> RaterVerdict | None:
        found = None
        for v in self.verdicts:  # later verdicts supersede, never erase
            if v.proposal_id == proposal_id:
                found = v
        return found

    def pending(self) -> list[ProposedAnnotation]:
        return [p for pid, p in self.proposals.items() if self.verdict_for(pid) is None]

    def append(self, verdict: RaterVerdict) -> None:
        with self._write_lock:
            self.verdicts.append(verdict)
            if self.log_path:
                with open(self.log_path, "a") as f:
                    f.write(json.dumps(asdict(verdict)) + "\n")


def verified_annotation(proposal: ProposedAnnotation, verdict: RaterVerdict) -> PhaseAnnotation:
    """The rater-verified annotation a verdict produces for its proposal."""
    if verdict.decision == "accept":
        return PhaseAnnotation(proposal.phase, proposal.start_s, proposal.stop_s,
                               proposal.present, Provenance.RATER_VERIFIED)
    if verdict.decision == "correct":
        return PhaseAnnotation(proposal.phase, verdict.corrected_start_s,
                               verdict.corrected_stop_s, True, Provenance.RATER_VERIFIED)
    return PhaseAnnotation(proposal.phase, proposal.start_s, proposal.stop_s,
                           False, Provenance.RATER_VERIFIED)


def apply_verdict(store: VerdictStore, verdict: RaterVerdict) -> PhaseAnnotation:
    """Record one verdict. Identical repeats are idempotent; differing
    verdicts on a finalized proposal raise Conflict. Check-and-append is
    atomic so concurrent raters race to a clean 409, not a double write."""
    verdict.validate()
    proposal = store.proposals.get(verdict.proposal_id)
    if proposal is None:
        raise NotFound(f"unknown proposal {verdict.proposal_id!r}")
    with store._write_lock:
        existing = store.verdict_for(verdict.proposal_id)
        if existing is not None:
            same = (existing.decision == verdict.decision
                    and existing.corrected_start_s == verdict.corrected_start_s
                    and existing.corrected_stop_s == verdict.corrected_stop_s)
            if not same:
                raise Conflict(f"proposal {verdict.proposal_id} already finalized")
            return verified_annotation(proposal, existing)
        store.append(verdict)
    return verified_annotation(proposal, verdict)


def compute_agreement(proposals: list[ProposedAnnotation], verdicts: list[RaterVerdict],
                      tolerance_s: float = DEFAULT_TOLERANCE_S) -> AgreementStats:
    """Fraction of proposal boundary timestamps within tolerance of the
    verified value (2 per present phase), and fraction of presence flags the
    raters left unchanged. Order-invariant in the verdict list."""
    if not verdicts:
        raise EmptyReview("no verdicts to score")
    by_id = {p.proposal_id: p for p in proposals}
    final: dict[str, RaterVerdict] = {}
    for v in sorted(verdicts, key=lambda v: v.timestamp):
        if v.proposal_id not in by_id:
            raise NotFound(f"verdict references unknown proposal {v.proposal_id!r}")
        final[v.proposal_id] = v
    ts_total = ts_ok = label_total = label_ok = 0
    for pid, v in final.items():
        proposal = by_id[pid]
        verified = verified_annotation(proposal, v)
        label_total += 1
        if verified.present == proposal.present:
            label_ok += 1
        if verified.present and proposal.present:
            for prop_t, true_t in ((proposal.start_s, verified.start_s),
                                   (proposal.stop_s, verified.stop_s)):
                ts_total += 1
                if abs(prop_t - true_t) <= tolerance_s:
                    ts_ok += 1
    return AgreementStats(
        timestamp_accuracy=ts_ok / ts_total if ts_total else 0.0,
        label_accuracy=label_ok / label_total if label_total else 0.0,
        tolerance_s=tolerance_s, n_timestamps=ts_total, n_labels=label_total)


# --- proposal persistence ---------------------------------------------------------

def save_proposals(proposals: list[ProposedAnnotation], path) -> None:
    with open(path, "w") as f:
        for p in proposals:
            rec = asdict(p)
            rec["phase"] = p.phase.name
            f.write(json.dumps(rec) + "\n")


def load_proposals(path) -> list[ProposedAnnotation]:
    out = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rec["phase"] = PhaseKind[rec["phase"]]
                out.append(ProposedAnnotation(**rec))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ParseError(f"bad proposal record: {e}", line=i)
    return out
