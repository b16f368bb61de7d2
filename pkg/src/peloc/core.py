"""Session data model, dataset splitting, and corpus manifest IO.

A session is one recorded therapy encounter: a WAV file, a transcript file,
and up to three phase annotations (P1 orientation, P2 imaginal exposure,
P3 processing). Manifests are JSON arrays with one session record per line
so parse errors can name the offending line.
"""

from __future__ import annotations

import enum
import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptyCorpus, ParseError

MAX_SESSION_S = 5400.0  # corpus exclusion threshold: sessions over 1.5 h are dropped

PAPER_SPLIT_RATIOS = (216 / 308, 45 / 308, 47 / 308)


class PhaseKind(enum.IntEnum):
    """The three protocol phases, ordered P1 < P2 < P3."""

    P1 = 1  # orientation to imaginal exposure
    P2 = 2  # imaginal exposure
    P3 = 3  # processing

    def __str__(self):
        return self.name


class Provenance(str, enum.Enum):
    LLM_PROPOSED = "llm-proposed"
    RATER_VERIFIED = "rater-verified"
    SYNTHETIC = "synthetic-ground-truth"


@dataclass(frozen=True)
class PhaseAnnotation:
    phase: PhaseKind
    start_s: float
    stop_s: float
    present: bool
    provenance: Provenance


@dataclass
class Session:
    id: str
    audio_path: str
    duration_s: float
    sample_rate: int
    annotations: list[PhaseAnnotation] = field(default_factory=list)
    transcript_path: str = ""

    def annotation_for(self, phase: PhaseKind) -> PhaseAnnotation | None:
        """Effective annotation for a phase: rater-verified supersedes
        llm-proposed; synthetic ground truth counts as verified."""
        best = None
        for a in self.annotations:
            if a.phase != phase:
                continue
            if best is None or _PROVENANCE_RANK[a.provenance] > _PROVENANCE_RANK[best.provenance]:
                best = a
        return best


_PROVENANCE_RANK = {
    Provenance.LLM_PROPOSED: 0,
    Provenance.SYNTHETIC: 1,
    Provenance.RATER_VERIFIED: 2,
}


@dataclass(frozen=True)
class Violation:
    """One broken invariant: which field and which rule."""

    field: str
    rule: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.rule} -- {self.message}"


def validate_session(s: Session) -> list[Violation]:
    """Check every Session invariant; return an empty list iff all hold.

    Unreadable audio/transcript paths are reported as 'io' violations rather
    than raised, so a whole manifest can be validated in one pass.
    """
    out = []
    if not s.duration_s > 0:
        out.append(Violation("duration_s", "duration>0", f"duration_s={s.duration_s}"))
    seen: dict[PhaseKind, int] = {}
    for a in s.annotations:
        seen[a.phase] = seen.get(a.phase, 0) + 1
        tag = f"annotations[{a.phase.name}]"
        if a.present and not a.start_s < a.stop_s:
            out.append(Violation(tag, "start<stop", f"start_s={a.start_s} stop_s={a.stop_s}"))
        if a.present and a.stop_s > s.duration_s + 1e-9:
            out.append(Violation(tag, "stop<=duration", f"stop_s={a.stop_s} duration_s={s.duration_s}"))
        if a.start_s < 0:
            out.append(Violation(tag, "start>=0", f"start_s={a.start_s}"))
    for phase, n in seen.items():
        if n > 1:
            out.append(Violation(f"annotations[{phase.name}]", "one-per-phase", f"{n} annotations"))
    present = sorted((a for a in s.annotations if a.present), key=lambda a: a.start_s)
    for prev, nxt in zip(present, present[1:]):
        if nxt.phase <= prev.phase:
            out.append(Violation(
                "annotations", "ordering/overlap",
                f"{nxt.phase.name} starts at {nxt.start_s} but {prev.phase.name} starts earlier"))
        elif nxt.start_s < prev.stop_s - 1e-9:
            out.append(Violation(
                "annotations", "ordering/overlap",
                f"{nxt.phase.name} starts at {nxt.start_s} before {prev.phase.name} stops at {prev.stop_s}"))
    for name, path in (("audio_path", s.audio_path), ("transcript_path", s.transcript_path)):
        if path and not os.access(path, os.R_OK):
            out.append(Violation(name, "io", f"unreadable: {path}"))
    return out


def exclusion_reasons(s: Session) -> list[str]:
    """Corpus-level exclusion rules: over 1.5 hours, or not all three phases
    carry a present verified/synthetic label."""
    reasons = []
    if s.duration_s > MAX_SESSION_S:
        reasons.append("duration>1.5h")
    for phase in PhaseKind:
        a = s.annotation_for(phase)
        if a is None or not a.present or a.provenance == Provenance.LLM_PROPOSED:
            reasons.append(f"missing-label:{phase.name}")
    return reasons


@dataclass
class SplitAssignment:
    """Total, disjoint assignment of session ids to train/validation/test."""

    assignments: dict[str, str]

    def ids(self, part: str) -> list[str]:
        return [sid for sid, p in self.assignments.items() if p == part]

    @property
    def train(self) -> list[str]:
        return self.ids("train")

    @property
    def validation(self) -> list[str]:
        return self.ids("validation")

    @property
    def test(self) -> list[str]:
        return self.ids("test")


def split_dataset(session_ids, ratios, seed: int) -> SplitAssignment:
    """Session-level split with deterministic shuffling.

    Part sizes are floor(n * ratio); leftover sessions go to train, then
    validation, then test.
    """
    ids = list(session_ids)
    if not ids:
        raise EmptyCorpus("cannot split an empty corpus")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate session ids")
    if min(ratios) <= 0:
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(ids)
    # The epsilon guards floor() against ratios like 216/308 landing a hair
    # under the exact product in float arithmetic.
    counts = [math.floor(n * r + 1e-9) for r in ratios]
    leftover = n - sum(counts)
    for i in range(leftover):
        counts[i % 3] += 1
    order = np.random.default_rng(seed).permutation(n)
    parts = ("train", "validation", "test")
    assignments = {}
    k = 0
    for part, count in zip(parts, counts):
        for idx in order[k:k + count]:
            assignments[ids[idx]] = part
        k += count
    return SplitAssignment(assignments)


# --- manifest IO -----------------------------------------------------------
#
# One session record per line inside a JSON array. Timestamps are emitted as
# decimal seconds with at least two fractional digits, chosen so that
# load(save(x)) is the identity and re-serialization is byte-stable.

_SESSION_KEYS = {"id", "audio_path", "duration_s", "sample_rate", "annotations", "transcript_path"}
_ANNOTATION_KEYS = {"phase", "start", "stop", "present", "provenance"}


def format_seconds(x: float) -> str:
    """Decimal rendering of a timestamp with >= 2 fractional digits that
    parses back to exactly the same float."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"non-finite timestamp: {x}")
    two = f"{x:.2f}"
    if float(two) == x:
        return two
    return repr(x)


def _annotation_json(a: PhaseAnnotation) -> str:
    return ('{"phase": "%s", "start": %s, "stop": %s, "present": %s, "provenance": %s}' % (
        a.phase.name, format_seconds(a.start_s), format_seconds(a.stop_s),
        "true" if a.present else "false", json.dumps(a.provenance.value)))


def _session_json(s: Session) -> str:
    anns = ", ".join(_annotation_json(a) for a in s.annotations)
    return ('{"id": %s, "audio_path": %s, "duration_s": %s, "sample_rate": %d, '
            '"transcript_path": %s, "annotations": [%s]}' % (
                json.dumps(s.id), json.dumps(str(s.audio_path)), format_seconds(s.duration_s),
                int(s.sample_rate), json.dumps(str(s.transcript_path)), anns))


def save_manifest(sessions, path) -> None:
    """Write sessions as a canonical JSON manifest, atomically."""
    lines = ["["]
    for i, s in enumerate(sessions):
        comma = "," if i + 1 < len(sessions) else ""
        lines.append(_session_json(s) + comma)
    lines.append("]")
    text = "\n".join(lines) + "\n"
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_annotation(raw: dict, line: int) -> PhaseAnnotation:
    unknown = set(raw) - _ANNOTATION_KEYS
    if unknown:
        raise ParseError(f"unknown annotation fields {sorted(unknown)}", line=line)
    missing = _ANNOTATION_KEYS - set(raw)
    if missing:
        raise ParseError(f"annotation missing fields {sorted(missing)}", line=line)
    try:
        phase = PhaseKind[raw["phase"]]
    except KeyError:
        raise ParseError(f"unknown phase {raw['phase']!r}", line=line, field="phase")
    if not isinstance(raw["present"], bool):
        raise ParseError("present must be a boolean", line=line, field="present")
    for key in ("start", "stop"):
        if not isinstance(raw[key], (int, float)) or isinstance(raw[key], bool):
            raise ParseError(f"{key} must be a number", line=line, field=key)
    try:
        prov = Provenance(raw["provenance"])
    except ValueError:
        raise ParseError(f"unknown provenance {raw['provenance']!r}", line=line, field="provenance")
    return PhaseAnnotation(phase, float(raw["start"]), float(raw["stop"]), raw["present"], prov)


def _parse_session(raw: dict, line: int) -> Session:
    if not isinstance(raw, dict):
        raise ParseError("session record must be an object", line=line)
    unknown = set(raw) - _SESSION_KEYS
    if unknown:
        raise ParseError(f"unknown session fields {sorted(unknown)}", line=line)
    missing = _SESSION_KEYS - set(raw)
    if missing:
        raise ParseError(f"session missing fields {sorted(missing)}", line=line)
    if not isinstance(raw["duration_s"], (int, float)) or isinstance(raw["duration_s"], bool):
        raise ParseError("duration_s must be a number", line=line, field="duration_s")
    if not isinstance(raw["sample_rate"], int) or isinstance(raw["sample_rate"], bool):
        raise ParseError("sample_rate must be an integer", line=line, field="sample_rate")
    anns = [_parse_annotation(a, line) for a in raw["annotations"]]
    return Session(
        id=str(raw["id"]), audio_path=str(raw["audio_path"]), duration_s=float(raw["duration_s"]),
        sample_rate=raw["sample_rate"], annotations=anns, transcript_path=str(raw["transcript_path"]))


def load_manifest(path) -> list[Session]:
    """Load a manifest written by save_manifest. Rejects unknown fields."""
    with open(path) as f:
        lines = f.read().splitlines()
    sessions = []
    for lineno, stripped in enumerate(lines, start=1):
        stripped = stripped.strip()
        if stripped in ("[", "]", ""):
            continue
        record = stripped.rstrip(",")
        try:
            raw = json.loads(record)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=lineno)
        sessions.append(_parse_session(raw, lineno))
    return sessions


def with_annotation(session: Session, ann: PhaseAnnotation) -> Session:
    """Copy of the session with `ann` appended (rater verdicts never erase
    earlier annotations; annotation_for resolves precedence)."""
    return replace(session, annotations=session.annotations + [ann])
