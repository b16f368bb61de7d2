"""Window sampling around phase boundaries, offset normalization, prompts,
and training-example assembly.

A boundary at absolute time t_abs inside a window [t_start, t_start + D)
sits at the normalized offset (t_abs - t_start) / D in [0, 1]. Training
windows place the boundary at a uniform random offset u; windows that would
extend past the session edges are clamped and the target recomputed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import ingest
from .core import PhaseKind, Session
from .errors import MissingLabel, OutOfWindow, WindowLargerThanSession

WINDOW_DURATIONS = (30.0, 60.0, 120.0)

# Byte-level vocabulary: 256 byte values plus 8 specials.
PAD, BOS, EOS, SEP = 256, 257, 258, 259
VOCAB_SIZE = 264

PROMPT_TEMPLATE = (
    "The following audio and transcript segment is focused around the {b} of "
    "'{q}'. Identify the normalized offset (between 0.0 and 1.0) of this "
    "precise {b} within the given segment."
)

DEFAULT_PHASE_QUESTIONS = {
    PhaseKind.P1: "Therapist orients the client to the planned imaginal exposure",
    PhaseKind.P2: "Imaginal lasted about 30-45 minutes (or about 15 for final imaginal)",
    PhaseKind.P3: "Therapist processes the imaginal exposure with the client",
}

MAX_TRANSCRIPT_TOKENS = 448


class BoundaryKind(enum.Enum):
    START = "start"
    END = "end"


@dataclass(frozen=True)
class WindowSpec:
    session_id: str
    t_start: float
    duration_D: float
    phase: PhaseKind
    boundary: BoundaryKind


@dataclass
class WindowExample:
    spec: WindowSpec
    audio: np.ndarray           # mel frames x 64
    transcript_tokens: np.ndarray
    prompt_tokens: np.ndarray
    target_offset: float
    t_abs: float = float("nan")  # absolute boundary time, kept for evaluation


def normalize_offset(t_abs: float, t_start: float, D: float) -> float:
    """(t_abs - t_start) / D, defined only for boundaries inside the window."""
    if D <= 0:
        raise ValueError(f"D must be positive, got {D}")
    if not t_start <= t_abs <= t_start + D:
        raise OutOfWindow(f"t_abs={t_abs} outside [{t_start}, {t_start + D}]")
    return (t_abs - t_start) / D


def denormalize_offset(o: float, t_start: float, D: float) -> float:
    """Absolute timestamp t_start + o * D."""
    if D <= 0:
        raise ValueError(f"D must be positive, got {D}")
    return t_start + o * D


def sample_window(t_abs: float, D: float, session_dur: float, u: float,
                  session_id: str = "", phase: PhaseKind = PhaseKind.P1,
                  boundary: BoundaryKind = BoundaryKind.START) -> tuple[WindowSpec, float]:
    """Window of duration D placing the boundary at offset u, clamped to the
    session. For interior boundaries the target equals u exactly; at the
    session edges the window is clamped and the target recomputed.
    """
    if session_dur < D:
        raise WindowLargerThanSession(f"session {session_dur}s shorter than window {D}s")
    if not 0 <= t_abs <= session_dur:
        raise OutOfWindow(f"t_abs={t_abs} outside session [0, {session_dur}]")
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must be in [0, 1], got {u}")
    ideal = t_abs - u * D
    t_start = min(max(ideal, 0.0), session_dur - D)
    if t_start == ideal:
        target = u  # exact: avoids the (t_abs - t_start) / D round trip
    else:
        target = min(max((t_abs - t_start) / D, 0.0), 1.0)
    return WindowSpec(session_id, t_start, D, phase, boundary), target


def build_prompt(phase: PhaseKind, boundary: BoundaryKind,
                 questions: dict[PhaseKind, str] | None = None) -> str:
    """Task prompt naming the phase question and the boundary kind."""
    q = (questions or DEFAULT_PHASE_QUESTIONS)[phase]
    return PROMPT_TEMPLATE.format(b=boundary.value.upper(), q=q)


def tokenize(text: str) -> np.ndarray:
    """UTF-8 bytes as token ids (0..255)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> str:
    return bytes(int(i) for i in ids if int(i) < 256).decode("utf-8", errors="replace")


def serialize_excerpt(sentences, max_tokens: int = MAX_TRANSCRIPT_TOKENS) -> str:
    """Terse one-line-per-sentence rendering of a window excerpt with
    fixed-width window-relative start times, truncated to the token budget.
    Zero-padded times keep each digit at a stable position within its line."""
    lines = []
    total = 0
    for s in sentences:
        line = f"{max(s.start_s, 0.0):05.1f} {s.speaker[0].upper()}: {s.text}"
        n = len(line.encode("utf-8")) + 1
        if total + n > max_tokens:
            break
        lines.append(line)
        total += n
    return "\n".join(lines)


@dataclass(frozen=True)
class WindowPlan:
    """Everything needed to materialize a WindowExample except the features.

    Plans are tiny; features are computed on demand so corpus-scale training
    does not hold every mel matrix in memory.
    """

    spec: WindowSpec
    target_offset: float
    t_abs: float
    prompt: str
    transcript_text: str

    def checksum_fields(self):
        return (self.spec.session_id, self.spec.t_start, self.spec.duration_D,
                self.spec.phase.name, self.spec.boundary.value, self.target_offset)


def boundary_times(session: Session) -> list[tuple[PhaseKind, BoundaryKind, float]]:
    """The six (phase, boundary, t_abs) targets of a fully labeled session."""
    out = []
    for phase in PhaseKind:
        ann = session.annotation_for(phase)
        if ann is None or not ann.present:
            raise MissingLabel(f"session {session.id}: no usable label for {phase.name}")
        if ann.provenance.value == "llm-proposed":
            raise MissingLabel(f"session {session.id}: {phase.name} label not verified")
        out.append((phase, BoundaryKind.START, ann.start_s))
        out.append((phase, BoundaryKind.END, ann.stop_s))
    return out


def plan_examples(session: Session, D: float, rng_seed: int, per_boundary_count: int,
                  sentences=None, questions=None) -> list[WindowPlan]:
    """Plan per_boundary_count windows for each of the six boundaries, with
    u drawn uniformly by a generator seeded from rng_seed."""
    if sentences is None:
        sentences = ingest.parse_transcript(session.transcript_path)
    rng = np.random.default_rng(rng_seed)
    plans = []
    for phase, boundary, t_abs in boundary_times(session):
        for _ in range(per_boundary_count):
            u = float(rng.random())
            spec, target = sample_window(t_abs, D, session.duration_s, u,
                                         session_id=session.id, phase=phase, boundary=boundary)
            excerpt = ingest.excerpt_for_window(sentences, spec.t_start, D)
            plans.append(WindowPlan(
                spec=spec, target_offset=target, t_abs=t_abs,
                prompt=build_prompt(phase, boundary, questions),
                transcript_text=serialize_excerpt(excerpt)))
    return plans


def plan_probe_windows(session: Session, D: float, rng_seed: int, count: int,
                       sentences=None) -> list[WindowPlan]:
    """Randomly placed windows for self-supervised base pretraining: no
    boundary labels are consulted; prompts cycle through the six tasks so the
    text path sees realistic bytes. Targets are unset."""
    if session.duration_s < D:
        raise WindowLargerThanSession(f"session {session.duration_s}s shorter than {D}s")
    if sentences is None:
        sentences = ingest.parse_transcript(session.transcript_path)
    rng = np.random.default_rng(rng_seed)
    tasks = [(p, b) for p in PhaseKind for b in BoundaryKind]
    plans = []
    for i in range(count):
        t_start = float(rng.uniform(0.0, session.duration_s - D))
        phase, boundary = tasks[i % len(tasks)]
        spec = WindowSpec(session.id, t_start, D, phase, boundary)
        excerpt = ingest.excerpt_for_window(sentences, t_start, D)
        plans.append(WindowPlan(
            spec=spec, target_offset=0.0, t_abs=float("nan"),
            prompt=build_prompt(phase, boundary),
            transcript_text=serialize_excerpt(excerpt)))
    return plans


def materialize(plan: WindowPlan, audio: ingest.AudioBuffer) -> WindowExample:
    """Featurize one planned window from the session audio."""
    sliced = ingest.slice_audio(audio, plan.spec.t_start, plan.spec.duration_D)
    return WindowExample(
        spec=plan.spec,
        audio=ingest.log_mel(sliced),
        transcript_tokens=tokenize(plan.transcript_text),
        prompt_tokens=tokenize(plan.prompt),
        target_offset=plan.target_offset,
        t_abs=plan.t_abs)


def make_examples(session: Session, D: float, rng_seed: int, per_boundary_count: int,
                  audio: ingest.AudioBuffer | None = None, sentences=None,
                  questions=None) -> list[WindowExample]:
    """Materialized window examples for one session (6 boundaries x count)."""
    if audio is None:
        audio = ingest.load_wav(session.audio_path)
        if audio.sample_rate != ingest.TARGET_RATE:
            audio = ingest.resample_to_16k(audio)
    plans = plan_examples(session, D, rng_seed, per_boundary_count,
                          sentences=sentences, questions=questions)
    return [materialize(p, audio) for p in plans]
