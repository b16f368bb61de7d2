"""Synthetic session corpus with the same structure and summary statistics
as the clinical recordings: three sequential protocol phases inside filler,
audible per-phase noise signatures, and transcripts with boundary markers.

Band-limited noise with a distinct spectral band per phase (plus a filler
band) makes every boundary audible; a 2 s crossfade at each boundary keeps
the best achievable localization error honestly above zero.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import core, ingest
from .core import PhaseAnnotation, PhaseKind, Provenance, Session
from .errors import LayoutError

CROSSFADE_S = 2.0

DEFAULT_BANDS = {
    "filler": (200.0, 600.0),
    "P1": (800.0, 1400.0),
    "P2": (1800.0, 2600.0),
    "P3": (3200.0, 4400.0),
}

START_MARKERS = {
    PhaseKind.P1: ("therapist", "Let me orient you to today's imaginal exposure plan."),
    PhaseKind.P2: ("therapist", "Whenever you are ready, begin the imaginal exposure now."),
    PhaseKind.P3: ("therapist", "Now let's process what came up during the imaginal."),
}
END_MARKERS = {
    PhaseKind.P1: ("therapist", "That covers the plan for the imaginal work."),
    PhaseKind.P2: ("therapist", "Let's bring the imaginal exposure to a close."),
    PhaseKind.P3: ("therapist", "That completes our processing for today."),
}
FILLER_LINES = (
    ("client", "Mm-hmm."),
    ("therapist", "Take your time."),
    ("client", "Okay."),
    ("therapist", "I hear you."),
    ("client", "I see."),
    ("therapist", "Go on."),
)


@dataclass
class SynthConfig:
    """Corpus generator parameters. Duration defaults mirror the clinical
    dataset's summary statistics; phase means mirror the nominal 10/50/10
    minute session structure."""

    n_sessions: int = 68
    duration_mean_s: float = 3947.84
    duration_std_s: float = 935.53
    duration_min_s: float = 1170.75
    duration_max_s: float = 5393.86
    phase_means_min: tuple[float, float, float] = (10.0, 50.0, 10.0)
    bands: dict = field(default_factory=lambda: dict(DEFAULT_BANDS))
    crossfade_s: float = CROSSFADE_S
    min_band_separation: int = 4  # mel bands between adjacent signatures
    seed: int = 0

    def validate(self) -> None:
        if not self.duration_min_s <= self.duration_mean_s <= self.duration_max_s:
            raise ValueError("duration bounds must satisfy min <= mean <= max")
        # Phase durations rescale to each drawn session, so the nominal
        # profile only needs to fit the longest allowed session.
        if sum(self.phase_means_min) * 60.0 >= self.duration_max_s:
            raise ValueError("phase duration means must sum to less than the longest session")
        if self.n_sessions < 1:
            raise ValueError("n_sessions must be >= 1")


def desk_config(n_sessions: int = 68, seed: int = 0) -> SynthConfig:
    """Short-session preset sized for laptop-scale experiments."""
    return SynthConfig(
        n_sessions=n_sessions,
        duration_mean_s=300.0, duration_std_s=45.0,
        duration_min_s=210.0, duration_max_s=420.0,
        phase_means_min=(0.75, 3.1, 0.75),
        seed=seed)


@dataclass
class SessionLayout:
    duration_s: float
    segments: list[tuple[str, float, float]]  # (band key, t0, t1)
    annotations: list[PhaseAnnotation]
    sentences: list[ingest.TranscriptSentence]


def _truncated_normal(rng, mean, std, lo, hi) -> float:
    if std == 0:
        return float(min(max(mean, lo), hi))
    for _ in range(1000):
        x = rng.normal(mean, std)
        if lo <= x <= hi:
            return float(x)
    return float(min(max(mean, lo), hi))


def plan_layout(cfg: SynthConfig, rng: np.random.Generator) -> SessionLayout:
    """Lay out filler / P1 / gap / P2 / gap / P3 / filler, rescaled to the
    drawn session duration. P2 and P3 share a boundary in half the sessions,
    matching the stop==start pattern seen in real annotations."""
    duration = round(_truncated_normal(
        rng, cfg.duration_mean_s, cfg.duration_std_s, cfg.duration_min_s, cfg.duration_max_s), 2)
    means = [m * 60.0 for m in cfg.phase_means_min]
    phases = [max(1e-3, rng.normal(m, 0.10 * m)) for m in means]
    lead = rng.uniform(0.020, 0.055) * duration
    gap1 = rng.uniform(0.008, 0.030) * duration
    gap2 = 0.0 if rng.random() < 0.5 else rng.uniform(0.004, 0.012) * duration
    trail = rng.uniform(0.020, 0.055) * duration
    raw = [lead, phases[0], gap1, phases[1], gap2, phases[2], trail]
    scale = duration / sum(raw)
    lead, p1, gap1, p2, gap2, p3, trail = [x * scale for x in raw]
    min_seg = max(4.0, 2 * cfg.crossfade_s)
    if min(p1, p2, p3) < min_seg or min(lead, trail) < cfg.crossfade_s:
        raise LayoutError(
            f"phases {p1:.1f}/{p2:.1f}/{p3:.1f}s do not fit a {duration:.0f}s session")

    t = lead
    bounds = {}
    for phase, seg in zip(PhaseKind, (p1, p2, p3)):
        gap = {PhaseKind.P1: 0.0, PhaseKind.P2: gap1, PhaseKind.P3: gap2}[phase]
        t += gap
        start = round(t, 2)
        t += seg
        stop = round(min(t, duration), 2)
        bounds[phase] = (start, stop)
        t = stop

    segments = [("filler", 0.0, bounds[PhaseKind.P1][0])]
    for phase in PhaseKind:
        start, stop = bounds[phase]
        if segments[-1][2] < start:  # gap filler between phases
            segments.append(("filler", segments[-1][2], start))
        segments.append((phase.name, start, stop))
    segments.append(("filler", bounds[PhaseKind.P3][1], duration))

    annotations = [
        PhaseAnnotation(phase, bounds[phase][0], bounds[phase][1], True, Provenance.SYNTHETIC)
        for phase in PhaseKind]
    sentences = _plan_transcript(rng, duration, bounds)
    return SessionLayout(duration, segments, annotations, sentences)


def _plan_transcript(rng, duration, bounds) -> list[ingest.TranscriptSentence]:
    sentences = []
    for phase, (start, stop) in bounds.items():
        for t_abs, (speaker, text) in ((start, START_MARKERS[phase]), (stop, END_MARKERS[phase])):
            s0 = min(max(t_abs + rng.uniform(-0.8, 0.2), 0.0), duration - 0.5)
            s1 = min(s0 + rng.uniform(2.0, 3.5), duration)
            sentences.append(ingest.TranscriptSentence(round(s0, 2), round(s1, 2), speaker, text))
    t = rng.uniform(2.0, 6.0)
    i = 0
    while t < duration - 4.0:
        speaker, text = FILLER_LINES[i % len(FILLER_LINES)]
        s1 = min(t + rng.uniform(1.5, 3.0), duration)
        sentences.append(ingest.TranscriptSentence(round(t, 2), round(s1, 2), speaker, text))
        t += rng.uniform(10.0, 18.0)
        i += 1
    sentences.sort(key=lambda s: (s.start_s, s.end_s))
    return sentences


def render_audio(cfg: SynthConfig, layout: SessionLayout, rng: np.random.Generator) -> ingest.AudioBuffer:
    """Band-limited noise per segment with linear crossfades at boundaries."""
    sr = ingest.TARGET_RATE
    n = int(round(layout.duration_s * sr))
    out = np.zeros(n, dtype=np.float32)
    half = cfg.crossfade_s / 2
    for band_key, t0, t1 in layout.segments:
        if t1 - t0 <= 0:
            continue
        lo = 0.0 if t0 <= 0 else t0 - half
        hi = layout.duration_s if t1 >= layout.duration_s else t1 + half
        i0, i1 = int(round(lo * sr)), min(int(round(hi * sr)), n)
        low_hz, high_hz = cfg.bands[band_key]
        noise = ingest.make_band_noise(rng, i1 - i0, low_hz, high_hz)
        tt = np.arange(i0, i1) / sr
        if t0 <= 0:
            rise = np.ones_like(tt)
        else:
            rise = np.clip((tt - (t0 - half)) / cfg.crossfade_s, 0.0, 1.0)
        if t1 >= layout.duration_s:
            fall = np.ones_like(tt)
        else:
            fall = np.clip(((t1 + half) - tt) / cfg.crossfade_s, 0.0, 1.0)
        out[i0:i1] += noise * np.minimum(rise, fall).astype(np.float32)
    return ingest.peak_normalize(ingest.AudioBuffer(out, sr))


def session_rng(cfg_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg_seed, index]))


def generate_session(cfg: SynthConfig, index: int, out_dir=None) -> Session:
    """One synthetic session. With out_dir set, writes WAV and transcript
    files; otherwise returns metadata only (paths left empty)."""
    cfg.validate()
    rng = session_rng(cfg.seed, index)
    layout = plan_layout(cfg, rng)
    sid = f"synth-{index:04d}"
    audio_path = transcript_path = ""
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
        (out_dir / "transcripts").mkdir(parents=True, exist_ok=True)
        audio_path = str(out_dir / "audio" / f"{sid}.wav")
        transcript_path = str(out_dir / "transcripts" / f"{sid}.json")
        ingest.save_wav(audio_path, render_audio(cfg, layout, rng))
        ingest.save_transcript(layout.sentences, transcript_path)
    return Session(
        id=sid, audio_path=audio_path, duration_s=layout.duration_s,
        sample_rate=ingest.TARGET_RATE, annotations=layout.annotations,
        transcript_path=transcript_path)


def generate_corpus(cfg: SynthConfig, out_dir=None) -> tuple[list[Session], dict]:
    """n_sessions sessions with per-session derived seeds, plus summary stats.

    With out_dir set, also writes audio/, transcripts/, manifest.json, and
    corpus_stats.json.
    """
    cfg.validate()
    if cfg.n_sessions < 3:
        raise ValueError("need at least 3 sessions to split")
    sessions = [generate_session(cfg, i, out_dir) for i in range(cfg.n_sessions)]
    durations = np.array([s.duration_s for s in sessions])
    stats = {
        "n_sessions": len(sessions),
        "total_duration_s": float(durations.sum()),
        "mean_duration_s": float(durations.mean()),
        "std_duration_s": float(durations.std(ddof=1)) if len(sessions) > 1 else 0.0,
        "min_duration_s": float(durations.min()),
        "max_duration_s": float(durations.max()),
    }
    if out_dir is not None:
        core.save_manifest(sessions, Path(out_dir) / "manifest.json")
        with open(Path(out_dir) / "corpus_stats.json", "w") as f:
            json.dump(stats, f, indent=2)
            f.write("\n")
    return sessions, stats
