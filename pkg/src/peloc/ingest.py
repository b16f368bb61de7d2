"""Audio loading, resampling, normalization, log-mel features, transcripts.

Everything downstream assumes 16 kHz mono float32 in [-1, 1]. The mel
front-end (25 ms frames, 10 ms hop, 64 bands) stands in for a pretrained
audio encoder at toy scale.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, replace

import numpy as np
from scipy.io import wavfile
from scipy.signal import butter, firwin, get_window, kaiserord, resample_poly, sosfilt

from .errors import InvalidDuration, ParseError, TooShort, UnsupportedFormat, UnsupportedRate

TARGET_RATE = 16000
SUPPORTED_RATES = (16000, 44100, 48000)
PEAK_TARGET = 0.95

FRAME_LEN_S = 0.025
FRAME_HOP_S = 0.010
N_MELS = 64
N_FFT = 512
LOG_FLOOR = 1e-10

SPEAKERS = ("therapist", "client")


@dataclass
class AudioBuffer:
    samples: np.ndarray  # float32, mono
    sample_rate: int

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class TranscriptSentence:
    start_s: float
    end_s: float
    speaker: str
    text: str


def load_wav(path) -> AudioBuffer:
    """Read a PCM WAV (16-bit int or 32-bit float, mono or stereo).

    Stereo is mixed to mono by averaging; int16 is scaled by 1/32768 so the
    full negative range maps to exactly -1.0.
    """
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise UnsupportedFormat(f"{path}: {e}")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data
    else:
        raise UnsupportedFormat(f"{path}: unsupported sample format {data.dtype}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1, dtype=np.float32)
    return AudioBuffer(np.ascontiguousarray(samples, dtype=np.float32), int(rate))


def save_wav(path_or_file, buf: AudioBuffer) -> None:
    """Write 16-bit PCM WAV."""
    pcm = np.clip(np.round(buf.samples * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path_or_file, buf.sample_rate, pcm)


def wav_bytes(buf: AudioBuffer) -> bytes:
    """In-memory RIFF WAV encoding, for serving slices over HTTP."""
    bio = io.BytesIO()
    save_wav(bio, buf)
    return bio.getvalue()


def resample_to_16k(a: AudioBuffer) -> AudioBuffer:
    """Polyphase windowed-sinc resampling to 16 kHz (cutoff 0.9 * Nyquist).

    Output length is round(len * 16000 / in_rate); already-16k input is
    returned unchanged.
    """
    if a.sample_rate not in SUPPORTED_RATES:
        raise UnsupportedRate(f"unsupported input rate {a.sample_rate}")
    if a.sample_rate == TARGET_RATE:
        return a
    g = np.gcd(TARGET_RATE, a.sample_rate)
    up, down = TARGET_RATE // g, a.sample_rate // g
    fs_up = a.sample_rate * up
    cutoff_hz = 0.9 * (TARGET_RATE / 2)
    # 60 dB stopband, 1.6 kHz transition band around the cutoff; resample_poly
    # applies the up-gain to an array window itself.
    numtaps, beta = kaiserord(60.0, 2 * 1600.0 / fs_up)
    h = firwin(numtaps | 1, cutoff_hz, window=("kaiser", beta), fs=fs_up)
    out = resample_poly(a.samples.astype(np.float64), up, down, window=h)
    target_len = round(len(a.samples) * TARGET_RATE / a.sample_rate)
    out = out[:target_len]
    if len(out) < target_len:
        out = np.pad(out, (0, target_len - len(out)))
    return AudioBuffer(out.astype(np.float32), TARGET_RATE)


def peak_normalize(a: AudioBuffer) -> AudioBuffer:
    """Scale so the peak magnitude is exactly PEAK_TARGET; silence unchanged."""
    peak = float(np.max(np.abs(a.samples))) if len(a.samples) else 0.0
    if peak == 0.0:
        return a
    return AudioBuffer((a.samples * (PEAK_TARGET / peak)).astype(np.float32), a.sample_rate)


def slice_audio(a: AudioBuffer, t0: float, dur: float) -> AudioBuffer:
    """Slice [t0, t0 + dur) as exactly dur * rate samples, zero-padding past
    the end of the buffer."""
    if dur <= 0:
        raise InvalidDuration(f"dur must be positive, got {dur}")
    if t0 < 0:
        raise ValueError(f"t0 must be >= 0, got {t0}")
    sr = a.sample_rate
    start = int(round(t0 * sr))
    n = int(round(dur * sr))
    out = np.zeros(n, dtype=np.float32)
    if start < len(a.samples):
        chunk = a.samples[start:start + n]
        out[:len(chunk)] = chunk
    return AudioBuffer(out, sr)


# --- mel front-end ---------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = TARGET_RATE) -> np.ndarray:
    """Triangular mel filters (HTK scale), peak 1, over rfft bins."""
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (rate / n_fft)
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        lo, mid, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.clip(np.minimum(up, down), 0.0, 1.0)
    return fb


_FILTERBANK_CACHE: dict = {}
_WINDOW_CACHE: dict = {}


def log_mel(a: AudioBuffer) -> np.ndarray:
    """Log mel-band energies: frames x 64, log(band_power + 1e-10).

    Frame count is floor((n_samples - frame_len) / hop) + 1.
    """
    if a.sample_rate != TARGET_RATE:
        raise UnsupportedRate(f"log_mel expects {TARGET_RATE} Hz, got {a.sample_rate}")
    frame_len = int(round(FRAME_LEN_S * a.sample_rate))
    hop = int(round(FRAME_HOP_S * a.sample_rate))
    if len(a.samples) < frame_len:
        raise TooShort(f"need >= {frame_len} samples, got {len(a.samples)}")
    frames = np.lib.stride_tricks.sliding_window_view(a.samples, frame_len)[::hop]
    if frame_len not in _WINDOW_CACHE:
        _WINDOW_CACHE[frame_len] = get_window("hann", frame_len, fftbins=True).astype(np.float64)
    win = _WINDOW_CACHE[frame_len]
    spec = np.fft.rfft(frames * win, n=N_FFT, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    key = (N_MELS, N_FFT, a.sample_rate)
    if key not in _FILTERBANK_CACHE:
        _FILTERBANK_CACHE[key] = mel_filterbank(N_MELS, N_FFT, a.sample_rate)
    band = power @ _FILTERBANK_CACHE[key].T
    return np.log(band + LOG_FLOOR).astype(np.float32)


def expected_mel_frames(n_samples: int, rate: int = TARGET_RATE) -> int:
    frame_len = int(round(FRAME_LEN_S * rate))
    hop = int(round(FRAME_HOP_S * rate))
    return (n_samples - frame_len) // hop + 1


# --- transcripts ------------------------------------------------------------

def parse_transcript(path) -> list[TranscriptSentence]:
    """Parse a transcript file: JSON array of {start, end, speaker, text},
    sorted by start, speakers from the closed therapist/client set."""
    with open(path) as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno)
    if not isinstance(raw, list):
        raise ParseError("transcript must be a JSON array")
    sentences = []
    prev_start = -np.inf
    for i, rec in enumerate(raw):
        if not isinstance(rec, dict) or set(rec) != {"start", "end", "speaker", "text"}:
            raise ParseError(f"record {i}: expected keys start/end/speaker/text")
        start, end = rec["start"], rec["end"]
        for key, val in (("start", start), ("end", end)):
            if not isinstance(val, (int, float)) or isinstance(val, bool) or val < 0:
                raise ParseError(f"record {i}: bad timestamp", field=key)
        if end < start:
            raise ParseError(f"record {i}: start {start} > end {end}", field="end")
        if rec["speaker"] not in SPEAKERS:
            raise ParseError(f"record {i}: unknown speaker {rec['speaker']!r}", field="speaker")
        if start < prev_start:
            raise ParseError(f"record {i}: transcript not sorted by start", field="start")
        prev_start = start
        sentences.append(TranscriptSentence(float(start), float(end), rec["speaker"], str(rec["text"])))
    return sentences


def save_transcript(sentences, path) -> None:
    recs = [{"start": round(s.start_s, 2), "end": round(s.end_s, 2),
             "speaker": s.speaker, "text": s.text} for s in sentences]
    with open(path, "w") as f:
        json.dump(recs, f, indent=0)
        f.write("\n")


def excerpt_for_window(sents, t0: float, dur: float, clamp: bool = False) -> list[TranscriptSentence]:
    """Sentences overlapping [t0, t0 + dur), re-based to window-relative time.

    Overlap uses the half-open window: a sentence is kept iff it starts
    before the window ends and ends after the window starts. With clamp=True
    the re-based times are clipped into [0, dur].
    """
    out = []
    for s in sents:
        if s.start_s < t0 + dur and s.end_s > t0:
            start, end = s.start_s - t0, s.end_s - t0
            if clamp:
                start, end = max(0.0, start), min(dur, end)
            out.append(replace(s, start_s=start, end_s=end))
    return out


# --- session audio cache ----------------------------------------------------

class SessionAudioCache:
    """Small LRU over decoded session audio, so window materialization does
    not re-read WAV files on every training step."""

    def __init__(self, max_sessions: int = 4):
        self.max_sessions = max_sessions
        self._cache: dict[str, AudioBuffer] = {}

    def get(self, path) -> AudioBuffer:
        key = str(path)
        if key in self._cache:
            buf = self._cache.pop(key)
            self._cache[key] = buf
            return buf
        buf = load_wav(key)
        if buf.sample_rate != TARGET_RATE:
            buf = resample_to_16k(buf)
        self._cache[key] = buf
        while len(self._cache) > self.max_sessions:
            self._cache.pop(next(iter(self._cache)))
        return buf


def make_band_noise(rng: np.random.Generator, n: int, low_hz: float, high_hz: float,
                    rate: int = TARGET_RATE, rms: float = 0.15) -> np.ndarray:
    """Band-limited Gaussian noise at a given RMS (synthetic phase signatures)."""
    pad = rate // 4
    white = rng.standard_normal(n + 2 * pad)
    sos = butter(6, [low_hz, high_hz], btype="bandpass", fs=rate, output="sos")
    shaped = sosfilt(sos, white)[pad:pad + n]
    cur = np.sqrt(np.mean(shaped ** 2))
    if cur > 0:
        shaped *= rms / cur
    return shaped.astype(np.float32)
