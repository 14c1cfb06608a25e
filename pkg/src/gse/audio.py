"""Waveform I/O, log-mel features, and speech-activity channel utilities.

Feature conventions: 80 HTK-mel filters spanning 0..Nyquist, 25 ms Hamming
window, 10 ms hop, no pre-emphasis and no per-utterance normalization.
Activity is defined on feature frames: one 0/1 label per 10 ms hop interval,
a frame counting as active when at least half of its hop interval is covered
by speech.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError

SAMPLE_RATE = 16000
INT16_SCALE = 32768.0


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with float amplitudes in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("AudioClip requires a non-empty 1-D sample array")
        if self.sample_rate <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise DataError("AudioClip samples must be finite")
        object.__setattr__(self, "samples", samples)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LogmelConfig:
    n_mels: int = 80
    win_s: float = 0.025
    hop_s: float = 0.010
    n_fft: int = 512
    floor_eps: float = 1e-10


@dataclass(frozen=True)
class FeatureMatrix:
    """Feature grid of shape (n_rows, L).

    n_rows is 80 for plain log-mel features or 82 when the two binary
    guide rows (target activity, non-target activity) are appended.
    """

    data: np.ndarray
    frame_shift_s: float = 0.010
    frame_width_s: float = 0.025

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[1] < 1:
            raise ShapeError("FeatureMatrix must be 2-D with at least one frame")
        if not np.all(np.isfinite(data)):
            raise DataError("FeatureMatrix values must be finite")
        object.__setattr__(self, "data", data)

    @property
    def n_rows(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class ActivityMatrix:
    """Per-speaker binary speech activity over feature frames, shape (N, L)."""

    data: np.ndarray
    speaker_ids: tuple = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.shape[0] < 1:
            raise ShapeError("ActivityMatrix must be 2-D with at least one speaker")
        if not np.isin(data, (0, 1)).all():
            raise DataError("ActivityMatrix entries must be 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))
        ids = tuple(self.speaker_ids) if self.speaker_ids else tuple(
            f"spk{i}" for i in range(data.shape[0])
        )
        if len(ids) != data.shape[0]:
            raise ShapeError("speaker_ids length must match activity rows")
        object.__setattr__(self, "speaker_ids", ids)

    @property
    def n_speakers(self) -> int:
        return self.data.shape[0]

    @property
    def n_frames(self) -> int:
        return self.data.shape[1]

    def index_of(self, speaker_id: str) -> int:
        try:
            return self.speaker_ids.index(speaker_id)
        except ValueError:
            raise DataError(f"speaker '{speaker_id}' not in activity matrix") from None


def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM mono WAV file; other encodings are rejected."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    try:
        with wave.open(str(path), "rb") as wf:
            n_channels = wf.getnchannels()
            sampwidth = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except wave.Error as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if n_channels != 1:
        raise DataError(f"{path}: expected mono, got {n_channels} channels")
    if sampwidth != 2:
        raise DataError(f"{path}: expected 16-bit PCM, got {8 * sampwidth}-bit")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float64) / INT16_SCALE, sample_rate=rate)


def save_wav(path, clip: AudioClip) -> None:
    """Write a clip as 16-bit PCM mono; float samples outside [-1, 1] clip."""
    pcm = np.clip(np.round(clip.samples * INT16_SCALE), -32768, 32767).astype("<i2")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(pcm.tobytes())


def num_frames(n_samples: int, sample_rate: int = SAMPLE_RATE,
               win_s: float = 0.025, hop_s: float = 0.010) -> int:
    win = int(round(win_s * sample_rate))
    hop = int(round(hop_s * sample_rate))
    if n_samples < win:
        raise DataError(f"clip of {n_samples} samples is shorter than one window ({win})")
    return 1 + (n_samples - win) // hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft//2 + 1)."""
    nyquist = sample_rate / 2.0
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(nyquist), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fbank = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        lo, mid, hi = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - lo) / max(mid - lo, 1e-12)
        falling = (hi - bin_freqs) / max(hi - mid, 1e-12)
        fbank[m] = np.maximum(0.0, np.minimum(rising, falling))
    return fbank


def logmel(clip: AudioClip, cfg: LogmelConfig = LogmelConfig()) -> FeatureMatrix:
    """Log mel-filterbank energies, shape (n_mels, L).

    L follows the framing formula 1 + floor((n_samples - win) / hop); values
    are ln(max(mel energy, floor_eps)).
    """
    sr = clip.sample_rate
    win = int(round(cfg.win_s * sr))
    hop = int(round(cfg.hop_s * sr))
    if cfg.n_fft < win:
        raise DataError(f"n_fft {cfg.n_fft} shorter than window {win}")
    n = clip.samples.size
    L = num_frames(n, sr, cfg.win_s, cfg.hop_s)
    idx = np.arange(L)[:, None] * hop + np.arange(win)[None, :]
    frames = clip.samples[idx] * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fbank = mel_filterbank(cfg.n_mels, cfg.n_fft, sr)
    mel = power @ fbank.T
    data = np.log(np.maximum(mel, cfg.floor_eps)).T
    return FeatureMatrix(data, frame_shift_s=cfg.hop_s, frame_width_s=cfg.win_s)


def union_nontarget(acts: ActivityMatrix, target_index: int) -> np.ndarray:
    """Joint activity of every speaker other than the target (elementwise OR)."""
    if not 0 <= target_index < acts.n_speakers:
        raise DataError(f"target index {target_index} out of range (N={acts.n_speakers})")
    others = np.delete(acts.data, target_index, axis=0)
    if others.shape[0] == 0:
        return np.zeros(acts.n_frames, dtype=np.uint8)
    return others.any(axis=0).astype(np.uint8)


def guide_concat(feat: FeatureMatrix, z_target: np.ndarray,
                 z_nontarget: np.ndarray) -> FeatureMatrix:
    """Append the two binary guide rows to an 80-row feature matrix."""
    z_target = np.asarray(z_target)
    z_nontarget = np.asarray(z_nontarget)
    if z_target.shape != (feat.n_frames,) or z_nontarget.shape != (feat.n_frames,):
        raise ShapeError("guide channel length must equal the feature frame count")
    data = np.vstack([feat.data,
                      z_target.astype(np.float64),
                      z_nontarget.astype(np.float64)])
    return FeatureMatrix(data, feat.frame_shift_s, feat.frame_width_s)


def strip_guides(feat: FeatureMatrix, n_mel_rows: int = 80) -> FeatureMatrix:
    """Inverse of guide_concat: drop the appended guide rows."""
    if feat.n_rows <= n_mel_rows:
        raise ShapeError("feature matrix carries no guide rows")
    return FeatureMatrix(feat.data[:n_mel_rows], feat.frame_shift_s, feat.frame_width_s)


def downsample_activity(z: np.ndarray, T: int) -> np.ndarray:
    """Map an L-frame activity vector onto T encoder frames.

    Uses the nearest-source-frame rule out[t] = z[clamp(round(L*t/T), 1, L)]
    with 1-based indices; the L == T case is the identity.
    """
    z = np.asarray(z)
    L = z.size
    if L < 1 or T < 1:
        raise ShapeError("downsample_activity requires L >= 1 and T >= 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    src = np.floor(L * t / T + 0.5).astype(np.int64)
    src = np.clip(src, 1, L)
    return z[src - 1].astype(np.uint8)


def activity_from_spans(spans: Sequence[tuple], n_frames: int,
                        sample_rate: int = SAMPLE_RATE,
                        hop_s: float = 0.010) -> np.ndarray:
    """Binary frame activity from (start_sample, end_sample) spans.

    Frame l covers samples [l*hop, (l+1)*hop); it is active when at least
    half of that interval is covered. Integer sample arithmetic, so the rule
    is exact.
    """
    hop = int(round(hop_s * sample_rate))
    covered = np.zeros(n_frames, dtype=np.int64)
    starts = np.arange(n_frames, dtype=np.int64) * hop
    ends = starts + hop
    for span_start, span_end in spans:
        lo = np.maximum(starts, int(span_start))
        hi = np.minimum(ends, int(span_end))
        covered += np.maximum(0, hi - lo)
    return (covered * 2 >= hop).astype(np.uint8)


def write_activity(path, acts: ActivityMatrix) -> None:
    """Sidecar format: one `speaker_id<TAB>bitstring` line per speaker."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for sid, row in zip(acts.speaker_ids, acts.data):
        lines.append(f"{sid}\t{''.join('1' if v else '0' for v in row)}")
    path.write_text("\n".join(lines) + "\n")


def read_activity(path) -> ActivityMatrix:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    ids, rows = [], []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1] or set(parts[1]) - {"0", "1"}:
            raise DataError(f"{path}:{ln}: malformed activity line")
        ids.append(parts[0])
        rows.append(np.frombuffer(parts[1].encode(), dtype=np.uint8) - ord("0"))
    if not rows:
        raise DataError(f"{path}: empty activity file")
    lengths = {r.size for r in rows}
    if len(lengths) != 1:
        raise DataError(f"{path}: rows have differing lengths")
    return ActivityMatrix(np.vstack(rows), tuple(ids))
