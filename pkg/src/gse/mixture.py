"""Synthetic speaker corpus, on-the-fly training mixtures, one-vs-many
evaluation mixtures, multi-turn conversations, and overlap statistics.

Speakers are procedural voices: a fixed fundamental plus a fixed 3-formant
resonance profile per speaker; utterances are sawtooth excitation with a
slowly wandering pitch and syllable-rate amplitude modulation. Mixed
waveforms are plain sums of the gain-scaled placed crops; no re-normalization
is applied afterwards, so float amplitudes beyond +-1 are possible (they clip
only when written as 16-bit PCM).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import (ActivityMatrix, AudioClip, SAMPLE_RATE, activity_from_spans,
                    num_frames)
from .errors import DataError, UsageError


@dataclass(frozen=True)
class Utterance:
    clip: AudioClip
    speaker_id: str
    utterance_id: str

    def __post_init__(self):
        if self.clip.duration_s < 0.5:
            raise DataError(f"utterance {self.utterance_id} shorter than 0.5 s")


@dataclass(frozen=True)
class Placement:
    speaker_id: str
    utterance_id: str
    start: int        # samples
    length: int       # samples
    gain: float
    source_offset: int = 0  # crop offset into the source utterance, samples


@dataclass(frozen=True)
class MixtureSample:
    clip: AudioClip
    acts: ActivityMatrix
    placements: tuple

    @property
    def speaker_ids(self):
        return self.acts.speaker_ids

    def target_index(self, speaker_id: str) -> int:
        return self.acts.index_of(speaker_id)


# ---------------------------------------------------------------------------
# corpus synthesis


def _resonator_coeffs(freq: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2.0 * np.pi * freq / sr
    b = np.array([1.0 - r])
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return b, a


def _synth_utterance(rng: np.random.Generator, f0: float, formants, sr: int,
                     duration_s: float) -> np.ndarray:
    n = int(round(duration_s * sr))
    t = np.arange(n) / sr
    # slowly wandering pitch: random walk low-passed by a long moving average
    walk = np.cumsum(rng.normal(0.0, 1.0, n))
    walk = walk / max(np.abs(walk).max(), 1e-9)
    inst_f0 = f0 * (1.0 + 0.04 * walk)
    phase = np.cumsum(inst_f0) / sr
    source = 2.0 * (np.mod(phase, 1.0) - 0.5)  # sawtooth: all harmonics ~ 1/k
    voiced = np.zeros(n)
    for freq, bw, gain in formants:
        b, a = _resonator_coeffs(freq, bw, sr)
        voiced += gain * lfilter(b, a, source)
    am_rate = rng.uniform(2.0, 5.0)
    am_phase = rng.uniform(0.0, 2.0 * np.pi)
    env = 0.35 + 0.65 * (0.5 + 0.5 * np.sin(2.0 * np.pi * am_rate * t + am_phase))
    voiced *= env
    voiced += 0.002 * rng.normal(0.0, 1.0, n)
    rms = np.sqrt(np.mean(voiced ** 2))
    return voiced / max(rms, 1e-9) * 0.08


def synth_corpus(num_speakers: int, utts_per_speaker: int, seed: int,
                 sample_rate: int = SAMPLE_RATE) -> list:
    """Deterministic synthetic corpus; distinct seeds give distinct corpora."""
    if num_speakers < 2:
        raise UsageError("need at least 2 speakers")
    root = np.random.SeedSequence(seed)
    speaker_seeds = root.spawn(num_speakers)
    corpus = []
    for s, sseq in enumerate(speaker_seeds):
        rng = np.random.default_rng(sseq)
        f0 = rng.uniform(80.0, 300.0)
        formants = (
            (rng.uniform(300.0, 900.0), rng.uniform(60.0, 110.0), 1.0),
            (rng.uniform(900.0, 2400.0), rng.uniform(90.0, 160.0), 0.63),
            (rng.uniform(2400.0, 3400.0), rng.uniform(120.0, 220.0), 0.4),
        )
        sid = f"spk{s:03d}"
        for u in range(utts_per_speaker):
            dur = rng.uniform(3.0, 8.0)
            samples = _synth_utterance(rng, f0, formants, sample_rate, dur)
            corpus.append(Utterance(AudioClip(samples, sample_rate), sid,
                                    f"{sid}_u{u:02d}"))
    return corpus


def by_speaker(corpus) -> dict:
    out: dict[str, list] = {}
    for utt in corpus:
        out.setdefault(utt.speaker_id, []).append(utt)
    return out


# ---------------------------------------------------------------------------
# mixing


def db_to_gain(db: float) -> float:
    """Amplitude scale realizing a dB level: 10^(db/20)."""
    if not np.isfinite(db):
        raise DataError(f"non-finite dB value {db}")
    return float(10.0 ** (db / 20.0))


def _crop(utt: Utterance, length: int, offset: int) -> np.ndarray:
    """Crop with circular repetition when the utterance is shorter."""
    src = utt.clip.samples
    idx = (offset + np.arange(length)) % src.size
    return src[idx]


def _assemble(placements, crops, sample_rate: int) -> MixtureSample:
    total = max(p.start + p.length for p in placements)
    mix = np.zeros(total)
    for p, crop in zip(placements, crops):
        mix[p.start:p.start + p.length] += p.gain * crop
    L = num_frames(total, sample_rate)
    rows = [activity_from_spans([(p.start, p.start + p.length)], L, sample_rate)
            for p in placements]
    acts = ActivityMatrix(np.vstack(rows), tuple(p.speaker_id for p in placements))
    return MixtureSample(AudioClip(mix, sample_rate), acts, tuple(placements))


def make_training_mixture(utts_by_speaker: dict, rng: np.random.Generator,
                          crop_range=(3.0, 6.0), min_start_gap: float = 0.5,
                          gain_db_range=(-5.0, 5.0)) -> MixtureSample:
    """Three-speaker partially-overlapped mixture for one training sample.

    Crops are 3-6 s, consecutive start times differ by at least 0.5 s (hence
    every pair does), and speakers 2-3 are scaled so their crop RMS sits at a
    uniformly sampled dB offset relative to the first speaker's crop.
    """
    speakers = sorted(utts_by_speaker)
    if len(speakers) < 3:
        raise UsageError("training mixtures need at least 3 speakers")
    chosen = rng.choice(len(speakers), size=3, replace=False)
    sr = SAMPLE_RATE
    placements, crops = [], []
    start = 0
    ref_rms = None
    for order, si in enumerate(chosen):
        sid = speakers[si]
        utts = utts_by_speaker[sid]
        utt = utts[rng.integers(0, len(utts))]
        length = int(round(rng.uniform(*crop_range) * sr))
        offset = int(rng.integers(0, utt.clip.samples.size))
        crop = _crop(utt, length, offset)
        rms = np.sqrt(np.mean(crop ** 2))
        if order == 0:
            gain = 1.0
            ref_rms = rms
        else:
            start += int(round(rng.uniform(min_start_gap, 3.0 * min_start_gap) * sr))
            gain = db_to_gain(rng.uniform(*gain_db_range)) * ref_rms / max(rms, 1e-12)
        placements.append(Placement(sid, utt.utterance_id, start, length, gain, offset))
        crops.append(crop)
    return _assemble(placements, crops, sr)


def make_one_vs_many(test_utt: Utterance, interferers, rng: np.random.Generator) -> MixtureSample:
    """Chain the test utterance with interferers at random delays.

    Utterance n starts delta_n after utterance n-1, with delta_n uniform over
    the predecessor's duration; the test utterance takes a uniformly random
    slot in the chain, so fully overlapped targets occur.
    """
    interferers = list(interferers)
    ids = {u.speaker_id for u in interferers}
    if test_utt.speaker_id in ids or len(ids) != len(interferers):
        raise DataError("interferer speakers must be distinct from the test speaker")
    chain = list(interferers)
    pos = int(rng.integers(0, len(chain) + 1))
    chain.insert(pos, test_utt)
    sr = SAMPLE_RATE
    placements, crops = [], []
    start = 0
    for i, utt in enumerate(chain):
        if i > 0:
            prev = chain[i - 1]
            start = placements[-1].start + int(round(
                rng.uniform(0.0, prev.clip.duration_s) * sr))
        n = utt.clip.samples.size
        placements.append(Placement(utt.speaker_id, utt.utterance_id, start, n, 1.0))
        crops.append(utt.clip.samples)
    return _assemble(placements, crops, sr)


def synth_conversation(utts_by_speaker: dict, speaker_ids, rng: np.random.Generator,
                       target_duration_s: float = 60.0,
                       overlap_prob: float = 0.5,
                       turn_range=(2.0, 5.0)) -> MixtureSample:
    """Turn-taking conversation with controllable overlap for diarization runs.

    With probability overlap_prob a turn starts before the previous one ends
    (an interjection of 0.3-1.5 s); otherwise it starts after a short gap.
    overlap_prob = 0 yields a zero-overlap fixture.
    """
    speaker_ids = list(speaker_ids)
    if len(speaker_ids) < 2:
        raise UsageError("conversations need at least 2 speakers")
    sr = SAMPLE_RATE
    spans: dict[str, list] = {sid: [] for sid in speaker_ids}
    pieces = []
    cursor = 0
    prev_spk = None
    while cursor < int(target_duration_s * sr):
        cand = [s for s in speaker_ids if s != prev_spk]
        sid = cand[rng.integers(0, len(cand))]
        utts = utts_by_speaker[sid]
        utt = utts[rng.integers(0, len(utts))]
        length = int(round(rng.uniform(*turn_range) * sr))
        offset = int(rng.integers(0, utt.clip.samples.size))
        crop = _crop(utt, length, offset)
        if prev_spk is None:
            start = 0
        elif rng.uniform() < overlap_prob:
            start = max(0, cursor - int(round(rng.uniform(0.3, 1.5) * sr)))
        else:
            start = cursor + int(round(rng.uniform(0.2, 0.8) * sr))
        pieces.append((Placement(sid, utt.utterance_id, start, length, 1.0, offset),
                       crop))
        spans[sid].append((start, start + length))
        cursor = start + length
        prev_spk = sid
    total = max(p.start + p.length for p, _ in pieces)
    mix = np.zeros(total)
    for p, crop in pieces:
        mix[p.start:p.start + p.length] += p.gain * crop
    L = num_frames(total, sr)
    active_ids = [sid for sid in speaker_ids if spans[sid]]
    rows = [activity_from_spans(spans[sid], L, sr) for sid in active_ids]
    acts = ActivityMatrix(np.vstack(rows), tuple(active_ids))
    return MixtureSample(AudioClip(mix, sr), acts, tuple(p for p, _ in pieces))


# ---------------------------------------------------------------------------
# corpus on disk: corpus.tsv (utterance_id, speaker_id, path, duration) + wav/


def write_corpus(corpus, out_dir) -> Path:
    from .audio import save_wav

    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for utt in corpus:
        rel = f"wav/{utt.utterance_id}.wav"
        save_wav(out_dir / rel, utt.clip)
        lines.append(f"{utt.utterance_id}\t{utt.speaker_id}\t{rel}\t"
                     f"{utt.clip.duration_s:.6f}")
    (out_dir / "corpus.tsv").write_text("\n".join(lines) + "\n")
    return out_dir / "corpus.tsv"


def load_corpus(corpus_dir) -> list:
    from .audio import load_wav

    corpus_dir = Path(corpus_dir)
    tsv = corpus_dir / "corpus.tsv"
    if not tsv.exists():
        raise DataError(f"no corpus.tsv under {corpus_dir}")
    corpus = []
    for ln, line in enumerate(tsv.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{tsv}:{ln}: expected 4 tab-separated fields")
        utt_id, speaker_id, rel, _ = parts
        corpus.append(Utterance(load_wav(corpus_dir / rel), speaker_id, utt_id))
    return corpus


def split_corpus(corpus, train_utts_per_speaker: int) -> tuple:
    """(train, eval) split: the first k utterances of each speaker train."""
    train, evalset = [], []
    seen: dict[str, int] = {}
    for utt in corpus:
        k = seen.get(utt.speaker_id, 0)
        (train if k < train_utts_per_speaker else evalset).append(utt)
        seen[utt.speaker_id] = k + 1
    return train, evalset


# ---------------------------------------------------------------------------
# statistics


def overlap_ratio(acts: ActivityMatrix, target_index: int) -> float:
    """Percent of target-active frames during which any interferer is active."""
    z_t = acts.data[target_index].astype(bool)
    if not z_t.any():
        raise DataError("target speaker is silent")
    others = np.delete(acts.data, target_index, axis=0)
    z_nt = others.any(axis=0) if others.shape[0] else np.zeros_like(z_t)
    return 100.0 * float((z_t & z_nt).sum()) / float(z_t.sum())


def single_speaker_duration(acts: ActivityMatrix, target_index: int,
                            hop_s: float = 0.010) -> float:
    """Seconds in which the target speaks with no interferer active."""
    z_t = acts.data[target_index].astype(bool)
    others = np.delete(acts.data, target_index, axis=0)
    z_nt = others.any(axis=0) if others.shape[0] else np.zeros_like(z_t)
    return hop_s * float((z_t & ~z_nt).sum())


# ---------------------------------------------------------------------------
# manifest: mixture_id, target speaker, placements, wav path, activity path


def _fmt_s(samples: int, sr: int) -> str:
    return f"{samples / sr:.6f}"


def write_manifest(path, records) -> None:
    """records: iterable of (mixture_id, target_speaker, MixtureSample, wav_path,
    activity_path)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for mix_id, target, sample, wav_path, act_path in records:
        placed = ";".join(
            f"{p.utterance_id},{_fmt_s(p.start, sample.clip.sample_rate)},{p.gain:.6f}"
            for p in sample.placements)
        lines.append(f"{mix_id}\t{target}\t{placed}\t{wav_path}\t{act_path}")
    path.write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class ManifestEntry:
    mixture_id: str
    target_speaker: str
    placements: tuple  # (utterance_id, start_s, gain)
    wav_path: str
    activity_path: str


def read_manifest(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such manifest: {path}")
    out = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise DataError(f"{path}:{ln}: expected 5 tab-separated fields")
        placed = []
        for chunk in parts[2].split(";"):
            try:
                utt_id, start_s, gain = chunk.split(",")
                placed.append((utt_id, float(start_s), float(gain)))
            except ValueError:
                raise DataError(f"{path}:{ln}: malformed placement '{chunk}'") from None
        out.append(ManifestEntry(parts[0], parts[1], tuple(placed), parts[3], parts[4]))
    return out
