"""Two-stage diarization: sliding-window local results, per-window embedding
extraction (guided or baseline-solo), centroid-linkage agglomerative
clustering, stitching, and DER/JER scoring with RTTM I/O.

All interval arithmetic runs on integer milliseconds, so scores are exact
and bit-reproducible. DER uses the optimal one-to-one speaker mapping (the
assignment maximizing mapped overlap), counts overlapped regions per speaker,
and applies no collar; JER reuses the same mapping.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .audio import ActivityMatrix, AudioClip, activity_from_spans, logmel
from .errors import DataError, UsageError
from .model import BASELINE, ModelParams, extract, mode_for
from .verification import SOLO_ONLY, mask_to_waveform, segment_select

HOP_S = 0.010
WINDOW_S = 10.0
SHIFT_S = 1.0


@dataclass(frozen=True)
class Turn:
    onset_s: float
    duration_s: float
    speaker: str
    file_id: str = "file"

    def __post_init__(self):
        if self.duration_s <= 0 or self.onset_s < 0:
            raise DataError(f"invalid turn ({self.onset_s}, {self.duration_s})")


def rttm_write(turns, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"SPEAKER {t.file_id} 1 {t.onset_s:.3f} {t.duration_s:.3f} "
        f"<NA> <NA> {t.speaker} <NA> <NA>"
        for t in sorted(turns, key=lambda t: (t.onset_s, t.speaker))
    ]
    path.write_text("\n".join(lines) + "\n")


def rttm_read(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such RTTM file: {path}")
    turns = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) < 9 or parts[0] != "SPEAKER":
            raise DataError(f"{path}:{ln}: malformed RTTM line")
        try:
            onset, dur = float(parts[3]), float(parts[4])
        except ValueError:
            raise DataError(f"{path}:{ln}: non-numeric onset/duration") from None
        turns.append(Turn(onset, dur, parts[7], parts[1]))
    return sorted(turns, key=lambda t: (t.onset_s, t.speaker))


def turns_from_activity(acts: ActivityMatrix, file_id: str = "file",
                        hop_s: float = HOP_S) -> list:
    """Reference turns from a frame activity matrix (one turn per run)."""
    turns = []
    for sid, row in zip(acts.speaker_ids, acts.data):
        on = None
        for f, v in enumerate(list(row) + [0]):
            if v and on is None:
                on = f
            elif not v and on is not None:
                turns.append(Turn(on * hop_s, (f - on) * hop_s, sid, file_id))
                on = None
    return turns


# ---------------------------------------------------------------------------
# interval arithmetic at 1 ms resolution


def _to_ms(turns) -> dict:
    """speaker -> merged, sorted (start_ms, end_ms) intervals."""
    by_spk: dict[str, list] = {}
    for t in turns:
        s = round(t.onset_s * 1000)
        e = round((t.onset_s + t.duration_s) * 1000)
        if e > s:
            by_spk.setdefault(t.speaker, []).append((s, e))
    merged = {}
    for spk, ivs in by_spk.items():
        ivs.sort()
        acc = [list(ivs[0])]
        for s, e in ivs[1:]:
            if s <= acc[-1][1]:
                acc[-1][1] = max(acc[-1][1], e)
            else:
                acc.append([s, e])
        merged[spk] = [(s, e) for s, e in acc]
    return merged


def _segments(ref_iv: dict, hyp_iv: dict):
    bounds = sorted({p for ivs in list(ref_iv.values()) + list(hyp_iv.values())
                     for s, e in ivs for p in (s, e)})
    if len(bounds) < 2:
        return np.zeros(0, dtype=np.int64), {}, {}
    durs = np.diff(np.asarray(bounds, dtype=np.int64))
    n_seg = durs.size

    def table(iv_by_spk):
        spks = sorted(iv_by_spk)
        tab = np.zeros((len(spks), n_seg), dtype=bool)
        for i, spk in enumerate(spks):
            for s, e in iv_by_spk[spk]:
                lo = np.searchsorted(bounds, s)
                hi = np.searchsorted(bounds, e)
                tab[i, lo:hi] = True
        return spks, tab

    return durs, table(ref_iv), table(hyp_iv)


def _optimal_overlap_mapping(durs, ref_tab, hyp_tab):
    """Assignment of ref to hyp speakers maximizing total co-active time."""
    nr, nh = ref_tab.shape[0], hyp_tab.shape[0]
    overlap = np.zeros((nr, nh), dtype=np.int64)
    for i in range(nr):
        for j in range(nh):
            overlap[i, j] = int(durs[ref_tab[i] & hyp_tab[j]].sum())
    rows, cols = linear_sum_assignment(-overlap)
    return {int(i): int(j) for i, j in zip(rows, cols)}, overlap


def der(ref, hyp) -> float:
    """Diarization error rate in percent, zero collar, overlap scored."""
    parts = der_components(ref, hyp)
    return parts["der"]


def der_components(ref, hyp) -> dict:
    ref_iv = _to_ms(ref)
    if not ref_iv:
        raise DataError("empty reference annotation")
    hyp_iv = _to_ms(hyp)
    durs, (ref_spks, ref_tab), (hyp_spks, hyp_tab) = _segments(ref_iv, hyp_iv)
    n_ref = ref_tab.sum(axis=0).astype(np.int64)
    n_hyp = (hyp_tab.sum(axis=0).astype(np.int64)
             if hyp_tab.size else np.zeros_like(n_ref))
    mapping, overlap = _optimal_overlap_mapping(durs, ref_tab, hyp_tab)
    correct = np.zeros(durs.size, dtype=np.int64)
    for i, j in mapping.items():
        correct += (ref_tab[i] & hyp_tab[j]).astype(np.int64)
    total = int((durs * n_ref).sum())
    if total == 0:
        raise DataError("reference has no speech")
    miss = int((durs * np.maximum(n_ref - n_hyp, 0)).sum())
    fa = int((durs * np.maximum(n_hyp - n_ref, 0)).sum())
    confusion = int((durs * (np.minimum(n_ref, n_hyp) - correct)).sum())
    return {
        "miss": 100.0 * miss / total,
        "falarm": 100.0 * fa / total,
        "confusion": 100.0 * confusion / total,
        "der": 100.0 * (miss + fa + confusion) / total,
        "total_ms": total,
        "mapping": {ref_spks[i]: hyp_spks[j] for i, j in mapping.items()},
    }


def jer(ref, hyp) -> float:
    """Jaccard error rate in percent: mean per-reference-speaker error under
    the same optimal mapping as DER; unmapped speakers contribute 100."""
    ref_iv = _to_ms(ref)
    if not ref_iv:
        raise DataError("empty reference annotation")
    hyp_iv = _to_ms(hyp)
    durs, (ref_spks, ref_tab), (hyp_spks, hyp_tab) = _segments(ref_iv, hyp_iv)
    mapping, overlap = _optimal_overlap_mapping(durs, ref_tab, hyp_tab)
    per_spk = []
    for i in range(len(ref_spks)):
        ref_time = int(durs[ref_tab[i]].sum())
        if i not in mapping:
            per_spk.append(100.0)
            continue
        j = mapping[i]
        inter = int(overlap[i, j])
        union = ref_time + int(durs[hyp_tab[j]].sum()) - inter
        per_spk.append(100.0 * (1.0 - inter / union) if union else 100.0)
    return float(np.mean(per_spk))


# ---------------------------------------------------------------------------
# sliding windows and per-window embeddings


@dataclass
class WindowResult:
    index: int
    start_s: float
    end_s: float
    frame_lo: int
    frame_hi: int
    tracks: tuple  # local speaker ids active in this window
    track_frames: dict = field(default_factory=dict)  # id -> absolute frame indices
    embeddings: dict = field(default_factory=dict)


def slide_windows(duration_s: float, window_s: float = WINDOW_S,
                  shift_s: float = SHIFT_S) -> list:
    """Window (start, end) spans: starts 0, shift, 2*shift, ...; short files
    yield a single full-length window; a ragged tail gets one final window
    ending at the file end so every sample is covered."""
    if duration_s <= window_s:
        return [(0.0, duration_s)]
    n = 1 + int(np.floor((duration_s - window_s) / shift_s + 1e-9))
    starts = [i * shift_s for i in range(n)]
    if starts[-1] + window_s < duration_s - 1e-9:
        starts.append(duration_s - window_s)
    return [(s, min(s + window_s, duration_s)) for s in starts]


def _file_activity(local_turns, n_frames: int, sample_rate: int) -> ActivityMatrix:
    spk_iv = _to_ms(local_turns)
    ids = sorted(spk_iv)
    rows = [
        activity_from_spans(
            [(round(s * sample_rate / 1000), round(e * sample_rate / 1000))
             for s, e in spk_iv[spk]], n_frames, sample_rate)
        for spk in ids
    ]
    return ActivityMatrix(np.vstack(rows), tuple(ids))


def prepare_windows(clip: AudioClip, local_turns, params: ModelParams,
                    mode: str, window_s: float = WINDOW_S,
                    shift_s: float = SHIFT_S):
    """Window skeletons plus one embedding per (window, active local speaker).

    mode "guided": all speech intervals go in with their activities, silence
    columns dropped first. mode "baseline": the target's single-speaker
    intervals (with the fully-overlapped fallback) are concatenated at the
    waveform level and fed to the baseline extractor. Local speakers with no
    active frame in a window are skipped.
    """
    if mode not in ("guided", "baseline"):
        raise UsageError(f"unknown diarization mode '{mode}'")
    feat = logmel(clip)
    acts = _file_activity(local_turns, feat.n_frames, clip.sample_rate)
    frames_per_s = int(round(1.0 / HOP_S))
    windows = []
    keys = []
    embeddings = []
    for wi, (a, b) in enumerate(slide_windows(clip.duration_s, window_s, shift_s)):
        lo = int(round(a * frames_per_s))
        hi = min(int(round(b * frames_per_s)), feat.n_frames)
        if hi <= lo:
            continue
        sub = acts.data[:, lo:hi]
        present = [i for i in range(acts.n_speakers) if sub[i].any()]
        win = WindowResult(wi, a, b, lo, hi,
                           tuple(acts.speaker_ids[i] for i in present))
        for i in present:
            sid = acts.speaker_ids[i]
            win.track_frames[sid] = np.flatnonzero(sub[i]) + lo
            if mode == "guided":
                speech = sub.any(axis=0)
                cols = np.flatnonzero(speech)
                w_feat = type(feat)(feat.data[:, lo:hi][:, cols])
                w_acts = ActivityMatrix(sub[:, cols], acts.speaker_ids)
                emb = extract(params, w_feat, w_acts, i, mode_for("P1"))
            else:
                w_acts = ActivityMatrix(sub, acts.speaker_ids)
                mask = segment_select(w_acts, i, SOLO_ONLY)
                full_mask = np.zeros(feat.n_frames, dtype=np.uint8)
                full_mask[lo:hi] = mask
                wav = mask_to_waveform(clip, full_mask)
                if wav.samples.size < int(round(0.025 * clip.sample_rate)):
                    continue
                emb = extract(params, wav, mode=BASELINE)
            win.embeddings[sid] = emb
            keys.append((wi, sid))
            embeddings.append(emb)
        windows.append(win)
    if not embeddings:
        raise DataError("no speaker produced an embedding in any window")
    return windows, keys, np.vstack(embeddings)


def read_window_rttm(path) -> dict:
    """Per-window local results: each line is a window index followed by a
    standard RTTM line; turn times are absolute. Returns index -> turns."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    out: dict[int, list] = {}
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split(maxsplit=1)
        try:
            wi = int(parts[0])
        except (ValueError, IndexError):
            raise DataError(f"{path}:{ln}: expected leading window index") from None
        fields = parts[1].split() if len(parts) > 1 else []
        if len(fields) < 9 or fields[0] != "SPEAKER":
            raise DataError(f"{path}:{ln}: malformed RTTM payload")
        try:
            onset, dur = float(fields[3]), float(fields[4])
        except ValueError:
            raise DataError(f"{path}:{ln}: non-numeric onset/duration") from None
        out.setdefault(wi, []).append(Turn(onset, dur, fields[7], fields[1]))
    return out


def prepare_windows_external(clip: AudioClip, window_turns: dict,
                             params: ModelParams, mode: str,
                             window_s: float = WINDOW_S,
                             shift_s: float = SHIFT_S):
    """Like prepare_windows, but local results come per window, so a track
    exists only within its own window (labels need not persist across
    windows; when they do, stitching's majority vote exploits it)."""
    if mode not in ("guided", "baseline"):
        raise UsageError(f"unknown diarization mode '{mode}'")
    feat = logmel(clip)
    frames_per_s = int(round(1.0 / HOP_S))
    spans = slide_windows(clip.duration_s, window_s, shift_s)
    windows, keys, embeddings = [], [], []
    for wi, turns in sorted(window_turns.items()):
        if wi < 0 or wi >= len(spans):
            raise DataError(f"window index {wi} out of range for {len(spans)} windows")
        a, b = spans[wi]
        lo = int(round(a * frames_per_s))
        hi = min(int(round(b * frames_per_s)), feat.n_frames)
        acts = _file_activity(turns, feat.n_frames, clip.sample_rate)
        sub = acts.data[:, lo:hi]
        present = [i for i in range(acts.n_speakers) if sub[i].any()]
        if not present:
            continue
        win = WindowResult(wi, a, b, lo, hi,
                           tuple(acts.speaker_ids[i] for i in present))
        for i in present:
            sid = acts.speaker_ids[i]
            win.track_frames[sid] = np.flatnonzero(sub[i]) + lo
            if mode == "guided":
                speech = sub.any(axis=0)
                cols = np.flatnonzero(speech)
                w_feat = type(feat)(feat.data[:, lo:hi][:, cols])
                w_acts = ActivityMatrix(sub[:, cols], acts.speaker_ids)
                emb = extract(params, w_feat, w_acts, i, mode_for("P1"))
            else:
                w_acts = ActivityMatrix(sub, acts.speaker_ids)
                mask = segment_select(w_acts, i, SOLO_ONLY)
                full_mask = np.zeros(feat.n_frames, dtype=np.uint8)
                full_mask[lo:hi] = mask
                wav = mask_to_waveform(clip, full_mask)
                if wav.samples.size < int(round(0.025 * clip.sample_rate)):
                    continue
                emb = extract(params, wav, mode=BASELINE)
            win.embeddings[sid] = emb
            keys.append((wi, sid))
            embeddings.append(emb)
        windows.append(win)
    if not embeddings:
        raise DataError("no speaker produced an embedding in any window")
    return windows, keys, np.vstack(embeddings)


# ---------------------------------------------------------------------------
# clustering and stitching


def ahc_centroid(embeddings: np.ndarray, threshold: float,
                 min_cluster_size: int = 1) -> np.ndarray:
    """Agglomerative clustering with centroid linkage on cosine distance.

    Merges the closest pair of centroids until the smallest distance exceeds
    the threshold, then reassigns members of clusters smaller than
    min_cluster_size to the nearest surviving large-cluster centroid.
    Centroids are means of member embeddings, L2-renormalized.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise DataError("clustering needs at least one embedding")
    n = embeddings.shape[0]
    norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
    X = embeddings / np.maximum(norms, 1e-12)

    def centroid(members):
        c = X[members].mean(axis=0)
        return c / max(np.linalg.norm(c), 1e-12)

    clusters = [[i] for i in range(n)]
    cents = [X[i].copy() for i in range(n)]
    while len(clusters) > 1:
        best = None
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                d = 1.0 - float(np.dot(cents[i], cents[j]))
                if best is None or d < best[0]:
                    best = (d, i, j)
        if best[0] > threshold:
            break
        _, i, j = best
        clusters[i] = clusters[i] + clusters[j]
        cents[i] = centroid(clusters[i])
        del clusters[j], cents[j]
    if min_cluster_size > 1:
        big = [k for k, c in enumerate(clusters) if len(c) >= min_cluster_size]
        if big:
            moved: dict[int, list] = {k: [] for k in big}
            for k, c in enumerate(clusters):
                if k in big:
                    moved[k].extend(c)
                    continue
                for m in c:
                    sims = [float(np.dot(X[m], cents[kk])) for kk in big]
                    moved[big[int(np.argmax(sims))]].append(m)
            clusters = [sorted(moved[k]) for k in big]
    labels = np.zeros(n, dtype=np.int64)
    for lab, members in enumerate(clusters):
        for m in members:
            labels[m] = lab
    # renumber by first appearance for stable output
    remap: dict[int, int] = {}
    out = np.zeros(n, dtype=np.int64)
    for i, lab in enumerate(labels):
        if lab not in remap:
            remap[lab] = len(remap)
        out[i] = remap[lab]
    return out


def stitch(windows, keys, labels, file_id: str = "file",
           hop_s: float = HOP_S) -> list:
    """Emit each local track's activity under its global cluster label.

    A frame claimed by one local track from several overlapping windows gets
    the majority cluster label (ties break toward the smaller label). Runs of
    same-label frames become turns; same-label overlaps union away.
    """
    if len(keys) != len(labels):
        raise DataError("every (window, speaker) needs a cluster label")
    win_by_index = {w.index: w for w in windows}
    votes: dict[tuple, dict] = {}
    for (wi, sid), lab in zip(keys, labels):
        w = win_by_index[wi]
        for f in w.track_frames[sid]:
            votes.setdefault((sid, int(f)), {}).setdefault(int(lab), 0)
            votes[(sid, int(f))][int(lab)] += 1
    frames_by_label: dict[int, set] = {}
    for (sid, f), counts in votes.items():
        best = min(counts, key=lambda lab: (-counts[lab], lab))
        frames_by_label.setdefault(best, set()).add(f)
    turns = []
    for lab in sorted(frames_by_label):
        frames = sorted(frames_by_label[lab])
        run_start = prev = frames[0]
        for f in frames[1:] + [None]:
            if f is not None and f == prev + 1:
                prev = f
                continue
            turns.append(Turn(run_start * hop_s, (prev - run_start + 1) * hop_s,
                              f"clus{lab}", file_id))
            if f is not None:
                run_start = prev = f
    return sorted(turns, key=lambda t: (t.onset_s, t.speaker))


def diarize(clip: AudioClip, local_turns, params: ModelParams, mode: str,
            threshold: float, min_cluster_size: int = 1,
            file_id: str = "file") -> list:
    """Full second-stage pipeline: windows, embeddings, AHC, stitching."""
    windows, keys, embs = prepare_windows(clip, local_turns, params, mode)
    labels = ahc_centroid(embs, threshold, min_cluster_size)
    return stitch(windows, keys, labels, file_id)


def tune(dev_items, thresholds, min_sizes) -> tuple:
    """Grid search minimizing mean DER over prepared dev files.

    dev_items: list of (windows, keys, embeddings, ref_turns, file_id).
    Ties break toward the smaller threshold, then the smaller cluster size.
    """
    if not dev_items:
        raise DataError("empty dev set")
    best = None
    for thr in sorted(thresholds):
        for mcs in sorted(min_sizes):
            ders = []
            for windows, keys, embs, ref_turns, file_id in dev_items:
                labels = ahc_centroid(embs, thr, mcs)
                hyp = stitch(windows, keys, labels, file_id)
                ders.append(der(ref_turns, hyp))
            mean_der = float(np.mean(ders))
            if best is None or mean_der < best[0] - 1e-12:
                best = (mean_der, thr, mcs)
    return best[1], best[2]


def write_score_csv(path, rows) -> None:
    """CSV rows of (file, der, jer)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["file,der,jer"]
    lines += [f"{f},{d:.4f},{j:.4f}" for f, d, j in rows]
    path.write_text("\n".join(lines) + "\n")
