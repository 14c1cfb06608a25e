"""Trial construction and scoring: segment-selection policies for the
baseline systems, guided extraction policies, cosine scoring, EER and minDCF.

Policies: B1 feeds only the target's single-speaker intervals to the baseline
extractor (falling back to all target-active intervals when none exist), B2
feeds all target-active intervals. P1-P4 feed the whole mixture plus guide
channels to the guided extractor with the corresponding ablation flags.
Frame removal for B1/B2 happens at the waveform level by concatenating the
selected hop intervals before feature extraction.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import ActivityMatrix, AudioClip, load_wav, logmel, read_activity, union_nontarget
from .errors import DataError, UsageError
from .model import BASELINE, ModelParams, extract, mode_for

SOLO_ONLY = "solo_only"
SOLO_PLUS_OVERLAP = "solo_plus_overlap"


@dataclass(frozen=True)
class Trial:
    label: int                      # 1 target, 0 nontarget
    enroll_ref: str
    test_ref: str
    target_speaker: str | None = None


@dataclass(frozen=True)
class ScoreSet:
    target: np.ndarray
    nontarget: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", np.asarray(self.target, dtype=np.float64))
        object.__setattr__(self, "nontarget",
                           np.asarray(self.nontarget, dtype=np.float64))


def write_trials(path, trials) -> None:
    """One trial per line: `label enroll_ref test_ref[:target_speaker]`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for t in trials:
        test = t.test_ref if t.target_speaker is None else f"{t.test_ref}:{t.target_speaker}"
        lines.append(f"{t.label} {t.enroll_ref} {test}")
    path.write_text("\n".join(lines) + "\n")


def read_trials(path) -> list:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such trial list: {path}")
    trials = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3 or parts[0] not in ("0", "1"):
            raise DataError(f"{path}:{ln}: expected 'label enroll test', got '{line}'")
        test_ref, _, target = parts[2].partition(":")
        trials.append(Trial(int(parts[0]), parts[1], test_ref, target or None))
    return trials


def write_scores(path, scores) -> None:
    """`trial_index<TAB>score` with 6 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{i}\t{s:.6f}\n" for i, s in enumerate(scores)))


def read_scores(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such score file: {path}")
    rows = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise DataError(f"{path}:{ln}: expected 'index<TAB>score'")
        rows.append((int(parts[0]), float(parts[1])))
    rows.sort()
    return np.asarray([s for _, s in rows])


# ---------------------------------------------------------------------------
# segment selection


def segment_select(acts: ActivityMatrix, target_index: int, policy: str) -> np.ndarray:
    """Frame mask for the baseline input policies.

    solo_only keeps frames where the target is the only active speaker and
    falls back to all target-active frames when that set is empty (the
    fully-overlapped-target rule); solo_plus_overlap keeps every
    target-active frame.
    """
    if policy not in (SOLO_ONLY, SOLO_PLUS_OVERLAP):
        raise UsageError(f"unknown selection policy '{policy}'")
    z_t = acts.data[target_index].astype(bool)
    if not z_t.any():
        raise DataError("target speaker has no active frame")
    if policy == SOLO_PLUS_OVERLAP:
        return z_t.astype(np.uint8)
    z_nt = union_nontarget(acts, target_index).astype(bool)
    solo = z_t & ~z_nt
    if not solo.any():
        return z_t.astype(np.uint8)
    return solo.astype(np.uint8)


def mask_to_waveform(clip: AudioClip, mask: np.ndarray,
                     hop_s: float = 0.010) -> AudioClip:
    """Concatenate the hop intervals of the selected frames."""
    hop = int(round(hop_s * clip.sample_rate))
    keep = np.flatnonzero(mask)
    if keep.size == 0:
        raise DataError("empty frame selection")
    pieces = []
    run_start = keep[0]
    prev = keep[0]
    for f in list(keep[1:]) + [None]:
        if f is not None and f == prev + 1:
            prev = f
            continue
        lo = run_start * hop
        hi = min((prev + 1) * hop, clip.samples.size)
        pieces.append(clip.samples[lo:hi])
        if f is not None:
            run_start = prev = f
    return AudioClip(np.concatenate(pieces), clip.sample_rate)


# ---------------------------------------------------------------------------
# scoring


def cosine_score(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DataError("zero-norm embedding")
    return float(np.dot(a, b) / (na * nb))


def _all_active_acts(n_frames: int, speaker: str = "enroll") -> ActivityMatrix:
    return ActivityMatrix(np.ones((1, n_frames), dtype=np.uint8), (speaker,))


def enroll_embedding(params: ModelParams, clip: AudioClip, policy: str) -> np.ndarray:
    """Clean single-speaker enrollment embedding for a policy's model."""
    if policy.startswith("B"):
        return extract(params, clip, mode=BASELINE)
    feat = logmel(clip)
    acts = _all_active_acts(feat.n_frames)
    return extract(params, feat, acts, 0, mode_for(policy))


def test_embedding(params: ModelParams, clip: AudioClip, acts: ActivityMatrix,
                   target_index: int, policy: str) -> np.ndarray:
    """Test-side embedding from a (possibly mixed) clip under a policy."""
    if policy.startswith("B"):
        sel = SOLO_ONLY if policy == "B1" else SOLO_PLUS_OVERLAP
        mask = segment_select(acts, target_index, sel)
        win = int(round(0.025 * clip.sample_rate))
        wav = mask_to_waveform(clip, mask)
        if wav.samples.size < win:
            wav = mask_to_waveform(
                clip, segment_select(acts, target_index, SOLO_PLUS_OVERLAP))
        if wav.samples.size < win:
            raise DataError("selected audio shorter than one analysis window")
        return extract(params, wav, mode=BASELINE)
    return extract(params, clip, acts, target_index, mode_for(policy))


def activity_path_for(wav_path: str) -> Path:
    return Path(wav_path).with_suffix(".act")


def score_trials(trials, policy: str, params: ModelParams,
                 root: Path | str = ".") -> tuple:
    """Cosine score per trial; returns (ScoreSet, scores in trial order)."""
    root = Path(root)
    enroll_cache: dict[str, np.ndarray] = {}
    scores = []
    for i, trial in enumerate(trials):
        try:
            if trial.enroll_ref not in enroll_cache:
                clip = load_wav(root / trial.enroll_ref)
                enroll_cache[trial.enroll_ref] = enroll_embedding(params, clip, policy)
            e = enroll_cache[trial.enroll_ref]
            test_clip = load_wav(root / trial.test_ref)
            if trial.target_speaker is None:
                acts = _all_active_acts(logmel(test_clip).n_frames, "test")
                target_index = 0
            else:
                acts = read_activity(activity_path_for(root / trial.test_ref))
                target_index = acts.index_of(trial.target_speaker)
            t = test_embedding(params, test_clip, acts, target_index, policy)
        except DataError as exc:
            raise DataError(f"trial {i}: {exc}") from exc
        scores.append(cosine_score(e, t))
    scores = np.asarray(scores)
    labels = np.asarray([t.label for t in trials])
    return ScoreSet(scores[labels == 1], scores[labels == 0]), scores


# ---------------------------------------------------------------------------
# metrics


def operating_points(scores: ScoreSet) -> tuple:
    """FRR/FAR at every unique score plus the reject-all end point.

    FRR(t) = P(target < t), FAR(t) = P(nontarget >= t); counts are exact
    integer ratios, so these match a naive per-threshold recount bitwise.
    """
    tar = np.sort(scores.target)
    non = np.sort(scores.nontarget)
    if tar.size == 0 or non.size == 0:
        raise DataError("EER/minDCF need both target and nontarget scores")
    thresholds = np.unique(np.concatenate([tar, non]))
    frr = np.searchsorted(tar, thresholds, side="left") / tar.size
    far = (non.size - np.searchsorted(non, thresholds, side="left")) / non.size
    return np.append(frr, 1.0), np.append(far, 0.0)


def eer(scores: ScoreSet) -> float:
    """Equal error rate in percent, linearly interpolated at the crossing."""
    frr, far = operating_points(scores)
    diff = far - frr
    k = int(np.argmax(diff <= 0))
    if diff[k] == 0:
        return 100.0 * frr[k]
    d_prev, d_here = diff[k - 1], diff[k]
    lam = d_prev / (d_prev - d_here)
    return 100.0 * (frr[k - 1] + lam * (frr[k] - frr[k - 1]))


def min_dcf(scores: ScoreSet, p_target: float = 0.01,
            c_miss: float = 1.0, c_fa: float = 1.0) -> float:
    """Minimum normalized detection cost over all thresholds."""
    frr, far = operating_points(scores)
    costs = c_miss * p_target * frr + c_fa * (1.0 - p_target) * far
    return float(costs.min() / min(c_miss * p_target, c_fa * (1.0 - p_target)))
