import itertools

import numpy as np
import pytest

from gse.diarization import (Turn, WindowResult, ahc_centroid, der,
                             der_components, jer, read_window_rttm, rttm_read,
                             rttm_write, slide_windows, stitch, tune,
                             turns_from_activity, write_score_csv)
from gse.errors import DataError

from conftest import make_acts


def brute_force_der(ref, hyp) -> float:
    """Oracle: minimum DER over every injective speaker mapping, computed by
    per-mapping segment accounting in integer milliseconds."""

    def intervals(turns):
        by = {}
        for t in turns:
            s = round(t.onset_s * 1000)
            e = round((t.onset_s + t.duration_s) * 1000)
            by.setdefault(t.speaker, []).append((s, e))
        return by

    ref_iv, hyp_iv = intervals(ref), intervals(hyp)
    bounds = sorted({p for ivs in list(ref_iv.values()) + list(hyp_iv.values())
                     for se in ivs for p in se})
    segs = list(zip(bounds, bounds[1:]))

    def active(iv_by_spk, spk, a, b):
        return any(s < b and e > a for s, e in iv_by_spk[spk])

    rs, hs = sorted(ref_iv), sorted(hyp_iv)
    total = sum((b - a) * sum(active(ref_iv, r, a, b) for r in rs)
                for a, b in segs)
    best = None
    size = min(len(rs), len(hs))
    for r_sub in itertools.permutations(rs, size):
        for h_sub in itertools.permutations(hs, size):
            mapping = dict(zip(r_sub, h_sub))
            err = 0
            for a, b in segs:
                nr = [r for r in rs if active(ref_iv, r, a, b)]
                nh = [h for h in hs if active(hyp_iv, h, a, b)]
                correct = sum(1 for r in nr
                              if r in mapping and mapping[r] in nh)
                err += (b - a) * (max(len(nr), len(nh)) - correct)
            best = err if best is None else min(best, err)
    return 100.0 * best / total


def random_annotation(rng, n_spk, n_turns, file_id="f"):
    turns = []
    for _ in range(n_turns):
        onset = round(float(rng.uniform(0, 20)), 3)
        dur = round(float(rng.uniform(0.2, 5)), 3)
        turns.append(Turn(onset, dur, f"s{rng.integers(0, n_spk)}", file_id))
    return turns


class TestRttm:
    def test_field_mapping(self, tmp_path):
        path = tmp_path / "x.rttm"
        path.write_text("SPEAKER f 1 0.000 10.000 <NA> <NA> A <NA> <NA>\n")
        turns = rttm_read(path)
        assert turns == [Turn(0.0, 10.0, "A", "f")]

    def test_write_read_identity(self, tmp_path):
        turns = [Turn(0.5, 2.25, "a"), Turn(1.0, 3.0, "b"), Turn(4.75, 0.5, "a")]
        path = tmp_path / "y.rttm"
        rttm_write(turns, path)
        assert rttm_read(path) == sorted(turns, key=lambda t: (t.onset_s, t.speaker))
        rttm_write(rttm_read(path), tmp_path / "z.rttm")
        assert path.read_bytes() == (tmp_path / "z.rttm").read_bytes()

    def test_out_of_order_lines_sorted(self, tmp_path):
        path = tmp_path / "o.rttm"
        path.write_text("SPEAKER f 1 5.000 1.000 <NA> <NA> B <NA> <NA>\n"
                        "SPEAKER f 1 0.000 1.000 <NA> <NA> A <NA> <NA>\n")
        turns = rttm_read(path)
        assert [t.speaker for t in turns] == ["A", "B"]

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "bad.rttm"
        path.write_text("SPEAKER f 1 0.000 1.000 <NA> <NA> A <NA> <NA>\n"
                        "SPKR oops\n")
        with pytest.raises(DataError) as exc:
            rttm_read(path)
        assert ":2" in str(exc.value)


class TestDer:
    def test_identity_zero(self):
        ref = [Turn(0.0, 5.0, "A"), Turn(3.0, 4.0, "B")]
        assert der(ref, list(ref)) == 0.0
        assert jer(ref, list(ref)) == 0.0

    def test_hand_miss(self):
        ref = [Turn(0.0, 10.0, "A")]
        hyp = [Turn(0.0, 8.0, "a")]
        assert der(ref, hyp) == pytest.approx(20.0)

    def test_label_renaming_invariance(self, rng):
        ref = random_annotation(rng, 3, 8)
        hyp = random_annotation(rng, 3, 8)
        renamed = [Turn(t.onset_s, t.duration_s, f"zz_{t.speaker}", t.file_id)
                   for t in hyp]
        assert der(ref, hyp) == der(ref, renamed)
        assert jer(ref, hyp) == jer(ref, renamed)

    def test_matches_permutation_brute_force(self):
        for seed in range(60):
            rng = np.random.default_rng(seed)
            n_ref = int(rng.integers(1, 5))
            n_hyp = int(rng.integers(1, 5))
            ref = random_annotation(rng, n_ref, int(rng.integers(1, 7)))
            hyp = random_annotation(rng, n_hyp, int(rng.integers(0, 7)))
            assert der(ref, hyp) == pytest.approx(brute_force_der(ref, hyp),
                                                  abs=1e-9), seed

    def test_empty_reference_rejected(self):
        with pytest.raises(DataError):
            der([], [Turn(0, 1, "a")])

    def test_overlap_counted_per_speaker(self):
        # two fully overlapped reference speakers, hypothesis finds one
        ref = [Turn(0.0, 10.0, "A"), Turn(0.0, 10.0, "B")]
        hyp = [Turn(0.0, 10.0, "a")]
        assert der(ref, hyp) == pytest.approx(50.0)


class TestJer:
    def test_hand_half(self):
        ref = [Turn(0.0, 10.0, "A")]
        hyp = [Turn(0.0, 5.0, "a")]
        assert jer(ref, hyp) == pytest.approx(50.0)

    def test_missing_speaker_contributes_100(self):
        ref = [Turn(0.0, 10.0, "A"), Turn(20.0, 10.0, "B")]
        hyp = [Turn(0.0, 10.0, "a")]
        assert jer(ref, hyp) == pytest.approx(50.0)  # (0 + 100) / 2

    def test_treats_speakers_equally(self):
        # one dominant speaker perfectly found, one brief speaker missed
        ref = [Turn(0.0, 100.0, "A"), Turn(200.0, 1.0, "B")]
        hyp = [Turn(0.0, 100.0, "x")]
        assert der(ref, hyp) == pytest.approx(100.0 / 101.0)
        assert jer(ref, hyp) == pytest.approx(50.0)


class TestSlideWindows:
    def test_30s_gives_21_windows(self):
        spans = slide_windows(30.0)
        assert len(spans) == 21
        assert spans[0] == (0.0, 10.0)
        assert spans[-1] == (20.0, 30.0)

    def test_short_file_single_window(self):
        assert slide_windows(8.0) == [(0.0, 8.0)]

    def test_interval_12_13_in_windows_3_to_12(self):
        spans = slide_windows(30.0)
        hits = [i for i, (a, b) in enumerate(spans) if a < 13.0 and b > 12.0]
        assert hits == list(range(3, 13))

    def test_ragged_tail_covered(self):
        spans = slide_windows(30.5)
        assert spans[-1] == (20.5, 30.5)
        assert max(b for _, b in spans) == 30.5


class TestAhc:
    @staticmethod
    def angle_embed(x, scale=0.1):
        return np.array([np.cos(scale * x), np.sin(scale * x)])

    def test_hand_run_three_points(self):
        embs = np.vstack([self.angle_embed(v) for v in (0.0, 1.0, 10.0)])
        labels = ahc_centroid(embs, threshold=0.1)
        assert labels[0] == labels[1] != labels[2]

    def test_threshold_below_all_gives_singletons(self, rng):
        embs = rng.normal(0, 1, (5, 8))
        labels = ahc_centroid(embs, threshold=-1.0)
        assert len(set(labels.tolist())) == 5

    def test_identical_embeddings_one_cluster(self):
        embs = np.tile(np.array([1.0, 2.0, 3.0]), (4, 1))
        labels = ahc_centroid(embs, threshold=0.2)
        assert len(set(labels.tolist())) == 1

    def test_min_cluster_size_reassigns(self):
        embs = np.vstack([self.angle_embed(v) for v in
                          (0.0, 0.2, 0.4, 5.0, 5.2, 5.4, 10.0)])
        labels = ahc_centroid(embs, threshold=0.02, min_cluster_size=2)
        assert len(set(labels.tolist())) == 2
        assert labels[6] in (labels[0], labels[3])

    def test_needs_embeddings(self):
        with pytest.raises(DataError):
            ahc_centroid(np.zeros((0, 4)), 0.5)


def fake_window(wi, start, end, tracks_frames):
    win = WindowResult(wi, start, end, int(start * 100), int(end * 100),
                       tuple(tracks_frames))
    win.track_frames = {k: np.asarray(v) for k, v in tracks_frames.items()}
    return win


class TestStitch:
    def test_single_speaker_union(self):
        w0 = fake_window(0, 0.0, 10.0, {"s": np.arange(0, 500)})
        w1 = fake_window(1, 1.0, 11.0, {"s": np.arange(300, 800)})
        turns = stitch([w0, w1], [(0, "s"), (1, "s")], [0, 0])
        assert len(turns) == 1
        assert turns[0].onset_s == 0.0
        assert turns[0].duration_s == pytest.approx(8.0)

    def test_majority_vote_on_conflict(self):
        frames = np.arange(0, 300)
        wins = [fake_window(i, 0.0, 3.0, {"s": frames}) for i in range(3)]
        keys = [(0, "s"), (1, "s"), (2, "s")]
        turns = stitch(wins, keys, [0, 1, 1])
        assert {t.speaker for t in turns} == {"clus1"}

    def test_perfect_embeddings_reach_der_zero(self):
        # constructed fixture: two alternating speakers, trivially separable
        # embeddings, windows of 10 s / 1 s shift over 20 s
        acts = np.zeros((2, 2000), dtype=int)
        for k in range(0, 2000, 400):
            acts[0, k:k + 200] = 1
            acts[1, k + 200:k + 400] = 1
        ref = turns_from_activity(make_acts(acts, ids=("A", "B")), "fx")
        spans = slide_windows(20.0)
        windows, keys, embs = [], [], []
        for wi, (a, b) in enumerate(spans):
            lo, hi = int(a * 100), int(b * 100)
            tf = {}
            for i, sid in enumerate(("A", "B")):
                frames = np.flatnonzero(acts[i, lo:hi]) + lo
                if frames.size:
                    tf[sid] = frames
            win = fake_window(wi, a, b, tf)
            windows.append(win)
            for sid in tf:
                keys.append((wi, sid))
                base = np.zeros(8)
                base[0 if sid == "A" else 1] = 1.0
                embs.append(base)
        labels = ahc_centroid(np.vstack(embs), threshold=0.3)
        hyp = stitch(windows, keys, labels, "fx")
        assert der(ref, hyp) == 0.0

    def test_unlabeled_entry_rejected(self):
        w0 = fake_window(0, 0.0, 1.0, {"s": np.arange(10)})
        with pytest.raises(DataError):
            stitch([w0], [(0, "s")], [])


class TestTune:
    def _items(self):
        # one file whose best threshold is obvious
        acts = np.zeros((2, 1000), dtype=int)
        acts[0, :500] = 1
        acts[1, 500:] = 1
        ref = turns_from_activity(make_acts(acts, ids=("A", "B")), "t")
        win = fake_window(0, 0.0, 10.0, {"A": np.arange(0, 500),
                                         "B": np.arange(500, 1000)})
        embs = np.array([[1.0, 0.0], [0.0, 1.0]])
        return [([win], [(0, "A"), (0, "B")], embs, ref, "t")]

    def test_zero_der_point_chosen(self):
        thr, mcs = tune(self._items(), thresholds=(0.2, 1.5), min_sizes=(1,))
        assert thr == 0.2  # merging everything at 1.5 would score worse

    def test_tie_breaks_to_smallest(self):
        # all grid points behave identically on a single-speaker file
        acts = np.zeros((1, 500), dtype=int)
        acts[0, :400] = 1
        ref = turns_from_activity(make_acts(acts, ids=("A",)), "t")
        win = fake_window(0, 0.0, 5.0, {"A": np.arange(0, 400)})
        items = [([win], [(0, "A")], np.array([[1.0, 0.0]]), ref, "t")]
        thr, mcs = tune(items, thresholds=(0.5, 0.3), min_sizes=(2, 1))
        assert (thr, mcs) == (0.3, 1)

    def test_empty_dev_rejected(self):
        with pytest.raises(DataError):
            tune([], (0.5,), (1,))


class TestWindowRttm:
    def test_parse(self, tmp_path):
        path = tmp_path / "w.rttm"
        path.write_text("0 SPEAKER f 1 0.000 2.000 <NA> <NA> X <NA> <NA>\n"
                        "2 SPEAKER f 1 2.500 1.000 <NA> <NA> Y <NA> <NA>\n")
        out = read_window_rttm(path)
        assert set(out) == {0, 2}
        assert out[0][0].speaker == "X"

    def test_bad_index(self, tmp_path):
        path = tmp_path / "w.rttm"
        path.write_text("x SPEAKER f 1 0 1 <NA> <NA> A <NA> <NA>\n")
        with pytest.raises(DataError):
            read_window_rttm(path)


class TestScoreCsv:
    def test_format(self, tmp_path):
        path = tmp_path / "s.csv"
        write_score_csv(path, [("f1", 12.3456, 7.0)])
        assert path.read_text() == "file,der,jer\nf1,12.3456,7.0000\n"
