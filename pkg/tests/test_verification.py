import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gse.audio import AudioClip
from gse.errors import DataError, UsageError
from gse.verification import (ScoreSet, Trial, cosine_score, eer,
                              mask_to_waveform, min_dcf, operating_points,
                              read_scores, read_trials, segment_select,
                              write_scores, write_trials, SOLO_ONLY,
                              SOLO_PLUS_OVERLAP)

from conftest import make_acts


def brute_force_eer(target, nontarget) -> float:
    """Independent oracle: naive per-threshold counting over the same
    candidate set (all unique scores plus the reject-all end point)."""
    target = list(map(float, target))
    nontarget = list(map(float, nontarget))
    points = []
    for t in sorted(set(target + nontarget)):
        frr = sum(1 for s in target if s < t) / len(target)
        far = sum(1 for s in nontarget if s >= t) / len(nontarget)
        points.append((frr, far))
    points.append((1.0, 0.0))
    for k, (frr, far) in enumerate(points):
        if far - frr <= 0:
            if far - frr == 0:
                return 100.0 * frr
            d_prev = points[k - 1][1] - points[k - 1][0]
            d_here = far - frr
            lam = d_prev / (d_prev - d_here)
            return 100.0 * (points[k - 1][0] + lam * (frr - points[k - 1][0]))
    raise AssertionError("no crossing")


def brute_force_min_dcf(target, nontarget, p=0.01, cm=1.0, cf=1.0) -> float:
    target = list(map(float, target))
    nontarget = list(map(float, nontarget))
    best = None
    for t in sorted(set(target + nontarget)):
        frr = sum(1 for s in target if s < t) / len(target)
        far = sum(1 for s in nontarget if s >= t) / len(nontarget)
        cost = cm * p * frr + cf * (1 - p) * far
        best = cost if best is None else min(best, cost)
    best = min(best, cm * p * 1.0)  # reject-all end point
    return best / min(cm * p, cf * (1 - p))


class TestSegmentSelect:
    def test_no_interferers_both_policies(self):
        acts = make_acts([[1, 1, 0, 1]])
        for policy in (SOLO_ONLY, SOLO_PLUS_OVERLAP):
            assert np.array_equal(segment_select(acts, 0, policy), [1, 1, 0, 1])

    def test_fully_overlapped_falls_back(self):
        acts = make_acts([[1, 1, 0], [1, 1, 1]])
        assert np.array_equal(segment_select(acts, 0, SOLO_ONLY), [1, 1, 0])

    def test_hand_example(self):
        acts = make_acts([[1, 1, 1], [0, 1, 0]])
        assert np.array_equal(segment_select(acts, 0, SOLO_ONLY), [1, 0, 1])

    def test_silent_target(self):
        acts = make_acts([[0, 0], [1, 1]])
        with pytest.raises(DataError):
            segment_select(acts, 0, SOLO_ONLY)

    def test_unknown_policy(self):
        with pytest.raises(UsageError):
            segment_select(make_acts([[1]]), 0, "everything")

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_b2_mask_contains_b1_mask(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.integers(0, 2, (3, 20))
        data[0, rng.integers(0, 20)] = 1
        acts = make_acts(data)
        b1 = segment_select(acts, 0, SOLO_ONLY)
        b2 = segment_select(acts, 0, SOLO_PLUS_OVERLAP)
        assert np.all(b2 >= b1)


class TestMaskToWaveform:
    def test_concatenates_runs(self):
        clip = AudioClip(np.arange(1, 801) / 1000.0)
        mask = np.array([1, 0, 1, 1, 0])
        out = mask_to_waveform(clip, mask)
        expected = np.concatenate([clip.samples[0:160], clip.samples[320:640]])
        assert np.array_equal(out.samples, expected)

    def test_empty_selection(self):
        clip = AudioClip(np.ones(800))
        with pytest.raises(DataError):
            mask_to_waveform(clip, np.zeros(5))


class TestEer:
    def test_perfect_separation(self):
        assert eer(ScoreSet([0.9, 0.8], [0.1, 0.2])) == 0.0

    def test_identical_distributions(self):
        assert eer(ScoreSet([0.3, 0.7], [0.3, 0.7])) == pytest.approx(50.0)

    def test_hand_example(self):
        assert eer(ScoreSet([0.8, 0.2], [0.6, 0.4])) == pytest.approx(50.0)

    def test_matches_brute_force_on_random_sets(self):
        for seed in range(300):
            rng = np.random.default_rng(seed)
            nt, nn = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            tar = np.round(rng.normal(0.5, 0.4, nt), 3)
            non = np.round(rng.normal(-0.1, 0.4, nn), 3)
            ours = eer(ScoreSet(tar, non))
            assert ours == brute_force_eer(tar, non), seed
            assert 0.0 <= ours <= 100.0

    def test_empty_class_rejected(self):
        with pytest.raises(DataError):
            eer(ScoreSet([], [0.1]))

    @given(st.integers(0, 5000))
    @settings(max_examples=40, deadline=None)
    def test_monotone_transform_invariance(self, seed):
        rng = np.random.default_rng(seed)
        tar = rng.normal(0.5, 0.5, int(rng.integers(2, 30)))
        non = rng.normal(-0.2, 0.5, int(rng.integers(2, 30)))
        base_eer = eer(ScoreSet(tar, non))
        base_dcf = min_dcf(ScoreSet(tar, non))
        for f in (lambda s: 2.0 * s + 1.0, np.tanh):
            assert eer(ScoreSet(f(tar), f(non))) == pytest.approx(base_eer, abs=1e-9)
            assert min_dcf(ScoreSet(f(tar), f(non))) == pytest.approx(base_dcf,
                                                                      abs=1e-9)


class TestMinDcf:
    def test_perfect_separation(self):
        assert min_dcf(ScoreSet([0.9, 0.8], [0.1, 0.2])) == 0.0

    def test_accept_all_operating_point_cost(self):
        # the un-minimized normalized cost at the accept-all point (FAR = 1)
        # evaluates to (1 - p) / min(p, 1 - p) = 99 for p = 0.01
        frr, far = operating_points(ScoreSet([0.5], [0.5]))
        p = 0.01
        costs = (p * frr + (1 - p) * far) / min(p, 1 - p)
        assert costs[0] == pytest.approx(99.0)

    def test_bounded_by_reject_all(self):
        for seed in range(50):
            rng = np.random.default_rng(seed)
            s = ScoreSet(rng.normal(0, 1, 20), rng.normal(0, 1, 20))
            assert 0.0 <= min_dcf(s) <= 1.0 + 1e-12

    def test_matches_brute_force_on_random_sets(self):
        for seed in range(300):
            rng = np.random.default_rng(seed)
            nt, nn = int(rng.integers(1, 40)), int(rng.integers(1, 40))
            tar = np.round(rng.normal(0.5, 0.4, nt), 3)
            non = np.round(rng.normal(-0.1, 0.4, nn), 3)
            assert min_dcf(ScoreSet(tar, non)) == brute_force_min_dcf(tar, non), seed


class TestCosine:
    def test_self_similarity(self, rng):
        v = rng.normal(0, 1, 16)
        assert cosine_score(v, v) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_score(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == 0.0

    def test_zero_norm_rejected(self):
        with pytest.raises(DataError):
            cosine_score(np.zeros(3), np.ones(3))


class TestTrialFiles:
    def test_roundtrip(self, tmp_path):
        trials = [Trial(1, "e1.wav", "m1.wav", "spk003"),
                  Trial(0, "e2.wav", "m1.wav", "spk003"),
                  Trial(1, "e3.wav", "t3.wav", None)]
        path = tmp_path / "trials.txt"
        write_trials(path, trials)
        assert read_trials(path) == trials

    def test_malformed(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("2 a b\n")
        with pytest.raises(DataError):
            read_trials(bad)

    def test_scores_roundtrip(self, tmp_path):
        scores = [0.123456, -0.5, 1.0]
        path = tmp_path / "scores.txt"
        write_scores(path, scores)
        back = read_scores(path)
        assert np.allclose(back, scores, atol=5e-7)
        assert path.read_text().splitlines()[0] == "0\t0.123456"
