import numpy as np
import pytest

from gse.audio import activity_from_spans, num_frames
from gse.errors import DataError, UsageError
from gse.mixture import (MixtureSample, Utterance, by_speaker, db_to_gain,
                         load_corpus, make_one_vs_many, make_training_mixture,
                         overlap_ratio, read_manifest, single_speaker_duration,
                         split_corpus, synth_conversation, synth_corpus,
                         write_corpus, write_manifest)

from conftest import make_acts


class _EdgeRng:
    """Stub generator pinning uniform() to one end of its range."""

    def __init__(self, low_end=True):
        self.low_end = low_end

    def uniform(self, lo=0.0, hi=1.0):
        return lo if self.low_end else hi

    def integers(self, lo, hi=None):
        return lo if hi is None else lo


class TestSynthCorpus:
    def test_same_seed_bit_identical(self):
        a = synth_corpus(3, 2, seed=7)
        b = synth_corpus(3, 2, seed=7)
        assert len(a) == len(b) == 6
        for ua, ub in zip(a, b):
            assert ua.utterance_id == ub.utterance_id
            assert np.array_equal(ua.clip.samples, ub.clip.samples)

    def test_distinct_seeds_distinct_audio(self):
        a = synth_corpus(2, 1, seed=1)
        b = synth_corpus(2, 1, seed=2)
        assert not np.array_equal(a[0].clip.samples, b[0].clip.samples)

    def test_durations_in_range(self, tiny_corpus):
        for utt in tiny_corpus:
            assert 3.0 <= utt.clip.duration_s <= 8.0

    def test_speakers_have_distinct_longterm_spectra(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        spectra = []
        for sid in sorted(utts)[:3]:
            wav = utts[sid][0].clip.samples[:48000]
            spec = np.abs(np.fft.rfft(wav, n=8192))
            spectra.append(spec / np.linalg.norm(spec))
        for i in range(len(spectra)):
            for j in range(i + 1, len(spectra)):
                assert np.linalg.norm(spectra[i] - spectra[j]) > 0.05

    def test_needs_two_speakers(self):
        with pytest.raises(UsageError):
            synth_corpus(1, 2, seed=0)


class TestDbToGain:
    def test_zero_db(self):
        assert db_to_gain(0.0) == 1.0

    def test_minus_five(self):
        assert db_to_gain(-5.0) == pytest.approx(0.5623413251903491, rel=1e-12)

    def test_symmetry(self):
        assert db_to_gain(5.0) * db_to_gain(-5.0) == pytest.approx(1.0, rel=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(DataError):
            db_to_gain(float("nan"))


class TestTrainingMixture:
    def test_constraints(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        for seed in range(5):
            mix = make_training_mixture(utts, np.random.default_rng(seed))
            assert len(set(mix.speaker_ids)) == 3
            starts = sorted(p.start for p in mix.placements)
            for a, b in zip(starts, starts[1:]):
                assert b - a >= 0.5 * 16000
            for p in mix.placements:
                assert 3.0 * 16000 <= p.length <= 6.0 * 16000

    def test_waveform_is_exact_sum_of_placed_crops(self, tiny_corpus):
        from gse.mixture import _crop
        utts = by_speaker(tiny_corpus)
        mix = make_training_mixture(utts, np.random.default_rng(3))
        by_utt = {u.utterance_id: u for u in tiny_corpus}
        total = max(p.start + p.length for p in mix.placements)
        recon = np.zeros(total)
        for p in mix.placements:
            crop = _crop(by_utt[p.utterance_id], p.length, p.source_offset)
            recon[p.start:p.start + p.length] += p.gain * crop
        assert np.array_equal(recon, mix.clip.samples)

    def test_activity_regenerates_from_placements(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        mix = make_training_mixture(utts, np.random.default_rng(11))
        L = mix.acts.n_frames
        for row, p in zip(mix.acts.data, mix.placements):
            regen = activity_from_spans([(p.start, p.start + p.length)], L)
            assert np.array_equal(row, regen)

    def test_gain_realizes_rms_ratio(self, tiny_corpus):
        from gse.mixture import _crop
        utts = by_speaker(tiny_corpus)
        mix = make_training_mixture(utts, np.random.default_rng(21))
        by_utt = {u.utterance_id: u for u in tiny_corpus}

        def rms(p):
            crop = _crop(by_utt[p.utterance_id], p.length, p.source_offset)
            return np.sqrt(np.mean((p.gain * crop) ** 2))

        ref = rms(mix.placements[0])
        for p in mix.placements[1:]:
            ratio_db = 20 * np.log10(rms(p) / ref)
            assert -5.0 <= ratio_db <= 5.0 + 1e-9

    def test_seed_reproducibility(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        m1 = make_training_mixture(utts, np.random.default_rng(5))
        m2 = make_training_mixture(utts, np.random.default_rng(5))
        assert np.array_equal(m1.clip.samples, m2.clip.samples)
        assert m1.placements == m2.placements

    def test_needs_three_speakers(self, tiny_corpus):
        two = {k: v for k, v in list(by_speaker(tiny_corpus).items())[:2]}
        with pytest.raises(UsageError):
            make_training_mixture(two, np.random.default_rng(0))


class TestOneVsMany:
    def test_zero_delays_start_together(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        sids = sorted(utts)
        mix = make_one_vs_many(utts[sids[0]][0],
                               [utts[s][0] for s in sids[1:4]], _EdgeRng(True))
        assert all(p.start == 0 for p in mix.placements)
        assert overlap_ratio(mix.acts, mix.target_index(sids[0])) > 95.0

    def test_full_delays_chain_without_overlap(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        sids = sorted(utts)
        mix = make_one_vs_many(utts[sids[0]][0],
                               [utts[s][0] for s in sids[1:4]], _EdgeRng(False))
        ordered = sorted(mix.placements, key=lambda p: p.start)
        for prev, nxt in zip(ordered, ordered[1:]):
            assert nxt.start >= prev.start + prev.length - 1
        assert overlap_ratio(mix.acts, mix.target_index(sids[0])) < 2.0

    def test_speaker_collision_rejected(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        sids = sorted(utts)
        with pytest.raises(DataError):
            make_one_vs_many(utts[sids[0]][0],
                             [utts[sids[0]][1], utts[sids[1]][0], utts[sids[2]][0]],
                             np.random.default_rng(0))

    def test_monte_carlo_mean_overlap(self, tiny_corpus):
        # oracle for the placement recipe: sampled mean target overlap
        utts = by_speaker(tiny_corpus)
        sids = sorted(utts)
        rng = np.random.default_rng(99)
        ratios = []
        for _ in range(2000):
            order = rng.permutation(len(sids))
            target = sids[order[0]]
            others = [sids[i] for i in order[1:4]]
            pick = lambda s: utts[s][rng.integers(0, len(utts[s]))]
            mix = make_one_vs_many(pick(target), [pick(s) for s in others], rng)
            ratios.append(overlap_ratio(mix.acts, mix.target_index(target)))
        mean = float(np.mean(ratios))
        assert 40.0 <= mean <= 75.0, mean
        assert any(r == 100.0 for r in ratios)


class TestOverlapStats:
    def test_no_interferers(self):
        acts = make_acts([[1, 1, 1, 0]])
        assert overlap_ratio(acts, 0) == 0.0

    def test_fully_covered(self):
        acts = make_acts([[1, 1], [1, 1]])
        assert overlap_ratio(acts, 0) == 100.0

    def test_hand_example(self):
        acts = make_acts([[1, 1, 1, 1], [0, 1, 1, 0]])
        assert overlap_ratio(acts, 0) == 50.0

    def test_silent_target_rejected(self):
        acts = make_acts([[0, 0], [1, 1]])
        with pytest.raises(DataError):
            overlap_ratio(acts, 0)

    def test_solo_duration(self):
        acts = make_acts([[1, 1, 0, 0], [0, 1, 1, 0]])
        assert single_speaker_duration(acts, 0, 0.01) == pytest.approx(0.01)

    def test_solo_duration_fully_overlapped(self):
        acts = make_acts([[1, 1], [1, 1]])
        assert single_speaker_duration(acts, 0) == 0.0

    def test_consistency_ratio_100_means_zero_solo(self, rng):
        for _ in range(20):
            data = rng.integers(0, 2, (3, 30))
            data[0, 0] = 1
            acts = make_acts(data)
            if overlap_ratio(acts, 0) == 100.0:
                assert single_speaker_duration(acts, 0) == 0.0


class TestConversation:
    def test_zero_overlap_fixture(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        sids = sorted(utts)[:3]
        conv = synth_conversation(utts, sids, np.random.default_rng(4),
                                  target_duration_s=30.0, overlap_prob=0.0)
        total = conv.acts.data.sum(axis=0)
        assert total.max() <= 1  # never two speakers at once

    def test_overlapped_conversation_has_overlap(self, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        sids = sorted(utts)[:3]
        conv = synth_conversation(utts, sids, np.random.default_rng(4),
                                  target_duration_s=40.0, overlap_prob=0.7)
        assert (conv.acts.data.sum(axis=0) > 1).any()


class TestCorpusIO:
    def test_roundtrip(self, tmp_path):
        corpus = synth_corpus(2, 2, seed=3)
        write_corpus(corpus, tmp_path / "corp")
        loaded = load_corpus(tmp_path / "corp")
        assert [u.utterance_id for u in loaded] == [u.utterance_id for u in corpus]
        # wav quantization to int16 only
        for a, b in zip(corpus, loaded):
            assert np.abs(a.clip.samples - b.clip.samples).max() <= 1.0 / 32768

    def test_split(self):
        corpus = synth_corpus(2, 3, seed=3)
        train, evalset = split_corpus(corpus, 2)
        assert len(train) == 4 and len(evalset) == 2
        assert all(u.utterance_id.endswith("u02") for u in evalset)


class TestManifest:
    def test_roundtrip_bit_exact(self, tmp_path, tiny_corpus):
        utts = by_speaker(tiny_corpus)
        rng = np.random.default_rng(8)
        records = []
        for k in range(3):
            mix = make_training_mixture(utts, rng)
            records.append((f"mix{k}", mix.speaker_ids[0], mix,
                            f"mix{k}.wav", f"mix{k}.act"))
        path = tmp_path / "manifest.tsv"
        write_manifest(path, records)
        entries = read_manifest(path)
        assert len(entries) == 3
        for entry, (mid, target, mix, wav, act) in zip(entries, records):
            assert entry.mixture_id == mid and entry.target_speaker == target
            for (uid, start_s, gain), p in zip(entry.placements, mix.placements):
                assert uid == p.utterance_id
                assert round(start_s * 16000) == p.start  # 6 decimals are exact
        # re-writing parsed floats reproduces the bytes
        text = path.read_text()
        rewritten = "\n".join(
            "\t".join([e.mixture_id, e.target_speaker,
                       ";".join(f"{u},{s:.6f},{g:.6f}" for u, s, g in e.placements),
                       e.wav_path, e.activity_path])
            for e in entries) + "\n"
        assert rewritten == text

    def test_malformed_rejected(self, tmp_path):
        bad = tmp_path / "bad.tsv"
        bad.write_text("id\ttarget\tnotaplacement\tw.wav\ta.act\n")
        with pytest.raises(DataError):
            read_manifest(bad)
