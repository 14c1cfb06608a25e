from __future__ import annotations

import numpy as np
import pytest

from gse.audio import ActivityMatrix, AudioClip
from gse.mixture import synth_corpus


@pytest.fixture(scope="session")
def tiny_corpus():
    """Small deterministic corpus shared by unit tests: 6 speakers x 3 utts."""
    return synth_corpus(6, 3, seed=1234)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


def make_acts(rows, ids=None) -> ActivityMatrix:
    rows = np.asarray(rows)
    return ActivityMatrix(rows, tuple(ids) if ids else ())


def tone_clip(freq=1000.0, duration_s=1.0, sr=16000, amp=0.3) -> AudioClip:
    t = np.arange(int(duration_s * sr)) / sr
    return AudioClip(amp * np.sin(2 * np.pi * freq * t), sr)
