import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from avdf.corpus import CorpusSpec, DualLabel, PhonemeSeq, sample_transcript


@pytest.fixture
def small_spec():
    return CorpusSpec(counts=(10, 10, 10, 10), min_frames=8, max_frames=12,
                      noise_std=0.05, master_seed=7)


@pytest.fixture
def clean_spec():
    return CorpusSpec(counts=(4, 4, 4, 4), min_frames=8, max_frames=12,
                      noise_std=0.0, correlation_strength=1.0, master_seed=3)


def make_transcript(rng: np.random.Generator, n_phonemes: int = 40, length: int = 4) -> PhonemeSeq:
    return sample_transcript(rng, n_phonemes, length)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
