"""Small corpus builders shared by the tests."""
from __future__ import annotations

import numpy as np

from fedsim.data import Corpus, Utterance


def counts_corpus(counts, prefix="s") -> Corpus:
    """A corpus whose speaker ``i`` holds ``counts[i]`` trivial utterances."""
    utts = []
    for i, n in enumerate(counts):
        spk = f"{prefix}{i:03d}"
        for j in range(n):
            utts.append(Utterance(f"{spk}-{j}", spk, np.zeros((3, 2)), (1,), (0, 1, 0)))
    return Corpus(utts, vocab_size=2, feature_dim=2)
