"""Containers for utterances, corpora and per-client datasets."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DataError

BLANK = 0


@dataclass(frozen=True, eq=False)
class Utterance:
    utt_id: str
    speaker_id: str
    features: np.ndarray  # (T_x, D)
    tokens: tuple[int, ...]
    alignment: tuple[int, ...]

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


def collapse(path: Iterable[int], blank: int = BLANK) -> list[int]:
    """CTC collapse: merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for label in path:
        label = int(label)
        if label != prev and label != blank:
            out.append(label)
        prev = label
    return out


@dataclass
class Corpus:
    utterances: list[Utterance]
    vocab_size: int
    feature_dim: int
    noisy_speakers: frozenset = frozenset()
    spec: dict | None = None

    def __post_init__(self):
        ids = [u.utt_id for u in self.utterances]
        if len(ids) != len(set(ids)):
            raise DataError("utterance ids must be unique")

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.utterances})

    def by_speaker(self) -> dict[str, list[Utterance]]:
        groups: dict[str, list[Utterance]] = {}
        for u in self.utterances:
            groups.setdefault(u.speaker_id, []).append(u)
        return {k: groups[k] for k in sorted(groups)}

    def speaker_counts(self) -> dict[str, int]:
        counts = Counter(u.speaker_id for u in self.utterances)
        return {k: counts[k] for k in sorted(counts)}

    def by_id(self) -> dict[str, Utterance]:
        return {u.utt_id: u for u in self.utterances}

    def subset(self, speakers) -> "Corpus":
        keep = set(speakers)
        return Corpus(
            [u for u in self.utterances if u.speaker_id in keep],
            self.vocab_size,
            self.feature_dim,
            frozenset(s for s in self.noisy_speakers if s in keep),
            self.spec,
        )


@dataclass
class ClientDataset:
    """One client's training utterances and its local test split."""

    client_id: int
    train: list[Utterance]
    test: list[Utterance] = field(default_factory=list)

    @property
    def n_k(self) -> int:
        return len(self.train)

    @property
    def has_local_test(self) -> bool:
        return len(self.test) > 0

    @property
    def speakers(self) -> list[str]:
        return sorted({u.speaker_id for u in self.train + self.test})
