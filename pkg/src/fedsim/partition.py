"""Client topologies built from a speaker-labelled corpus.

Every scheme assigns whole speakers to clients, so no speaker ever appears
in two clients.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ClientDataset, Corpus
from .errors import ConfigurationError, DataError, PreconditionError

SCHEMES = ("cross_silo", "per_speaker", "speaker_pairs")


@dataclass
class PartitionPlan:
    client_assignments: dict[int, list[str]]
    scheme: str
    client_speakers: dict[int, list[str]] = field(default_factory=dict)
    holdout_fraction: float | None = None
    holdout_min: int | None = None
    test_assignments: dict[int, list[str]] = field(default_factory=dict)
    flagged: frozenset = frozenset()

    @property
    def num_clients(self) -> int:
        return len(self.client_assignments)

    def train_ids(self, cid: int) -> list[str]:
        test = set(self.test_assignments.get(cid, ()))
        return [u for u in self.client_assignments[cid] if u not in test]

    def to_json(self) -> dict:
        clients = {}
        for cid in sorted(self.client_assignments):
            clients[str(cid)] = {
                "speakers": self.client_speakers.get(cid, []),
                "utterances": self.client_assignments[cid],
                "train": self.train_ids(cid),
                "test": self.test_assignments.get(cid, []),
                "no_local_test": cid in self.flagged,
            }
        return {
            "scheme": self.scheme,
            "holdout_fraction": self.holdout_fraction,
            "holdout_min": self.holdout_min,
            "clients": clients,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PartitionPlan":
        try:
            clients = doc["clients"]
            plan = cls(
                client_assignments={int(k): list(v["utterances"]) for k, v in clients.items()},
                scheme=doc["scheme"],
                client_speakers={int(k): list(v.get("speakers", [])) for k, v in clients.items()},
                holdout_fraction=doc.get("holdout_fraction"),
                holdout_min=doc.get("holdout_min"),
                test_assignments={int(k): list(v["test"]) for k, v in clients.items() if v.get("test")},
                flagged=frozenset(int(k) for k, v in clients.items() if v.get("no_local_test")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed partition plan: {exc}") from None
        return plan

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PartitionPlan":
        return cls.from_json(json.loads(Path(path).read_text()))

    def client_datasets(self, corpus: Corpus) -> list[ClientDataset]:
        utts = corpus.by_id()
        out = []
        for cid in sorted(self.client_assignments):
            try:
                train = [utts[u] for u in self.train_ids(cid)]
                test = [utts[u] for u in self.test_assignments.get(cid, [])]
            except KeyError as exc:
                raise DataError(f"plan references unknown utterance {exc}") from None
            out.append(ClientDataset(cid, train, test))
        return out


def _shuffled_speakers(corpus: Corpus, seed: int) -> list[str]:
    speakers = corpus.speakers
    order = np.random.default_rng([seed, 0x5B1]).permutation(len(speakers))
    return [speakers[i] for i in order]


def _plan_from_groups(corpus: Corpus, groups: list[list[str]], scheme: str) -> PartitionPlan:
    by_spk = corpus.by_speaker()
    assignments, speakers = {}, {}
    for cid, group in enumerate(groups):
        speakers[cid] = sorted(group)
        assignments[cid] = [u.utt_id for s in speakers[cid] for u in by_spk[s]]
    return PartitionPlan(assignments, scheme, speakers)


def split_warmup(corpus: Corpus, target_fraction: float, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Move the largest speakers into a centralised warm-up set.

    Speakers are taken in descending utterance count (ties broken by a
    seeded shuffle) until the warm-up set first holds ``target_fraction`` of
    all samples; at least one speaker is always left for federation.
    """
    if not 0.0 < target_fraction < 1.0:
        raise ConfigurationError("target_fraction must lie in (0, 1)")
    counts = corpus.speaker_counts()
    if len(counts) < 2:
        raise PreconditionError("warm-up split needs at least two speakers")
    order = sorted(_shuffled_speakers(corpus, seed), key=lambda s: -counts[s])
    total = sum(counts.values())
    warm, taken = [], 0
    for spk in order[:-1]:
        if taken >= target_fraction * total:
            break
        warm.append(spk)
        taken += counts[spk]
    rest = [s for s in order if s not in set(warm)]
    return corpus.subset(warm), corpus.subset(rest)


def make_cross_silo(corpus: Corpus, silos: int = 10, seed: int = 0) -> PartitionPlan:
    """Balanced silos: each speaker goes to the currently smallest silo.

    Speakers are shuffled and then visited largest-first, which keeps the
    silo sizes close even for heavy-tailed speaker counts.
    """
    speakers = corpus.speakers
    if silos < 1 or silos > len(speakers):
        raise ConfigurationError(f"cannot build {silos} silos from {len(speakers)} speakers")
    counts = corpus.speaker_counts()
    order = sorted(_shuffled_speakers(corpus, seed), key=lambda s: -counts[s])
    groups: list[list[str]] = [[] for _ in range(silos)]
    sizes = [0] * silos
    for spk in order:
        i = min(range(silos), key=lambda j: (sizes[j], j))
        groups[i].append(spk)
        sizes[i] += counts[spk]
    return _plan_from_groups(corpus, groups, "cross_silo")


def make_per_speaker(corpus: Corpus) -> PartitionPlan:
    return _plan_from_groups(corpus, [[s] for s in corpus.speakers], "per_speaker")


def make_speaker_pairs(corpus: Corpus, seed: int = 0) -> PartitionPlan:
    """Two speakers per device; an odd speaker out gets a device of their own."""
    order = _shuffled_speakers(corpus, seed)
    if len(order) < 2:
        raise PreconditionError("pairing needs at least two speakers")
    groups = [order[i:i + 2] for i in range(0, len(order), 2)]
    return _plan_from_groups(corpus, groups, "speaker_pairs")


def make_plan(corpus: Corpus, scheme: str, seed: int = 0, silos: int = 10) -> PartitionPlan:
    if scheme == "cross_silo":
        return make_cross_silo(corpus, silos, seed)
    if scheme == "per_speaker":
        return make_per_speaker(corpus)
    if scheme == "speaker_pairs":
        return make_speaker_pairs(corpus, seed)
    raise ConfigurationError(f"unknown scheme {scheme!r}; pick one of {SCHEMES}")


def holdout_size(n_k: int, fraction: float, min_samples: int) -> int:
    """Local test size, or 0 for clients too small to spare one."""
    if n_k <= 2 * min_samples:
        return 0
    return max(min_samples, math.floor(fraction * n_k + 0.5))


def make_local_holdout(plan: PartitionPlan, fraction: float = 0.1, min_samples: int = 2,
                       seed: int = 0) -> PartitionPlan:
    """Carve a seeded local test split out of every client."""
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError("holdout fraction must lie in (0, 1)")
    if min_samples < 1:
        raise ConfigurationError("holdout minimum must be >= 1")
    tests, flagged = {}, set()
    for cid in sorted(plan.client_assignments):
        utts = plan.client_assignments[cid]
        size = holdout_size(len(utts), fraction, min_samples)
        if size == 0:
            flagged.add(cid)
            continue
        picks = np.random.default_rng([seed, 0x7E57, cid]).choice(len(utts), size=size, replace=False)
        tests[cid] = [utts[i] for i in sorted(picks)]
    return PartitionPlan(dict(plan.client_assignments), plan.scheme, dict(plan.client_speakers),
                         fraction, min_samples, tests, frozenset(flagged))
