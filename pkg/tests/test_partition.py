import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.errors import ConfigurationError, PreconditionError
from fedsim.partition import (PartitionPlan, holdout_size, make_cross_silo, make_local_holdout,
                              make_per_speaker, make_plan, make_speaker_pairs, split_warmup)

from helpers import counts_corpus

count_lists = st.lists(st.integers(1, 30), min_size=2, max_size=25)


def _speaker_of(utt_id):
    return utt_id.split("-")[0]


def _check_partition(plan, corpus):
    seen = [u for ids in plan.client_assignments.values() for u in ids]
    assert sorted(seen) == sorted(u.utt_id for u in corpus.utterances)
    owner = {}
    for cid, ids in plan.client_assignments.items():
        for u in ids:
            assert owner.setdefault(_speaker_of(u), cid) == cid


class TestWarmup:
    def test_overshoot_accepted(self):
        warm, fl = split_warmup(counts_corpus([90, 10]), 0.5)
        assert warm.speakers == ["s000"] and fl.speakers == ["s001"]

    def test_equal_counts(self):
        warm, _ = split_warmup(counts_corpus([5] * 7), 0.5)
        assert len(warm.speakers) == 4

    def test_feasibility_floor(self):
        warm, fl = split_warmup(counts_corpus([4, 5, 6]), 0.999)
        assert len(warm.speakers) == 2 and fl.speakers == ["s000"]

    def test_errors(self):
        with pytest.raises(PreconditionError):
            split_warmup(counts_corpus([10]), 0.5)
        with pytest.raises(ConfigurationError):
            split_warmup(counts_corpus([1, 2]), 1.0)

    @given(count_lists, st.floats(0.05, 0.95), st.integers(0, 5))
    def test_disjoint_cover_largest_first(self, counts, frac, seed):
        corpus = counts_corpus(counts)
        warm, fl = split_warmup(corpus, frac, seed)
        assert set(warm.speakers).isdisjoint(fl.speakers)
        assert set(warm.speakers) | set(fl.speakers) == set(corpus.speakers)
        assert fl.speakers
        if warm.speakers:
            c = corpus.speaker_counts()
            assert min(c[s] for s in warm.speakers) >= max(c[s] for s in fl.speakers)


class TestSchemes:
    def test_cross_silo_exact_balance(self):
        plan = make_cross_silo(counts_corpus([10] * 20), 10, seed=3)
        assert all(len(v) == 20 for v in plan.client_assignments.values())
        assert all(len(v) == 2 for v in plan.client_speakers.values())

    def test_cross_silo_one_per_silo(self):
        plan = make_cross_silo(counts_corpus(range(1, 11)), 10)
        assert all(len(v) == 1 for v in plan.client_speakers.values())

    def test_cross_silo_errors_and_determinism(self):
        corpus = counts_corpus([3] * 5)
        with pytest.raises(ConfigurationError):
            make_cross_silo(corpus, 6)
        assert make_cross_silo(corpus, 2, 9).to_json() == make_cross_silo(corpus, 2, 9).to_json()

    def test_cross_silo_balance_equal_counts(self):
        plan = make_cross_silo(counts_corpus([7] * 103), 10, seed=1)
        sizes = np.array([len(v) for v in plan.client_assignments.values()])
        assert np.all(np.abs(sizes - sizes.mean()) <= 0.1 * sizes.mean())

    @settings(max_examples=25)
    @given(st.integers(0, 1000))
    def test_cross_silo_ratio_on_heavy_tail(self, seed):
        counts = np.random.default_rng(seed).integers(1, 60, size=120)
        plan = make_cross_silo(counts_corpus(counts), 10, seed)
        sizes = [len(v) for v in plan.client_assignments.values()]
        assert max(sizes) / min(sizes) <= 1.3

    def test_per_speaker(self):
        corpus = counts_corpus([2, 5, 1])
        plan = make_per_speaker(corpus)
        assert plan.num_clients == 3
        assert sorted(len(v) for v in plan.client_assignments.values()) == [1, 2, 5]

    def test_pairs(self):
        assert make_speaker_pairs(counts_corpus([1] * 6)).num_clients == 3
        plan = make_speaker_pairs(counts_corpus([1, 2, 3, 4, 5, 6, 7]), seed=2)
        assert plan.num_clients == 4
        c = counts_corpus([1, 2, 3, 4, 5, 6, 7]).speaker_counts()
        for cid, spks in plan.client_speakers.items():
            assert len(plan.client_assignments[cid]) == sum(c[s] for s in spks)

    @given(count_lists, st.sampled_from(["cross_silo", "per_speaker", "speaker_pairs"]), st.integers(0, 9))
    def test_every_scheme_partitions(self, counts, scheme, seed):
        corpus = counts_corpus(counts)
        plan = make_plan(corpus, scheme, seed, silos=min(2, len(counts)))
        _check_partition(plan, corpus)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigurationError):
            make_plan(counts_corpus([1, 1]), "random")


class TestHoldout:
    @pytest.mark.parametrize("n,expected", [(25, 3), (5, 2), (3, 0), (4, 0), (100, 10), (15, 2)])
    def test_sizes(self, n, expected):
        assert holdout_size(n, 0.1, 2) == expected

    def test_plan_split(self):
        corpus = counts_corpus([25, 5, 3])
        plan = make_local_holdout(make_per_speaker(corpus), 0.1, 2, seed=4)
        assert [len(plan.test_assignments.get(c, [])) for c in range(3)] == [3, 2, 0]
        assert plan.flagged == frozenset({2})
        clients = plan.client_datasets(corpus)
        assert [c.n_k for c in clients] == [22, 3, 3]
        assert not clients[2].has_local_test
        for c in clients:
            assert not {u.utt_id for u in c.train} & {u.utt_id for u in c.test}

    def test_json_round_trip(self, tmp_path):
        corpus = counts_corpus([12, 7, 4, 9])
        plan = make_local_holdout(make_cross_silo(corpus, 2, 1), 0.1, 2, 1)
        plan.save(tmp_path / "plan.json")
        again = PartitionPlan.load(tmp_path / "plan.json")
        assert again.to_json() == plan.to_json()
        assert [c.n_k for c in again.client_datasets(corpus)] == [c.n_k for c in plan.client_datasets(corpus)]

    def test_invalid(self):
        plan = make_per_speaker(counts_corpus([4]))
        with pytest.raises(ConfigurationError):
            make_local_holdout(plan, 0.0, 2)
        with pytest.raises(ConfigurationError):
            make_local_holdout(plan, 0.1, 0)
