import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedsim.data import ClientDataset
from fedsim.errors import ConfigurationError, EmptyRoundError, PreconditionError, ProtocolError
from fedsim.federation import (ClientUpdate, FederationConfig, aggregate, canonical_strategy,
                               local_seed, run_experiment, sample_clients, server_finetune,
                               weights_fedavg, weights_loss_softmax, weights_wer_softmax)
from fedsim.model import LossConfig, evaluate_wer, init_weights, local_train, loss_and_grad
from fedsim.synthcorpus import CorpusSpec, generate

from oracles import central_difference, random_utterance

E = math.e
finite = st.floats(-50, 50, allow_nan=False)


def _update(cid, w, n=1, loss=0.0, wer=0.0):
    return ClientUpdate(cid, np.asarray(w, dtype=float), n, loss, wer)


class TestSampling:
    def test_full_sample_sorted(self):
        assert sample_clients(7, 7, 3, 0) == list(range(7))

    def test_deterministic_and_distinct(self):
        a = sample_clients(50, 10, 4, 11)
        assert a == sample_clients(50, 10, 4, 11)
        assert len(set(a)) == 10 and a == sorted(a)

    def test_uniform_frequencies(self):
        counts = np.bincount([sample_clients(10, 1, r, 0)[0] for r in range(10_000)], minlength=10)
        sigma = math.sqrt(10_000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - 1000) < 3 * sigma)

    def test_k_above_m(self):
        with pytest.raises(ConfigurationError):
            sample_clients(3, 4, 0, 0)


class TestWeights:
    def test_fedavg_examples(self):
        np.testing.assert_allclose(weights_fedavg([2, 3, 5]), [0.2, 0.3, 0.5])
        np.testing.assert_allclose(weights_fedavg([7]), [1.0])
        np.testing.assert_allclose(weights_fedavg([1, 1, 1, 1]), [0.25] * 4)

    def test_loss_examples(self):
        np.testing.assert_allclose(weights_loss_softmax([4.2] * 3), [1 / 3] * 3)
        np.testing.assert_allclose(weights_loss_softmax([0.0, math.log(3)]), [0.75, 0.25])
        np.testing.assert_allclose(weights_loss_softmax([1000, 1001]), [E / (1 + E), 1 / (1 + E)])

    def test_wer_examples(self):
        np.testing.assert_allclose(weights_wer_softmax([0.5, 0.5]), [0.5, 0.5])
        np.testing.assert_allclose(weights_wer_softmax([0.0, 1.0]), [E / (E + 1), 1 / (E + 1)])
        np.testing.assert_allclose(weights_wer_softmax([0.2, 1.2, 2.2]), weights_wer_softmax([0, 1, 2]))

    def test_preconditions(self):
        for fn in (weights_fedavg, weights_loss_softmax, weights_wer_softmax):
            with pytest.raises(PreconditionError):
                fn([])
        with pytest.raises(PreconditionError):
            weights_loss_softmax([1.0, math.inf])
        with pytest.raises(PreconditionError):
            weights_wer_softmax([-0.1])

    @given(st.lists(finite, min_size=1, max_size=12), finite)
    def test_softmax_shift_invariance(self, xs, c):
        np.testing.assert_allclose(weights_loss_softmax(np.add(xs, c)), weights_loss_softmax(xs), atol=1e-12)

    @given(st.lists(st.floats(0, 5), min_size=2, max_size=12), st.data())
    def test_wer_monotone(self, wers, data):
        i = data.draw(st.integers(0, len(wers) - 1))
        before = weights_wer_softmax(wers)
        raised = list(wers)
        raised[i] += 0.5
        after = weights_wer_softmax(raised)
        assert after[i] < before[i]
        assert all(after[j] > before[j] for j in range(len(wers)) if j != i)

    @given(st.lists(st.integers(1, 1000), min_size=1, max_size=10), st.integers(2, 50))
    def test_fedavg_scale_invariant(self, n, c):
        np.testing.assert_allclose(weights_fedavg(np.multiply(n, c)), weights_fedavg(n), atol=1e-15)


class TestAggregate:
    def test_hand_example(self):
        new, rec = aggregate([0.0], [_update(0, [2.0]), _update(1, [4.0])], "fedavg", 1.0)
        np.testing.assert_allclose(new, [3.0])
        assert rec.alphas == (0.5, 0.5) and rec.delta_norm == pytest.approx(3.0)

    def test_single_update_recovers_client(self):
        w = np.random.default_rng(0).normal(size=5)
        new, _ = aggregate(np.zeros(5), [_update(3, w)], "wer", 1.0)
        np.testing.assert_array_equal(new, w)

    def test_zero_server_step(self):
        prev = np.arange(3.0)
        new, _ = aggregate(prev, [_update(0, [9.0, 9.0, 9.0])], "fedavg", 0.0)
        np.testing.assert_array_equal(new, prev)

    @settings(max_examples=30)
    @given(st.permutations(range(5)))
    def test_order_independent(self, perm):
        rng = np.random.default_rng(5)
        ups = [_update(i, rng.normal(size=4), n=i + 1, loss=rng.uniform(), wer=rng.uniform())
               for i in range(5)]
        ref, _ = aggregate(np.zeros(4), ups, "loss", 0.7)
        new, _ = aggregate(np.zeros(4), [ups[i] for i in perm], "loss", 0.7)
        assert np.array_equal(ref, new)

    def test_fedavg_is_weighted_average(self):
        rng = np.random.default_rng(1)
        ups = [_update(i, rng.normal(size=6), n=int(rng.integers(1, 20))) for i in range(4)]
        new, rec = aggregate(rng.normal(size=6), ups, "fedavg", 1.0)
        avg = sum(a * u.new_weights for a, u in zip(rec.alphas, ups))
        np.testing.assert_allclose(new, avg, atol=1e-12)

    def test_non_finite_clients_dropped(self):
        ups = [_update(0, [1.0]), _update(1, [5.0], loss=math.nan), _update(2, [3.0])]
        new, rec = aggregate([0.0], ups, "loss", 1.0)
        np.testing.assert_allclose(new, [2.0])
        assert rec.skipped_ids == (1,) and rec.aggregated_ids == (0, 2)

    def test_errors(self):
        with pytest.raises(ProtocolError):
            aggregate([0.0, 0.0], [_update(0, [1.0])], "fedavg", 1.0)
        with pytest.raises(EmptyRoundError):
            aggregate([0.0], [_update(0, [1.0], wer=math.inf)], "fedavg", 1.0)
        with pytest.raises(EmptyRoundError):
            aggregate([0.0], [], "fedavg", 1.0)

    def test_strategy_aliases(self):
        assert canonical_strategy("wer") == "wer_softmax"
        assert canonical_strategy("loss_softmax") == "loss_softmax"
        with pytest.raises(ConfigurationError):
            canonical_strategy("median")


class TestServerFinetune:
    def test_zero_lr(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=4 * 3 + 4)
        out = server_finetune(w, [random_utterance(rng, 4, 3)], LossConfig(learning_rate_local=0.0))
        np.testing.assert_array_equal(out, w)

    def test_single_sample_matches_local_step(self):
        rng = np.random.default_rng(3)
        u = random_utterance(rng, 4, 3)
        cfg = LossConfig(learning_rate_local=0.2, local_epochs=1, batch_size=1)
        w = rng.normal(size=16)
        np.testing.assert_allclose(server_finetune(w, [u], cfg), local_train(w, [u], cfg, 0)[0], atol=1e-14)
        fd = central_difference(lambda v: loss_and_grad(v, u, cfg)[0], w)
        np.testing.assert_allclose(server_finetune(w, [u], cfg), w - 0.2 * fd, rtol=1e-4, atol=1e-8)

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            server_finetune(np.zeros(4), [], LossConfig())


def _small_clients(seed=0, speakers=6):
    corpus = generate(CorpusSpec(speakers=speakers, seed=seed, vocab_size=4, feature_dim=3))
    clients = [ClientDataset(i, corpus.by_speaker()[s]) for i, s in enumerate(corpus.speakers)]
    return corpus, clients


class TestRunExperiment:
    def test_single_client_collapse(self):
        corpus, clients = _small_clients()
        cfg = FederationConfig(rounds=1, clients_per_round=1, total_clients=1)
        w0 = init_weights(4, 3, seed=1)
        recs = run_experiment(cfg, clients[:1], [], corpus.utterances, w0)
        expected, _ = local_train(w0, clients[0].train, cfg.local, local_seed(cfg.seed, 1))
        np.testing.assert_array_equal(recs[0].global_weights_after, expected)

    def test_identical_data_recovers_centralised(self):
        corpus, clients = _small_clients()
        data = clients[0].train
        same = [ClientDataset(i, data) for i in range(4)]
        cfg = FederationConfig(rounds=1, clients_per_round=4, total_clients=4)
        w0 = init_weights(4, 3, seed=2)
        recs = run_experiment(cfg, same, [], corpus.utterances, w0)
        expected, _ = local_train(w0, data, cfg.local, local_seed(cfg.seed, 1))
        np.testing.assert_allclose(recs[0].global_weights_after, expected, atol=1e-9, rtol=0)

    def test_deterministic_with_workers(self):
        corpus, clients = _small_clients()
        cfg = FederationConfig(rounds=3, clients_per_round=3, total_clients=6, strategy="wer",
                               server_finetune=True, server_holdout_size=4)
        w0 = init_weights(4, 3)
        a = run_experiment(cfg, clients, corpus.utterances[:4], corpus.utterances, w0)
        b = run_experiment(cfg, clients, corpus.utterances[:4], corpus.utterances, w0, workers=3)
        for ra, rb in zip(a, b):
            assert ra.sampled_ids == rb.sampled_ids and ra.alphas == rb.alphas
            assert np.array_equal(ra.global_weights_after, rb.global_weights_after)
            assert ra.centralized_val_wer == rb.centralized_val_wer
            assert math.isclose(sum(ra.alphas), 1.0, abs_tol=1e-9)

    def test_failing_clients_skipped_and_empty_round_flagged(self):
        corpus, clients = _small_clients()
        bad = random_utterance(np.random.default_rng(0), 4, 3)
        bad = type(bad)(bad.utt_id, "x", bad.features[:0], bad.tokens, ())  # zero frames: infeasible
        broken = [ClientDataset(i, [bad]) for i in range(2)]
        cfg = FederationConfig(rounds=2, clients_per_round=2, total_clients=2)
        w0 = init_weights(4, 3, seed=3)
        recs = run_experiment(cfg, broken, [], corpus.utterances, w0)
        assert all(r.empty for r in recs)
        np.testing.assert_array_equal(recs[-1].global_weights_after, w0)

    def test_finetune_without_holdout(self):
        _, clients = _small_clients()
        cfg = FederationConfig(rounds=1, clients_per_round=1, total_clients=6, server_finetune=True)
        with pytest.raises(ConfigurationError):
            run_experiment(cfg, clients, [], clients[0].train, init_weights(4, 3))

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            FederationConfig(clients_per_round=11, total_clients=10)
        with pytest.raises(ConfigurationError):
            FederationConfig(server_lr=0.0)

    @pytest.mark.parametrize("strategy", ["fedavg", "loss", "wer"])
    def test_iid_smoke_improves(self, strategy):
        corpus = generate(CorpusSpec(speakers=12, seed=4, vocab_size=5, feature_dim=6,
                                     per_speaker_noise_std=(0.3, 0.5)))
        clients = [ClientDataset(i, corpus.by_speaker()[s]) for i, s in enumerate(corpus.speakers[:10])]
        val = corpus.subset(corpus.speakers[10:]).utterances
        w0 = init_weights(5, 6)
        cfg = FederationConfig(rounds=20, clients_per_round=5, total_clients=10, strategy=strategy,
                               local=LossConfig(local_epochs=1))
        recs = run_experiment(cfg, clients, [], val, w0)
        assert recs[-1].centralized_val_wer < evaluate_wer(w0, val).wer
