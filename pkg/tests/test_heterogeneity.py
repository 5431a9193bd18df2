import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import solve_toeplitz
from scipy.signal import lfilter

from fedsim.errors import ConfigurationError, PreconditionError
from fedsim.heterogeneity import (Waveform, analyze_profiles, blind_snr, client_variation,
                                  clustering_purity, frame_signal, kmeans, levinson_durbin, log_hnr,
                                  loudness, lpc, permutation_entropy, profile_utterance, purity,
                                  voiced_frames, zscore_columns)
from fedsim.synthcorpus import harmonic_noise_signal

SR = 16000


def sine(freq=1000.0, amp=1.0, seconds=0.5):
    t = np.arange(int(SR * seconds)) / SR
    return Waveform(amp * np.sin(2 * np.pi * freq * t), SR)


def noise(seed, n=8000):
    return Waveform(np.random.default_rng(seed).normal(size=n), SR)


def ar2(seed, radius=0.99, freq=500.0, n=8000):
    a = [1.0, -2 * radius * math.cos(2 * math.pi * freq / SR), radius ** 2]
    return Waveform(lfilter([1.0], a, np.random.default_rng(seed).normal(size=n) * 1e-4), SR)


class TestLoudness:
    def test_full_scale_sine(self):
        assert loudness(sine()).value == pytest.approx(-3.0103, abs=0.05)

    def test_halving_drops_six_db(self):
        assert loudness(sine()).value - loudness(sine(amp=0.5)).value == pytest.approx(6.0206, abs=1e-6)

    def test_silence_floor(self):
        track = loudness(Waveform(np.zeros(2000), SR))
        assert track.value == -100.0 and track.flagged

    @given(st.floats(0.01, 100.0))
    def test_gain_equivariance(self, g):
        w = noise(1, 2000)
        assert loudness(w.scaled(g)).value - loudness(w).value == pytest.approx(20 * math.log10(g), abs=1e-9)

    def test_framing(self):
        assert frame_signal(np.arange(10.0), 4, 3).shape == (3, 4)
        assert frame_signal(np.arange(3.0), 4, 1).shape == (1, 4)
        with pytest.raises(ConfigurationError):
            frame_signal(np.arange(3.0), 0, 1)


class TestVoicingAndHNR:
    def test_sine_voiced_and_clamped(self):
        w = sine(200.0)
        assert voiced_frames(w).all()
        assert log_hnr(w).value == 40.0

    def test_noise_unvoiced_and_low_hnr(self):
        fractions = [voiced_frames(noise(s)).mean() for s in range(10)]
        assert max(fractions) < 0.2
        assert np.mean([log_hnr(noise(s), voiced=True).value for s in range(10)]) < 0.0

    def test_equal_power_mix_near_zero_db(self):
        vals = []
        for s in range(10):
            x = sine(200.0).samples + np.random.default_rng(s).normal(size=8000) * math.sqrt(0.5)
            vals.append(log_hnr(Waveform(x, SR), voiced=True).value)
        assert abs(np.mean(vals)) <= 2.0

    def test_zero_signal(self):
        w = Waveform(np.zeros(4000), SR)
        assert not voiced_frames(w).any()
        assert log_hnr(w).undefined and math.isnan(log_hnr(w).value)

    def test_frame_too_short_for_f0(self):
        with pytest.raises(ConfigurationError):
            log_hnr(sine(200.0), frame_ms=5.0)


class TestPermutationEntropy:
    def test_classic_series(self):
        assert permutation_entropy([4, 7, 9, 10, 6, 11, 3], 2, 1) == pytest.approx(0.9183, abs=1e-3)

    def test_monotone_and_constant(self):
        assert permutation_entropy(np.arange(30.0), 4) == 0.0
        assert permutation_entropy(np.ones(30), 3) == 0.0

    def test_iid_near_one(self):
        assert permutation_entropy(np.random.default_rng(0).uniform(size=50_000), 3) >= 0.99

    @settings(max_examples=30)
    @given(st.integers(0, 10_000), st.integers(2, 5))
    def test_monotone_transform_invariance(self, seed, m):
        x = np.random.default_rng(seed).normal(size=200)
        assert permutation_entropy(np.exp(x), m) == permutation_entropy(x, m)

    def test_too_short(self):
        with pytest.raises((ConfigurationError, PreconditionError)):
            permutation_entropy([1.0, 2.0], 3)


class TestLPC:
    def test_levinson_recovers_ar2(self):
        a_true = np.array([1.0, -1.5, 0.7])
        x = lfilter([1.0], a_true, np.random.default_rng(0).normal(size=200_000))
        r = np.array([np.dot(x[: x.size - k], x[k:]) for k in range(3)]) / x.size
        a, err = levinson_durbin(r, 2)
        np.testing.assert_allclose(a, -a_true[1:], atol=0.02)  # predictor convention
        assert err == pytest.approx(1.0, rel=0.05)

    def test_lpc_matches_normal_equations(self):
        frame = np.random.default_rng(1).normal(size=512)
        xw = frame * np.hanning(512)
        r = np.array([np.dot(xw[: 512 - k], xw[k:]) for k in range(5)])
        np.testing.assert_allclose(lpc(frame, 4), solve_toeplitz(r[:4], r[1:]), atol=1e-10)

    def test_ar_process_high_snr(self):
        assert all(blind_snr(ar2(s), voiced=True).value > 20.0 for s in range(5))

    def test_white_noise_low_snr(self):
        assert all(blind_snr(noise(s), voiced=True).value < 3.0 for s in range(5))

    def test_twenty_vs_zero_db_ordering(self):
        for s in range(20):
            rng = np.random.default_rng(s)
            hi = Waveform(harmonic_noise_signal(rng, 8000, SR, 150.0, 8, 1.0, 20.0), SR)
            lo = Waveform(harmonic_noise_signal(rng, 8000, SR, 150.0, 8, 1.0, 0.0), SR)
            assert blind_snr(hi, voiced=True).value > blind_snr(lo, voiced=True).value

    @given(st.floats(0.01, 100.0))
    @settings(max_examples=20, deadline=None)
    def test_gain_invariance(self, g):
        w = ar2(0, n=4000)
        assert blind_snr(w.scaled(g), voiced=True).value == pytest.approx(
            blind_snr(w, voiced=True).value, abs=1e-6)

    def test_no_voiced_frames_undefined(self):
        track = blind_snr(noise(0))
        assert track.undefined and math.isnan(track.value)


class TestClientVariation:
    def test_identical_values(self):
        rep = client_variation({"a": [1.0, 1.0], "b": [1.0, 1.0]})
        assert rep.std_of_means == 0.0 and rep.mean_of_stds == 0.0

    def test_two_means(self):
        rep = client_variation({"a": [0.0], "b": [2.0]})
        assert rep.std_of_means == 1.0 and math.isnan(rep.mean_of_stds) and rep.n_clients == 2

    def test_nan_values_ignored(self):
        rep = client_variation({"a": [1.0, math.nan, 3.0], "b": [math.nan]})
        assert rep.n_clients == 1 and rep.mean_of_means == 2.0 and rep.mean_of_stds == 1.0

    def test_no_clients(self):
        with pytest.raises(PreconditionError):
            client_variation({})


class TestClustering:
    def test_identical_groups_pure(self):
        pts = np.repeat(np.array([[0.0, 0.0], [5.0, 5.0], [0.0, 9.0]]), 4, axis=0)
        labels = np.repeat(["x", "y", "z"], 4)
        assert clustering_purity(pts, labels, seed=3) == 1.0

    def test_single_cluster_is_modal_frequency(self):
        labels = ["a"] * 5 + ["b"] * 3
        assert clustering_purity(np.random.default_rng(0).normal(size=(8, 2)), labels, k=1) == 5 / 8

    def test_separated_blobs(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            pts = np.vstack([rng.normal(size=(50, 2)), rng.normal(size=(50, 2)) + [10.0, 0.0]])
            assert clustering_purity(pts, [0] * 50 + [1] * 50, seed=seed) >= 0.99

    @given(st.permutations(range(4)))
    def test_purity_label_permutation_invariant(self, perm):
        clusters = [0, 0, 1, 1, 2, 2, 3, 3, 0, 1]
        labels = [0, 1, 1, 1, 2, 3, 3, 3, 0, 2]
        assert purity(clusters, [perm[x] for x in labels]) == purity(clusters, labels)

    def test_too_many_clusters(self):
        with pytest.raises(ConfigurationError):
            kmeans(np.zeros((3, 2)), 4)

    def test_duplicate_points_fill_every_cluster(self):
        labels, _ = kmeans(np.array([[0.0]] * 6 + [[1.0]] * 2), 3, seed=0)
        assert len(set(labels.tolist())) >= 2

    def test_zscore(self):
        z = zscore_columns([[1.0, 5.0, math.nan], [3.0, 5.0, 2.0]])
        np.testing.assert_allclose(z, [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])


def test_profile_and_analysis():
    profiles = []
    for c in range(3):
        for j in range(3):
            rng = np.random.default_rng(10 * c + j)
            x = 10 ** (-c) * harmonic_noise_signal(rng, 6000, SR, 120.0 + 40 * c, 6, 1.0, 25.0 - 10 * c)
            profiles.append(profile_utterance(Waveform(x, SR), f"u{c}{j}", f"c{c}"))
    analysis = analyze_profiles(profiles, seed=0)
    assert analysis.purity == 1.0
    assert analysis.reports["loudness_db"].std_of_means > 10.0
    emb = {p.utt_id: (p.client_id, np.array([float(i % 2)])) for i, p in enumerate(profiles)}
    assert analyze_profiles(profiles, 0, emb).purity < 1.0
