"""Corpus heterogeneity analysis on raw waveforms.

Per utterance we measure loudness, log harmonicity-to-noise ratio,
permutation entropy, a blind LPC-residual SNR over voiced frames and the
voiced fraction.  Per-client summaries of those values give the inter-client
(spread of client means) and intra-client (spread of client stds) variation,
and k-means purity on the profile vectors measures how separable clients are.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import permutations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, PreconditionError, UndefinedStatisticError
from .metrics import excess_kurtosis, population_std

LOUDNESS_FLOOR_DB = -100.0
HNR_CLAMP_DB = (-20.0, 40.0)
FEATURES = ("loudness_db", "log_hnr_db", "perm_entropy", "blind_snr_db", "voiced_fraction")


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise PreconditionError("waveform must be a non-empty 1-D signal")
        if self.sample_rate <= 0:
            raise PreconditionError("sample rate must be positive")
        object.__setattr__(self, "samples", samples)

    def scaled(self, gain: float) -> "Waveform":
        return Waveform(self.samples * gain, self.sample_rate)


@dataclass(frozen=True)
class FrameTrack:
    """Per-frame values plus their utterance-level summary."""

    per_frame: np.ndarray
    value: float
    undefined: bool = False
    flagged: bool = False


@dataclass(frozen=True)
class AnalysisConfig:
    frame_ms: float = 32.0
    hop_ms: float = 10.0
    f0_range: tuple = (75.0, 400.0)
    yin_threshold: float = 0.15
    pe_order: int = 4
    pe_delay: int = 1
    lpc_order: int = 10


def _samples(ms: float, sr: int) -> int:
    return max(1, int(round(ms * sr / 1000.0)))


def frame_signal(x, frame_len: int, hop: int) -> np.ndarray:
    """Full frames only; a signal shorter than one frame becomes one zero-padded frame."""
    x = np.asarray(x, dtype=np.float64)
    if frame_len < 1 or hop < 1:
        raise ConfigurationError("frame length and hop must be at least one sample")
    if x.size < frame_len:
        return np.pad(x, (0, frame_len - x.size))[None, :]
    return sliding_window_view(x, frame_len)[::hop]


# --- loudness -------------------------------------------------------------

def loudness(w: Waveform, frame_ms: float = 32.0, hop_ms: float = 10.0) -> FrameTrack:
    """Frame RMS level in dBFS (full-scale RMS of 1 is 0 dB), floored at -100 dB."""
    frames = frame_signal(w.samples, _samples(frame_ms, w.sample_rate), _samples(hop_ms, w.sample_rate))
    rms = np.sqrt(np.mean(frames**2, axis=1))
    db = np.full(rms.shape, LOUDNESS_FLOOR_DB)
    pos = rms > 0
    db[pos] = np.maximum(20.0 * np.log10(rms[pos]), LOUDNESS_FLOOR_DB)
    silent = not np.any(pos)
    return FrameTrack(db, float(db.mean()), flagged=silent)


# --- lag-domain analysis (YIN, HNR) --------------------------------------

def _lag_bounds(sr: int, f0_range, frame_len: int) -> tuple[int, int]:
    fmin, fmax = f0_range
    if not 0 < fmin < fmax:
        raise ConfigurationError("F0 range must satisfy 0 < fmin < fmax")
    tau_min = max(1, int(math.floor(sr / fmax)))
    tau_max = int(math.ceil(sr / fmin))
    if frame_len <= tau_max + 1:
        raise ConfigurationError(
            f"frame of {frame_len} samples cannot cover the {tau_max}-sample lag of {fmin} Hz"
        )
    return tau_min, tau_max


def _lag_terms(frames: np.ndarray, tau_max: int):
    """Energies and cross terms between ``x[:W]`` and ``x[tau:tau+W]`` for every lag.

    Returns ``(e0, e_tau, cross)`` with shapes ``(F,)``, ``(F, tau_max+1)``,
    ``(F, tau_max+1)`` where ``W = frame_len - tau_max``.
    """
    F, N = frames.shape
    W = N - tau_max
    head = frames[:, :W]
    nfft = 1 << int(math.ceil(math.log2(N + W)))
    spec_a = np.fft.rfft(frames, nfft)
    spec_b = np.fft.rfft(head, nfft)
    cross = np.fft.irfft(spec_a * np.conj(spec_b), nfft)[:, : tau_max + 1]
    sq = np.concatenate([np.zeros((F, 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(tau_max + 1)
    e_tau = sq[:, lags + W] - sq[:, lags]
    e0 = e_tau[:, 0]
    return e0, e_tau, cross


def yin_cmnd(frames: np.ndarray, tau_max: int) -> np.ndarray:
    """Cumulative-mean-normalised difference function, shape ``(F, tau_max+1)``."""
    e0, e_tau, cross = _lag_terms(frames, tau_max)
    d = np.maximum(e0[:, None] + e_tau - 2.0 * cross, 0.0)
    d[:, 0] = 0.0
    running = np.cumsum(d, axis=1)
    lags = np.arange(tau_max + 1)
    out = np.ones_like(d)
    ok = running[:, 1:] > 1e-12 * (1.0 + e0[:, None])
    out[:, 1:] = np.where(ok, d[:, 1:] * lags[1:] / np.where(ok, running[:, 1:], 1.0), 1.0)
    return out


def voiced_frames(w: Waveform, frame_ms: float = 32.0, hop_ms: float = 10.0,
                  f0_range=(75.0, 400.0), threshold: float = 0.15) -> np.ndarray:
    """YIN voicing decision per frame: CMND dips below ``threshold`` inside the F0 lag range."""
    sr = w.sample_rate
    frame_len = _samples(frame_ms, sr)
    tau_min, tau_max = _lag_bounds(sr, f0_range, frame_len)
    frames = frame_signal(w.samples, frame_len, _samples(hop_ms, sr))
    cmnd = yin_cmnd(frames, tau_max)
    return cmnd[:, tau_min: tau_max + 1].min(axis=1) < threshold


def _resolve_voicing(w, voiced, frame_ms, hop_ms, f0_range, threshold, n_frames):
    if voiced is None:
        return voiced_frames(w, frame_ms, hop_ms, f0_range, threshold)
    if voiced is True:
        return np.ones(n_frames, dtype=bool)
    voiced = np.asarray(voiced, dtype=bool)
    if voiced.shape != (n_frames,):
        raise ConfigurationError("voicing mask does not match the framing")
    return voiced


def log_hnr(w: Waveform, frame_ms: float = 32.0, hop_ms: float = 10.0, f0_range=(75.0, 400.0),
            threshold: float = 0.15, voiced=None) -> FrameTrack:
    """Per-frame HNR in dB from the peak normalised autocorrelation in the F0 lag range.

    ``per_frame`` covers every frame; the summary value averages voiced
    frames only (``voiced`` may be a mask, ``True`` to force all frames, or
    None to run the YIN detector).
    """
    sr = w.sample_rate
    frame_len = _samples(frame_ms, sr)
    tau_min, tau_max = _lag_bounds(sr, f0_range, frame_len)
    frames = frame_signal(w.samples, frame_len, _samples(hop_ms, sr))
    e0, e_tau, cross = _lag_terms(frames, tau_max)
    denom = np.sqrt(e0[:, None] * e_tau)
    safe = denom > 0
    r = np.where(safe, cross / np.where(safe, denom, 1.0), 0.0)[:, tau_min: tau_max + 1].max(axis=1)
    lo, hi = HNR_CLAMP_DB
    with np.errstate(divide="ignore", invalid="ignore"):
        hnr = 10.0 * np.log10(r / (1.0 - r))
    hnr = np.where(r >= 1.0, hi, np.where(r <= 0.0, lo, hnr))
    hnr = np.clip(hnr, lo, hi)
    mask = _resolve_voicing(w, voiced, frame_ms, hop_ms, f0_range, threshold, len(frames))
    if not mask.any():
        return FrameTrack(hnr, float("nan"), undefined=True)
    return FrameTrack(hnr, float(hnr[mask].mean()))


# --- permutation entropy --------------------------------------------------

def ordinal_patterns(x, order: int = 3, delay: int = 1) -> np.ndarray:
    """Integer code of each ordinal pattern; equal values rank by position."""
    x = np.asarray(x, dtype=np.float64)
    if not 2 <= order <= 7:
        raise ConfigurationError("order must lie in [2, 7]")
    if delay < 1:
        raise ConfigurationError("delay must be positive")
    span = (order - 1) * delay
    if x.size < span + 2:
        raise PreconditionError(f"need at least {span + 2} samples for order {order}, delay {delay}")
    windows = sliding_window_view(x, span + 1)[:, ::delay]
    ranks = np.argsort(windows, axis=1, kind="stable")
    return ranks @ (order ** np.arange(order)[::-1])


def permutation_entropy(x, order: int = 3, delay: int = 1) -> float:
    """Bandt-Pompe entropy normalised by ``log(order!)``, in [0, 1]."""
    codes = ordinal_patterns(x, order, delay)
    _, counts = np.unique(codes, return_counts=True)
    p = counts / counts.sum()
    h = -np.sum(p * np.log(p))
    return float(max(0.0, h / math.log(math.factorial(order))))


def permutation_entropy_track(w: Waveform, frame_ms: float = 32.0, hop_ms: float = 10.0,
                              order: int = 4, delay: int = 1) -> FrameTrack:
    frames = frame_signal(w.samples, _samples(frame_ms, w.sample_rate), _samples(hop_ms, w.sample_rate))
    pe = np.array([permutation_entropy(f, order, delay) for f in frames])
    degenerate = bool(np.all(pe == 0.0))
    return FrameTrack(pe, float(pe.mean()), flagged=degenerate)


# --- LPC blind SNR --------------------------------------------------------

def levinson_durbin(r, order: int) -> tuple[np.ndarray, float]:
    """Solve the autocorrelation normal equations.

    Returns predictor coefficients ``a`` (``s[n] ~ sum_i a[i] * s[n-1-i]``)
    and the final prediction-error power.  Raises on a singular (zero-energy)
    autocorrelation.
    """
    r = np.asarray(r, dtype=np.float64)
    if r[0] <= 0:
        raise UndefinedStatisticError("zero-energy frame")
    a = np.zeros(order)
    err = r[0]
    for i in range(order):
        k = (r[i + 1] - np.dot(a[:i], r[i:0:-1])) / err
        a_prev = a[:i].copy()
        a[i] = k
        a[:i] = a_prev - k * a_prev[::-1]
        err *= 1.0 - k * k
        if err <= 1e-15 * r[0]:
            # perfectly predictable so far; higher orders add nothing
            break
    return a, err


def lpc(frame, order: int = 10) -> np.ndarray:
    """Autocorrelation-method LPC on a Hann-windowed frame."""
    frame = np.asarray(frame, dtype=np.float64)
    xw = frame * np.hanning(frame.size)
    full = np.correlate(xw, xw, mode="full")[frame.size - 1:]
    r = np.zeros(order + 1)
    r[: min(order + 1, full.size)] = full[: order + 1]
    return levinson_durbin(r, order)[0]


def lpc_residual(frame, a) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    p = len(a)
    pred = np.zeros(frame.size - p)
    for i, coef in enumerate(a):
        pred += coef * frame[p - 1 - i: frame.size - 1 - i]
    return frame[p:] - pred


def blind_snr(w: Waveform, lpc_order: int = 10, frame_ms: float = 32.0, hop_ms: float = 10.0,
              f0_range=(75.0, 400.0), threshold: float = 0.15, voiced=None) -> FrameTrack:
    """Mean over voiced frames of ``10 log10(signal energy / LPC residual energy)``.

    Frames with a singular autocorrelation are skipped; ``per_frame`` holds
    NaN for unvoiced or skipped frames.
    """
    sr = w.sample_rate
    frames = frame_signal(w.samples, _samples(frame_ms, sr), _samples(hop_ms, sr))
    if frames.shape[1] <= lpc_order + 1:
        raise ConfigurationError("frame too short for the LPC order")
    mask = _resolve_voicing(w, voiced, frame_ms, hop_ms, f0_range, threshold, len(frames))
    snr = np.full(len(frames), np.nan)
    for i in np.flatnonzero(mask):
        frame = frames[i]
        try:
            a = lpc(frame, lpc_order)
        except UndefinedStatisticError:
            continue
        e = lpc_residual(frame, a)
        sig = np.sum(frame[lpc_order:] ** 2)
        res = np.sum(e**2)
        if sig <= 0:
            continue
        snr[i] = 10.0 * np.log10(sig / res) if res > 0 else 10.0 * np.log10(sig / 1e-300)
    valid = ~np.isnan(snr)
    if not valid.any():
        return FrameTrack(snr, float("nan"), undefined=True)
    return FrameTrack(snr, float(snr[valid].mean()))


# --- utterance profiles ---------------------------------------------------

@dataclass(frozen=True)
class UtteranceProfile:
    utt_id: str
    client_id: str
    loudness_db: float
    log_hnr_db: float
    perm_entropy: float
    blind_snr_db: float
    voiced_fraction: float

    def vector(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES])


def profile_utterance(w: Waveform, utt_id: str = "", client_id: str = "",
                      cfg: AnalysisConfig = AnalysisConfig()) -> UtteranceProfile:
    voiced = voiced_frames(w, cfg.frame_ms, cfg.hop_ms, cfg.f0_range, cfg.yin_threshold)
    loud = loudness(w, cfg.frame_ms, cfg.hop_ms)
    hnr = log_hnr(w, cfg.frame_ms, cfg.hop_ms, cfg.f0_range, voiced=voiced)
    pe = permutation_entropy_track(w, cfg.frame_ms, cfg.hop_ms, cfg.pe_order, cfg.pe_delay)
    snr = blind_snr(w, cfg.lpc_order, cfg.frame_ms, cfg.hop_ms, voiced=voiced)
    return UtteranceProfile(utt_id, client_id, loud.value, hnr.value, pe.value, snr.value,
                            float(voiced.mean()))


# --- client statistics ----------------------------------------------------

@dataclass(frozen=True)
class ClientVariationReport:
    mean_of_means: float
    std_of_means: float
    mean_of_stds: float
    std_of_stds: float
    kurtosis_of_means: float
    n_clients: int
    n_clients_with_std: int


def client_variation(values_by_client) -> ClientVariationReport:
    """Inter-client (spread of client means) and intra-client (spread of client stds) statistics.

    ``values_by_client`` maps a client id to its utterance values.  NaN
    marks an undefined value and is ignored; clients left with no values
    are dropped.  Population standard deviations throughout; statistics
    that cannot be formed are NaN.
    """
    means, stds = [], []
    for cid in sorted(values_by_client, key=str):
        v = np.asarray(values_by_client[cid], dtype=np.float64)
        v = v[~np.isnan(v)]
        if v.size == 0:
            continue
        means.append(v.mean())
        if v.size > 1:
            stds.append(population_std(v))
    if not means:
        raise PreconditionError("no client holds a defined value")
    try:
        kurt = excess_kurtosis(means)
    except UndefinedStatisticError:
        kurt = float("nan")
    nan = float("nan")
    return ClientVariationReport(
        mean_of_means=float(np.mean(means)),
        std_of_means=population_std(means),
        mean_of_stds=float(np.mean(stds)) if stds else nan,
        std_of_stds=population_std(stds) if stds else nan,
        kurtosis_of_means=kurt,
        n_clients=len(means),
        n_clients_with_std=len(stds),
    )


# --- clustering purity ----------------------------------------------------

def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers, dtype=np.float64)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-6):
    """k-means++ seeding followed by Lloyd iterations; returns ``(labels, centers)``."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = len(points)
    if not 1 <= k <= n:
        raise ConfigurationError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(points, k, rng)
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        nearest = d2[np.arange(n), labels]
        taken = set()
        for c in range(k):
            members = labels == c
            if members.any():
                new[c] = points[members].mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-fit point
                order = np.argsort(-nearest, kind="stable")
                idx = next(int(i) for i in order if int(i) not in taken)
                taken.add(idx)
                new[c] = points[idx]
                labels[idx] = c
                nearest[idx] = 0.0
        shift = np.max(np.sqrt(((new - centers) ** 2).sum(axis=1)))
        centers = new
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1), centers


def purity(cluster_labels, true_labels) -> float:
    """Share of points whose true label is the majority label of their cluster."""
    cluster_labels = np.asarray(cluster_labels)
    _, true_idx = np.unique(np.asarray(true_labels), return_inverse=True)
    hits = 0
    for c in np.unique(cluster_labels):
        counts = np.bincount(true_idx[cluster_labels == c])
        hits += counts.max()  # argmax ties resolve to the smaller label
    return hits / len(true_idx)


def clustering_purity(points, labels, k: int | None = None, seed: int = 0) -> float:
    """Cluster ``points`` with k-means++ (k defaults to the number of labels) and score purity."""
    labels = list(labels)
    if k is None:
        k = len(set(labels))
    cluster_labels, _ = kmeans(points, k, seed)
    return purity(cluster_labels, labels)


def zscore_columns(matrix) -> np.ndarray:
    """Column z-scores; NaNs become the column mean (0) and constant columns become 0."""
    m = np.asarray(matrix, dtype=np.float64)
    mu = np.nanmean(m, axis=0)
    mu = np.where(np.isnan(mu), 0.0, mu)
    sd = np.sqrt(np.nanmean((m - mu) ** 2, axis=0))
    sd = np.where(np.isnan(sd) | (sd == 0), 1.0, sd)
    z = (m - mu) / sd
    return np.where(np.isnan(z), 0.0, z)


# --- corpus-level analysis ------------------------------------------------

@dataclass
class CorpusAnalysis:
    profiles: list[UtteranceProfile]
    reports: dict[str, ClientVariationReport]
    purity: float
    skipped: list[str] = field(default_factory=list)


def analyze_profiles(profiles, seed: int = 0, embeddings: dict | None = None,
                     skipped=()) -> CorpusAnalysis:
    """Variation reports for every profile feature plus clustering purity.

    Purity clusters the z-scored profile vectors unless ``embeddings``
    (utterance id -> (client id, vector)) is supplied.
    """
    profiles = list(profiles)
    if not profiles:
        raise PreconditionError("nothing to analyse")
    reports = {}
    for feat in FEATURES:
        groups: dict[str, list[float]] = {}
        for p in profiles:
            groups.setdefault(p.client_id, []).append(getattr(p, feat))
        try:
            reports[feat] = client_variation(groups)
        except PreconditionError:
            nan = float("nan")
            reports[feat] = ClientVariationReport(nan, nan, nan, nan, nan, 0, 0)
    if embeddings:
        ids = sorted(embeddings)
        labels = [embeddings[i][0] for i in ids]
        points = np.array([embeddings[i][1] for i in ids], dtype=np.float64)
    else:
        labels = [p.client_id for p in profiles]
        points = zscore_columns([p.vector() for p in profiles])
    score = clustering_purity(points, labels, seed=seed)
    return CorpusAnalysis(profiles, reports, score, list(skipped))


def analyze_waveforms(items, cfg: AnalysisConfig = AnalysisConfig(), seed: int = 0,
                      embeddings: dict | None = None) -> CorpusAnalysis:
    """``items`` yields ``(utt_id, client_id, Waveform)`` triples."""
    profiles = [profile_utterance(w, uid, cid, cfg) for uid, cid, w in items]
    return analyze_profiles(profiles, seed, embeddings)
