"""Seedable synthetic corpora with controllable client heterogeneity.

Two generators live here:

* :func:`generate` emits feature-level corpora for the federated trainer.
  Every token id owns a prototype feature vector; a speaker's frames are
  its tokens' prototypes plus speaker-specific Gaussian noise, scaled by a
  speaker gain.  Each speaker draws its tokens from its own Dirichlet
  distribution, so ``token_skew`` controls how non-IID the clients are.
* :func:`generate_audio` emits harmonic-plus-noise waveforms for the
  heterogeneity analysis, with per-speaker F0, SNR, gain and channel
  colouring drawn from configurable ranges.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.signal import lfilter

from .data import BLANK, Corpus, Utterance
from .errors import ConfigurationError

PCM_SCALE = 32768.0
HISTOGRAM_BIN_EDGES = (0, 10, 20, 40, 60, 80, 100, 150, 200, 300, math.inf)
HISTOGRAM_BIN_LABELS = ("0-10", "10-20", "20-40", "40-60", "60-80", "80-100",
                    "100-150", "150-200", "200-300", "300+")


def _range(value, name: str, lo_bound: float | None = None) -> tuple:
    try:
        lo, hi = value
    except (TypeError, ValueError):
        raise ConfigurationError(f"{name} must be a [lo, hi] pair") from None
    if lo > hi:
        raise ConfigurationError(f"{name}: lo={lo} exceeds hi={hi}")
    if lo_bound is not None and lo < lo_bound:
        raise ConfigurationError(f"{name}: values must be >= {lo_bound}")
    return (lo, hi)


@dataclass(frozen=True)
class SampleLaw:
    kind: str = "uniform"
    lo: int = 10
    hi: int = 30
    exponent: float = 1.5

    def __post_init__(self):
        if self.kind not in ("uniform", "powerlaw"):
            raise ConfigurationError(f"unknown samples_law kind {self.kind!r}")
        if not 1 <= self.lo <= self.hi:
            raise ConfigurationError("samples_law needs 1 <= lo <= hi")
        if self.kind == "powerlaw" and self.exponent <= 0:
            raise ConfigurationError("power-law exponent must be positive")

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.integers(self.lo, self.hi + 1, size=size)
        support = np.arange(self.lo, self.hi + 1)
        p = support.astype(float) ** -self.exponent
        return rng.choice(support, size=size, p=p / p.sum())


@dataclass(frozen=True)
class CorpusSpec:
    speakers: int = 20
    samples_law: SampleLaw = SampleLaw()
    vocab_size: int = 6
    feature_dim: int = 8
    frames_per_token: tuple = (2, 4)
    tokens_per_utterance: tuple = (2, 5)
    per_speaker_noise_std: tuple = (0.5, 1.0)
    per_speaker_gain_db: tuple = (0.0, 0.0)
    per_speaker_rate: tuple = (1.0, 1.0)
    utterance_normalization: str = "none"
    token_skew: float = 0.0
    noisy_client_fraction: float = 0.0
    noisy_client_noise_multiplier: float = 1.0
    prototype_scale: float = 1.0
    prototype_seed: int | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.samples_law, dict):
            object.__setattr__(self, "samples_law", SampleLaw(**self.samples_law))
        for name in ("frames_per_token", "tokens_per_utterance", "per_speaker_noise_std",
                     "per_speaker_gain_db", "per_speaker_rate"):
            object.__setattr__(self, name, tuple(_range(getattr(self, name), name)))
        if self.speakers < 1:
            raise ConfigurationError("need at least one speaker")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must cover blank plus at least one token")
        if self.feature_dim < 1:
            raise ConfigurationError("feature_dim must be positive")
        if self.frames_per_token[0] < 2:
            raise ConfigurationError("frames_per_token must be >= 2 so that T_x > T_y")
        if self.tokens_per_utterance[0] < 1:
            raise ConfigurationError("utterances need at least one token")
        if self.per_speaker_noise_std[0] < 0:
            raise ConfigurationError("noise std must be non-negative")
        if self.per_speaker_rate[0] <= 0:
            raise ConfigurationError("per_speaker_rate must be positive")
        if self.utterance_normalization not in ("none", "rms"):
            raise ConfigurationError("utterance_normalization must be 'none' or 'rms'")
        if self.token_skew < 0:
            raise ConfigurationError("token_skew must be >= 0")
        if not 0.0 <= self.noisy_client_fraction <= 1.0:
            raise ConfigurationError("noisy_client_fraction must lie in [0, 1]")
        if self.noisy_client_noise_multiplier < 1.0:
            raise ConfigurationError("noisy_client_noise_multiplier must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "CorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown corpus fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc


def speaker_name(index: int) -> str:
    return f"spk{index:04d}"


def token_prototypes(spec: CorpusSpec) -> np.ndarray:
    seed = spec.seed if spec.prototype_seed is None else spec.prototype_seed
    rng = np.random.default_rng([seed, 0x5EED])
    return spec.prototype_scale * rng.normal(size=(spec.vocab_size, spec.feature_dim))


def noisy_speaker_indices(spec: CorpusSpec) -> list[int]:
    count = math.floor(spec.noisy_client_fraction * spec.speakers + 1e-9)
    rng = np.random.default_rng([spec.seed, 0xA015E])
    return sorted(int(i) for i in rng.choice(spec.speakers, size=count, replace=False))


def speaker_token_distribution(spec: CorpusSpec, rng: np.random.Generator) -> np.ndarray:
    k = spec.vocab_size - 1
    if spec.token_skew == 0:
        return np.full(k, 1.0 / k)
    p = rng.dirichlet(np.full(k, 1.0 / spec.token_skew))
    # guard against all-mass-on-nothing underflow at extreme skew
    p = np.maximum(p, 1e-12)
    return p / p.sum()


def _utterance_alignment(tokens, rng, frames_range) -> list[int]:
    lo, hi = frames_range
    path = [BLANK] * int(rng.integers(0, 2))
    for i, tok in enumerate(tokens):
        if i > 0:
            path.append(BLANK)
        path.extend([int(tok)] * int(rng.integers(lo, hi + 1)))
    path.extend([BLANK] * int(rng.integers(0, 2)))
    return path


def generate(spec: CorpusSpec) -> Corpus:
    """Build a feature corpus; bit-identical for identical specs."""
    protos = token_prototypes(spec)
    counts = spec.samples_law.draw(np.random.default_rng([spec.seed, 0xC0]), spec.speakers)
    noisy = set(noisy_speaker_indices(spec))
    utterances = []
    for s in range(spec.speakers):
        rng = np.random.default_rng([spec.seed, 1, s])
        token_p = speaker_token_distribution(spec, rng)
        noise = rng.uniform(*spec.per_speaker_noise_std)
        if s in noisy:
            noise *= spec.noisy_client_noise_multiplier
        gain = 10.0 ** (rng.uniform(*spec.per_speaker_gain_db) / 20.0)
        # speaking rate scales token durations; own stream so the default leaves draws untouched
        rate = np.random.default_rng([spec.seed, 0x5A7E, s]).uniform(*spec.per_speaker_rate)
        frames = tuple(max(2, int(round(rate * f))) for f in spec.frames_per_token)
        name = speaker_name(s)
        for j in range(int(counts[s])):
            n_tok = int(rng.integers(spec.tokens_per_utterance[0], spec.tokens_per_utterance[1] + 1))
            tokens = 1 + rng.choice(spec.vocab_size - 1, size=n_tok, p=token_p)
            align = _utterance_alignment(tokens, rng, frames)
            x = gain * (protos[align] + noise * rng.normal(size=(len(align), spec.feature_dim)))
            if spec.utterance_normalization == "rms":
                x = x / np.sqrt(np.mean(x ** 2))
            # stored as float32 on disk; keep in-memory values identical
            x = x.astype(np.float32).astype(np.float64)
            utterances.append(Utterance(f"{name}-u{j:04d}", name, x,
                                        tuple(int(t) for t in tokens), tuple(align)))
    return Corpus(utterances, spec.vocab_size, spec.feature_dim,
                  frozenset(speaker_name(s) for s in noisy), spec.to_dict())


def sample_count_histogram(corpus_or_counts, bin_edges=HISTOGRAM_BIN_EDGES) -> list[int]:
    """Number of speakers whose utterance count falls in each ``[lo, hi)`` bin."""
    if isinstance(corpus_or_counts, Corpus):
        counts = list(corpus_or_counts.speaker_counts().values())
    else:
        counts = list(corpus_or_counts)
    edges = list(bin_edges)
    if any(b <= a for a, b in zip(edges, edges[1:])):
        raise ConfigurationError("bin edges must be strictly increasing")
    hist = [0] * (len(edges) - 1)
    for c in counts:
        for i in range(len(hist)):
            if edges[i] <= c < edges[i + 1]:
                hist[i] += 1
                break
    return hist


def token_distribution_tv(spec: CorpusSpec) -> float:
    """Mean pairwise total-variation distance between speakers' token distributions."""
    dists = [speaker_token_distribution(spec, np.random.default_rng([spec.seed, 1, s]))
             for s in range(spec.speakers)]
    total, pairs = 0.0, 0
    for i in range(len(dists)):
        for j in range(i + 1, len(dists)):
            total += 0.5 * np.abs(dists[i] - dists[j]).sum()
            pairs += 1
    return total / pairs if pairs else 0.0


# --- audio ----------------------------------------------------------------

@dataclass(frozen=True)
class AudioUtterance:
    utt_id: str
    speaker_id: str
    samples: np.ndarray
    sample_rate: int
    snr_db: float  # construction-time SNR, inf when noise-free


@dataclass(frozen=True)
class AudioCorpusSpec:
    speakers: int = 10
    utterances_per_speaker: tuple = (3, 5)
    sample_rate: int = 16000
    duration_s: tuple = (0.5, 0.8)
    f0_hz: tuple = (100.0, 220.0)
    harmonics: int = 8
    spectral_tilt: tuple = (0.8, 1.2)
    snr_db: tuple = (25.0, 35.0)
    snr_jitter_db: float = 1.0
    gain_db: tuple = (-12.0, -10.0)
    gain_jitter_db: float = 0.5
    channel_lowpass: tuple = (0.0, 0.1)
    pause_fraction: tuple = (0.1, 0.2)
    noise_free: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("utterances_per_speaker", "duration_s", "f0_hz", "spectral_tilt",
                     "snr_db", "gain_db", "channel_lowpass", "pause_fraction"):
            object.__setattr__(self, name, tuple(_range(getattr(self, name), name)))
        if self.speakers < 1 or self.utterances_per_speaker[0] < 1:
            raise ConfigurationError("need at least one speaker with one utterance")
        if self.sample_rate <= 0 or self.duration_s[0] <= 0:
            raise ConfigurationError("sample rate and durations must be positive")
        if self.f0_hz[0] <= 0 or self.f0_hz[1] >= self.sample_rate / 2:
            raise ConfigurationError("F0 range must lie inside (0, Nyquist)")
        if self.harmonics < 1:
            raise ConfigurationError("need at least one harmonic")
        if not (0.0 <= self.channel_lowpass[0] and self.channel_lowpass[1] < 1.0):
            raise ConfigurationError("channel_lowpass coefficients must lie in [0, 1)")
        if not (0.0 <= self.pause_fraction[0] and self.pause_fraction[1] < 1.0):
            raise ConfigurationError("pause_fraction must lie in [0, 1)")
        if self.snr_jitter_db < 0 or self.gain_jitter_db < 0:
            raise ConfigurationError("jitters must be non-negative")

    @classmethod
    def from_dict(cls, doc: dict) -> "AudioCorpusSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown audio corpus fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        doc = asdict(self)
        for k, v in doc.items():
            if isinstance(v, tuple):
                doc[k] = list(v)
        return doc


def cv_like(speakers: int = 100, seed: int = 0, **overrides) -> AudioCorpusSpec:
    """Crowd-sourced conditions: wide per-speaker spread and large within-speaker drift."""
    doc = dict(speakers=speakers, utterances_per_speaker=(4, 4), f0_hz=(90.0, 240.0),
               snr_db=(0.0, 40.0), snr_jitter_db=8.0, gain_db=(-30.0, -3.0), gain_jitter_db=6.0,
               channel_lowpass=(0.0, 0.9), spectral_tilt=(0.6, 1.6), pause_fraction=(0.0, 0.5),
               seed=seed)
    doc.update(overrides)
    return AudioCorpusSpec(**doc)


def ls_like(speakers: int = 100, seed: int = 0, **overrides) -> AudioCorpusSpec:
    """Studio conditions: narrow spread, consistent recordings per speaker."""
    doc = dict(speakers=speakers, utterances_per_speaker=(4, 4), f0_hz=(90.0, 240.0),
               snr_db=(28.0, 36.0), snr_jitter_db=0.5, gain_db=(-14.0, -10.0), gain_jitter_db=0.3,
               channel_lowpass=(0.2, 0.3), spectral_tilt=(0.9, 1.1), pause_fraction=(0.1, 0.2),
               seed=seed)
    doc.update(overrides)
    return AudioCorpusSpec(**doc)


def harmonic_noise_signal(rng, n: int, sr: int, f0: float, harmonics: int, tilt: float,
                          snr_db: float | None, lowpass: float = 0.0, pause: float = 0.0):
    """Harmonic tone with slow F0 drift plus white noise at ``snr_db``.

    ``pause`` silences that fraction of the harmonic part (one contiguous
    stretch) so utterances contain unvoiced regions.  Returns the mixture at
    unit-ish scale; the SNR refers to the power of the harmonic part over the
    whole utterance.
    """
    t = np.arange(n) / sr
    drift = 1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sr
    harm = np.zeros(n)
    for h in range(1, harmonics + 1):
        if h * f0 * 1.05 >= sr / 2:
            break
        harm += h ** -tilt * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    if lowpass > 0:
        # one-pole channel colouring applied to the clean part
        harm = lfilter([1.0 - lowpass], [1.0, -lowpass], harm)
    if pause > 0:
        gap = int(round(pause * n))
        start = int(rng.integers(0, n - gap + 1))
        harm[start:start + gap] = 0.0
    power = np.mean(harm**2)
    harm = harm / math.sqrt(power) if power > 0 else harm
    if snr_db is None:
        return harm
    noise = rng.normal(size=n) * 10.0 ** (-snr_db / 20.0)
    return harm + noise


def generate_audio(spec: AudioCorpusSpec) -> list[AudioUtterance]:
    """Harmonic-plus-noise waveform corpus, quantised to 16-bit PCM values."""
    out = []
    for s in range(spec.speakers):
        rng = np.random.default_rng([spec.seed, 2, s])
        f0 = rng.uniform(*spec.f0_hz)
        tilt = rng.uniform(*spec.spectral_tilt)
        snr_mean = rng.uniform(*spec.snr_db)
        gain_mean = rng.uniform(*spec.gain_db)
        lowpass = rng.uniform(*spec.channel_lowpass)
        n_utt = int(rng.integers(spec.utterances_per_speaker[0], spec.utterances_per_speaker[1] + 1))
        name = speaker_name(s)
        for j in range(n_utt):
            n = int(round(rng.uniform(*spec.duration_s) * spec.sample_rate))
            snr = None if spec.noise_free else snr_mean + spec.snr_jitter_db * rng.normal()
            pause = rng.uniform(*spec.pause_fraction)
            x = harmonic_noise_signal(rng, n, spec.sample_rate, f0 * (1 + 0.02 * rng.normal()),
                                      spec.harmonics, tilt, snr, lowpass, pause)
            gain_db = gain_mean + spec.gain_jitter_db * rng.normal()
            peak = np.max(np.abs(x))
            # keep the peak inside full scale whatever the drawn gain
            gain = min(10.0 ** (gain_db / 20.0), 0.99 / peak) if peak > 0 else 0.0
            pcm = np.round(np.clip(gain * x, -1.0, 1.0) * 32767.0)
            out.append(AudioUtterance(f"{name}-a{j:04d}", name, pcm / PCM_SCALE, spec.sample_rate,
                                      math.inf if snr is None else float(snr)))
    return out
