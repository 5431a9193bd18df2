"""Ready-made synthetic experiments.

Each scenario builds its corpora from a single seed, runs the federated
comparison it is named after and returns the final centralised WERs, so
the same code backs the acceptance suite and ad-hoc exploration.

All scenarios share one layout: a small clean warm-up corpus (for the
centralised pre-training), a clean validation corpus of unseen speakers,
and a federated corpus with one client per speaker.  The three corpora
share token prototypes, so they describe the same "language".
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data import ClientDataset, Utterance
from .federation import FederationConfig, run_experiment
from .model import LossConfig, evaluate_wer, init_weights, sgd_train
from .partition import make_local_holdout, make_per_speaker
from .synthcorpus import CorpusSpec, SampleLaw, generate


@dataclass(frozen=True)
class Scenario:
    """Corpus recipe for a federated comparison."""

    fl_speakers: int = 50
    warmup_speakers: int = 6
    validation_speakers: int = 10
    base: CorpusSpec = CorpusSpec()
    warmup_epochs: int = 3
    local: LossConfig = LossConfig()
    holdout_fraction: float = 0.1
    holdout_min: int = 2


@dataclass
class ScenarioData:
    clients: list[ClientDataset]
    warmup: list[Utterance]
    validation: list[Utterance]
    noisy_clients: frozenset = field(default_factory=frozenset)


def build(scenario: Scenario, seed: int) -> ScenarioData:
    base = replace(scenario.base, prototype_seed=seed)
    clean = dict(token_skew=0.0, noisy_client_fraction=0.0)
    fl = generate(replace(base, speakers=scenario.fl_speakers, seed=seed))
    warm = generate(replace(base, speakers=scenario.warmup_speakers, seed=seed + 1000, **clean))
    val = generate(replace(base, speakers=scenario.validation_speakers, seed=seed + 2000, **clean))
    plan = make_local_holdout(make_per_speaker(fl), scenario.holdout_fraction, scenario.holdout_min, seed)
    clients = plan.client_datasets(fl)
    noisy = frozenset(c.client_id for c in clients if set(c.speakers) & fl.noisy_speakers)
    return ScenarioData(clients, warm.utterances, val.utterances, noisy)


def warm_start(scenario: Scenario, data: ScenarioData, seed: int) -> np.ndarray:
    """Centralised pre-training on the warm-up corpus from zero weights."""
    V, D = scenario.base.vocab_size, scenario.base.feature_dim
    w, _ = sgd_train(init_weights(V, D), data.warmup, scenario.local, seed, epochs=scenario.warmup_epochs)
    return w


def final_wer(scenario: Scenario, data: ScenarioData, init, seed: int, rounds: int, k: int,
              strategy: str = "fedavg", best: bool = False) -> float:
    cfg = FederationConfig(rounds=rounds, clients_per_round=k, total_clients=len(data.clients),
                           local=scenario.local, strategy=strategy, seed=seed)
    records = run_experiment(cfg, data.clients, [], data.validation, init)
    wers = [r.centralized_val_wer for r in records]
    return min(wers) if best else wers[-1]


# --- the three directional comparisons ------------------------------------

NOISY_CLIENTS = Scenario(
    fl_speakers=50,
    validation_speakers=30,
    base=CorpusSpec(
        vocab_size=6, feature_dim=8, samples_law=SampleLaw("uniform", 10, 40),
        frames_per_token=(2, 4), tokens_per_utterance=(6, 12),
        per_speaker_noise_std=(0.45, 1.3), per_speaker_gain_db=(-3.0, 3.0),
        token_skew=2.5, noisy_client_fraction=0.2, noisy_client_noise_multiplier=10.0,
        utterance_normalization="rms",
    ),
)

MANY_CLIENTS = Scenario(
    fl_speakers=200,
    base=CorpusSpec(
        vocab_size=6, feature_dim=8, samples_law=SampleLaw("powerlaw", 4, 60, 1.2),
        frames_per_token=(2, 4), tokens_per_utterance=(2, 6),
        per_speaker_noise_std=(0.4, 1.2), per_speaker_gain_db=(-3.0, 3.0),
        token_skew=2.0, utterance_normalization="rms",
    ),
)

SKEWED_TOKENS = Scenario(
    fl_speakers=50,
    warmup_speakers=25,
    warmup_epochs=10,
    base=CorpusSpec(
        vocab_size=6, feature_dim=8, samples_law=SampleLaw("uniform", 10, 30),
        frames_per_token=(2, 4), tokens_per_utterance=(2, 6),
        per_speaker_noise_std=(0.4, 1.0), token_skew=10.0, utterance_normalization="rms",
    ),
)


def strategy_comparison(seed: int, scenario: Scenario = NOISY_CLIENTS, rounds: int = 30,
                        k: int = 10) -> dict[str, float]:
    """Final WER per weighting strategy, all runs from the same warm start."""
    data = build(scenario, seed)
    init = warm_start(scenario, data, seed)
    return {s: final_wer(scenario, data, init, seed, rounds, k, s)
            for s in ("fedavg", "loss_softmax", "wer_softmax")}


def client_count_comparison(seed: int, scenario: Scenario = MANY_CLIENTS, rounds: int = 20,
                            ks=(5, 50)) -> dict[int, float]:
    """Final FedAvg WER for each number of clients sampled per round."""
    data = build(scenario, seed)
    init = warm_start(scenario, data, seed)
    return {k: final_wer(scenario, data, init, seed, rounds, k) for k in ks}


def warmup_comparison(seed: int, scenario: Scenario = SKEWED_TOKENS, rounds: int = 20, k: int = 10,
                      init_scale: float = 0.1) -> dict[str, float]:
    """Best WER reached from a random init vs final WER from the warm start."""
    data = build(scenario, seed)
    V, D = scenario.base.vocab_size, scenario.base.feature_dim
    scratch = init_weights(V, D, seed, init_scale)
    warm = warm_start(scenario, data, seed)
    return {
        "scratch_best": final_wer(scenario, data, scratch, seed, rounds, k, best=True),
        "warm_final": final_wer(scenario, data, warm, seed, rounds, k),
        "warm_init": evaluate_wer(warm, data.validation).wer,
    }
