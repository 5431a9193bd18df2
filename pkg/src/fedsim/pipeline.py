"""Experiment orchestration shared by the CLI and the acceptance suite.

Turns a corpus plus JSON configuration into warm-up weights, client
datasets and federated runs, and renders the results as CSV text.
"""
from __future__ import annotations

import base64
import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from .data import ClientDataset, Corpus, Utterance
from .errors import ConfigurationError
from .federation import FederationConfig, RoundRecord, canonical_strategy, run_experiment
from .model import LossConfig, ReferenceTrainer, evaluate_wer, init_weights, sgd_train
from .partition import PartitionPlan, make_local_holdout, make_plan, split_warmup

ROUND_COLUMNS = ("round", "strategy", "K", "centralized_wer", "mean_client_loss", "delta_norm")
CLIENT_COLUMNS = ("client_id", "n_train", "n_test", "wer")
SUMMARY_COLUMNS = ("strategy", "K", "rounds", "initial_wer", "final_wer", "best_wer")


def require(doc: dict, *names: str, where: str = "config") -> None:
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{where} must be a JSON object")
    for name in names:
        if name not in doc:
            raise ConfigurationError(f"missing required field '{name}' in {where}")


def _build(cls, doc: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigurationError(f"unknown fields in {where}: {sorted(unknown)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


def loss_config(doc: dict | None) -> LossConfig:
    return _build(LossConfig, dict(doc or {}), "local")


@dataclass(frozen=True)
class PartitionSettings:
    scheme: str = "per_speaker"
    silos: int = 10
    holdout_fraction: float = 0.1
    holdout_min: int = 2


@dataclass(frozen=True)
class RunSettings:
    """Federated-run configuration as read from JSON."""

    seed: int = 0
    rounds: int = 20
    clients_per_round: tuple = (10,)
    server_lr: float = 1.0
    strategy: str = "fedavg"
    server_finetune: bool = False
    server_holdout_size: int = 32
    local: LossConfig = LossConfig()
    partition: PartitionSettings = PartitionSettings()
    validation_speakers: int = 4
    init_seed: int | None = None
    init_scale: float = 0.01

    @classmethod
    def from_dict(cls, doc: dict) -> "RunSettings":
        require(doc, "rounds", where="federate config")
        doc = dict(doc)
        doc["local"] = loss_config(doc.get("local"))
        doc["partition"] = _build(PartitionSettings, dict(doc.get("partition") or {}), "partition")
        k = doc.get("clients_per_round", 10)
        doc["clients_per_round"] = tuple(int(v) for v in (k if isinstance(k, list) else [k]))
        settings = _build(cls, doc, "federate config")
        canonical_strategy(settings.strategy)
        return settings

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["clients_per_round"] = list(self.clients_per_round)
        return doc

    def federation_config(self, k: int, total_clients: int) -> FederationConfig:
        return FederationConfig(
            rounds=self.rounds, clients_per_round=min(k, total_clients), total_clients=total_clients,
            server_lr=self.server_lr, local=self.local, strategy=self.strategy,
            server_finetune=self.server_finetune, server_holdout_size=self.server_holdout_size,
            seed=self.seed,
        )


@dataclass
class ExperimentSetup:
    clients: list[ClientDataset]
    plan: PartitionPlan
    central_val: list[Utterance]
    server_holdout: list[Utterance]
    validation_speakers: list[str]


def _seeded_pick(items: list, count: int, seed: int, stream: int) -> list:
    if count <= 0 or not items:
        return []
    idx = np.random.default_rng([seed, stream]).choice(len(items), size=min(count, len(items)), replace=False)
    return [items[i] for i in sorted(idx)]


def prepare(corpus: Corpus, settings: RunSettings, warmup_speakers=()) -> ExperimentSetup:
    """Exclude warm-up speakers, carve out validation speakers, partition the rest."""
    warm = set(warmup_speakers)
    fl_speakers = [s for s in corpus.speakers if s not in warm]
    val_speakers = _seeded_pick(fl_speakers, settings.validation_speakers, settings.seed, 0x7A1)
    if len(val_speakers) >= len(fl_speakers):
        raise ConfigurationError("validation speakers would leave no federated clients")
    rest = corpus.subset([s for s in fl_speakers if s not in set(val_speakers)])
    p = settings.partition
    plan = make_plan(rest, p.scheme, settings.seed, p.silos)
    plan = make_local_holdout(plan, p.holdout_fraction, p.holdout_min, settings.seed)
    warm_utts = corpus.subset(warm).utterances if warm else []
    holdout = _seeded_pick(warm_utts, settings.server_holdout_size, settings.seed, 0x5E7)
    if settings.server_finetune and not holdout:
        raise ConfigurationError("server_finetune needs warm-up speakers to draw held-out data from")
    return ExperimentSetup(plan.client_datasets(rest), plan,
                           corpus.subset(val_speakers).utterances, holdout, val_speakers)


# --- warm-up --------------------------------------------------------------

@dataclass(frozen=True)
class WarmupSettings:
    seed: int = 0
    warmup_fraction: float = 0.5
    epochs: int = 5
    heldout_fraction: float = 0.1
    local: LossConfig = LossConfig()
    init_seed: int | None = None
    init_scale: float = 0.01

    @classmethod
    def from_dict(cls, doc: dict) -> "WarmupSettings":
        require(doc, "warmup_fraction", where="warmup config")
        doc = dict(doc)
        doc["local"] = loss_config(doc.get("local"))
        settings = _build(cls, doc, "warmup config")
        if settings.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if not 0.0 < settings.heldout_fraction < 1.0:
            raise ConfigurationError("heldout_fraction must lie in (0, 1)")
        return settings

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class WarmupResult:
    weights: np.ndarray
    init: np.ndarray
    warmup_speakers: list[str]
    heldout_ids: list[str]
    untrained_wer: float
    warmup_wer: float


def run_warmup(corpus: Corpus, settings: WarmupSettings) -> WarmupResult:
    warm, _ = split_warmup(corpus, settings.warmup_fraction, settings.seed)
    utts = warm.utterances
    n_held = max(1, int(math.floor(settings.heldout_fraction * len(utts) + 0.5)))
    if n_held >= len(utts):
        raise ConfigurationError("warm-up set too small to hold out a slice")
    held_idx = set(int(i) for i in np.random.default_rng([settings.seed, 0x4E1D]).choice(
        len(utts), size=n_held, replace=False))
    held = [u for i, u in enumerate(utts) if i in held_idx]
    train = [u for i, u in enumerate(utts) if i not in held_idx]
    init = init_weights(corpus.vocab_size, corpus.feature_dim, settings.init_seed, settings.init_scale)
    w, _ = sgd_train(init, train, settings.local, settings.seed, epochs=settings.epochs)
    return WarmupResult(w, init, warm.speakers, [u.utt_id for u in held],
                        evaluate_wer(init, held).wer, evaluate_wer(w, held).wer)


# --- federated runs -------------------------------------------------------

@dataclass
class RunResult:
    k: int
    strategy: str
    initial_wer: float
    records: list[RoundRecord]
    final_weights: np.ndarray
    client_wers: list[tuple[int, int, int, float]]


def run_federated(corpus: Corpus, settings: RunSettings, init, warmup_speakers=(),
                  workers: int = 1) -> list[RunResult]:
    """One federated run per requested K, all from the same ``init``."""
    setup = prepare(corpus, settings, warmup_speakers)
    init = np.asarray(init, dtype=np.float64)
    trainer = ReferenceTrainer(settings.local)
    initial = trainer.evaluate(init, setup.central_val).wer
    results = []
    for k in settings.clients_per_round:
        cfg = settings.federation_config(k, len(setup.clients))
        records = run_experiment(cfg, setup.clients, setup.server_holdout, setup.central_val, init,
                                 trainer=trainer, workers=workers)
        final = records[-1].global_weights_after if records else init
        per_client = []
        for c in setup.clients:
            if c.has_local_test:
                per_client.append((c.client_id, c.n_k, len(c.test), trainer.evaluate(final, c.test).wer))
        per_client.sort(key=lambda row: (row[3], row[0]))
        results.append(RunResult(cfg.clients_per_round, cfg.strategy, initial, records, final, per_client))
    return results


# --- CSV rendering --------------------------------------------------------

def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return f"{value:.6f}"


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) if not isinstance(v, str) else v for v in row])
    return buf.getvalue()


def round_rows(results: list[RunResult]):
    for res in results:
        yield (0, res.strategy, res.k, res.initial_wer, None, None)
        for r in res.records:
            yield (r.round_index, res.strategy, res.k, r.centralized_val_wer, r.mean_client_loss, r.delta_norm)


def summary_rows(results: list[RunResult]):
    for res in results:
        wers = [r.centralized_val_wer for r in res.records]
        final = wers[-1] if wers else res.initial_wer
        best = min(wers) if wers else res.initial_wer
        yield (res.strategy, res.k, len(res.records), res.initial_wer, final, best)


def client_rows(results: list[RunResult]):
    # the last K in a sweep provides the per-client table
    return results[-1].client_wers if results else []


def encode_weights(w) -> str:
    return base64.b64encode(np.asarray(w, dtype="<f4").tobytes()).decode("ascii")


def decode_weights(text: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(text), dtype="<f4").astype(np.float64)


def build_manifest(settings: RunSettings, corpus: Corpus, corpus_path: str | None, init,
                   warmup_speakers, results: list[RunResult], outputs: dict[str, str]) -> dict:
    """Everything needed to rerun the experiment bit-identically."""
    return {
        "tool": "fedsim",
        "tool_version": __version__,
        "seed": settings.seed,
        "federation": settings.to_dict(),
        "corpus": {"path": corpus_path, "spec": corpus.spec,
                   "vocab_size": corpus.vocab_size, "feature_dim": corpus.feature_dim},
        "partition_scheme": settings.partition.scheme,
        "init": {"weights_f32_b64": encode_weights(init), "warmup_speakers": list(warmup_speakers)},
        "metrics": {
            "rounds": [list(map(lambda v: v if isinstance(v, str) else fmt(v), row)) for row in round_rows(results)],
            "summary": [list(map(lambda v: v if isinstance(v, str) else fmt(v), row)) for row in summary_rows(results)],
            "final_client_wer": [[fmt(v) for v in row] for row in client_rows(results)],
            "alphas": [
                {"K": res.k, "round": r.round_index, "clients": list(r.aggregated_ids),
                 "alphas": [fmt(a) for a in r.alphas]}
                for res in results for r in res.records
            ],
        },
        "outputs_sha256": outputs,
    }
