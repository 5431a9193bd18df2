"""Synchronous federated server loop and aggregation weighting strategies.

Pseudo-gradient convention: ``delta = sum_k alpha_k * (w_prev - w_k)`` and
``w_new = w_prev - server_lr * delta``, so ``server_lr = 1`` reproduces a
weighted average of the client models.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientDataset, Utterance
from .errors import (
    ConfigurationError,
    EmptyRoundError,
    FedSimError,
    PreconditionError,
    ProtocolError,
)
from .model import LossConfig, ReferenceTrainer, Trainer, batch_loss_and_grad

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "loss_softmax", "wer_softmax")
STRATEGY_ALIASES = {"fedavg": "fedavg", "loss": "loss_softmax", "wer": "wer_softmax",
                    "loss_softmax": "loss_softmax", "wer_softmax": "wer_softmax"}


def canonical_strategy(name: str) -> str:
    try:
        return STRATEGY_ALIASES[name]
    except KeyError:
        raise ConfigurationError(f"unknown strategy {name!r}; pick one of {sorted(STRATEGY_ALIASES)}") from None


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 20
    clients_per_round: int = 10
    total_clients: int = 10
    server_lr: float = 1.0
    local: LossConfig = LossConfig()
    strategy: str = "fedavg"
    server_finetune: bool = False
    server_holdout_size: int = 32
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", canonical_strategy(self.strategy))
        if self.rounds < 0:
            raise ConfigurationError("rounds must be non-negative")
        if not 1 <= self.clients_per_round <= self.total_clients:
            raise ConfigurationError(
                f"need 1 <= K <= M, got K={self.clients_per_round}, M={self.total_clients}"
            )
        if not self.server_lr > 0:
            raise ConfigurationError("server_lr must be positive")


@dataclass
class ClientUpdate:
    client_id: int
    new_weights: np.ndarray
    n_k: int
    train_loss: float
    val_wer: float

    @property
    def is_finite(self) -> bool:
        return (
            math.isfinite(self.train_loss)
            and math.isfinite(self.val_wer)
            and bool(np.all(np.isfinite(self.new_weights)))
        )


@dataclass
class RoundRecord:
    round_index: int
    sampled_ids: tuple[int, ...]
    alphas: tuple[float, ...]
    delta_norm: float
    global_weights_after: np.ndarray
    centralized_val_wer: float = float("nan")
    aggregated_ids: tuple[int, ...] = ()
    skipped_ids: tuple[int, ...] = ()
    mean_client_loss: float = float("nan")
    empty: bool = False


# --- client sampling ------------------------------------------------------

def round_rng(seed: int, round_index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, stream])


def sample_clients(M: int, K: int, round_index: int, seed: int) -> list[int]:
    """K distinct client ids drawn uniformly without replacement, returned sorted."""
    if not 1 <= K <= M:
        raise ConfigurationError(f"cannot sample K={K} clients from M={M}")
    picked = round_rng(seed, round_index, 0).choice(M, size=K, replace=False)
    return sorted(int(i) for i in picked)


# --- weighting strategies -------------------------------------------------

def _softmax(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    z = np.exp(scores - scores.max())
    return z / z.sum()


def weights_fedavg(n) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if n.size == 0:
        raise PreconditionError("no clients to weight")
    if np.any(n < 1):
        raise PreconditionError("every client needs at least one sample")
    return n / n.sum()


def weights_loss_softmax(losses) -> np.ndarray:
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise PreconditionError("no clients to weight")
    if not np.all(np.isfinite(losses)):
        raise PreconditionError("losses must be finite")
    return _softmax(-losses)


def weights_wer_softmax(wers) -> np.ndarray:
    wers = np.asarray(wers, dtype=np.float64)
    if wers.size == 0:
        raise PreconditionError("no clients to weight")
    if not np.all(np.isfinite(wers)) or np.any(wers < 0):
        raise PreconditionError("WERs must be finite and non-negative")
    return _softmax(1.0 - wers)


def strategy_weights(strategy: str, updates: Sequence[ClientUpdate]) -> np.ndarray:
    strategy = canonical_strategy(strategy)
    if strategy == "fedavg":
        return weights_fedavg([u.n_k for u in updates])
    if strategy == "loss_softmax":
        return weights_loss_softmax([u.train_loss for u in updates])
    return weights_wer_softmax([u.val_wer for u in updates])


def aggregate(prev_global, updates: Sequence[ClientUpdate], strategy: str, server_lr: float,
              round_index: int = 0):
    """Apply one server step; returns ``(new_weights, RoundRecord)``.

    Updates are sorted by client id first so the result does not depend on
    arrival order.  Clients with non-finite metrics or weights are dropped
    before weighting.
    """
    prev = np.asarray(prev_global, dtype=np.float64)
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise EmptyRoundError("no client updates to aggregate")
    for u in updates:
        if np.shape(u.new_weights) != prev.shape:
            raise ProtocolError(
                f"client {u.client_id} sent {np.size(u.new_weights)} parameters, expected {prev.size}"
            )
    kept = [u for u in updates if u.is_finite]
    dropped = tuple(u.client_id for u in updates if not u.is_finite)
    if not kept:
        raise EmptyRoundError("every client reported non-finite metrics")
    alphas = strategy_weights(strategy, kept)
    delta = np.zeros_like(prev)
    for a, u in zip(alphas, kept):
        delta += a * (prev - u.new_weights)
    new = prev - server_lr * delta
    record = RoundRecord(
        round_index=round_index,
        sampled_ids=tuple(u.client_id for u in updates),
        alphas=tuple(float(a) for a in alphas),
        delta_norm=float(np.linalg.norm(delta)),
        global_weights_after=new,
        aggregated_ids=tuple(u.client_id for u in kept),
        skipped_ids=dropped,
        mean_client_loss=float(np.mean([u.train_loss for u in kept])),
    )
    return new, record


def server_finetune(weights, held_out, cfg: LossConfig) -> np.ndarray:
    """One SGD step on the server's held-out batch (the whole batch at once)."""
    if isinstance(held_out, ClientDataset):
        held_out = held_out.train
    held_out = list(held_out)
    if not held_out:
        raise ConfigurationError("server fine-tuning needs a non-empty held-out batch")
    _, grad = batch_loss_and_grad(weights, held_out, cfg)
    return np.asarray(weights, dtype=np.float64) - cfg.learning_rate_local * grad


# --- experiment loop ------------------------------------------------------

def local_seed(seed: int, round_index: int) -> int:
    """Shuffle seed handed to every client trained in ``round_index``."""
    return int(round_rng(seed, round_index, 1).integers(2**63 - 1))


def client_update(trainer: Trainer, weights, client: ClientDataset, seed: int) -> ClientUpdate:
    new_w, loss = trainer.train(weights, client.train, seed)
    # clients too small for a local test split score themselves on train data
    eval_set = client.test if client.has_local_test else client.train
    val = trainer.evaluate(new_w, eval_set)
    return ClientUpdate(client.client_id, new_w, client.n_k, float(loss), float(val.wer))


@dataclass
class Federation:
    """Server state for one experiment; ``run`` drives all rounds."""

    cfg: FederationConfig
    clients: list[ClientDataset]
    central_val: Sequence[Utterance]
    server_holdout: Sequence[Utterance] = ()
    trainer: Trainer | None = None
    workers: int = 1
    history: list[RoundRecord] = field(default_factory=list)

    def __post_init__(self):
        if not self.clients:
            raise PreconditionError("a federation needs at least one client")
        if len(self.clients) != self.cfg.total_clients:
            raise ConfigurationError(
                f"config says M={self.cfg.total_clients} but {len(self.clients)} clients were given"
            )
        ids = [c.client_id for c in self.clients]
        if sorted(ids) != list(range(len(ids))):
            raise ConfigurationError("client ids must be 0..M-1")
        self.clients = sorted(self.clients, key=lambda c: c.client_id)
        if self.cfg.server_finetune:
            self.server_holdout = list(self.server_holdout)[: self.cfg.server_holdout_size]
            if not self.server_holdout:
                raise ConfigurationError("server_finetune enabled without held-out data")
        if self.trainer is None:
            self.trainer = ReferenceTrainer(self.cfg.local)

    def _train_clients(self, weights, ids, seed):
        def work(cid):
            try:
                return client_update(self.trainer, weights, self.clients[cid], seed)
            except FedSimError as exc:
                log.warning("client %d skipped: %s", cid, exc)
                return None

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                results = list(pool.map(work, ids))
        else:
            results = [work(cid) for cid in ids]
        return [r for r in results if r is not None]

    def run_round(self, weights, round_index: int):
        cfg = self.cfg
        ids = sample_clients(cfg.total_clients, cfg.clients_per_round, round_index, cfg.seed)
        updates = self._train_clients(weights, ids, local_seed(cfg.seed, round_index))
        try:
            new, record = aggregate(weights, updates, cfg.strategy, cfg.server_lr, round_index)
        except EmptyRoundError as exc:
            log.warning("round %d left the global model unchanged: %s", round_index, exc)
            new = np.array(weights, dtype=np.float64, copy=True)
            record = RoundRecord(round_index, tuple(ids), (), 0.0, new,
                                 skipped_ids=tuple(ids), empty=True)
        else:
            record.sampled_ids = tuple(ids)
            record.skipped_ids = tuple(sorted(set(ids) - set(record.aggregated_ids)))
            if cfg.server_finetune:
                new = server_finetune(new, self.server_holdout, cfg.local)
                record.global_weights_after = new
        record.centralized_val_wer = self.trainer.evaluate(new, self.central_val).wer
        log.info("round %d wer=%.4f aggregated=%d", round_index, record.centralized_val_wer,
                 len(record.aggregated_ids))
        return new, record

    def run(self, init) -> list[RoundRecord]:
        weights = np.array(init, dtype=np.float64, copy=True)
        self.history = []
        for t in range(1, self.cfg.rounds + 1):
            weights, record = self.run_round(weights, t)
            self.history.append(record)
        return self.history


def run_experiment(cfg: FederationConfig, clients, server_holdout, central_val, init,
                   trainer: Trainer | None = None, workers: int = 1) -> list[RoundRecord]:
    """Run ``cfg.rounds`` synchronous rounds starting from ``init``."""
    if isinstance(server_holdout, ClientDataset):
        server_holdout = server_holdout.train + server_holdout.test
    if isinstance(central_val, ClientDataset):
        central_val = central_val.train + central_val.test
    fed = Federation(cfg, list(clients), list(central_val), list(server_holdout or ()), trainer, workers)
    return fed.run(init)
