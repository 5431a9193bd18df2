"""Reference acoustic model: a linear softmax frame classifier.

The model maps each feature frame independently to a distribution over the
vocabulary (blank at id 0).  Training minimises ``mu * CE + (1 - mu) * CTC``
per utterance, where CE is scored against the frame alignment shipped with
the data and CTC marginalises over all alignments.  Gradients are analytic:
CTC uses a log-space forward-backward pass.

Parameters are a flat vector: the ``V x D`` weight matrix (row-major)
followed by ``V`` biases.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
from numba import njit

from .data import BLANK, ClientDataset, Utterance, collapse
from .errors import (
    ConfigurationError,
    DataError,
    InfeasibleAlignmentError,
    PreconditionError,
)
from .metrics import WerScore, corpus_wer

LOG_ZERO = -1.0e30


@dataclass(frozen=True)
class LossConfig:
    mu: float = 0.3
    learning_rate_local: float = 0.05
    local_epochs: int = 5
    batch_size: int = 8

    def __post_init__(self):
        if not 0.0 <= self.mu <= 1.0:
            raise ConfigurationError(f"mu must lie in [0, 1], got {self.mu}")
        # lr == 0 is accepted as a degenerate no-op configuration
        if not self.learning_rate_local >= 0.0:
            raise ConfigurationError("learning_rate_local must be non-negative")
        if self.local_epochs < 1:
            raise ConfigurationError("local_epochs must be positive")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")


def num_params(vocab_size: int, feature_dim: int) -> int:
    return vocab_size * feature_dim + vocab_size


def unpack(weights: np.ndarray, feature_dim: int) -> tuple[np.ndarray, np.ndarray]:
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or weights.size % (feature_dim + 1):
        raise ConfigurationError(
            f"parameter vector of length {weights.size} does not fit feature_dim={feature_dim}"
        )
    vocab = weights.size // (feature_dim + 1)
    return weights[: vocab * feature_dim].reshape(vocab, feature_dim), weights[vocab * feature_dim:]


def init_weights(vocab_size: int, feature_dim: int, seed: int | None = None, scale: float = 0.01) -> np.ndarray:
    """Zero vector when ``seed`` is None, otherwise small Gaussian noise."""
    n = num_params(vocab_size, feature_dim)
    if seed is None:
        return np.zeros(n)
    return np.random.default_rng(seed).normal(0.0, scale, size=n)


def log_forward(weights, x, vocab_size: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ConfigurationError("features must be a non-empty (frames, dim) matrix")
    W, b = unpack(weights, x.shape[1])
    if vocab_size is not None and W.shape[0] != vocab_size:
        raise ConfigurationError(f"model has {W.shape[0]} outputs, corpus expects {vocab_size}")
    logits = x @ W.T + b
    logits -= logits.max(axis=1, keepdims=True)
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def forward(weights, x, vocab_size: int | None = None) -> np.ndarray:
    """Per-frame token posteriors, shape ``(T_x, V)``; rows sum to one."""
    return np.exp(log_forward(weights, x, vocab_size))


# --- CTC ------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _lse(a, b):
    if a < b:
        a, b = b, a
    if b <= LOG_ZERO:
        return a
    return a + np.log1p(np.exp(b - a))


@njit(cache=True, nogil=True)
def _ctc_alpha(log_probs, ext):
    T = log_probs.shape[0]
    S = ext.shape[0]
    alpha = np.full((T, S), LOG_ZERO)
    alpha[0, 0] = log_probs[0, ext[0]]
    if S > 1:
        alpha[0, 1] = log_probs[0, ext[1]]
    for t in range(1, T):
        for s in range(S):
            a = alpha[t - 1, s]
            if s >= 1:
                a = _lse(a, alpha[t - 1, s - 1])
            if s >= 2 and ext[s] != 0 and ext[s] != ext[s - 2]:
                a = _lse(a, alpha[t - 1, s - 2])
            if a > LOG_ZERO / 2:
                alpha[t, s] = a + log_probs[t, ext[s]]
    return alpha


@njit(cache=True, nogil=True)
def _ctc_beta(log_probs, ext):
    # beta[t, s]: log prob of emitting the remaining suffix after frame t,
    # given state s at frame t (emission at t excluded)
    T = log_probs.shape[0]
    S = ext.shape[0]
    beta = np.full((T, S), LOG_ZERO)
    beta[T - 1, S - 1] = 0.0
    if S > 1:
        beta[T - 1, S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        for s in range(S):
            b = beta[t + 1, s] + log_probs[t + 1, ext[s]]
            if s + 1 < S:
                b = _lse(b, beta[t + 1, s + 1] + log_probs[t + 1, ext[s + 1]])
            if s + 2 < S and ext[s + 2] != 0 and ext[s + 2] != ext[s]:
                b = _lse(b, beta[t + 1, s + 2] + log_probs[t + 1, ext[s + 2]])
            if b > LOG_ZERO / 2:
                beta[t, s] = b
    return beta


@njit(cache=True, nogil=True)
def _ctc_loglik(alpha):
    T, S = alpha.shape
    ll = alpha[T - 1, S - 1]
    if S > 1:
        ll = _lse(ll, alpha[T - 1, S - 2])
    return ll


@njit(cache=True, nogil=True)
def _ctc_occupancy(log_probs, ext, alpha, beta, loglik):
    T, V = log_probs.shape
    occ = np.zeros((T, V))
    for t in range(T):
        for s in range(ext.shape[0]):
            v = alpha[t, s] + beta[t, s]
            if v > LOG_ZERO / 2:
                occ[t, ext[s]] += np.exp(v - loglik)
    return occ


def _extend(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    ext = np.zeros(2 * tokens.size + 1, dtype=np.int64)
    ext[1::2] = tokens
    return ext


def _check_transcript(tokens, vocab_size: int) -> None:
    if len(tokens) == 0:
        raise PreconditionError("transcript must hold at least one token")
    for tok in tokens:
        if tok == BLANK or not 0 <= tok < vocab_size:
            raise DataError(f"token id {tok} invalid for vocabulary of size {vocab_size}")


def min_frames(tokens) -> int:
    """Shortest input a CTC path can cover: one frame per token plus a blank between repeats."""
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def ctc_loss_from_log_probs(log_probs: np.ndarray, tokens) -> float:
    _check_transcript(tokens, log_probs.shape[1])
    if min_frames(tokens) > log_probs.shape[0]:
        raise InfeasibleAlignmentError(
            f"{len(tokens)} tokens cannot be aligned to {log_probs.shape[0]} frames"
        )
    ll = _ctc_loglik(_ctc_alpha(np.ascontiguousarray(log_probs), _extend(tokens)))
    if ll <= LOG_ZERO / 2:
        raise InfeasibleAlignmentError("every CTC path has zero probability")
    return -ll


def _safe_log(probs: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    out = np.full(probs.shape, LOG_ZERO)
    np.log(probs, out=out, where=probs > 0)
    return out


def ctc_loss(posteriors, tokens) -> float:
    """Negative log probability of ``tokens`` summed over every CTC alignment."""
    return ctc_loss_from_log_probs(_safe_log(posteriors), tokens)


def ce_loss(posteriors, alignment) -> float:
    """Mean per-frame negative log posterior of the aligned labels."""
    posteriors = np.asarray(posteriors, dtype=np.float64)
    labels = np.asarray(alignment, dtype=np.int64)
    if labels.shape[0] != posteriors.shape[0]:
        raise DataError("alignment length must equal the number of frames")
    if labels.min() < 0 or labels.max() >= posteriors.shape[1]:
        raise DataError("alignment label outside the vocabulary")
    picked = posteriors[np.arange(labels.size), labels]
    return float(-np.mean(_safe_log(picked)))


def joint_loss(posteriors, tokens, alignment, cfg: LossConfig) -> float:
    ce = ce_loss(posteriors, alignment) if cfg.mu > 0 else 0.0
    ctc = ctc_loss(posteriors, tokens) if cfg.mu < 1 else 0.0
    return cfg.mu * ce + (1.0 - cfg.mu) * ctc


def loss_and_grad(weights, utt: Utterance, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Joint loss of one utterance and its gradient w.r.t. the flat parameters."""
    x = np.asarray(utt.features, dtype=np.float64)
    log_probs = log_forward(weights, x)
    probs = np.exp(log_probs)
    T, V = probs.shape
    grad_logits = np.zeros((T, V))
    loss = 0.0
    if cfg.mu > 0:
        labels = np.asarray(utt.alignment, dtype=np.int64)
        if labels.size != T:
            raise DataError(f"{utt.utt_id}: alignment length {labels.size} != {T} frames")
        loss += cfg.mu * float(-np.mean(log_probs[np.arange(T), labels]))
        ce_grad = probs.copy()
        ce_grad[np.arange(T), labels] -= 1.0
        grad_logits += (cfg.mu / T) * ce_grad
    if cfg.mu < 1:
        tokens = utt.tokens
        _check_transcript(tokens, V)
        if min_frames(tokens) > T:
            raise InfeasibleAlignmentError(f"{utt.utt_id}: transcript longer than input")
        ext = _extend(tokens)
        log_probs = np.ascontiguousarray(log_probs)
        alpha = _ctc_alpha(log_probs, ext)
        ll = _ctc_loglik(alpha)
        if ll <= LOG_ZERO / 2:
            raise InfeasibleAlignmentError(f"{utt.utt_id}: every CTC path has zero probability")
        beta = _ctc_beta(log_probs, ext)
        occ = _ctc_occupancy(log_probs, ext, alpha, beta, ll)
        loss += (1.0 - cfg.mu) * (-ll)
        grad_logits += (1.0 - cfg.mu) * (probs - occ)
    grad = np.concatenate([(grad_logits.T @ x).ravel(), grad_logits.sum(axis=0)])
    return loss, grad


def batch_loss_and_grad(weights, utts: Sequence[Utterance], cfg: LossConfig):
    """Per-utterance losses and the gradient averaged over the batch."""
    losses = np.empty(len(utts))
    grad = np.zeros_like(np.asarray(weights, dtype=np.float64))
    for i, utt in enumerate(utts):
        losses[i], g = loss_and_grad(weights, utt, cfg)
        grad += g
    return losses, grad / len(utts)


def _utterances(data) -> list[Utterance]:
    if isinstance(data, ClientDataset):
        return list(data.train)
    return list(data)


def sgd_train(weights, data, cfg: LossConfig, seed: int, epochs: int | None = None):
    """Plain mini-batch SGD on the joint loss.

    Batch order is reshuffled every epoch from ``seed``.  Returns the new
    weights and the mean per-utterance loss seen during the last epoch (the
    loss at the starting weights when ``epochs`` is 0).
    """
    utts = _utterances(data)
    if not utts:
        raise PreconditionError("cannot train on an empty dataset")
    epochs = cfg.local_epochs if epochs is None else epochs
    w = np.array(weights, dtype=np.float64, copy=True)
    rng = np.random.default_rng(seed)
    if epochs == 0:
        losses, _ = batch_loss_and_grad(w, utts, cfg)
        return w, float(losses.mean())
    for _ in range(epochs):
        order = rng.permutation(len(utts))
        epoch_losses = []
        for start in range(0, len(utts), cfg.batch_size):
            batch = [utts[i] for i in order[start:start + cfg.batch_size]]
            losses, grad = batch_loss_and_grad(w, batch, cfg)
            w -= cfg.learning_rate_local * grad
            epoch_losses.append(losses)
    return w, float(np.concatenate(epoch_losses).mean())


def local_train(weights, data, cfg: LossConfig, seed: int):
    return sgd_train(weights, data, cfg, seed)


def greedy_decode(posteriors) -> list[int]:
    """Best-path decoding: frame argmax (ties to the lower id), collapse, drop blanks."""
    return collapse(np.argmax(np.asarray(posteriors), axis=1))


def transcribe(weights, utts: Sequence[Utterance]) -> list[list[int]]:
    return [greedy_decode(log_forward(weights, u.features)) for u in utts]


def evaluate_wer(weights, utts: Sequence[Utterance]) -> WerScore:
    utts = list(utts)
    return corpus_wer((u.tokens, hyp) for u, hyp in zip(utts, transcribe(weights, utts)))


class Trainer(Protocol):
    """What the federation engine needs from a model."""

    def train(self, weights: np.ndarray, utts: Sequence[Utterance], seed: int) -> tuple[np.ndarray, float]:
        ...

    def evaluate(self, weights: np.ndarray, utts: Sequence[Utterance]) -> WerScore:
        ...


@dataclass(frozen=True)
class ReferenceTrainer:
    cfg: LossConfig = LossConfig()

    def train(self, weights, utts, seed):
        return local_train(weights, utts, self.cfg, seed)

    def evaluate(self, weights, utts):
        return evaluate_wer(weights, utts)
