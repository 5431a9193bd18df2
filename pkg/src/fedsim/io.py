"""On-disk formats.

* Arrays: raw little-endian float32, row-major, in ``<name>.f32`` with a
  ``<name>.json`` sidecar holding ``{"shape": [...], "dtype": "<f4"}`` plus
  any extra metadata.
* Corpora: a directory with ``corpus.json`` (kind, spec, dimensions),
  ``manifest.jsonl`` (one utterance per line) and ``features/`` or ``wav/``.
* Audio: 16-bit PCM mono RIFF WAV.
* External embeddings: JSONL lines ``{"utterance_id", "client_id", "vector"}``.
"""
from __future__ import annotations

import hashlib
import json
import wave
from pathlib import Path

import numpy as np

from . import __version__
from .data import Corpus, Utterance
from .errors import DataError
from .heterogeneity import Waveform
from .synthcorpus import PCM_SCALE, AudioUtterance


def dumps(doc) -> str:
    """Canonical JSON used for every file we write (stable bytes across runs)."""
    return json.dumps(doc, sort_keys=True, separators=(",", ":"), allow_nan=True)


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _base(path) -> Path:
    path = Path(path)
    return path.with_suffix("") if path.suffix in (".f32", ".json") else path


def write_array(path, array, **meta) -> Path:
    base = _base(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    base.with_suffix(".f32").write_bytes(arr.tobytes())
    side = {"shape": list(arr.shape), "dtype": "<f4", **meta}
    base.with_suffix(".json").write_text(dumps(side) + "\n")
    return base.with_suffix(".f32")


def read_array(path) -> tuple[np.ndarray, dict]:
    base = _base(path)
    try:
        side = json.loads(base.with_suffix(".json").read_text())
        raw = np.frombuffer(base.with_suffix(".f32").read_bytes(), dtype="<f4")
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read array {base}: {exc}") from None
    shape = tuple(side.get("shape", (raw.size,)))
    if int(np.prod(shape)) != raw.size:
        raise DataError(f"{base}: sidecar shape {shape} does not match {raw.size} values")
    return raw.reshape(shape).astype(np.float64), side


def write_weights(path, weights, vocab_size: int, feature_dim: int, **meta) -> Path:
    return write_array(path, weights, vocab_size=vocab_size, feature_dim=feature_dim, **meta)


def read_weights(path) -> tuple[np.ndarray, dict]:
    w, side = read_array(path)
    if w.ndim != 1:
        raise DataError("weights must be a flat vector")
    return w, side


# --- feature corpora ------------------------------------------------------

def write_corpus(corpus: Corpus, out_dir) -> Path:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    lines = []
    for u in corpus.utterances:
        rel = f"features/{u.utt_id}.f32"
        write_array(out / rel, u.features)
        lines.append(dumps({
            "utterance_id": u.utt_id,
            "speaker_id": u.speaker_id,
            "tokens": list(u.tokens),
            "alignment": list(u.alignment),
            "features": rel,
        }))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {
        "kind": "features",
        "tool_version": __version__,
        "vocab_size": corpus.vocab_size,
        "feature_dim": corpus.feature_dim,
        "noisy_speakers": sorted(corpus.noisy_speakers),
        "spec": corpus.spec,
    }
    (out / "corpus.json").write_text(dumps(meta) + "\n")
    return out / "manifest.jsonl"


def read_corpus_meta(corpus_dir) -> dict:
    path = Path(corpus_dir) / "corpus.json"
    try:
        return json.loads(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _manifest_lines(corpus_dir):
    path = Path(corpus_dir) / "manifest.jsonl"
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        if line.strip():
            try:
                yield json.loads(line)
            except ValueError as exc:
                raise DataError(f"{path}:{n}: {exc}") from None


def read_corpus(corpus_dir) -> Corpus:
    corpus_dir = Path(corpus_dir)
    meta = read_corpus_meta(corpus_dir)
    if meta.get("kind") != "features":
        raise DataError(f"{corpus_dir} is not a feature corpus")
    utts = []
    for rec in _manifest_lines(corpus_dir):
        try:
            x, _ = read_array(corpus_dir / rec["features"])
            utts.append(Utterance(rec["utterance_id"], rec["speaker_id"], x,
                                  tuple(rec["tokens"]), tuple(rec["alignment"])))
        except KeyError as exc:
            raise DataError(f"manifest entry missing {exc}") from None
    return Corpus(utts, int(meta["vocab_size"]), int(meta["feature_dim"]),
                  frozenset(meta.get("noisy_speakers", ())), meta.get("spec"))


# --- audio ----------------------------------------------------------------

def write_wav(path, samples, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE), -32768, 32767)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(sample_rate))
        fh.writeframes(pcm.astype("<i2").tobytes())


def read_wav(path) -> Waveform:
    """16-bit PCM mono WAV as a waveform in [-1, 1)."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit mono PCM is supported")
            sr = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (OSError, EOFError, wave.Error) as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    if samples.size == 0:
        raise DataError(f"{path}: empty audio")
    return Waveform(samples, sr)


def write_audio_corpus(utts: list[AudioUtterance], out_dir, spec: dict | None = None) -> Path:
    out = Path(out_dir)
    lines = []
    for u in utts:
        rel = f"wav/{u.utt_id}.wav"
        write_wav(out / rel, u.samples, u.sample_rate)
        lines.append(dumps({
            "utterance_id": u.utt_id,
            "speaker_id": u.speaker_id,
            "wav": rel,
            "construction_snr_db": None if not np.isfinite(u.snr_db) else round(u.snr_db, 6),
        }))
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    meta = {"kind": "audio", "tool_version": __version__, "spec": spec}
    (out / "corpus.json").write_text(dumps(meta) + "\n")
    return out / "manifest.jsonl"


def iter_audio_corpus(corpus_dir):
    """Yield ``(utt_id, speaker_id, Waveform | DataError)`` in manifest order."""
    corpus_dir = Path(corpus_dir)
    for rec in _manifest_lines(corpus_dir):
        uid = rec.get("utterance_id", "?")
        try:
            yield uid, rec["speaker_id"], read_wav(corpus_dir / rec["wav"])
        except KeyError as exc:
            yield uid, rec.get("speaker_id", "?"), DataError(f"manifest entry missing {exc}")
        except DataError as exc:
            yield uid, rec.get("speaker_id", "?"), exc


def read_embeddings(path) -> dict[str, tuple[str, np.ndarray]]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read embeddings {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            out[rec["utterance_id"]] = (str(rec["client_id"]), np.asarray(rec["vector"], dtype=np.float64))
        except (ValueError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{n}: bad embedding line ({exc})") from None
    dims = {v.shape for _, v in out.values()}
    if len(dims) > 1:
        raise DataError(f"{path}: embeddings have mixed dimensions {sorted(dims)}")
    return out
