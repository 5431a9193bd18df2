"""Command-line entry point: ``fedsim <generate|warmup|federate|partition|analyze>``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
Set ``FEDSIM_LOG`` (DEBUG, INFO, WARNING, ...) to control log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from . import io as fio
from .errors import ConfigurationError, DataError, FedSimError, ProtocolError
from .heterogeneity import FEATURES, AnalysisConfig, analyze_profiles, profile_utterance, zscore_columns
from .model import init_weights
from .partition import SCHEMES, make_local_holdout, make_plan
from .pipeline import (CLIENT_COLUMNS, ROUND_COLUMNS, SUMMARY_COLUMNS, RunSettings, WarmupSettings,
                       build_manifest, client_rows, csv_text, decode_weights, encode_weights, fmt,
                       require, round_rows, run_federated, run_warmup, summary_rows)
from .synthcorpus import (HISTOGRAM_BIN_LABELS, AudioCorpusSpec, CorpusSpec, cv_like, generate,
                          generate_audio, ls_like, sample_count_histogram)

log = logging.getLogger("fedsim")

PRESETS = {"cv_like": cv_like, "ls_like": ls_like}
STATISTICS = ("mean_of_means", "std_of_means", "mean_of_stds", "std_of_stds",
              "kurtosis_of_means", "n_clients", "n_clients_with_std")


def load_config(path) -> dict:
    if path is None:
        raise ConfigurationError("--config is required")
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except ValueError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigurationError("config must be a JSON object")
    return doc


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigurationError("--out is required")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --- generate -------------------------------------------------------------

def cmd_generate(args) -> int:
    doc = load_config(args.config)
    require(doc, "kind", "corpus")
    corpus_doc = dict(doc["corpus"])
    if args.seed is not None:
        corpus_doc["seed"] = args.seed
    out = _out_dir(args)
    if doc["kind"] == "features":
        spec = CorpusSpec.from_dict(corpus_doc)
        corpus = generate(spec)
        fio.write_corpus(corpus, out)
        counts = list(corpus.speaker_counts().values())
    elif doc["kind"] == "audio":
        preset = doc.get("preset")
        if preset is None:
            spec = AudioCorpusSpec.from_dict(corpus_doc)
        elif preset in PRESETS:
            spec = PRESETS[preset](**corpus_doc)
        else:
            raise ConfigurationError(f"unknown preset {preset!r}; pick one of {sorted(PRESETS)}")
        utts = generate_audio(spec)
        fio.write_audio_corpus(utts, out, spec.to_dict())
        per_spk: dict[str, int] = {}
        for u in utts:
            per_spk[u.speaker_id] = per_spk.get(u.speaker_id, 0) + 1
        counts = list(per_spk.values())
    else:
        raise ConfigurationError(f"kind must be 'features' or 'audio', not {doc['kind']!r}")
    hist = csv_text(("bin", "speakers"), zip(HISTOGRAM_BIN_LABELS, sample_count_histogram(counts)))
    (out / "histogram.csv").write_text(hist)
    sys.stdout.write(hist)
    return 0


# --- warmup ---------------------------------------------------------------

def cmd_warmup(args) -> int:
    if args.corpus is None:
        raise ConfigurationError("--corpus is required")
    doc = load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    settings = WarmupSettings.from_dict(doc)
    corpus = fio.read_corpus(args.corpus)
    res = run_warmup(corpus, settings)
    out = _out_dir(args)
    fio.write_weights(out / "warmup_weights.f32", res.weights, corpus.vocab_size, corpus.feature_dim,
                      warmup_speakers=res.warmup_speakers, heldout_utterances=res.heldout_ids,
                      untrained_wer=res.untrained_wer, warmup_wer=res.warmup_wer,
                      config=settings.to_dict(), tool_version=__version__)
    print(f"untrained_wer={fmt(res.untrained_wer)} warmup_wer={fmt(res.warmup_wer)} "
          f"speakers={len(res.warmup_speakers)}")
    return 0


# --- federate -------------------------------------------------------------

def _apply_overrides(doc: dict, args) -> dict:
    doc = dict(doc)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.strategy is not None:
        doc["strategy"] = args.strategy
    if args.clients_per_round is not None:
        doc["clients_per_round"] = args.clients_per_round
    if args.scheme is not None:
        doc["partition"] = {**(doc.get("partition") or {}), "scheme": args.scheme}
    return doc


def _corpus_from_manifest(man: dict):
    info = man.get("corpus") or {}
    if info.get("spec"):
        return generate(CorpusSpec.from_dict(info["spec"])), info.get("path")
    if info.get("path"):
        return fio.read_corpus(info["path"]), info["path"]
    raise DataError("manifest carries neither a corpus spec nor a corpus path")


def cmd_federate(args) -> int:
    if args.manifest is not None:
        try:
            man = json.loads(Path(args.manifest).read_text())
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read manifest {args.manifest}: {exc}") from None
        require(man, "federation", "corpus", "init", where="manifest")
        settings = RunSettings.from_dict(man["federation"])
        corpus, corpus_path = _corpus_from_manifest(man)
        init = decode_weights(man["init"]["weights_f32_b64"])
        warm = list(man["init"].get("warmup_speakers", []))
    else:
        if args.corpus is None:
            raise ConfigurationError("--corpus is required (or --manifest to replay)")
        settings = RunSettings.from_dict(_apply_overrides(load_config(args.config), args))
        corpus_path = str(Path(args.corpus).resolve())
        corpus = fio.read_corpus(args.corpus)
        if args.init is not None:
            init, side = fio.read_weights(args.init)
            if (side.get("vocab_size"), side.get("feature_dim")) != (corpus.vocab_size, corpus.feature_dim):
                raise ProtocolError("initial weights do not match the corpus dimensions")
            warm = list(side.get("warmup_speakers", []))
        else:
            seed = settings.seed if settings.init_seed is None else settings.init_seed
            init = init_weights(corpus.vocab_size, corpus.feature_dim, seed, settings.init_scale)
            warm = []
        # round-trip through float32 so that a replay starts from the identical vector
        init = decode_weights(encode_weights(init))
    results = run_federated(corpus, settings, init, warm, workers=args.workers)
    out = _out_dir(args)
    files = {
        "rounds.csv": csv_text(ROUND_COLUMNS, round_rows(results)),
        "client_wer.csv": csv_text(CLIENT_COLUMNS, client_rows(results)),
        "summary.csv": csv_text(SUMMARY_COLUMNS, summary_rows(results)),
    }
    digests = {}
    for name, text in files.items():
        (out / name).write_text(text)
        digests[name] = fio.sha256_file(out / name)
    man = build_manifest(settings, corpus, corpus_path, init, warm, results, digests)
    (out / "manifest.json").write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")
    sys.stdout.write(files["summary.csv"])
    return 0


# --- partition ------------------------------------------------------------

def cmd_partition(args) -> int:
    if args.corpus is None:
        raise ConfigurationError("--corpus is required")
    doc = load_config(args.config) if args.config else {}
    scheme = args.scheme or doc.get("scheme")
    if scheme is None:
        raise ConfigurationError("missing required field 'scheme' (use --scheme or the config)")
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    corpus = fio.read_corpus(args.corpus)
    plan = make_plan(corpus, scheme, seed, int(doc.get("silos", 10)))
    plan = make_local_holdout(plan, float(doc.get("holdout_fraction", 0.1)),
                              int(doc.get("holdout_min", 2)), seed)
    out = _out_dir(args)
    plan.save(out / "partition.json")
    print(f"scheme={scheme} clients={plan.num_clients} no_local_test={len(plan.flagged)}")
    return 0


# --- analyze --------------------------------------------------------------

def _profile_corpus(corpus_dir, cfg: AnalysisConfig):
    profiles, skipped = [], []
    for uid, spk, wav in fio.iter_audio_corpus(corpus_dir):
        if isinstance(wav, DataError):
            log.warning("skipping %s: %s", uid, wav)
            skipped.append((uid, str(wav)))
            continue
        try:
            profiles.append(profile_utterance(wav, uid, spk, cfg))
        except FedSimError as exc:
            log.warning("skipping %s: %s", uid, exc)
            skipped.append((uid, str(exc)))
    if not profiles:
        raise DataError(f"no readable utterances in {corpus_dir}")
    return profiles, skipped


def cmd_analyze(args) -> int:
    if args.corpus_a is None or args.corpus_b is None:
        raise ConfigurationError("--corpus-a and --corpus-b are required")
    doc = load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    cfg = AnalysisConfig(**doc.get("analysis", {}))
    out = _out_dir(args)
    analyses = {}
    for tag, path, emb in (("a", args.corpus_a, args.embeddings_a), ("b", args.corpus_b, args.embeddings_b)):
        if fio.read_corpus_meta(path).get("kind") != "audio":
            raise DataError(f"{path} is not an audio corpus")
        profiles, skipped = _profile_corpus(path, cfg)
        embeddings = fio.read_embeddings(emb) if emb else None
        analyses[tag] = analyze_profiles(profiles, seed, embeddings, [u for u, _ in skipped])
        rows = [(p.utt_id, p.client_id, *[getattr(p, f) for f in FEATURES]) for p in profiles]
        (out / f"profiles_{tag}.csv").write_text(csv_text(("utterance_id", "client_id", *FEATURES), rows))
        z = zscore_columns([p.vector() for p in profiles])
        proj = [(p.utt_id, p.client_id, *z[i]) for i, p in enumerate(profiles)]
        (out / f"projection_{tag}.csv").write_text(
            csv_text(("utterance_id", "client_id", *[f"z_{f}" for f in FEATURES]), proj))
        (out / f"skipped_{tag}.csv").write_text(csv_text(("utterance_id", "reason"), skipped))
    a, b = analyses["a"], analyses["b"]
    rows = []
    for feat in FEATURES:
        for stat in STATISTICS:
            rows.append((feat, stat, getattr(a.reports[feat], stat), getattr(b.reports[feat], stat)))
    rows.append(("clustering", "purity", a.purity, b.purity))
    rows.append(("corpus", "utterances", len(a.profiles), len(b.profiles)))
    rows.append(("corpus", "skipped", len(a.skipped), len(b.skipped)))
    text = csv_text(("feature", "statistic", "corpus_a", "corpus_b"), rows)
    (out / "comparison.csv").write_text(text)
    sys.stdout.write(text)
    return 0


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description="Federated CTC/CE simulation toolkit")
    parser.add_argument("--version", action="version", version=f"fedsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=False, help="JSON configuration file")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--out", help="output directory")
        return p

    common(sub.add_parser("generate", help="synthesise a feature or audio corpus"))
    p = common(sub.add_parser("warmup", help="centralised warm-up training on the largest speakers"))
    p.add_argument("--corpus", help="feature corpus directory")
    p = common(sub.add_parser("federate", help="run federated training"))
    p.add_argument("--corpus", help="feature corpus directory")
    p.add_argument("--init", help="initial weights (.f32 with sidecar), e.g. from warmup")
    p.add_argument("--manifest", help="replay a previous run from its manifest.json")
    p.add_argument("--workers", type=int, default=1, help="parallel client trainers")
    p.add_argument("--strategy", choices=("fedavg", "loss", "wer"))
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--clients-per-round", type=int, dest="clients_per_round")
    p = common(sub.add_parser("partition", help="write a client partition plan"))
    p.add_argument("--corpus", help="feature corpus directory")
    p.add_argument("--scheme", choices=SCHEMES)
    p = common(sub.add_parser("analyze", help="compare heterogeneity of two audio corpora"))
    p.add_argument("--corpus-a", dest="corpus_a")
    p.add_argument("--corpus-b", dest="corpus_b")
    p.add_argument("--embeddings-a", dest="embeddings_a", help="JSONL utterance embeddings for corpus A")
    p.add_argument("--embeddings-b", dest="embeddings_b", help="JSONL utterance embeddings for corpus B")
    return parser


COMMANDS = {"generate": cmd_generate, "warmup": cmd_warmup, "federate": cmd_federate,
            "partition": cmd_partition, "analyze": cmd_analyze}


def main(argv=None) -> int:
    level = os.environ.get("FEDSIM_LOG", "WARNING").upper()
    logging.basicConfig(level=level if isinstance(logging.getLevelName(level), int) else "WARNING",
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except FedSimError as exc:
        print(f"fedsim {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:  # unwritable output, vanished input, ...
        print(f"fedsim {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except TypeError as exc:  # dataclass construction from bad config values
        print(f"fedsim {args.command}: error: {exc}", file=sys.stderr)
        return ConfigurationError.exit_code


if __name__ == "__main__":
    sys.exit(main())
