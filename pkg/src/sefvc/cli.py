"""Command line entry points.

Errors exit with status 1 and a single JSON line on stderr:
``{"error": "<code>", "message": "<text>"}``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import tempfile
from pathlib import Path

import numpy as np

from .audio import TOKEN_HOP, Waveform, load_waveform, save_waveform
from .config import ExperimentConfig, FeatureConfig, load_config
from .estimator import VoiceConverter, convert_tokens
from .evaluation import SWEEP_LENGTHS_S, PairResult, read_pairs, run_embedder, score_pairs, write_report
from .exceptions import ConfigError, InsufficientDataError, SEFVCError
from .tensorfile import read_tensor
from .tokenizer import Codebook, FeatureMatrix, KMeansCodebook, ToyFeatureExtractor, load_feature_dir, quantize
from .trainer import Trainer, Utterance

log = logging.getLogger("sefvc")


def _read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise SEFVCError(f"no such manifest: {path}")
    base = path.parent
    records = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SEFVCError(f"{path}:{lineno}: {exc}") from exc
        if "audio" not in rec:
            raise SEFVCError(f"{path}:{lineno}: record has no 'audio' path")
        for key in ("audio", "features", "speaker_embedding"):
            if rec.get(key) and not Path(rec[key]).is_absolute():
                rec[key] = str(base / rec[key])
        records.append(rec)
    if not records:
        raise InsufficientDataError(f"{path} lists no utterances")
    return records


def build_utterances(records, codebook: Codebook, features: FeatureConfig) -> list[Utterance]:
    fx = ToyFeatureExtractor(features.n_features, random_state=features.random_state)
    utts = []
    for rec in records:
        w = load_waveform(rec["audio"])
        if rec.get("features"):
            fm = FeatureMatrix.load(rec["features"])
        elif features.kind == "toy":
            fm = fx.extract(w)
        else:
            raise ConfigError(f"{rec['audio']}: no feature file and features = file")
        spk = read_tensor(rec["speaker_embedding"]).values.reshape(-1) if rec.get("speaker_embedding") else None
        utts.append(Utterance.from_waveform(w, quantize(fm, codebook), spk))
    return utts


# ---------------------------------------------------------------------------
# subcommands


def cmd_fit_codebook(args) -> int:
    feats = load_feature_dir(args.features)
    km = KMeansCodebook(n_clusters=args.k, random_state=args.seed).fit(feats)
    cb = km.to_codebook()
    cb.save(args.out)
    print(json.dumps({"k": cb.k, "d": cb.d, "inertia": cb.inertia, "n_iter": cb.n_iter}))
    return 0


def cmd_extract_features(args) -> int:
    fx = ToyFeatureExtractor(args.dim, random_state=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for rec in _read_manifest(args.manifest):
        w = load_waveform(rec["audio"])
        fx.extract(w).save(out / (Path(rec["audio"]).stem + ".tensor"))
    return 0


def cmd_make_toy_corpus(args) -> int:
    from .toydata import toy_corpus

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for w in toy_corpus(args.n, args.duration, args.seed):
        p = out / f"{w.source_id}.wav"
        save_waveform(p, w)
        lines.append(json.dumps({"audio": p.name}))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n")
    return 0


def _truncate_metrics(path: Path, upto_step: int) -> None:
    if not path.is_file():
        return
    kept = [line for line in path.read_text().splitlines() if line.strip() and json.loads(line)["step"] < upto_step]
    path.write_text("".join(line + "\n" for line in kept))


def cmd_train(args) -> int:
    cfg: ExperimentConfig = load_config(args.config) if args.config else ExperimentConfig()
    if not Path(args.codebook).is_file():
        raise SEFVCError(f"no such codebook: {args.codebook}")
    cb = Codebook.load(args.codebook)
    if cb.k != cfg.model.vocab_size:
        raise ConfigError(f"codebook has {cb.k} centroids but vocab_size = {cfg.model.vocab_size}")
    out = Path(args.out)
    ckpt_dir = out / "checkpoints"
    latest = ckpt_dir / "latest.ckpt"
    metrics = out / "metrics.jsonl"
    if latest.is_file():
        trainer = Trainer.load(latest, cfg.model.config_hash())
        trainer.cfg = cfg.train
        _truncate_metrics(metrics, trainer.step)
        log.info("resuming from step %d", trainer.step)
    else:
        out.mkdir(parents=True, exist_ok=True)
        metrics.unlink(missing_ok=True)
        trainer = Trainer(cfg.model, cfg.disc, cfg.train, cfg.weights)
    trainer.extra_tensors = {"codebook/centroids": cb.centroids}
    fmeta = {"kind": "toy", "n_features": cfg.features.n_features, "n_mels": cfg.model.n_mels, "random_state": cfg.features.random_state}
    trainer.extra_meta = {"codebook_meta": cb.header(), "feature_extractor": fmeta if cfg.features.kind == "toy" else {"kind": "external"}}
    utts = build_utterances(_read_manifest(args.manifest), cb, cfg.features)
    steps = args.steps if args.steps is not None else cfg.train.max_steps
    trainer.fit(utts, steps, metrics_path=metrics, checkpoint_dir=ckpt_dir)
    trainer.save(latest)
    trainer.save(ckpt_dir / f"step_{trainer.step:08d}.ckpt")
    print(json.dumps({"step": trainer.step, "checkpoint": str(latest)}))
    return 0


def _source_tokens(est: VoiceConverter, source: Waveform, features_path) -> np.ndarray:
    if features_path:
        tokens = quantize(FeatureMatrix.load(features_path), est.codebook_)
        return tokens[: len(source) // TOKEN_HOP]
    if getattr(est, "external_features_", False):
        raise SEFVCError("checkpoint was trained on external features; pass --source-features")
    return est.tokenize(source)


def cmd_convert(args) -> int:
    est = VoiceConverter.load(args.checkpoint)
    source = load_waveform(args.source)
    tokens = _source_tokens(est, source, args.source_features)
    spk = read_tensor(args.speaker_embedding).values.reshape(-1) if args.speaker_embedding else None
    reference = load_waveform(args.reference) if args.reference else None
    samples = convert_tokens(est.backbone_, tokens, reference, args.shuffle_reference, args.seed, spk)
    save_waveform(args.out, samples)
    print(json.dumps({"out": args.out, "samples": int(samples.size), "tokens": int(len(tokens))}))
    return 0


def cmd_evaluate(args) -> int:
    records = read_pairs(args.pairs)
    embed = lambda p: run_embedder(args.embedder, p)  # noqa: E731
    if not args.sweep:
        pairs = [(r["converted"], r["reference"]) for r in records]
        summary = write_report(args.report, score_pairs(pairs, embed, args.jobs))
        print(json.dumps(summary))
        return 0
    if not args.checkpoint:
        raise SEFVCError("--sweep needs --checkpoint")
    est = VoiceConverter.load(args.checkpoint)
    lengths = [float(x) for x in args.lengths.split(",")] if args.lengths else list(SWEEP_LENGTHS_S)
    work = Path(args.work_dir) if args.work_dir else Path(tempfile.mkdtemp(prefix="sefvc-sweep-"))
    work.mkdir(parents=True, exist_ok=True)
    pairs, tags, skipped = [], [], []
    for i, rec in enumerate(records):
        source = load_waveform(rec["source"])
        reference = load_waveform(rec["reference"])
        tokens = _source_tokens(est, source, rec.get("source_features"))
        for L in lengths:
            n = int(L * reference.sample_rate)
            if len(reference) < n:
                skipped.append(PairResult(rec["source"], rec["reference"], None, f"reference shorter than {L}s", L))
                continue
            out = work / f"pair{i:04d}_ref{L:g}s.wav"
            save_waveform(out, convert_tokens(est.backbone_, tokens, reference.crop(0, n)))
            pairs.append((str(out), rec["reference"]))
            tags.append(L)
    results = score_pairs(pairs, embed, args.jobs)
    for r, L in zip(results, tags):
        r.ref_len_s = L
    summary = write_report(args.report, results + skipped, {"lengths_s": lengths})
    print(json.dumps(summary))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sefvc", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit-codebook", help="fit a k-means codebook on feature files")
    p.add_argument("--features", required=True, help="directory of .tensor feature files")
    p.add_argument("--k", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_codebook)

    p = sub.add_parser("extract-features", help="write toy features for every manifest utterance")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("make-toy-corpus", help="synthesise a small speech-like corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--duration", type=float, default=6.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_toy_corpus)

    p = sub.add_parser("train", help="train or resume a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, help="override max_steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", help="convert a source utterance to the reference voice")
    p.add_argument("--source", required=True)
    p.add_argument("--reference")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--source-features", help="feature file for the source when the model uses external features")
    p.add_argument("--speaker-embedding", help="speaker vector (.tensor) for speaker-embedding models")
    p.add_argument("--shuffle-reference", action="store_true", help="randomly permute the encoded reference frames")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("evaluate", help="speaker-embedding cosine similarity")
    p.add_argument("--pairs", required=True, help="JSON-lines: {converted, reference} or, with --sweep, {source, reference}")
    p.add_argument("--embedder", required=True, help="command run as: CMD IN.wav OUT.tensor")
    p.add_argument("--report", required=True)
    p.add_argument("--jobs", type=int, default=4)
    p.add_argument("--sweep", action="store_true", help="reference-length sweep")
    p.add_argument("--checkpoint")
    p.add_argument("--lengths", help="comma-separated seconds (default 2,3,5,10)")
    p.add_argument("--work-dir")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (SEFVCError, OSError, ValueError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(json.dumps({"error": code, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
