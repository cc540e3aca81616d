"""Command-line entry point: ``ipt-detect {stats,split,train,eval,predict,synth}``.

A run directory holds everything a training run produced::

    <out>/config.yaml        exact configuration used (seed overrides applied)
    <out>/split.json         train/valid/test audio ids
    <out>/train_log.csv      one line per epoch
    <out>/checkpoints/       best.pt (best validation F1) and last.pt
    <out>/reports/           evaluation reports (JSON)
    <out>/figures/           confusion-matrix heatmap and per-track piano-rolls

Exit status is 0 on success; failures are categorized as below.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataset import (
    HOP_LENGTH,
    SAMPLE_RATE,
    AnnotationError,
    Corpus,
    CorpusSplit,
    IptClass,
    corpus_stats,
    format_stats_table,
    split_corpus,
)
from .features import AudioError, FeatureCache, load_audio
from .model import ConfigError
from .synth import FixtureError

logger = logging.getLogger("ipt_detect")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
EXIT_TRAINING = 5
EXIT_INCOMPLETE = 6


class IncompleteEvaluation(RuntimeError):
    """Some annotated tracks had no audio; the report covers the rest."""


def _categorize(exc: BaseException) -> tuple[str, int]:
    from .training import CheckpointMismatch, TrainingDiverged

    if isinstance(exc, CheckpointMismatch):
        return "checkpoint", EXIT_CHECKPOINT
    if isinstance(exc, (ConfigError, FixtureError)):
        return "config", EXIT_CONFIG
    if isinstance(exc, TrainingDiverged):
        return "training", EXIT_TRAINING
    if isinstance(exc, IncompleteEvaluation):
        return "incomplete", EXIT_INCOMPLETE
    if isinstance(exc, (AnnotationError, AudioError, OSError)):
        return "data", EXIT_DATA
    return "internal", 1


# ---------------------------------------------------------------------------
# helpers


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "corpus", None):
        cfg.paths.corpus_root = str(args.corpus)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    return cfg


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _cache(cfg: RunConfig) -> FeatureCache | None:
    return FeatureCache(cfg.paths.cache_dir) if cfg.paths.cache_dir else None


def resolve_split(corpus: Corpus, cfg: RunConfig, split_file: Path | None = None) -> CorpusSplit:
    """Use an explicit split file when present, otherwise balance one from the config."""
    for candidate in (split_file, corpus.root / "split.json"):
        if candidate is not None and Path(candidate).exists():
            data = json.loads(Path(candidate).read_text())
            return CorpusSplit(data["train"], data["valid"], data["test"])
    tracks = [(m, corpus.notes(m.audio_id)) for m in corpus.tracks]
    try:
        return split_corpus(tracks, tuple(cfg.split_sizes), seed=cfg.seed)
    except ValueError as exc:
        raise ConfigError(f"split_sizes: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_stats(args) -> int:
    cfg = _load_config(args)
    corpus = Corpus.open(cfg.paths.corpus_root)
    notes = corpus.all_notes()
    if not notes:
        logger.warning("corpus %s has no annotated notes", corpus.root)
    table = format_stats_table(corpus_stats(notes))
    sys.stdout.write(table)
    if args.out:
        _atomic_write_text(Path(args.out), table)
    return EXIT_OK


def cmd_split(args) -> int:
    cfg = _load_config(args)
    if args.sizes:
        cfg.split_sizes = list(args.sizes)
        cfg.validate()
    corpus = Corpus.open(cfg.paths.corpus_root)
    split = resolve_split(corpus, cfg)
    text = json.dumps(split.as_dict(), indent=2) + "\n"
    sys.stdout.write(text)
    if args.out:
        _atomic_write_text(Path(args.out), text)
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import build_clipset
    from .training import build_model, train

    cfg = _load_config(args)
    run_dir = Path(args.out or cfg.paths.out_dir)
    cfg.paths.out_dir = str(run_dir)
    corpus = Corpus.open(cfg.paths.corpus_root)
    split = resolve_split(corpus, cfg)
    missing = [a for a in split.train + split.valid if not corpus.audio_path(a).exists()]
    if missing:
        raise FileNotFoundError(f"audio missing for {len(missing)} track(s): {', '.join(missing[:5])}")

    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.yaml")
    _atomic_write_text(run_dir / "split.json", json.dumps(split.as_dict(), indent=2) + "\n")

    cache = _cache(cfg)
    logger.info("computing features for %d train / %d valid tracks", len(split.train), len(split.valid))
    train_set = build_clipset(corpus, split.train, cache)
    valid_set = build_clipset(corpus, split.valid, cache)
    model = build_model(cfg.model, seed=cfg.seed)
    result = train(model, train_set, valid_set, cfg.train, run_dir=run_dir)
    logger.info("best validation F1 %.4f at epoch %d", result.best_f1, result.best_epoch)
    return EXIT_OK


def run_eval(cfg: RunConfig, checkpoint: Path | None, split_name: str, out_dir: Path,
             predictor=None, split_file: Path | None = None) -> dict:
    """Evaluate a checkpoint (or injected predictions) on one split and write report + figures."""
    from .evaluation import evaluate_corpus
    from .plots import plot_mlcm, plot_piano_roll
    from .training import config_hash, load_checkpoint

    model = None
    if predictor is None:
        model, _ = load_checkpoint(checkpoint, expected_config=cfg.model)
    corpus = Corpus.open(cfg.paths.corpus_root)
    if split_file is None and checkpoint is not None:
        guess = Path(checkpoint).resolve().parent.parent / "split.json"
        split_file = guess if guess.exists() else None
    split = resolve_split(corpus, cfg, split_file)
    ids = getattr(split, split_name)
    result = evaluate_corpus(
        corpus, ids, model=model, predictor=predictor, threshold=cfg.train.threshold,
        cache=_cache(cfg), config_hash=config_hash(cfg.model), split={"name": split_name, "audio_ids": ids},
    )
    report = result.report
    report["checkpoint"] = str(checkpoint) if checkpoint else None
    _atomic_write_text(out_dir / "reports" / f"{split_name}_report.json", json.dumps(report, indent=2) + "\n")
    plot_mlcm(result.matrix, out_dir / "figures" / f"{split_name}_mlcm.png")
    for tr in result.tracks:
        plot_piano_roll(tr.likelihoods, out_dir / "figures" / "tracks" / f"{tr.audio_id}.png",
                        truth=tr.truth.values, threshold=cfg.train.threshold, title=tr.audio_id)
    o = report["overall"]
    logger.info("%s: P %.4f R %.4f F1 %.4f over %d track(s)", split_name, o["precision"], o["recall"],
                o["f1"], len(result.tracks))
    if result.missing:
        raise IncompleteEvaluation(
            f"audio missing for {len(result.missing)} track(s), skipped: {', '.join(result.missing)}"
        )
    return report


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out_dir = Path(args.out) if args.out else Path(args.checkpoint).resolve().parent.parent
    run_eval(cfg, Path(args.checkpoint), args.split, out_dir)
    return EXIT_OK


def prediction_table(likelihoods: np.ndarray, threshold: float = 0.5) -> str:
    """TSV: frame_time_s, one likelihood column per class, one binary column per class."""
    names = [c.label for c in IptClass]
    header = ["frame_time_s"] + [f"p_{n}" for n in names] + [f"on_{n}" for n in names]
    lines = ["\t".join(header)]
    active = (likelihoods >= threshold).astype(int)
    for t in range(likelihoods.shape[1]):
        cells = [f"{t * HOP_LENGTH / SAMPLE_RATE:.6f}"]
        cells += [f"{v:.6f}" for v in likelihoods[:, t]]
        cells += [str(v) for v in active[:, t]]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def cmd_predict(args) -> int:
    from .pipeline import predict_track
    from .plots import plot_piano_roll
    from .training import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    wave = load_audio(args.audio)
    probs = predict_track(model, wave, source_id=Path(args.audio).stem)
    out = Path(args.out) if args.out else Path(args.audio).with_suffix(".ipt.tsv")
    _atomic_write_text(out, prediction_table(probs, args.threshold))
    plot_piano_roll(probs, out.with_suffix(".png"), threshold=args.threshold, title=Path(args.audio).name)
    logger.info("wrote %d frames to %s", probs.shape[1], out)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .dataset import write_annotations
    from .features import write_audio
    from .synth import load_fixture_spec, synth_corpus, synth_fixture

    if args.spec:
        wave, notes = synth_fixture(load_fixture_spec(args.spec), seed=args.seed)
        out = Path(args.out)
        write_audio(out, wave)
        write_annotations(out.with_suffix(".tsv"), notes)
        logger.info("rendered %d notes to %s", len(notes), out)
        return EXIT_OK
    tracks = synth_corpus(args.out, n_tracks=args.tracks, seed=args.seed or 0, track_seconds=args.seconds)
    logger.info("wrote %d fixture tracks to %s", len(tracks), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ipt-detect", description="Frame-level Guzheng playing-technique detection."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True):
        p.add_argument("--config", type=Path, help="run config (YAML)")
        p.add_argument("--seed", type=int, help="override the config seed")
        if corpus:
            p.add_argument("--corpus", type=Path, help="override paths.corpus_root")

    p = sub.add_parser("stats", help="per-technique note statistics of a corpus")
    common(p)
    p.add_argument("--out", type=Path, help="also write the table to this file")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("split", help="balanced train/valid/test split")
    common(p)
    p.add_argument("--sizes", type=int, nargs=3, metavar=("TRAIN", "VALID", "TEST"))
    p.add_argument("--out", type=Path, help="write the split as JSON")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model into a run directory")
    common(p)
    p.add_argument("--out", type=Path, help="run directory (default: paths.out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--out", type=Path, help="output directory (default: the checkpoint's run dir)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="frame-level activations for one audio file")
    p.add_argument("audio", type=Path)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, help="TSV path (default: <audio>.ipt.tsv)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="render synthetic fixtures")
    p.add_argument("--out", type=Path, required=True, help="corpus directory, or WAV path with --spec")
    p.add_argument("--spec", type=Path, help="render one YAML fixture spec instead of a corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--tracks", type=int, default=20)
    p.add_argument("--seconds", type=float, default=120.0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except Exception as exc:
        category, code = _categorize(exc)
        if code == 1:
            logger.exception("unexpected failure")
        print(f"error [{category}]: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
