"""Frame-level precision/recall/F1 and the multi-label confusion matrix."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import N_CLASSES, FrameLabelMatrix, IptClass

NTL = N_CLASSES  # row index: no true label
NPL = N_CLASSES  # column index: no predicted label


def _values(m) -> np.ndarray:
    if isinstance(m, FrameLabelMatrix):
        return m.values
    return np.asarray(m)


def _mask(valid_mask, n_frames: int) -> np.ndarray:
    if valid_mask is None:
        return np.ones(n_frames, dtype=bool)
    mask = np.asarray(valid_mask, dtype=bool)
    if mask.shape != (n_frames,):
        raise ValueError(f"valid mask must have shape ({n_frames},), got {mask.shape}")
    return mask


@dataclass
class FrameCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_class: np.ndarray = field(default_factory=lambda: np.zeros((N_CLASSES, 3), dtype=np.int64))

    def __add__(self, other: "FrameCounts") -> "FrameCounts":
        return FrameCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.per_class + other.per_class
        )


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    f1: float
    # set when a 0/0 ratio was replaced by 0
    undefined: bool = False

    def as_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1, "undefined": self.undefined}


def prf(tp: int, fp: int, fn: int) -> Scores:
    undefined = False
    if tp + fp:
        p = tp / (tp + fp)
    else:
        p, undefined = 0.0, True
    if tp + fn:
        r = tp / (tp + fn)
    else:
        r, undefined = 0.0, True
    if p + r:
        f1 = 2 * p * r / (p + r)
    else:
        f1, undefined = 0.0, True
    return Scores(p, r, f1, undefined)


def count_frames(pred, truth, valid_mask=None) -> FrameCounts:
    pred = _values(pred).astype(bool)
    truth = _values(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    mask = _mask(valid_mask, pred.shape[1])
    p = pred[:, mask]
    t = truth[:, mask]
    tp = (p & t).sum(axis=1)
    fp = (p & ~t).sum(axis=1)
    fn = (~p & t).sum(axis=1)
    per_class = np.stack([tp, fp, fn], axis=1).astype(np.int64)
    return FrameCounts(int(tp.sum()), int(fp.sum()), int(fn.sum()), per_class)


def frame_metrics(pred, truth, valid_mask=None) -> tuple[float, float, float, FrameCounts]:
    """Micro-averaged P, R, F1 over all valid (class, frame) cells, plus the counts."""
    counts = count_frames(pred, truth, valid_mask)
    s = prf(counts.tp, counts.fp, counts.fn)
    return s.precision, s.recall, s.f1, counts


def per_class_scores(counts: FrameCounts) -> dict[IptClass, Scores]:
    return {c: prf(*counts.per_class[int(c)]) for c in IptClass}


def macro_scores(counts: FrameCounts) -> Scores:
    per = per_class_scores(counts).values()
    vals = np.array([[s.precision, s.recall, s.f1] for s in per])
    p, r, f = vals.mean(axis=0)
    return Scores(float(p), float(r), float(f), any(s.undefined for s in per))


def mlcm(pred, truth, valid_mask=None) -> np.ndarray:
    """(N+1, N+1) multi-label confusion matrix; the last row is NTL, the last column NPL.

    Per frame, with true set T and predicted set P:
    labels in T & P count on the diagonal; when both T - P and P - T are
    non-empty every missed true label counts once against every spurious
    prediction; missed labels with no spurious prediction go to NPL;
    predictions on an unlabeled frame go to the NTL row; and a frame empty
    on both sides adds one to (NTL, NPL).
    """
    pred = _values(pred).astype(bool)
    truth = _values(truth).astype(bool)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {truth.shape}")
    mask = _mask(valid_mask, pred.shape[1])
    p = pred[:, mask].T  # (frames, classes)
    t = truth[:, mask].T
    n = pred.shape[0]
    m = np.zeros((n + 1, n + 1), dtype=np.int64)

    hit = p & t
    missed = t & ~p
    extra = p & ~t
    has_missed = missed.any(axis=1)
    has_extra = extra.any(axis=1)
    t_empty = ~t.any(axis=1)
    p_empty = ~p.any(axis=1)

    m[np.arange(n), np.arange(n)] += hit.sum(axis=0)

    both = has_missed & has_extra
    # missed x extra outer products summed over frames
    m[:n, :n] += missed[both].T.astype(np.int64) @ extra[both].astype(np.int64)

    only_missed = has_missed & ~has_extra
    m[:n, n] += missed[only_missed].sum(axis=0)

    unlabeled = t_empty & ~p_empty
    m[n, :n] += p[unlabeled].sum(axis=0)

    m[n, n] += int((t_empty & p_empty).sum())
    return m


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)


def mlcm_labels() -> tuple[list[str], list[str]]:
    names = [c.short for c in IptClass]
    return names + ["NTL"], names + ["NPL"]


# ---------------------------------------------------------------------------
# corpus-level report


@dataclass
class TrackResult:
    audio_id: str
    likelihoods: np.ndarray  # (7, T)
    truth: FrameLabelMatrix
    counts: FrameCounts


@dataclass
class CorpusEvaluation:
    report: dict
    tracks: list[TrackResult]
    missing: list[str]
    matrix: np.ndarray


def evaluate_corpus(
    corpus,
    audio_ids: list[str],
    model=None,
    predictor=None,
    threshold: float = 0.5,
    cache=None,
    config_hash: str | None = None,
    split: dict | None = None,
) -> CorpusEvaluation:
    """Frame-level evaluation of whole tracks.

    ``predictor(audio_id, waveform, labels) -> (7, T) likelihoods`` overrides
    the model, which lets reports be produced for injected predictions.
    Tracks whose audio is missing are listed in ``missing`` and skipped.
    Tracks are processed in sorted ``audio_id`` order.
    """
    from .pipeline import load_track, predict_track

    if model is None and predictor is None:
        raise ValueError("need a model or a predictor")
    if predictor is None:

        def predictor(audio_id, wave, labels):
            return predict_track(model, wave, cache, audio_id)

    total = FrameCounts()
    matrix = np.zeros((N_CLASSES + 1, N_CLASSES + 1), dtype=np.int64)
    results, missing = [], []
    for audio_id in sorted(audio_ids):
        if not corpus.audio_path(audio_id).exists():
            missing.append(audio_id)
            continue
        wave, truth = load_track(corpus, audio_id)
        probs = np.asarray(predictor(audio_id, wave, truth))
        if probs.shape != truth.values.shape:
            raise ValueError(f"{audio_id}: predictions {probs.shape} vs labels {truth.values.shape}")
        pred = (probs >= threshold).astype(np.uint8)
        counts = count_frames(pred, truth)
        total = total + counts
        matrix += mlcm(pred, truth)
        results.append(TrackResult(audio_id, probs, truth, counts))

    overall = prf(total.tp, total.fp, total.fn)
    report = {
        "config_hash": config_hash,
        "split": split,
        "threshold": threshold,
        "averaging": "micro",
        "overall": {**overall.as_dict(), "tp": total.tp, "fp": total.fp, "fn": total.fn},
        "macro": macro_scores(total).as_dict(),
        "per_class": {c.label: s.as_dict() for c, s in per_class_scores(total).items()},
        "mlcm": {
            "rows": mlcm_labels()[0],
            "columns": mlcm_labels()[1],
            "counts": matrix.tolist(),
            "proportions": normalize_rows(matrix).tolist(),
        },
        "tracks": [
            {"audio_id": r.audio_id, "frames": int(r.truth.n_frames),
             **prf(r.counts.tp, r.counts.fp, r.counts.fn).as_dict()}
            for r in results
        ],
        "missing_audio": missing,
    }
    return CorpusEvaluation(report, results, missing, matrix)
