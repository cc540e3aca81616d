"""Annotations, track metadata, frame-level label rasterization, splits and corpus statistics."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE = 44100
HOP_LENGTH = 512


class IptClass(enum.IntEnum):
    VIBRATO = 0
    UPWARD_PORTAMENTO = 1
    DOWNWARD_PORTAMENTO = 2
    POINT_NOTE = 3
    GLISSANDO = 4
    TREMOLO = 5
    PLUCKS = 6

    @property
    def label(self) -> str:
        return self.name.lower()

    @property
    def short(self) -> str:
        return SHORT_NAMES[self]

    @classmethod
    def parse(cls, text: str) -> "IptClass":
        key = text.strip()
        if key in _ALIASES:
            return _ALIASES[key]
        key = key.lower().replace("-", "_").replace(" ", "_")
        if key in _ALIASES:
            return _ALIASES[key]
        raise LabelError(text)


N_CLASSES = len(IptClass)
CLASS_NAMES = [c.label for c in IptClass]
SHORT_NAMES = {
    IptClass.VIBRATO: "vibrato",
    IptClass.UPWARD_PORTAMENTO: "UP",
    IptClass.DOWNWARD_PORTAMENTO: "DP",
    IptClass.POINT_NOTE: "PN",
    IptClass.GLISSANDO: "glissando",
    IptClass.TREMOLO: "tremolo",
    IptClass.PLUCKS: "plucks",
}

_ALIASES: dict[str, IptClass] = {c.label: c for c in IptClass}
_ALIASES.update(
    {
        "up": IptClass.UPWARD_PORTAMENTO,
        "dp": IptClass.DOWNWARD_PORTAMENTO,
        "pn": IptClass.POINT_NOTE,
        # pinyin and hanzi names used by Guzheng notation
        "chanyin": IptClass.VIBRATO,
        "颤音": IptClass.VIBRATO,
        "shanghuayin": IptClass.UPWARD_PORTAMENTO,
        "上滑音": IptClass.UPWARD_PORTAMENTO,
        "xiahuayin": IptClass.DOWNWARD_PORTAMENTO,
        "下滑音": IptClass.DOWNWARD_PORTAMENTO,
        "dianyin": IptClass.POINT_NOTE,
        "点音": IptClass.POINT_NOTE,
        "guazou": IptClass.GLISSANDO,
        "刮奏": IptClass.GLISSANDO,
        "huazhi": IptClass.GLISSANDO,
        "花指": IptClass.GLISSANDO,
        "yaozhi": IptClass.TREMOLO,
        "摇指": IptClass.TREMOLO,
        "pluck": IptClass.PLUCKS,
    }
)


class AnnotationError(ValueError):
    """Raised for malformed or invalid annotation rows."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LabelError(AnnotationError):
    def __init__(self, text: str, line: int | None = None):
        self.text = text
        super().__init__(
            f"unknown IPT label {text!r}; expected one of {', '.join(CLASS_NAMES)}", line
        )


@dataclass(frozen=True, order=True)
class NoteAnnotation:
    onset: float
    offset: float
    pitch: int
    ipt: IptClass

    def __post_init__(self):
        if not (self.onset >= 0):
            raise AnnotationError(f"onset must be non-negative, got {self.onset}")
        if not (self.offset > self.onset):
            raise AnnotationError(f"offset {self.offset} must exceed onset {self.onset}")
        if not 21 <= self.pitch <= 108:
            raise AnnotationError(f"pitch {self.pitch} outside MIDI range 21-108")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class TrackMetadata:
    audio_id: str
    audio_name: str = ""
    mode: str = ""
    time_signature: str = ""
    performer: str = ""
    genre: str = ""
    audio_length: float = 0.0


METADATA_FIELDS = [
    "audio_id",
    "audio_name",
    "mode",
    "time_signature",
    "performer",
    "genre",
    "audio_length",
]


@dataclass
class FrameLabelMatrix:
    """Binary (n_classes, n_frames) grid; column t starts at t * hop / sample_rate seconds."""

    values: np.ndarray
    hop: int = HOP_LENGTH
    sample_rate: int = SAMPLE_RATE
    clipped: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.uint8)
        if self.values.ndim != 2 or self.values.shape[0] != N_CLASSES:
            raise ValueError(f"label matrix must be ({N_CLASSES}, T), got {self.values.shape}")
        if self.values.size and self.values.max() > 1:
            raise ValueError("label matrix entries must be 0 or 1")

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) * self.hop / self.sample_rate


@dataclass
class CorpusSplit:
    train: list[str] = field(default_factory=list)
    valid: list[str] = field(default_factory=list)
    test: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, list[str]]:
        return {"train": list(self.train), "valid": list(self.valid), "test": list(self.test)}


# ---------------------------------------------------------------------------
# annotation files


def _is_header(cells: list[str]) -> bool:
    try:
        float(cells[0])
    except ValueError:
        return True
    return False


def parse_annotations(source: str | Path | io.TextIOBase) -> list[NoteAnnotation]:
    """Read a tab-separated annotation file (onset, offset, MIDI pitch, IPT label).

    A header row is optional. Blank lines and ``#`` comments are skipped.
    Returns the notes sorted by onset.
    """
    if isinstance(source, (str, Path)):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source.read()

    notes = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        cells = [c.strip() for c in raw.rstrip("\r\n").split("\t")]
        if lineno == 1 and _is_header(cells):
            continue
        if len(cells) < 4:
            raise AnnotationError(f"expected 4 tab-separated columns, got {len(cells)}", lineno)
        try:
            onset = float(cells[0])
            offset = float(cells[1])
            pitch_f = float(cells[2])
        except ValueError as exc:
            raise AnnotationError(f"non-numeric field ({exc})", lineno) from None
        if not pitch_f.is_integer():
            raise AnnotationError(f"pitch must be an integer MIDI number, got {cells[2]}", lineno)
        try:
            ipt = IptClass.parse(cells[3])
        except LabelError:
            raise LabelError(cells[3], lineno) from None
        try:
            notes.append(NoteAnnotation(onset, offset, int(pitch_f), ipt))
        except AnnotationError as exc:
            raise AnnotationError(str(exc), lineno) from None
    notes.sort()
    return notes


def format_annotations(notes: list[NoteAnnotation], header: bool = True) -> str:
    out = io.StringIO()
    if header:
        out.write("onset\toffset\tpitch\tipt\n")
    for n in sorted(notes):
        out.write(f"{n.onset!r}\t{n.offset!r}\t{n.pitch}\t{n.ipt.label}\n")
    return out.getvalue()


def write_annotations(path: str | Path, notes: list[NoteAnnotation]) -> None:
    Path(path).write_text(format_annotations(notes), encoding="utf-8")


# ---------------------------------------------------------------------------
# metadata


def read_metadata(path: str | Path) -> list[TrackMetadata]:
    tracks = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"audio_id"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: metadata is missing column(s) {sorted(missing)}")
        for row in reader:
            audio_id = row["audio_id"].strip()
            if audio_id in seen:
                raise ValueError(f"{path}: duplicate audio_id {audio_id!r}")
            seen.add(audio_id)
            length = row.get("audio_length") or "0"
            tracks.append(
                TrackMetadata(
                    audio_id=audio_id,
                    audio_name=row.get("audio_name", "") or "",
                    mode=row.get("mode", "") or "",
                    time_signature=row.get("time_signature", "") or "",
                    performer=row.get("performer", "") or "",
                    genre=row.get("genre", "") or "",
                    audio_length=float(length),
                )
            )
    return tracks


def write_metadata(path: str | Path, tracks: list[TrackMetadata]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METADATA_FIELDS)
        for t in tracks:
            writer.writerow([getattr(t, f) for f in METADATA_FIELDS])


# ---------------------------------------------------------------------------
# rasterization


def n_frames_for(n_samples: int, hop: int = HOP_LENGTH) -> int:
    """Frame count of a centered framing of ``n_samples`` samples."""
    return 1 + n_samples // hop


def _first_frame_at_or_after(seconds: float, hop: int, sample_rate: int) -> int:
    # smallest t with t * hop / sample_rate >= seconds, evaluated exactly on the frame grid
    t = math.ceil(seconds * sample_rate / hop)
    while t > 0 and (t - 1) * hop / sample_rate >= seconds:
        t -= 1
    while t * hop / sample_rate < seconds:
        t += 1
    return t


def rasterize_labels(
    notes: list[NoteAnnotation],
    n_frames: int,
    hop: int = HOP_LENGTH,
    sample_rate: int = SAMPLE_RATE,
) -> FrameLabelMatrix:
    """Frame (c, t) is active iff a class-c note satisfies onset <= t*hop/sr < offset."""
    if n_frames <= 0:
        raise ValueError("n_frames must be positive")
    if hop <= 0:
        raise ValueError("hop must be positive")
    values = np.zeros((N_CLASSES, n_frames), dtype=np.uint8)
    clipped = 0
    for note in notes:
        start = _first_frame_at_or_after(note.onset, hop, sample_rate)
        stop = _first_frame_at_or_after(note.offset, hop, sample_rate)
        if stop > n_frames:
            clipped += 1
            stop = n_frames
        if start < stop:
            values[int(note.ipt), start:stop] = 1
    if clipped:
        logger.warning("%d note(s) extend past %d frames and were clipped", clipped, n_frames)
    return FrameLabelMatrix(values, hop=hop, sample_rate=sample_rate, clipped=clipped)


def label_runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Half-open (start, stop) frame ranges of consecutive 1s in a binary row."""
    padded = np.concatenate([[0], np.asarray(row, dtype=np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2].tolist(), edges[1::2].tolist()))


# ---------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class ClassStats:
    num: int
    sum: float
    mean: float | None
    max: float | None
    min: float | None


def corpus_stats(notes: list[NoteAnnotation]) -> dict[IptClass, ClassStats]:
    durations: dict[IptClass, list[float]] = {c: [] for c in IptClass}
    for n in notes:
        durations[n.ipt].append(n.offset - n.onset)
    stats = {}
    for c, d in durations.items():
        if d:
            total = math.fsum(d)
            stats[c] = ClassStats(len(d), total, total / len(d), max(d), min(d))
        else:
            stats[c] = ClassStats(0, 0.0, None, None, None)
    return stats


def format_stats_table(stats: dict[IptClass, ClassStats]) -> str:
    def cell(v):
        return "-" if v is None else f"{v:.2f}"

    lines = ["ipt\tnum\tsum\tmean\tmax\tmin"]
    for c in IptClass:
        s = stats[c]
        lines.append(f"{c.short}\t{s.num}\t{s.sum:.2f}\t{cell(s.mean)}\t{cell(s.max)}\t{cell(s.min)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# splitting


def _track_profile(meta: TrackMetadata, notes: list[NoteAnnotation], performers: list[str]):
    per_class = np.zeros(N_CLASSES)
    for n in notes:
        per_class[int(n.ipt)] += n.duration
    length = meta.audio_length or max((n.offset for n in notes), default=0.0)
    per_performer = np.zeros(len(performers))
    per_performer[performers.index(meta.performer)] = length
    return per_class, per_performer, length


def split_objective(assign: np.ndarray, class_dur: np.ndarray, perf_dur: np.ndarray) -> tuple[float, float]:
    """(max, sum) relative deviation of per-set class/performer shares from corpus shares."""
    devs = []
    for profile in (class_dur, perf_dur):
        total = profile.sum(axis=0)
        if total.sum() <= 0:
            continue
        corpus_share = total / total.sum()
        keep = corpus_share > 0
        for s in range(3):
            sub = profile[assign == s].sum(axis=0)
            share = sub / sub.sum() if sub.sum() > 0 else np.zeros_like(sub)
            devs.append(np.abs(share[keep] - corpus_share[keep]) / corpus_share[keep])
    if not devs:
        return 0.0, 0.0
    d = np.concatenate(devs)
    return float(d.max()), float(d.sum())


def split_corpus(
    tracks: list[tuple[TrackMetadata, list[NoteAnnotation]]],
    sizes: tuple[int, int, int],
    seed: int = 0,
    restarts: int = 8,
    max_sweeps: int = 50,
) -> CorpusSplit:
    """Assign tracks to train/valid/test with the requested set sizes.

    Starts from seeded random assignments and greedily applies the best
    cross-set swap until the worst relative deviation (per-class annotated
    duration share and per-performer audio share, each set vs. the corpus)
    stops improving. The best of ``restarts`` runs is returned.
    """
    if any(s < 0 for s in sizes):
        raise ValueError(f"split sizes must be non-negative, got {sizes}")
    if sum(sizes) > len(tracks):
        raise ValueError(f"split sizes {sizes} exceed the corpus of {len(tracks)} tracks")
    if sum(sizes) != len(tracks):
        raise ValueError(f"split sizes {sizes} must sum to the track count {len(tracks)}")

    tracks = sorted(tracks, key=lambda t: t[0].audio_id)
    ids = [m.audio_id for m, _ in tracks]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate audio_id in corpus")
    performers = sorted({m.performer for m, _ in tracks})
    profiles = [_track_profile(m, n, performers) for m, n in tracks]
    class_dur = np.array([p[0] for p in profiles]).reshape(len(tracks), N_CLASSES)
    perf_dur = np.array([p[1] for p in profiles]).reshape(len(tracks), len(performers))

    base = np.repeat(np.arange(3), sizes)
    rng = np.random.default_rng(seed)
    best_assign, best_score = None, None
    for _ in range(max(1, restarts)):
        assign = rng.permutation(base)
        score = split_objective(assign, class_dur, perf_dur)
        for _ in range(max_sweeps):
            improved = None
            for i in range(len(assign)):
                for j in range(i + 1, len(assign)):
                    if assign[i] == assign[j]:
                        continue
                    assign[i], assign[j] = assign[j], assign[i]
                    cand = split_objective(assign, class_dur, perf_dur)
                    assign[i], assign[j] = assign[j], assign[i]
                    if cand < score and (improved is None or cand < improved[0]):
                        improved = (cand, i, j)
            if improved is None:
                break
            score, i, j = improved
            assign[i], assign[j] = assign[j], assign[i]
        if best_score is None or score < best_score:
            best_assign, best_score = assign.copy(), score

    names = [[], [], []]
    for audio_id, s in zip(ids, best_assign):
        names[s].append(audio_id)
    logger.info("split objective (max, sum rel. deviation): %.4f, %.4f", *best_score)
    return CorpusSplit(*names)


# ---------------------------------------------------------------------------
# on-disk corpus layout: <root>/metadata.csv, <root>/audio/<id>.wav, <root>/annotations/<id>.tsv


@dataclass
class Corpus:
    root: Path
    tracks: list[TrackMetadata]

    @classmethod
    def open(cls, root: str | Path) -> "Corpus":
        root = Path(root)
        meta = root / "metadata.csv"
        if meta.exists():
            tracks = read_metadata(meta)
        else:
            ann_dir = root / "annotations"
            if not ann_dir.is_dir():
                raise FileNotFoundError(f"{root}: neither metadata.csv nor annotations/ found")
            tracks = [TrackMetadata(p.stem) for p in sorted(ann_dir.glob("*.tsv"))]
        return cls(root, tracks)

    def annotation_path(self, audio_id: str) -> Path:
        return self.root / "annotations" / f"{audio_id}.tsv"

    def audio_path(self, audio_id: str) -> Path:
        return self.root / "audio" / f"{audio_id}.wav"

    def notes(self, audio_id: str) -> list[NoteAnnotation]:
        return parse_annotations(self.annotation_path(audio_id))

    def track(self, audio_id: str) -> TrackMetadata:
        for t in self.tracks:
            if t.audio_id == audio_id:
                return t
        raise KeyError(audio_id)

    def all_notes(self) -> list[NoteAnnotation]:
        out = []
        for t in self.tracks:
            out.extend(self.notes(t.audio_id))
        return out
