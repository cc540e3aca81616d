"""Audio loading, 3-second clipping and CQT features."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import librosa
import numpy as np
import soundfile as sf
from scipy.signal import resample_poly

from .dataset import HOP_LENGTH, N_CLASSES, SAMPLE_RATE, FrameLabelMatrix, n_frames_for

CLIP_SECONDS = 3
CLIP_SAMPLES = CLIP_SECONDS * SAMPLE_RATE
CLIP_FRAMES = n_frames_for(CLIP_SAMPLES)

N_BINS = 88
BINS_PER_OCTAVE = 12
FMIN = 27.5


class AudioError(ValueError):
    pass


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE
    source_id: str = ""
    start_offset: float = 0.0
    # samples beyond this index are zero padding
    n_valid: int | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.n_valid is None:
            self.n_valid = len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class CqtSpectrogram:
    magnitudes: np.ndarray
    hop: int = HOP_LENGTH
    fmin: float = FMIN
    bins_per_octave: int = BINS_PER_OCTAVE

    @property
    def n_frames(self) -> int:
        return self.magnitudes.shape[1]


def load_audio(path: str | Path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read an audio file as mono float32 at ``sample_rate`` with samples in [-1, 1]."""
    try:
        data, sr = sf.read(str(path), dtype="float32", always_2d=True)
    except (RuntimeError, sf.LibsndfileError) as exc:
        raise OSError(f"cannot read audio file {path}: {exc}") from exc
    if data.shape[0] == 0:
        raise AudioError(f"{path}: audio file is empty")
    mono = data.mean(axis=1)
    return resample(mono, sr, sample_rate)


def resample(x: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    if orig_sr == target_sr:
        return x
    ratio = Fraction(target_sr, orig_sr)
    y = resample_poly(x, ratio.numerator, ratio.denominator)
    expected = int(round(len(x) * target_sr / orig_sr))
    y = librosa.util.fix_length(y, size=expected)
    return np.clip(y, -1.0, 1.0).astype(np.float32)


def write_audio(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    sf.write(str(path), np.asarray(samples, dtype=np.float32), sample_rate, subtype="PCM_16")


def clip_3s(
    waveform: np.ndarray,
    labels: FrameLabelMatrix | None = None,
    source_id: str = "",
) -> list[tuple[AudioClip, FrameLabelMatrix, np.ndarray]]:
    """Cut a track into consecutive 3 s windows.

    Track frames whose start sample falls inside a window go to that window's
    label matrix. Every clip comes back as exactly ``CLIP_SAMPLES`` samples and
    ``CLIP_FRAMES`` label columns; the returned boolean mask marks the columns
    that hold real track frames (padding is all-zero and masked out).
    """
    waveform = np.asarray(waveform, dtype=np.float32)
    n = len(waveform)
    if n == 0:
        raise AudioError("cannot clip empty audio")
    n_track_frames = n_frames_for(n)
    if labels is None:
        labels = FrameLabelMatrix(np.zeros((N_CLASSES, n_track_frames), dtype=np.uint8))
    if abs(labels.n_frames - n_track_frames) > 1:
        raise AudioError(
            f"label matrix has {labels.n_frames} frames but audio implies {n_track_frames}"
        )
    lab = np.zeros((N_CLASSES, n_track_frames), dtype=np.uint8)
    m = min(n_track_frames, labels.n_frames)
    lab[:, :m] = labels.values[:, :m]

    clips = []
    n_clips = math.ceil(n / CLIP_SAMPLES)
    for k in range(n_clips):
        s0 = k * CLIP_SAMPLES
        s1 = min(s0 + CLIP_SAMPLES, n)
        audio = np.zeros(CLIP_SAMPLES, dtype=np.float32)
        audio[: s1 - s0] = waveform[s0:s1]
        # track frames t with s0 <= t*hop < s0 + CLIP_SAMPLES
        f0 = -(-s0 // HOP_LENGTH)
        f1 = min(-(-(s0 + CLIP_SAMPLES) // HOP_LENGTH), n_track_frames)
        cols = np.zeros((N_CLASSES, CLIP_FRAMES), dtype=np.uint8)
        cols[:, : f1 - f0] = lab[:, f0:f1]
        mask = np.zeros(CLIP_FRAMES, dtype=bool)
        mask[: f1 - f0] = True
        clip = AudioClip(audio, SAMPLE_RATE, source_id, s0 / SAMPLE_RATE, n_valid=s1 - s0)
        clips.append((clip, FrameLabelMatrix(cols), mask))
    return clips


@lru_cache(maxsize=None)
def longest_cqt_window() -> int:
    freqs = librosa.cqt_frequencies(N_BINS, fmin=FMIN, bins_per_octave=BINS_PER_OCTAVE)
    lengths, _ = librosa.filters.wavelet_lengths(freqs=freqs, sr=SAMPLE_RATE)
    return int(math.ceil(lengths.max()))


def compute_cqt(clip: AudioClip | np.ndarray) -> CqtSpectrogram:
    """88-bin CQT magnitude (A0 = 27.5 Hz, 12 bins/octave, hop 512, centered frames)."""
    if isinstance(clip, AudioClip):
        if clip.sample_rate != SAMPLE_RATE:
            raise AudioError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate}")
        samples = clip.samples
    else:
        samples = np.asarray(clip)
        if not np.issubdtype(samples.dtype, np.floating):
            samples = samples.astype(np.float32)
    if len(samples) == 0:
        raise AudioError("cannot compute the CQT of empty audio")
    window = longest_cqt_window()
    if len(samples) < window:
        raise AudioError(
            f"audio has {len(samples)} samples but the lowest CQT bin needs {window}; "
            "zero-pad the input (e.g. to a 3 s clip)"
        )
    # double precision with a float64 resampler keeps the transform linear to ~1e-13
    C = librosa.cqt(
        np.asarray(samples, dtype=np.float64),
        sr=SAMPLE_RATE,
        hop_length=HOP_LENGTH,
        fmin=FMIN,
        n_bins=N_BINS,
        bins_per_octave=BINS_PER_OCTAVE,
        res_type="polyphase",
    )
    return CqtSpectrogram(np.abs(C).astype(np.float32))


class FeatureCache:
    """One ``.npy`` file per clip plus ``manifest.json`` (source_id, start_offset, shape)."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.root / "manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {}

    @staticmethod
    def key(source_id: str, start_offset: float) -> str:
        return f"{source_id}@{start_offset:.6f}"

    def get(self, source_id: str, start_offset: float) -> np.ndarray | None:
        entry = self.manifest.get(self.key(source_id, start_offset))
        if entry is None:
            return None
        path = self.root / entry["file"]
        if not path.exists():
            return None
        return np.load(path)

    def put(self, source_id: str, start_offset: float, magnitudes: np.ndarray) -> None:
        key = self.key(source_id, start_offset)
        fname = f"{source_id}_{int(round(start_offset * 1000)):08d}.npy"
        np.save(self.root / fname, magnitudes)
        self.manifest[key] = {
            "file": fname,
            "source_id": source_id,
            "start_offset": start_offset,
            "shape": list(magnitudes.shape),
        }
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True))

    def cqt(self, clip: AudioClip) -> np.ndarray:
        cached = self.get(clip.source_id, clip.start_offset)
        if cached is not None:
            return cached
        mags = compute_cqt(clip).magnitudes
        self.put(clip.source_id, clip.start_offset, mags)
        return mags
