"""Corpus tracks to stacked 3 s clips, and clip-wise inference stitched back to tracks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import N_CLASSES, Corpus, FrameLabelMatrix, rasterize_labels, n_frames_for
from .features import AudioError, FeatureCache, clip_3s, compute_cqt, load_audio, longest_cqt_window
from .model import MultiScaleNet

logger = logging.getLogger(__name__)


@dataclass
class ClipSet:
    """Stacked 3 s clips: features (N, 88, T), labels (N, 7, T), masks (N, T)."""

    features: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    source_ids: list[str] = field(default_factory=list)
    start_offsets: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        self.masks = np.asarray(self.masks, dtype=bool)
        n = len(self.features)
        if not (len(self.labels) == len(self.masks) == n):
            raise ValueError("features, labels and masks must have the same number of clips")

    def __len__(self) -> int:
        return len(self.features)

    def subset(self, idx) -> "ClipSet":
        idx = list(idx)
        return ClipSet(
            self.features[idx],
            self.labels[idx],
            self.masks[idx],
            [self.source_ids[i] for i in idx] if self.source_ids else [],
            [self.start_offsets[i] for i in idx] if self.start_offsets else [],
        )

    @classmethod
    def concat(cls, sets: list["ClipSet"]) -> "ClipSet":
        sets = [s for s in sets if len(s)]
        if not sets:
            raise ValueError("no clips")
        return cls(
            np.concatenate([s.features for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.masks for s in sets]),
            sum((s.source_ids for s in sets), []),
            sum((s.start_offsets for s in sets), []),
        )


def predict_clips(model: MultiScaleNet, clips: ClipSet, batch_size: int = 10) -> np.ndarray:
    """(N, 7, T) likelihoods in inference mode."""
    was_training = model.training
    model.eval()
    p = next(model.parameters())
    out = []
    with torch.no_grad():
        for i in range(0, len(clips), batch_size):
            x = torch.as_tensor(clips.features[i : i + batch_size], dtype=p.dtype, device=p.device)
            out.append(model(x[:, None]).cpu().numpy())
    model.train(was_training)
    if not out:
        return np.zeros((0, N_CLASSES, clips.features.shape[-1]), dtype=np.float32)
    return np.concatenate(out)


def track_clips(
    waveform: np.ndarray,
    labels: FrameLabelMatrix | None = None,
    source_id: str = "",
    cache: FeatureCache | None = None,
) -> ClipSet:
    """Clip a whole track and compute each clip's CQT."""
    pieces = clip_3s(waveform, labels, source_id)
    feats, labs, masks, offsets = [], [], [], []
    for clip, lab, mask in pieces:
        feats.append(cache.cqt(clip) if cache is not None else compute_cqt(clip).magnitudes)
        labs.append(lab.values)
        masks.append(mask)
        offsets.append(clip.start_offset)
    return ClipSet(np.stack(feats), np.stack(labs), np.stack(masks), [source_id] * len(pieces), offsets)


def load_track(corpus: Corpus, audio_id: str) -> tuple[np.ndarray, FrameLabelMatrix]:
    wave = load_audio(corpus.audio_path(audio_id))
    notes = corpus.notes(audio_id)
    return wave, rasterize_labels(notes, n_frames_for(len(wave)))


def build_clipset(
    corpus: Corpus, audio_ids: list[str], cache: FeatureCache | None = None
) -> ClipSet:
    sets = []
    for audio_id in audio_ids:
        wave, labels = load_track(corpus, audio_id)
        sets.append(track_clips(wave, labels, audio_id, cache))
    return ClipSet.concat(sets)


def stitch(probs: np.ndarray, masks: np.ndarray) -> np.ndarray:
    """Concatenate per-clip (7, T) predictions over their valid columns."""
    return np.concatenate([p[:, m] for p, m in zip(probs, masks)], axis=1)


def predict_track(model: MultiScaleNet, waveform: np.ndarray, cache: FeatureCache | None = None,
                  source_id: str = "") -> np.ndarray:
    """(7, 1 + len // 512) likelihoods for a whole track."""
    waveform = np.asarray(waveform, dtype=np.float32)
    if len(waveform) < longest_cqt_window():
        raise AudioError(
            f"audio has {len(waveform)} samples, shorter than one CQT window ({longest_cqt_window()})"
        )
    clips = track_clips(waveform, None, source_id, cache)
    return stitch(predict_clips(model, clips), clips.masks)
