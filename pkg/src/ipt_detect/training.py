"""Weighted BCE training: SGD with momentum, gradient clipping and a cosine schedule."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .dataset import CLASS_NAMES, N_CLASSES, FrameLabelMatrix
from .evaluation import frame_metrics
from .model import ConfigError, ModelConfig, MultiScaleNet
from .pipeline import ClipSet, predict_clips

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EPS = 1e-7


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        self.last_checkpoint = last_checkpoint
        if last_checkpoint is not None:
            message += f" (last good checkpoint: {last_checkpoint})"
        super().__init__(message)


class CheckpointMismatch(ConfigError):
    pass


@dataclass
class TrainConfig:
    initial_lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 10
    grad_clip_l2: float = 3.0
    lr_schedule: str = "cosine"
    epochs: int = 100
    seed: int = 0
    w_max: float = 20.0
    threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("initial_lr", "batch_size", "grad_clip_l2", "epochs", "w_max"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ConfigError(f"lr_schedule must be 'cosine' or 'constant', got {self.lr_schedule!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def class_weights(labels, masks=None, w_max: float = 20.0) -> np.ndarray:
    """Per-class positive weight neg/pos, clamped to [1, w_max].

    ``labels`` is a list of label matrices (or one stacked array); ``masks``
    optionally restricts counting to valid frames.
    """
    mats = [lab.values if isinstance(lab, FrameLabelMatrix) else np.asarray(lab) for lab in labels]
    if masks is None:
        masks = [np.ones(m.shape[-1], dtype=bool) for m in mats]
    pos = np.zeros(N_CLASSES, dtype=np.int64)
    total = 0
    for m, k in zip(mats, masks):
        k = np.asarray(k, dtype=bool)
        pos += m[:, k].sum(axis=1).astype(np.int64)
        total += int(k.sum())
    neg = total - pos
    empty = [CLASS_NAMES[c] for c in range(N_CLASSES) if pos[c] == 0]
    if empty:
        raise ValueError(f"no positive training frames for class(es): {', '.join(empty)}")
    return np.clip(neg / pos, 1.0, w_max)


def weighted_bce(
    pred, target, weights, valid_mask=None, eps: float = EPS, check_finite: bool = True
) -> torch.Tensor:
    """Mean over valid cells of -(w_c * y * log p + (1 - y) * log(1 - p)).

    ``pred`` and ``target`` are (..., C, T); ``valid_mask`` is (..., T).
    ``check_finite=False`` skips the NaN guard (needed under ``torch.func.vmap``).
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype, device=pred.device)
    w = torch.as_tensor(weights, dtype=pred.dtype, device=pred.device)
    if pred.shape != target.shape:
        raise ValueError(f"prediction shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    if check_finite and torch.isnan(pred).any():
        raise FloatingPointError("NaN in predictions")
    p = pred.clamp(eps, 1 - eps)
    w = w.reshape(-1, 1)
    cell = -(w * target * torch.log(p) + (1 - target) * torch.log1p(-p))
    if valid_mask is None:
        return cell.mean()
    mask = torch.as_tensor(valid_mask, dtype=pred.dtype, device=pred.device).unsqueeze(-2)
    n = (mask.sum() * pred.shape[-2]).clamp_min(1)
    return (cell * mask).sum() / n


# ---------------------------------------------------------------------------
# schedule and clipping


def cosine_lr(step: int, total_steps: int, initial_lr: float) -> float:
    """Learning rate after ``step`` of ``total_steps`` updates; reaches 0 at ``total_steps``."""
    if total_steps <= 0:
        return initial_lr
    step = min(max(step, 0), total_steps)
    return 0.5 * initial_lr * (1 + math.cos(math.pi * step / total_steps))


def global_grad_norm(parameters) -> float:
    grads = [p.grad.detach().reshape(-1) for p in parameters if p.grad is not None]
    if not grads:
        return 0.0
    return float(torch.linalg.vector_norm(torch.cat(grads)))


def clip_gradients(parameters, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    return float(torch.nn.utils.clip_grad_norm_(list(parameters), max_norm))


# ---------------------------------------------------------------------------
# validation


def evaluate_clips(model: MultiScaleNet, clips: ClipSet, threshold: float = 0.5):
    """Micro P, R, F1 over all clips' valid frames."""
    probs = predict_clips(model, clips)
    pred = (probs >= threshold).astype(np.uint8)
    # flatten clips along time so masks and counts pool over the whole set
    pred = np.concatenate(list(pred), axis=1) if len(pred) else np.zeros((N_CLASSES, 0))
    truth = np.concatenate(list(clips.labels), axis=1) if len(clips) else np.zeros((N_CLASSES, 0))
    mask = clips.masks.reshape(-1)
    return frame_metrics(pred, truth, mask)


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(model_config: ModelConfig) -> str:
    blob = json.dumps(model_config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def save_checkpoint(path, model: MultiScaleNet, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "config_hash": config_hash(model.config),
        "ipt_classes": list(CLASS_NAMES),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        **extra,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> tuple[MultiScaleNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {payload.get('version')}")
    if payload.get("ipt_classes") != list(CLASS_NAMES):
        raise CheckpointMismatch(f"{path}: IPT class order differs from {CLASS_NAMES}")
    config = ModelConfig.from_dict(payload["model_config"])
    if expected_config is not None and config_hash(expected_config) != payload["config_hash"]:
        raise CheckpointMismatch(
            f"{path}: checkpoint config {payload['config_hash']} does not match "
            f"requested config {config_hash(expected_config)}"
        )
    model = MultiScaleNet(config)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# loop


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    precision: float
    recall: float
    f1: float

    def csv(self) -> str:
        return (
            f"{self.epoch},{self.lr:.8f},{self.train_loss:.6f},"
            f"{self.precision:.6f},{self.recall:.6f},{self.f1:.6f}"
        )


LOG_HEADER = "epoch,lr,train_loss,valid_precision,valid_recall,valid_f1"


@dataclass
class TrainResult:
    history: list[EpochRecord]
    step_losses: list[float]
    best_epoch: int
    best_f1: float
    best_checkpoint: Path | None = None
    # global gradient L2 norm per step, before and after clipping
    grad_norms: list[float] = field(default_factory=list)
    clipped_norms: list[float] = field(default_factory=list)


def train(
    model: MultiScaleNet,
    train_set: ClipSet,
    valid_set: ClipSet,
    config: TrainConfig,
    run_dir: str | Path | None = None,
    weights: np.ndarray | None = None,
    max_steps: int | None = None,
) -> TrainResult:
    """Train ``model`` in place and keep the parameters with the best validation F1.

    With ``max_steps`` the run stops after that many updates (the cosine
    schedule then spans ``max_steps``); each epoch is one shuffled pass over
    the training clips.
    """
    if len(train_set) == 0 or len(valid_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    if weights is None:
        weights = class_weights(list(train_set.labels), list(train_set.masks), config.w_max)
    p0 = next(model.parameters())
    w = torch.as_tensor(weights, dtype=p0.dtype, device=p0.device)

    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = max_steps
        epochs = math.ceil(max_steps / steps_per_epoch)
    else:
        epochs = config.epochs

    optimizer = torch.optim.SGD(model.parameters(), lr=config.initial_lr, momentum=config.momentum)

    run_dir = Path(run_dir) if run_dir is not None else None
    log_fh = None
    if run_dir is not None:
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(run_dir / "train_log.csv", "w")
        log_fh.write(LOG_HEADER + "\n")

    history: list[EpochRecord] = []
    step_losses: list[float] = []
    grad_norms: list[float] = []
    clipped_norms: list[float] = []
    best_f1, best_epoch, best_state, best_path = -1.0, -1, None, None
    step = 0
    try:
        for epoch in range(epochs):
            model.train()
            order = rng.permutation(len(train_set))
            epoch_losses = []
            lr = config.initial_lr
            for i in range(0, len(order), config.batch_size):
                if step >= total_steps:
                    break
                if config.lr_schedule == "cosine":
                    lr = cosine_lr(step, total_steps, config.initial_lr)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                idx = order[i : i + config.batch_size]
                x = torch.as_tensor(train_set.features[idx], dtype=p0.dtype, device=p0.device)[:, None]
                y = torch.as_tensor(train_set.labels[idx], dtype=p0.dtype, device=p0.device)
                m = torch.as_tensor(train_set.masks[idx], dtype=p0.dtype, device=p0.device)
                optimizer.zero_grad()
                pred = model(x)
                if not torch.isfinite(pred).all():
                    raise TrainingDiverged(f"non-finite prediction at step {step}", best_path)
                loss = weighted_bce(pred, y, w, m)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss.item()} at step {step}", best_path)
                loss.backward()
                grad_norms.append(clip_gradients(model.parameters(), config.grad_clip_l2))
                clipped_norms.append(global_grad_norm(model.parameters()))
                optimizer.step()
                step_losses.append(loss.item())
                epoch_losses.append(loss.item())
                step += 1

            precision, recall, f1, _ = evaluate_clips(model, valid_set, config.threshold)
            rec = EpochRecord(epoch, lr, float(np.mean(epoch_losses)) if epoch_losses else float("nan"),
                              precision, recall, f1)
            history.append(rec)
            logger.info("epoch %d lr %.5f loss %.4f valid P %.4f R %.4f F1 %.4f",
                        epoch, lr, rec.train_loss, precision, recall, f1)
            if log_fh is not None:
                log_fh.write(rec.csv() + "\n")
                log_fh.flush()
            if f1 > best_f1:
                best_f1, best_epoch = f1, epoch
                best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
                if run_dir is not None:
                    best_path = save_checkpoint(
                        run_dir / "checkpoints" / "best.pt", model, epoch=epoch, valid_f1=f1
                    )
            if step >= total_steps:
                break
    finally:
        if log_fh is not None:
            log_fh.close()

    if run_dir is not None:
        save_checkpoint(run_dir / "checkpoints" / "last.pt", model, epoch=len(history) - 1)
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, step_losses, best_epoch, best_f1, best_path, grad_norms, clipped_norms)


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> MultiScaleNet:
    torch.manual_seed(seed)
    return MultiScaleNet(config).to(dtype)

