"""Multi-scale residual network with self-attention on the coarsest branch.

Feature maps use the layout ``(batch, channels, time, width)``; the CQT's 88
frequency bins become channels, and ``width`` is the axis along which
rescaled maps are concatenated before being collapsed again by the next
residual block.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import N_CLASSES, FrameLabelMatrix

N_BINS = 88


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_classes: int = N_CLASSES
    branch_count: int = 3
    time_downsample_factor: int = 2
    stage_count: int = 3
    blocks_per_stage: int = 2
    channels_per_branch: list[int] = field(default_factory=lambda: [16, 32, 64])
    attention_dim: int | None = None
    attention_block_count: int = 2
    # ablation switches
    multi_scale: bool = True
    use_attention: bool = True
    use_residual: bool = True

    def __post_init__(self):
        self.channels_per_branch = [int(c) for c in self.channels_per_branch]
        if self.attention_dim is None:
            self.attention_dim = self.channels_per_branch[-1] if self.channels_per_branch else 0
        self.validate()

    def validate(self) -> None:
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes must be {N_CLASSES}, got {self.n_classes}")
        if self.branch_count != 3:
            raise ConfigError(f"branch_count must be 3, got {self.branch_count}")
        if len(self.channels_per_branch) != 3:
            raise ConfigError(
                f"channels_per_branch must list 3 widths, got {len(self.channels_per_branch)}"
            )
        c = self.channels_per_branch
        if not (0 < c[0] < c[1] < c[2]):
            raise ConfigError(f"channels_per_branch must be positive and strictly increasing, got {c}")
        if self.time_downsample_factor < 2:
            raise ConfigError("time_downsample_factor must be >= 2")
        if self.stage_count < 1 or self.blocks_per_stage < 1:
            raise ConfigError("stage_count and blocks_per_stage must be >= 1")
        if self.attention_block_count < 0:
            raise ConfigError("attention_block_count must be >= 0")
        if self.attention_dim != c[-1]:
            raise ConfigError(
                f"attention_dim ({self.attention_dim}) must equal the coarsest branch width "
                f"({c[-1]}) for the residual add"
            )

    @property
    def time_multiple(self) -> int:
        if not self.multi_scale:
            return 1
        return self.time_downsample_factor ** (self.branch_count - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        return cls(**d)


def self_attention(x: torch.Tensor, w_q: torch.Tensor, w_k: torch.Tensor, w_v: torch.Tensor) -> torch.Tensor:
    """Scaled dot-product attention over frames.

    ``x`` is ``(..., T, d_m)``; the weights are ``(d_m, d_k)``. Each output
    frame is the softmax(q_i k_j / sqrt(d_k))-weighted sum of the value rows.
    """
    if not (w_q.shape == w_k.shape == w_v.shape):
        raise ConfigError("W_Q, W_K and W_V must share a shape")
    d_k = w_q.shape[-1]
    if d_k <= 0:
        raise ConfigError("d_k must be positive")
    q = x @ w_q
    k = x @ w_k
    v = x @ w_v
    scores = q @ k.transpose(-1, -2) / math.sqrt(d_k)
    return torch.softmax(scores, dim=-1) @ v


class Stem(nn.Module):
    """(B, 1, 88, T) CQT -> (B, 88, T, 1) with per-bin batch normalization."""

    def __init__(self, n_bins: int = N_BINS):
        super().__init__()
        self.n_bins = n_bins
        self.norm = nn.BatchNorm2d(n_bins)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != self.n_bins:
            raise ValueError(f"expected CQT input of shape (B, 1, {self.n_bins}, T), got {tuple(x.shape)}")
        x = x.permute(0, 2, 3, 1)
        return self.norm(x)


class ResidualBlock(nn.Module):
    """Collapse the width axis with a (1, n) convolution, then conv3x1-BN-ReLU twice plus a skip path."""

    def __init__(self, c_in: int, c_out: int, width: int = 1, residual: bool = True):
        super().__init__()
        self.width = width
        # nothing to collapse when the input is already one wide
        self.collapse = nn.Conv2d(c_in, c_in, kernel_size=(1, width)) if width > 1 else nn.Identity()
        self.conv1 = nn.Conv2d(c_in, c_out, kernel_size=(3, 1), padding=(1, 0), bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, kernel_size=(3, 1), padding=(1, 0), bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.act = nn.ReLU()
        self.residual = residual
        if residual and c_in != c_out:
            self.skip = nn.Conv2d(c_in, c_out, kernel_size=1)
        else:
            self.skip = nn.Identity()

    def main_path_parameters(self):
        for m in (self.conv1, self.bn1, self.conv2, self.bn2):
            yield from m.parameters()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.width:
            raise ValueError(f"residual block built for width {self.width}, got {x.shape[-1]}")
        x = self.collapse(x)
        out = self.act(self.bn1(self.conv1(x)))
        out = self.act(self.bn2(self.conv2(out)))
        if self.residual:
            out = out + self.skip(x)
        return out


class SelfAttentionBlock(nn.Module):
    def __init__(self, d_model: int, d_k: int | None = None):
        super().__init__()
        d_k = d_model if d_k is None else d_k
        if d_k != d_model:
            raise ConfigError(f"d_k ({d_k}) must equal d_m ({d_model}) for the residual add")
        self.w_q = nn.Parameter(torch.empty(d_model, d_k))
        self.w_k = nn.Parameter(torch.empty(d_model, d_k))
        self.w_v = nn.Parameter(torch.empty(d_model, d_k))
        for w in (self.w_q, self.w_k, self.w_v):
            nn.init.xavier_uniform_(w)
        self.norm = nn.BatchNorm2d(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # (B, C, t, 1) -> (B, t, C)
        seq = x.squeeze(-1).transpose(1, 2)
        out = self_attention(seq, self.w_q, self.w_k, self.w_v)
        out = out.transpose(1, 2).unsqueeze(-1)
        return self.norm(out + x)


class Rescale(nn.Module):
    """Move a feature map between time scales.

    Downsampling is repeated max-pooling over time; upsampling is repeated
    stride-``factor`` transposed convolution with a 3x1 kernel. When
    ``c_out`` differs from ``c_in`` the channel count is matched too (1x1
    convolution after pooling; the last transposed convolution otherwise).
    """

    def __init__(self, c_in: int, src: int, dst: int, factor: int = 2, c_out: int | None = None):
        super().__init__()
        if src == dst:
            raise ValueError("rescale needs distinct source and target scales")
        c_out = c_in if c_out is None else c_out
        self.src, self.dst, self.factor = src, dst, factor
        steps = abs(dst - src)
        layers: list[nn.Module] = []
        if dst > src:
            layers += [nn.MaxPool2d(kernel_size=(factor, 1)) for _ in range(steps)]
            if c_out != c_in:
                layers.append(nn.Conv2d(c_in, c_out, kernel_size=1))
        else:
            for i in range(steps):
                co = c_out if i == steps - 1 else c_in
                layers.append(
                    nn.ConvTranspose2d(
                        c_in,
                        co,
                        kernel_size=(3, 1),
                        stride=(factor, 1),
                        padding=(1, 0),
                        output_padding=(factor - 1, 0),
                    )
                )
        self.layers = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        t = x.shape[2]
        out = self.layers(x)
        expected = t * self.factor ** (self.src - self.dst)
        if out.shape[2] != expected:
            raise ValueError(f"rescale produced {out.shape[2]} frames, expected {expected}")
        return out


def rescale(x: torch.Tensor, src: int, dst: int, factor: int = 2) -> torch.Tensor:
    """Parameter-free view of :class:`Rescale` for downsampling; upsampling builds fresh layers."""
    if dst > src:
        steps = factor ** (dst - src)
        if x.shape[2] % steps:
            raise ValueError(f"time length {x.shape[2]} is not divisible by {steps}")
        return F.max_pool2d(x, kernel_size=(steps, 1))
    return Rescale(x.shape[1], src, dst, factor).to(x)(x)


def fuse(maps: list[torch.Tensor]) -> torch.Tensor:
    """Concatenate same-scale maps along the width axis."""
    if not maps:
        raise ValueError("nothing to fuse")
    if len(maps) == 1:
        return maps[0]
    shape = maps[0].shape[:3]
    for m in maps[1:]:
        if m.shape[:3] != shape:
            raise ValueError(f"cannot fuse maps of shapes {tuple(maps[0].shape)} and {tuple(m.shape)}")
    return torch.cat(maps, dim=-1)


class MultiScaleNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        ch = config.channels_per_branch
        n_branch = config.branch_count if config.multi_scale else 1
        f = config.time_downsample_factor
        self.n_branch = n_branch
        self.stem = Stem()
        self.pool = nn.MaxPool2d(kernel_size=(f, 1))

        self.stages = nn.ModuleList()
        self.exchanges = nn.ModuleList()
        for s in range(config.stage_count):
            branches = nn.ModuleList()
            for b in range(n_branch):
                c_in = N_BINS if s == 0 else ch[b]
                # after a fusion the input width is the number of fused branches
                width = 1 if s == 0 else n_branch
                blocks = [ResidualBlock(c_in, ch[b], width, config.use_residual)]
                blocks += [
                    ResidualBlock(ch[b], ch[b], 1, config.use_residual)
                    for _ in range(config.blocks_per_stage - 1)
                ]
                branches.append(nn.Sequential(*blocks))
            self.stages.append(branches)
            self.exchanges.append(self._exchange(ch, n_branch, f, final=s == config.stage_count - 1))

        n_att = config.attention_block_count if (config.use_attention and config.multi_scale) else 0
        self.attention = nn.Sequential(*[SelfAttentionBlock(ch[n_branch - 1]) for _ in range(n_att)])

        # collapse the final fusion and project the finest branch back to (88, T, 1)
        self.out_proj = nn.Sequential(
            nn.Conv2d(ch[0], N_BINS, kernel_size=(1, n_branch), bias=False),
            nn.BatchNorm2d(N_BINS),
            nn.ReLU(),
        )
        self.head = nn.Conv2d(N_BINS, config.n_classes, kernel_size=(3, 1), padding=(1, 0))

    @staticmethod
    def _exchange(ch, n_branch, factor, final):
        # exchange[dst][src]: rescale src-branch map to dst scale and dst width
        targets = [0] if final else range(n_branch)
        ex = nn.ModuleDict()
        for dst in targets:
            for src in range(n_branch):
                if src != dst:
                    ex[f"{src}to{dst}"] = Rescale(ch[src], src, dst, factor, c_out=ch[dst])
        return ex

    def _initial_branches(self, x: torch.Tensor) -> list[torch.Tensor]:
        maps = [x]
        for _ in range(1, self.n_branch):
            maps.append(self.pool(maps[-1]))
        return maps

    def logits(self, cqt: torch.Tensor) -> torch.Tensor:
        """(B, 1, 88, T) -> (B, n_classes, T) pre-sigmoid scores."""
        if cqt.dim() == 3:
            cqt = cqt.unsqueeze(0)
        if cqt.dim() != 4 or cqt.shape[1] != 1 or cqt.shape[2] != N_BINS:
            raise ValueError(f"expected input of shape (B, 1, {N_BINS}, T), got {tuple(cqt.shape)}")
        t = cqt.shape[-1]
        mult = self.config.time_multiple
        pad = (-t) % mult
        if pad:
            cqt = F.pad(cqt, (0, pad))

        maps = self._initial_branches(self.stem(cqt))
        last = len(self.stages) - 1
        for s, (branches, exchange) in enumerate(zip(self.stages, self.exchanges)):
            maps = [blocks(m) for blocks, m in zip(branches, maps)]
            if s == last and len(self.attention):
                maps[-1] = self.attention(maps[-1])
            targets = [0] if s == last else range(self.n_branch)
            maps = [
                fuse([m if src == dst else exchange[f"{src}to{dst}"](m) for src, m in enumerate(maps)])
                for dst in targets
            ]
        out = self.out_proj(maps[0])
        out = self.head(out).squeeze(-1)
        return out[..., :t]

    def forward(self, cqt: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(cqt))

    @torch.no_grad()
    def predict(self, magnitudes: np.ndarray) -> np.ndarray:
        """(88, T) CQT magnitudes -> (7, T) likelihoods, inference mode."""
        was_training = self.training
        self.eval()
        try:
            p = next(self.parameters())
            x = torch.as_tensor(np.asarray(magnitudes), dtype=p.dtype, device=p.device)
            return self(x[None, None]).squeeze(0).cpu().numpy()
        finally:
            self.train(was_training)


def binarize(pred, threshold: float = 0.5) -> FrameLabelMatrix:
    """Likelihood >= threshold becomes 1."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if isinstance(pred, torch.Tensor):
        pred = pred.detach().cpu().numpy()
    return FrameLabelMatrix((np.asarray(pred) >= threshold).astype(np.uint8))
