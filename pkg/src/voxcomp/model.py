"""Coordinate-conditioned model mapping a voxel position to its time series.

The learnable state is a bank of K temporal patterns, K small coordinate
MLPs producing per-pattern scalar weights from a sinusoidally embedded
position, per-pattern 1-D convolutional feature encoders, and a U-shaped
1-D fusion network that turns the weight-gated pattern features into the
predicted series.  With ``use_fusion`` off, the model degrades to the plain
linear superposition of bank rows under the predicted weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeMismatch


@dataclass
class ModelConfig:
    """Architecture hyperparameters; all sizes must be positive."""

    k: int
    t: int
    embed_freqs: int = 10
    mlp_layers: int = 5
    mlp_width: int = 64
    feat_channels: int = 8
    fusion_levels: int = 2
    fusion_width: int = 32
    use_fusion: bool = True

    def __post_init__(self):
        for name in ("k", "t", "embed_freqs", "mlp_layers", "mlp_width",
                     "feat_channels", "fusion_levels", "fusion_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.mlp_layers < 2:
            raise ValueError("mlp_layers must be >= 2")

    @property
    def t_pad(self) -> int:
        """Series length padded up to a multiple of 2**fusion_levels."""
        step = 2 ** self.fusion_levels
        return ((self.t + step - 1) // step) * step

    @property
    def embed_dim(self) -> int:
        return 3 * 2 * self.embed_freqs


def embed_coords(coords: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """Sinusoidal embedding of normalized coordinates.

    Each axis p contributes (sin 2^0 pi p, cos 2^0 pi p, ...,
    sin 2^(L-1) pi p, cos 2^(L-1) pi p); axes are concatenated in order and
    the raw coordinate is not passed through.  Input (..., 3), output
    (..., 6L).
    """
    freqs = (2.0 ** torch.arange(n_freqs, dtype=coords.dtype,
                                 device=coords.device)) * math.pi
    angles = coords.unsqueeze(-1) * freqs            # (..., 3, L)
    parts = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return parts.reshape(*coords.shape[:-1], 3 * 2 * n_freqs)


def normalize_coords(coords, dims) -> torch.Tensor:
    """Map integer voxel indices to cell centers in (-1, 1)^3.

    Index c on an axis of extent D lands at (2c + 1)/D - 1.  Staying strictly
    inside the interval matters: the sinusoidal embedding aliases at exactly
    +-1 (every sin term is zero and cos is even), which would make opposite
    volume corners indistinguishable.
    """
    coords = torch.as_tensor(
        coords if isinstance(coords, torch.Tensor) else coords.copy()
    ).to(torch.float32)
    span = torch.tensor([float(d) for d in dims[:3]], dtype=torch.float32)
    return (2.0 * coords + 1.0) / span - 1.0


class WeightFieldMLP(nn.Module):
    """Plain MLP from embedded coordinates to one unbounded scalar weight."""

    def __init__(self, in_dim: int, width: int, layers: int):
        super().__init__()
        sizes = [in_dim] + [width] * (layers - 1) + [1]
        self.layers = nn.ModuleList(
            nn.Linear(sizes[i], sizes[i + 1]) for i in range(layers)
        )
        self.act = nn.GELU()

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)


class PatternEncoder(nn.Module):
    """Two same-padded 1-D convolutions lifting one pattern row to C channels."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv1d(1, channels, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(channels, channels, kernel_size=3, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        return self.conv2(self.act(self.conv1(x)))


class FusionNet(nn.Module):
    """U-shaped 1-D network: strided-conv down path, nearest-upsample up path.

    The output of each down stage (and the raw input at the top level) is
    concatenated channel-wise into the up stage working at the same temporal
    resolution; a last convolution reduces to a single channel.
    """

    def __init__(self, in_channels: int, width: int, levels: int):
        super().__init__()
        self.levels = levels
        self.downs = nn.ModuleList(
            nn.Conv1d(in_channels if i == 0 else width, width,
                      kernel_size=3, stride=2, padding=1)
            for i in range(levels)
        )
        skip_channels = [in_channels] + [width] * (levels - 1)
        self.ups = nn.ModuleList(
            nn.Conv1d(width + skip_channels[levels - 1 - i], width,
                      kernel_size=3, padding=1)
            for i in range(levels)
        )
        self.final = nn.Conv1d(width, 1, kernel_size=3, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        skips = [x]
        for down in self.downs:
            x = self.act(down(x))
            skips.append(x)
        for i, up in enumerate(self.ups):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = self.act(up(torch.cat([x, skips[self.levels - 1 - i]], dim=1)))
        return self.final(x)


class InrModel(nn.Module):
    """Full compression model; parameters are the compressed code."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.bank = nn.Parameter(torch.randn(config.k, config.t))
        self.weight_mlps = nn.ModuleList(
            WeightFieldMLP(config.embed_dim, config.mlp_width, config.mlp_layers)
            for _ in range(config.k)
        )
        if config.use_fusion:
            self.pattern_encoders = nn.ModuleList(
                PatternEncoder(config.feat_channels) for _ in range(config.k)
            )
            self.fusion = FusionNet(
                config.k * config.feat_channels,
                config.fusion_width,
                config.fusion_levels,
            )

    def predict_weights(self, v_norm: torch.Tensor) -> torch.Tensor:
        """(B, 3) normalized coordinates -> (B, K) pattern weights."""
        emb = embed_coords(v_norm, self.config.embed_freqs)
        return torch.cat([mlp(emb) for mlp in self.weight_mlps], dim=-1)

    def pattern_features(self) -> torch.Tensor:
        """Encode every bank row; returns (K*C, T) channel-stacked features."""
        feats = [
            enc(self.bank[i].reshape(1, 1, -1))
            for i, enc in enumerate(self.pattern_encoders)
        ]
        return torch.cat(feats, dim=1).squeeze(0)

    def fuse(self, modulated: torch.Tensor) -> torch.Tensor:
        """(B, K*C, t_pad) gated features -> (B, T) series."""
        cfg = self.config
        if modulated.dim() != 3 or modulated.shape[1] != cfg.k * cfg.feat_channels:
            raise ShapeMismatch(f"expected (B, {cfg.k * cfg.feat_channels}, t), "
                                f"got {tuple(modulated.shape)}")
        if modulated.shape[2] % 2 ** cfg.fusion_levels != 0:
            raise ShapeMismatch("fusion input length must be a multiple of "
                                f"{2 ** cfg.fusion_levels}")
        return self.fusion(modulated).squeeze(1)[:, : cfg.t]

    def forward(self, v_norm: torch.Tensor) -> torch.Tensor:
        """(B, 3) normalized coordinates -> (B, T) predicted series."""
        weights = self.predict_weights(v_norm)
        if not self.config.use_fusion:
            return weights @ self.bank
        feats = self.pattern_features()
        feats = F.pad(feats, (0, self.config.t_pad - self.config.t))
        return self.fuse(channel_attention(weights, feats))

    def param_count(self) -> int:
        """Closed-form parameter count; must equal the framework's count.

        bank: K*T
        each MLP: (6L+1)*W + (layers-2)*(W+1)*W + (W+1)
        each encoder: (3+1)*C + (3*C+1)*C
        fusion: down_0 (3*K*C+1)*Wf, other downs (3*Wf+1)*Wf,
                ups (3*(Wf+skip)+1)*Wf with skip = Wf except K*C at the top,
                final 3*Wf+1
        """
        c = self.config
        total = c.k * c.t
        mlp = ((c.embed_dim + 1) * c.mlp_width
               + (c.mlp_layers - 2) * (c.mlp_width + 1) * c.mlp_width
               + (c.mlp_width + 1))
        total += c.k * mlp
        if c.use_fusion:
            enc = (3 + 1) * c.feat_channels + (3 * c.feat_channels + 1) * c.feat_channels
            total += c.k * enc
            in_ch = c.k * c.feat_channels
            total += (3 * in_ch + 1) * c.fusion_width
            total += (c.fusion_levels - 1) * (3 * c.fusion_width + 1) * c.fusion_width
            skips = [in_ch] + [c.fusion_width] * (c.fusion_levels - 1)
            for i in range(c.fusion_levels):
                skip = skips[c.fusion_levels - 1 - i]
                total += (3 * (c.fusion_width + skip) + 1) * c.fusion_width
            total += 3 * c.fusion_width + 1
        return total


def channel_attention(weights: torch.Tensor, feats: torch.Tensor) -> torch.Tensor:
    """Gate each pattern's feature block by its scalar weight.

    ``weights`` is (B, K) and ``feats`` (K*C, T); block i of the output is
    ``weights[:, i] * feats[i*C:(i+1)*C]`` with no mixing across blocks, so
    the operation is exactly linear in the weights.
    """
    if feats.shape[0] % weights.shape[-1] != 0:
        raise ShapeMismatch(
            f"feature rows {feats.shape[0]} not divisible by K={weights.shape[-1]}"
        )
    channels = feats.shape[0] // weights.shape[-1]
    gate = weights.repeat_interleave(channels, dim=-1).unsqueeze(-1)
    return gate * feats.unsqueeze(0)


def predict_weights(model: InrModel, v_norm: torch.Tensor) -> torch.Tensor:
    return model.predict_weights(v_norm)


def pattern_features(model: InrModel) -> torch.Tensor:
    return model.pattern_features()


def fuse(model: InrModel, modulated: torch.Tensor) -> torch.Tensor:
    return model.fuse(modulated)
