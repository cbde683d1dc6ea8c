"""3D convolutional encoder/decoder pair around the vector-quantized bottleneck.

One :class:`VolumeVqvae` instance serves each of the three models in the
pipeline (OCT reconstruction, OCTA reconstruction, OCT-to-OCTA translation);
they differ only in parameters and training targets.

The encoder stacks ``blocks`` stages of pre-activation ResBlocks followed by a
stride-2 downsampling convolution, doubling channels per stage, and projects
the bottleneck to the codeword dimension. The decoder mirrors it with
nearest-neighbor upsampling + convolution and ends in a sigmoid so outputs
stay in [0, 1].

``codebook_levels`` selects where quantization happens:

* ``bottleneck_only`` (default): a single codebook quantizes the projected
  bottleneck features.
* ``per_downsample``: every downsampling stage feeds its own codebook; the
  quantized intermediate features re-enter the decoder as additive skip
  connections, and the loss terms sum over levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .vq import Codebook, QuantizeResult, straight_through, vq_quantize
from .volume import Modality, Volume

BOTTLENECK_ONLY = "bottleneck_only"
PER_DOWNSAMPLE = "per_downsample"


@dataclass(frozen=True)
class NetConfig:
    blocks: int = 4
    resblocks_per_block: int = 2
    base_channels: int = 8
    downsample_factor_per_block: int = 2
    codebook_levels: str = BOTTLENECK_ONLY
    codebook_size: int = 512  # entries per codebook
    codebook_dim: int = 32  # codeword dimension at the bottleneck

    def __post_init__(self) -> None:
        if self.blocks < 1:
            raise ConfigError(f"blocks must be >= 1, got {self.blocks}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.resblocks_per_block < 0:
            raise ConfigError("resblocks_per_block must be nonnegative")
        if self.downsample_factor_per_block != 2:
            raise ConfigError("only downsample factor 2 is supported")
        if self.codebook_levels not in (BOTTLENECK_ONLY, PER_DOWNSAMPLE):
            raise ConfigError(f"unknown codebook_levels {self.codebook_levels!r}")

    @property
    def total_downsample(self) -> int:
        return self.downsample_factor_per_block**self.blocks

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.blocks + 1)]


def volume_to_tensor(vol: Volume | torch.Tensor) -> torch.Tensor:
    """Volume -> [1, 1, L, W, D] float32 tensor (tensors pass through)."""
    if isinstance(vol, torch.Tensor):
        return vol
    return torch.from_numpy(vol.values).unsqueeze(0).unsqueeze(0)


def tensor_to_volume(t: torch.Tensor, modality: Modality) -> Volume:
    arr = t.detach().squeeze(0).squeeze(0).clamp(0.0, 1.0).cpu().numpy()
    return Volume(arr, modality)


class ResBlock3d(nn.Module):
    """Pre-activation residual block: x + conv(act(conv(act(x))))."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.conv1 = nn.Conv3d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv1(torch.relu(x))
        h = self.conv2(torch.relu(h))
        return x + h


class Encoder3d(nn.Module):
    def __init__(self, cfg: NetConfig) -> None:
        super().__init__()
        chans = cfg.channels
        self.stem = nn.Conv3d(1, chans[0], 3, padding=1)
        self.stages = nn.ModuleList()
        for i in range(cfg.blocks):
            stage = nn.Sequential(
                *[ResBlock3d(chans[i]) for _ in range(cfg.resblocks_per_block)],
                nn.Conv3d(chans[i], chans[i + 1], 4, stride=2, padding=1),
            )
            self.stages.append(stage)
        self.to_latent = nn.Conv3d(chans[-1], cfg.codebook_dim, 1)
        self.cfg = cfg

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        """Returns (bottleneck latent, per-stage post-downsample features)."""
        factor = self.cfg.total_downsample
        spatial = x.shape[-3:]
        if any(s % factor != 0 for s in spatial):
            raise ShapeError(
                f"input dims {tuple(spatial)} not divisible by downsampling factor {factor}"
            )
        h = self.stem(x)
        levels = []
        for stage in self.stages:
            h = stage(h)
            levels.append(h)
        return self.to_latent(h), levels


class Decoder3d(nn.Module):
    def __init__(self, cfg: NetConfig) -> None:
        super().__init__()
        chans = cfg.channels
        self.from_latent = nn.Conv3d(cfg.codebook_dim, chans[-1], 1)
        self.stages = nn.ModuleList()
        for i in reversed(range(cfg.blocks)):
            stage = nn.Sequential(
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv3d(chans[i + 1], chans[i], 3, padding=1),
                *[ResBlock3d(chans[i]) for _ in range(cfg.resblocks_per_block)],
            )
            self.stages.append(stage)
        self.head = nn.Conv3d(chans[0], 1, 3, padding=1)
        self.cfg = cfg

    def forward(self, q: torch.Tensor, skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        """``skips``: quantized per-stage features, coarsest-but-one first.

        ``skips[j]`` is added after upsampling stage ``j`` (0-based), so it
        must match the encoder feature at depth ``blocks-1-j``.
        """
        h = self.from_latent(q)
        for j, stage in enumerate(self.stages):
            h = stage(h)
            if skips is not None and j < len(skips):
                h = h + skips[j]
        return torch.sigmoid(self.head(h))


class VqvaeForward(NamedTuple):
    reconstruction: torch.Tensor
    quantize_result: QuantizeResult
    features: torch.Tensor  # unquantized bottleneck latent


class VolumeVqvae(nn.Module):
    """Encoder + codebook(s) + decoder for one volume-to-volume model."""

    def __init__(self, cfg: NetConfig, generator: torch.Generator | None = None) -> None:
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder3d(cfg)
        self.decoder = Decoder3d(cfg)
        self.codebook = Codebook(cfg.codebook_size, cfg.codebook_dim)
        if cfg.codebook_levels == PER_DOWNSAMPLE:
            self.level_codebooks = nn.ModuleList(
                [Codebook(cfg.codebook_size, c) for c in cfg.channels[1:-1]]
            )
        else:
            self.level_codebooks = nn.ModuleList()
        init_parameters(self, generator)

    def encode(self, vol: Volume | torch.Tensor) -> torch.Tensor:
        latent, _ = self.encoder(volume_to_tensor(vol))
        return latent

    def decode(self, q: torch.Tensor, skips: list[torch.Tensor] | None = None) -> torch.Tensor:
        return self.decoder(q, skips)

    def forward(self, vol: Volume | torch.Tensor) -> VqvaeForward:
        """Encode, quantize, straight-through, decode.

        The returned quantize result aggregates loss terms over all active
        codebooks; its indices/quantized fields always refer to the bottleneck.
        """
        x = volume_to_tensor(vol)
        latent, levels = self.encoder(x)
        qr = vq_quantize(latent, self.codebook, channel_dim=1)
        codebook_term = qr.codebook_term
        commitment_term = qr.commitment_term
        skips: list[torch.Tensor] | None = None
        if self.cfg.codebook_levels == PER_DOWNSAMPLE:
            skips = []
            # levels[:-1] are the intermediate stages; quantize each and feed
            # the straight-through result back as a decoder skip.
            for feats, cb in zip(levels[:-1], self.level_codebooks):
                level_qr = vq_quantize(feats, cb, channel_dim=1)
                codebook_term = codebook_term + level_qr.codebook_term
                commitment_term = commitment_term + level_qr.commitment_term
                skips.append(straight_through(feats, level_qr.quantized))
            skips = list(reversed(skips))  # decoder consumes coarsest first
        bridged = straight_through(latent, qr.quantized)
        recon = self.decoder(bridged, skips)
        agg = QuantizeResult(
            indices=qr.indices,
            quantized=qr.quantized,
            codebook_term=codebook_term,
            commitment_term=commitment_term,
        )
        return VqvaeForward(reconstruction=recon, quantize_result=agg, features=latent)


def init_parameters(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Fan-in-scaled uniform init for every conv/linear, reproducible via generator."""
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.Linear)):
            weight = m.weight
            fan_in = weight.shape[1] * int(math.prod(weight.shape[2:]))
            bound = 1.0 / math.sqrt(fan_in)
            with torch.no_grad():
                weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, Codebook):
            bound = 1.0 / m.n_entries
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
