"""Codebook storage, the vector-quantization operator, and quantization losses.

Conventions used throughout:

* Distances are Euclidean. The nearest-entry search runs in float64 and breaks
  ties by lowest codebook index, so results are reproducible and match a
  brute-force linear scan exactly.
* ``codebook_term`` is the per-vector squared L2 distance between the detached
  features and their selected codewords, averaged over grid positions;
  ``commitment_term`` is the same with the detach on the codeword side.
* Reconstruction error is mean absolute error, matching the evaluation metric.
* Gradients stop exactly where the stop-gradient operator says they do: the
  codebook term carries no gradient into the encoder, the commitment term
  carries no gradient into the codebook, and the straight-through operator
  passes downstream gradients to the features unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError, ValidationError


class Codebook(nn.Module):
    """Learnable table of ``n_entries`` codewords of dimension ``dim``."""

    def __init__(
        self,
        n_entries: int,
        dim: int,
        generator: torch.Generator | None = None,
    ) -> None:
        super().__init__()
        if n_entries < 2:
            raise ValidationError(f"codebook needs at least 2 entries, got {n_entries}")
        if dim < 1:
            raise ValidationError(f"codeword dimension must be >= 1, got {dim}")
        weight = torch.empty(n_entries, dim, dtype=torch.float32)
        bound = 1.0 / n_entries
        weight.uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(weight)

    @property
    def n_entries(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class QuantizeResult:
    """Output of :func:`vq_quantize`.

    ``quantized`` vectors are bitwise rows of the codebook; ``indices`` holds
    the selected entry per grid position (channel axis removed).
    """

    indices: torch.Tensor
    quantized: torch.Tensor
    codebook_term: torch.Tensor
    commitment_term: torch.Tensor


def _move_channels_last(features: torch.Tensor, channel_dim: int) -> torch.Tensor:
    if channel_dim < 0:
        channel_dim += features.ndim
    return torch.movedim(features, channel_dim, -1)


def nearest_codeword_indices(flat: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Argmin over Euclidean distance, lowest index on ties.

    ``flat`` is [M, d], ``weight`` is [N, d]. Distances are evaluated in
    float64 from explicit differences so the selection agrees with a direct
    per-vector scan.
    """
    diffs = flat.detach().double().unsqueeze(1) - weight.detach().double().unsqueeze(0)
    dist = (diffs * diffs).sum(dim=-1)  # [M, N]
    min_val = dist.min(dim=1, keepdim=True).values
    n = weight.shape[0]
    candidates = torch.arange(n, device=flat.device).expand_as(dist)
    return torch.where(dist == min_val, candidates, n).min(dim=1).values


def vq_quantize(
    features: torch.Tensor, codebook: Codebook | torch.Tensor, channel_dim: int = 0
) -> QuantizeResult:
    """Replace every feature vector with its nearest codeword.

    ``features`` is any tensor with a channel axis at ``channel_dim`` whose
    size equals the codeword dimension; all other axes index grid positions.
    """
    weight = codebook.weight if isinstance(codebook, Codebook) else codebook
    if features.shape[channel_dim] != weight.shape[1]:
        raise ShapeError(
            f"feature channels {features.shape[channel_dim]} != codeword dim {weight.shape[1]}"
        )
    if not torch.isfinite(features).all():
        raise ValidationError("non-finite feature values")
    if not torch.isfinite(weight).all():
        raise ValidationError("non-finite codebook entries")

    moved = _move_channels_last(features, channel_dim)
    spatial_shape = moved.shape[:-1]
    flat = moved.reshape(-1, weight.shape[1])

    indices = nearest_codeword_indices(flat, weight)
    quant_flat = weight[indices]

    codebook_term = ((flat.detach() - quant_flat) ** 2).sum(dim=-1).mean()
    commitment_term = ((quant_flat.detach() - flat) ** 2).sum(dim=-1).mean()

    quantized = torch.movedim(
        quant_flat.reshape(*spatial_shape, weight.shape[1]),
        -1,
        channel_dim if channel_dim >= 0 else channel_dim + features.ndim,
    )
    return QuantizeResult(
        indices=indices.reshape(spatial_shape),
        quantized=quantized,
        codebook_term=codebook_term,
        commitment_term=commitment_term,
    )


def straight_through(features: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Identity-gradient bridge across the non-differentiable quantization.

    Forward value equals ``quantized``; the backward pass routes downstream
    gradients to ``features`` unchanged and sends none into ``quantized``.
    """
    if features.shape != quantized.shape:
        raise ShapeError(f"shape mismatch {tuple(features.shape)} vs {tuple(quantized.shape)}")
    return quantized.detach() + (features - features.detach())


@dataclass
class VqvaeLossTerms:
    total: torch.Tensor
    reconstruction: torch.Tensor
    codebook: torch.Tensor
    commitment: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "total": float(self.total.detach()),
            "reconstruction": float(self.reconstruction.detach()),
            "codebook": float(self.codebook.detach()),
            "commitment": float(self.commitment.detach()),
        }


def vqvae_loss(
    x: torch.Tensor,
    x_hat: torch.Tensor,
    qr: QuantizeResult,
    commitment_weight: float = 1.0,
) -> VqvaeLossTerms:
    """Reconstruction + codebook + commitment loss with term breakdown.

    Reconstruction is mean absolute error between target and output volumes;
    the quantization terms come from ``qr``. All three are weighted 1.0 by
    default (``commitment_weight`` is exposed but defaults to 1.0).
    """
    if x.shape != x_hat.shape:
        raise ShapeError(f"volume dims differ: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    reconstruction = (x - x_hat).abs().mean()
    total = reconstruction + qr.codebook_term + commitment_weight * qr.commitment_term
    return VqvaeLossTerms(
        total=total,
        reconstruction=reconstruction,
        codebook=qr.codebook_term,
        commitment=commitment_weight * qr.commitment_term,
    )
