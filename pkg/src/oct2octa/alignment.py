"""Stage-2 guidance losses: patchwise contrastive alignment and
projection-map structure alignment.

Contrastive semantic alignment (CSA) pools 3D feature grids into a 2D grid of
patch embeddings (depth folded into each patch), projects them through a
linear head, L2-normalizes, and applies an InfoNCE-style cross-entropy where
the positive for each anchor patch is the co-located patch from the other
model. Minimizing this loss tightens a lower bound on the mutual information
between the two embedding grids: with K patches,
``I >= log(K - 1) - loss``, so at the uniform-similarity landmark the loss
equals ``ln K`` and it approaches 0 as positives dominate.

Vessel structure alignment (VSA) compares two en-face projection maps through
their patchwise cosine-similarity matrices: each map is cut into S-by-S
patches, flattened, and all pairwise cosine similarities are taken; the loss
is the mean absolute difference between the two matrices over off-diagonal
entries. It is symmetric, nonnegative, and zero iff the matrices agree.

All operations accept and return torch tensors so gradients flow during
stage-2 training; numpy arrays and container types are converted on entry.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeError, ValidationError
from .volume import ProjectionMap

_NORM_TOL = 1e-4  # validation slack for declared-normalized embeddings


class ProjectionHead(nn.Module):
    """Patch pooling followed by a linear map to the shared embedding space."""

    def __init__(self, in_channels: int, embed_dim: int) -> None:
        super().__init__()
        self.linear = nn.Linear(in_channels, embed_dim)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


@dataclass
class PatchEmbeddingGrid:
    """(Gl, Gw) grid of d_e-dimensional patch embeddings."""

    embeddings: torch.Tensor  # [Gl, Gw, d_e]
    patch_side: int
    normalized: bool = False

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.embeddings.shape[0], self.embeddings.shape[1]

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0] * self.embeddings.shape[1]

    def flat(self) -> torch.Tensor:
        """Row-major [K, d_e] view (grid index i*Gw + j)."""
        return self.embeddings.reshape(-1, self.embeddings.shape[-1])


def _l2_normalize(x: torch.Tensor) -> torch.Tensor:
    # normalize through float64 so stored norms land within ~1e-7 of 1
    x64 = x.double()
    return (x64 / x64.norm(dim=-1, keepdim=True)).to(x.dtype)


def patchify_features(
    features: torch.Tensor, patch_side: int, head: ProjectionHead
) -> PatchEmbeddingGrid:
    """Pool a [C, l, w, d] feature grid into projected patch embeddings.

    Each non-overlapping ``patch_side x patch_side`` en-face patch is averaged
    over its spatial window and the full depth extent, projected by ``head``,
    and L2-normalized.
    """
    if features.ndim != 4:
        raise ShapeError(f"expected [C, l, w, d] features, got shape {tuple(features.shape)}")
    c, length, width, depth = features.shape
    if length % patch_side or width % patch_side:
        raise ShapeError(
            f"feature plane ({length},{width}) not divisible by patch side {patch_side}"
        )
    gl, gw = length // patch_side, width // patch_side
    pooled = features.reshape(c, gl, patch_side, gw, patch_side, depth).mean(dim=(2, 4, 5))
    pooled = pooled.permute(1, 2, 0).reshape(gl * gw, c)
    projected = head(pooled)
    normalized = _l2_normalize(projected).reshape(gl, gw, -1)
    return PatchEmbeddingGrid(embeddings=normalized, patch_side=patch_side, normalized=True)


def _require_normalized(grid: PatchEmbeddingGrid, name: str) -> None:
    if not grid.normalized:
        raise ValidationError(f"{name} embeddings must be L2-normalized")
    norms = grid.flat().detach().double().norm(dim=-1)
    if (norms - 1.0).abs().max().item() > _NORM_TOL:
        raise ValidationError(f"{name} embeddings declared normalized but norms deviate from 1")


def contrastive_distribution(
    anchor: torch.Tensor, candidates: PatchEmbeddingGrid, tau: float
) -> torch.Tensor:
    """Softmax over scaled dot products of one anchor against all K patches."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    _require_normalized(candidates, "candidate")
    flat = candidates.flat()
    if anchor.shape[-1] != flat.shape[-1]:
        raise ShapeError("anchor and candidate embedding dims differ")
    logits = (flat.double() @ anchor.double()) / tau
    return torch.softmax(logits, dim=0)


def csa_loss(q_grid: PatchEmbeddingGrid, p_grid: PatchEmbeddingGrid, tau: float) -> torch.Tensor:
    """Patchwise contrastive loss, anchors from ``q_grid``, candidates from ``p_grid``.

    For each anchor position the positive is the co-located patch in
    ``p_grid`` and all other patches act as negatives; the per-anchor
    cross-entropies are averaged. Single direction only (q anchors p).
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    if q_grid.grid_shape != p_grid.grid_shape:
        raise ShapeError(f"grid shapes differ: {q_grid.grid_shape} vs {p_grid.grid_shape}")
    _require_normalized(q_grid, "anchor")
    _require_normalized(p_grid, "candidate")
    q = q_grid.flat().double()
    p = p_grid.flat().double()
    logits = (q @ p.T) / tau  # [K, K], row = anchor
    targets = torch.arange(logits.shape[0], device=logits.device)
    return nn.functional.cross_entropy(logits, targets)


def _as_map_tensor(pm: ProjectionMap | np.ndarray | torch.Tensor) -> torch.Tensor:
    if isinstance(pm, ProjectionMap):
        return torch.from_numpy(pm.values)
    if isinstance(pm, np.ndarray):
        return torch.from_numpy(np.asarray(pm, dtype=np.float64))
    return pm


def patch_cosine_matrix(
    pm: ProjectionMap | np.ndarray | torch.Tensor, patch_side: int
) -> torch.Tensor:
    """Pairwise cosine similarities between flattened S-by-S map patches.

    Patch (i, j) maps to row/column ``i * (W/S) + j``. Zero-norm patches get
    similarity 0 against everything (with a warning); the diagonal is fixed
    at 1 by convention and excluded from downstream losses.
    """
    t = _as_map_tensor(pm)
    if t.ndim != 2:
        raise ShapeError(f"projection map must be 2D, got shape {tuple(t.shape)}")
    length, width = t.shape
    if length % patch_side or width % patch_side:
        raise ShapeError(f"map dims ({length},{width}) not divisible by patch side {patch_side}")
    gl, gw = length // patch_side, width // patch_side
    patches = (
        t.reshape(gl, patch_side, gw, patch_side)
        .permute(0, 2, 1, 3)
        .reshape(gl * gw, patch_side * patch_side)
    )
    norms = patches.norm(dim=-1, keepdim=True)
    zero = norms.squeeze(-1) == 0
    if bool(zero.any()):
        warnings.warn("zero-norm patch in projection map; similarities set to 0", RuntimeWarning)
    normed = patches / norms.clamp_min(torch.finfo(patches.dtype).tiny)
    normed = torch.where(zero.unsqueeze(-1), torch.zeros_like(normed), normed)
    sims = normed @ normed.T
    sims = 0.5 * (sims + sims.T)  # enforce exact symmetry against gemm rounding
    sims = sims.clamp(-1.0, 1.0)
    k = sims.shape[0]
    eye = torch.eye(k, dtype=torch.bool, device=sims.device)
    return torch.where(eye, torch.ones_like(sims), sims)


def vsa_loss(
    pm_a: ProjectionMap | np.ndarray | torch.Tensor,
    pm_b: ProjectionMap | np.ndarray | torch.Tensor,
    patch_side: int,
) -> torch.Tensor:
    """Mean |cosine-matrix difference| over ordered off-diagonal patch pairs."""
    ta = _as_map_tensor(pm_a)
    tb = _as_map_tensor(pm_b)
    if ta.shape != tb.shape:
        raise ShapeError(f"map dims differ: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    ca = patch_cosine_matrix(ta, patch_side)
    cb = patch_cosine_matrix(tb, patch_side)
    k = ca.shape[0]
    if k < 2:
        raise ShapeError("need at least two patches for structure alignment")
    off = ~torch.eye(k, dtype=torch.bool, device=ca.device)
    return (ca - cb).abs()[off].mean()
