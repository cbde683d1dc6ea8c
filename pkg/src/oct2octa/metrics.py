"""Image-quality metrics (MAE, PSNR, SSIM) and codebook utilization.

For 3D inputs each metric is computed per 2D slice along the depth axis and
averaged over slices; 2D inputs (projection maps) are scored directly. All
metrics assume values in [0, 1] (data range 1.0). PSNR is capped at 100 dB so
identical inputs and near-identical aggregates stay finite.

SSIM follows the standard windowed formulation: 11x11 Gaussian window with
sigma 1.5, stabilizers k1=0.01, k2=0.03 on data range 1.0, covariances from
valid-position windows only. When a slice is smaller than the window, the
window shrinks to the largest odd size that fits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d

from .errors import ShapeError, ValidationError
from .volume import ProjectionMap, Volume

PSNR_CAP_DB = 100.0
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5


@dataclass
class MetricsRecord:
    mae: float
    psnr: float
    ssim: float
    target: str  # "volume" | "projection_map"
    n_items: int = 1

    def as_dict(self) -> dict:
        return {
            "mae": self.mae,
            "psnr": self.psnr,
            "ssim": self.ssim,
            "target": self.target,
            "n_items": self.n_items,
        }


@dataclass
class UtilizationReport:
    used_entries: int
    total_entries: int
    rate: float
    histogram: np.ndarray  # int64 hit counts, one per entry

    def as_dict(self) -> dict:
        return {
            "used_entries": self.used_entries,
            "total_entries": self.total_entries,
            "rate": self.rate,
            "histogram": self.histogram.tolist(),
        }


def _as_array(x: Volume | ProjectionMap | np.ndarray) -> np.ndarray:
    if isinstance(x, (Volume, ProjectionMap)):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def _paired(a, b) -> tuple[np.ndarray, np.ndarray]:
    arr_a, arr_b = _as_array(a), _as_array(b)
    if arr_a.shape != arr_b.shape:
        raise ShapeError(f"dims differ: {arr_a.shape} vs {arr_b.shape}")
    if arr_a.size == 0:
        raise ValidationError("empty input")
    if arr_a.ndim not in (2, 3):
        raise ShapeError(f"expected 2D or 3D input, got {arr_a.ndim}D")
    return arr_a, arr_b


def _per_slice(a: np.ndarray, b: np.ndarray, fn) -> float:
    if a.ndim == 2:
        return fn(a, b)
    return float(np.mean([fn(a[:, :, d], b[:, :, d]) for d in range(a.shape[2])]))


def _mae_2d(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(a - b)))


def _psnr_2d(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * np.log10(mse))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g1 = np.exp(-(coords**2) / (2.0 * sigma**2))
    window = np.outer(g1, g1)
    return window / window.sum()


def _ssim_2d(a: np.ndarray, b: np.ndarray) -> float:
    side = min(_SSIM_WINDOW, min(a.shape))
    if side % 2 == 0:
        side -= 1
    if side < 1:
        raise ValidationError("slice too small for SSIM window")
    window = _gaussian_window(side, _SSIM_SIGMA)
    c1 = (_SSIM_K1 * 1.0) ** 2
    c2 = (_SSIM_K2 * 1.0) ** 2

    mu_a = convolve2d(a, window, mode="valid")
    mu_b = convolve2d(b, window, mode="valid")
    mu_aa = mu_a * mu_a
    mu_bb = mu_b * mu_b
    mu_ab = mu_a * mu_b
    sigma_aa = convolve2d(a * a, window, mode="valid") - mu_aa
    sigma_bb = convolve2d(b * b, window, mode="valid") - mu_bb
    sigma_ab = convolve2d(a * b, window, mode="valid") - mu_ab

    ssim_map = ((2 * mu_ab + c1) * (2 * sigma_ab + c2)) / (
        (mu_aa + mu_bb + c1) * (sigma_aa + sigma_bb + c2)
    )
    return float(np.mean(ssim_map))


def mae(a, b) -> float:
    """Mean absolute error, slice-averaged for volumes."""
    arr_a, arr_b = _paired(a, b)
    return _per_slice(arr_a, arr_b, _mae_2d)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB (data range 1.0, capped at 100 dB)."""
    arr_a, arr_b = _paired(a, b)
    return _per_slice(arr_a, arr_b, _psnr_2d)


def ssim(a, b) -> float:
    """Structural similarity, slice-averaged for volumes."""
    arr_a, arr_b = _paired(a, b)
    return _per_slice(arr_a, arr_b, _ssim_2d)


def evaluate_pair(pred, target, kind: str = "volume") -> MetricsRecord:
    return MetricsRecord(
        mae=mae(pred, target), psnr=psnr(pred, target), ssim=ssim(pred, target), target=kind
    )


def aggregate_records(records: list[MetricsRecord], kind: str) -> MetricsRecord:
    if not records:
        raise ValidationError("no records to aggregate")
    return MetricsRecord(
        mae=float(np.mean([r.mae for r in records])),
        psnr=float(np.mean([r.psnr for r in records])),
        ssim=float(np.mean([r.ssim for r in records])),
        target=kind,
        n_items=len(records),
    )


def codebook_utilization(indices, n_entries: int) -> UtilizationReport:
    """Count distinct codebook entries hit by a stream of quantization indices."""
    flat = np.asarray(indices).reshape(-1)
    if flat.size == 0:
        raise ValidationError("empty index stream")
    if not np.issubdtype(flat.dtype, np.integer):
        raise ValidationError(f"indices must be integers, got dtype {flat.dtype}")
    if flat.min() < 0 or flat.max() >= n_entries:
        raise ValidationError(
            f"index out of range [0, {n_entries}): min={flat.min()}, max={flat.max()}"
        )
    histogram = np.bincount(flat, minlength=n_entries).astype(np.int64)
    used = int((histogram > 0).sum())
    return UtilizationReport(
        used_entries=used,
        total_entries=n_entries,
        rate=used / n_entries,
        histogram=histogram,
    )
