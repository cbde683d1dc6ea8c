"""Synthetic vessel-phantom generator producing paired OCT/OCTA volumes.

Each phantom shares one anatomy: smooth intensity layers along the depth axis
plus a set of tubular vessels meandering across the en-face plane inside a
mid-depth band. The OCT rendering shows the layers under speckle noise; the
OCTA rendering shows a dim background with strongly elevated intensity inside
the vessel tubes. Vessel centerlines are split into short segments, and each
segment is independently zeroed in the OCTA volume with probability
``discontinuity_rate``, mimicking flow-signal dropout from unstable scanning.

Generation is a pure function of :class:`PhantomConfig`: the same config
(including seed) always yields bit-identical volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .volume import Modality, Volume

_SEGMENT_LEN = 6  # centerline points per droppable segment
_VESSEL_INTENSITY = 0.82
_OCTA_BACKGROUND = 0.07


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    vessel_count: int = 4
    vessel_radius_range: tuple[float, float] = (1.2, 2.6)
    speckle_noise_sd: float = 0.04
    discontinuity_rate: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        length, width, depth = self.dims
        if min(length, width, depth) < 1:
            raise ConfigError(f"non-positive dims {self.dims}")
        r_min, r_max = self.vessel_radius_range
        if r_min <= 0 or r_max < r_min:
            raise ConfigError(f"invalid vessel_radius_range {self.vessel_radius_range}")
        if not 0.0 <= self.discontinuity_rate <= 1.0:
            raise ConfigError(f"discontinuity_rate must be in [0,1], got {self.discontinuity_rate}")
        if self.speckle_noise_sd < 0:
            raise ConfigError("speckle_noise_sd must be nonnegative")
        if self.vessel_count < 0:
            raise ConfigError("vessel_count must be nonnegative")
        # a vessel of minimum radius must fit inside the grid
        if 2 * math.ceil(r_min) + 2 > min(self.dims):
            raise ConfigError(
                f"dims {self.dims} too small for a vessel of radius {r_min}"
            )


@dataclass
class PhantomSample:
    """A generated pair plus the geometry used to build it."""

    oct_volume: Volume
    octa_volume: Volume
    vessel_mask: np.ndarray  # bool (L, W, D), union of all vessel tubes
    vessel_masks: list[np.ndarray] = field(default_factory=list)  # per vessel
    dropped_segments: int = 0
    total_segments: int = 0


def _layer_profile(rng: np.random.Generator, depth: int) -> np.ndarray:
    """Smooth banded intensity profile along depth, values in roughly [0.1, 0.7]."""
    d = np.arange(depth, dtype=np.float64)
    profile = np.full(depth, 0.20)
    for _ in range(3):
        center = rng.uniform(0.15, 0.85) * depth
        width = rng.uniform(0.05, 0.18) * depth
        amp = rng.uniform(0.15, 0.4)
        profile += amp * np.exp(-0.5 * ((d - center) / max(width, 1e-6)) ** 2)
    return np.clip(profile, 0.05, 0.75)


def _lateral_modulation(rng: np.random.Generator, length: int, width: int) -> np.ndarray:
    """Low-frequency en-face brightness modulation in [-1, 1]."""
    coarse = rng.normal(0.0, 1.0, size=(4, 4))
    ll = np.linspace(0, 3, length)
    ww = np.linspace(0, 3, width)
    l0 = np.clip(np.floor(ll).astype(int), 0, 2)
    w0 = np.clip(np.floor(ww).astype(int), 0, 2)
    fl = (ll - l0)[:, None]
    fw = (ww - w0)[None, :]
    c00 = coarse[l0][:, w0]
    c01 = coarse[l0][:, w0 + 1]
    c10 = coarse[l0 + 1][:, w0]
    c11 = coarse[l0 + 1][:, w0 + 1]
    interp = (
        c00 * (1 - fl) * (1 - fw)
        + c01 * (1 - fl) * fw
        + c10 * fl * (1 - fw)
        + c11 * fl * fw
    )
    peak = np.abs(interp).max()
    return interp / peak if peak > 0 else interp


def _trace_centerline(
    rng: np.random.Generator, dims: tuple[int, int, int], radius: float
) -> np.ndarray:
    """Random smooth path across the (L, W) plane inside a mid-depth band."""
    length, width, depth = dims
    margin = radius + 1.0
    depth_lo = max(margin, 0.3 * depth)
    depth_hi = min(depth - margin, 0.7 * depth)
    if depth_hi <= depth_lo:
        depth_lo = depth_hi = depth / 2.0

    along_l = rng.random() < 0.5  # travel direction: along L or along W
    if along_l:
        pos = np.array([margin, rng.uniform(margin, width - margin)])
        heading = 0.0
    else:
        pos = np.array([rng.uniform(margin, length - margin), margin])
        heading = math.pi / 2.0
    z = rng.uniform(depth_lo, depth_hi) if depth_hi > depth_lo else depth_lo
    z_rate = rng.uniform(-0.05, 0.05)

    points = []
    max_steps = 4 * (length + width)
    for _ in range(max_steps):
        points.append((pos[0], pos[1], z))
        heading += rng.uniform(-0.22, 0.22)
        pos = pos + np.array([math.cos(heading), math.sin(heading)])
        z = float(np.clip(z + z_rate + rng.uniform(-0.1, 0.1), depth_lo, depth_hi))
        if not (0 <= pos[0] < length and 0 <= pos[1] < width):
            break
    return np.asarray(points, dtype=np.float64)


def _ball_offsets(radius: float) -> np.ndarray:
    r = int(math.ceil(radius))
    grid = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1].reshape(3, -1).T
    keep = (grid**2).sum(axis=1) <= radius**2
    return grid[keep]


def _stamp(mask: np.ndarray, points: np.ndarray, offsets: np.ndarray) -> None:
    length, width, depth = mask.shape
    for p in points:
        voxels = np.round(p)[None, :].astype(np.int64) + offsets
        inside = (
            (voxels[:, 0] >= 0)
            & (voxels[:, 0] < length)
            & (voxels[:, 1] >= 0)
            & (voxels[:, 1] < width)
            & (voxels[:, 2] >= 0)
            & (voxels[:, 2] < depth)
        )
        v = voxels[inside]
        mask[v[:, 0], v[:, 1], v[:, 2]] = True


def generate_phantom_sample(cfg: PhantomConfig) -> PhantomSample:
    """Generate a paired OCT/OCTA phantom with its vessel geometry."""
    rng = np.random.default_rng(cfg.seed)
    length, width, depth = cfg.dims

    profile = _layer_profile(rng, depth)
    lateral = _lateral_modulation(rng, length, width)
    base = profile[None, None, :] * (1.0 + 0.15 * lateral[:, :, None])

    vessel_masks: list[np.ndarray] = []
    dropped_mask = np.zeros(cfg.dims, dtype=bool)
    dropped = 0
    total = 0
    r_min, r_max = cfg.vessel_radius_range
    for _ in range(cfg.vessel_count):
        radius = rng.uniform(r_min, r_max)
        centerline = _trace_centerline(rng, cfg.dims, radius)
        offsets = _ball_offsets(radius)
        vmask = np.zeros(cfg.dims, dtype=bool)
        _stamp(vmask, centerline, offsets)
        vessel_masks.append(vmask)
        n_segments = max(1, int(math.ceil(len(centerline) / _SEGMENT_LEN)))
        total += n_segments
        for s in range(n_segments):
            drop = rng.random() < cfg.discontinuity_rate
            if drop:
                seg = centerline[s * _SEGMENT_LEN : (s + 1) * _SEGMENT_LEN]
                _stamp(dropped_mask, seg, offsets)
                dropped += 1
    vessel_mask = np.logical_or.reduce(vessel_masks) if vessel_masks else np.zeros(cfg.dims, bool)

    oct_values = base + rng.normal(0.0, cfg.speckle_noise_sd, size=cfg.dims)
    oct_values = np.clip(oct_values, 0.0, 1.0).astype(np.float32)

    octa_values = _OCTA_BACKGROUND * (1.0 + 0.3 * lateral[:, :, None]) * np.ones(cfg.dims)
    octa_values += rng.normal(0.0, cfg.speckle_noise_sd, size=cfg.dims)
    flow = _VESSEL_INTENSITY + rng.normal(0.0, 0.5 * cfg.speckle_noise_sd, size=cfg.dims)
    octa_values = np.where(vessel_mask, flow, octa_values)
    octa_values[dropped_mask] = 0.0
    octa_values = np.clip(octa_values, 0.0, 1.0).astype(np.float32)

    return PhantomSample(
        oct_volume=Volume(oct_values, Modality.OCT),
        octa_volume=Volume(octa_values, Modality.OCTA),
        vessel_mask=vessel_mask,
        vessel_masks=vessel_masks,
        dropped_segments=dropped,
        total_segments=total,
    )


def generate_phantom_pair(cfg: PhantomConfig) -> tuple[Volume, Volume]:
    """Generate a paired (OCT, OCTA) phantom. Deterministic per config."""
    sample = generate_phantom_sample(cfg)
    return sample.oct_volume, sample.octa_volume
