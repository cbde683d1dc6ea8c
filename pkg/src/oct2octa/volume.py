"""Volume containers, the MVOL binary format, projection maps, and pair manifests.

A :class:`Volume` is a 3D scalar grid with axes ``(L, W, D)`` where ``D`` is the
depth axis. Values are normalized intensities in ``[0, 1]`` stored as float32.

MVOL on-disk layout (all little-endian):

    bytes 0..3    magic ``MVOL``
    byte  4       format version (currently 1)
    byte  5       modality code (0=OCT, 1=OCTA, 2=OCT2OCTA)
    bytes 6..15   reserved, zero
    bytes 16..27  three u32 dims L, W, D
    payload       L*W*D float32 in row-major order (l slowest, d fastest)

Round trips are bit-exact: the payload is the raw float32 buffer.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ManifestError, ValidationError, VolumeFormatError

MVOL_MAGIC = b"MVOL"
MVOL_VERSION = 1
_HEADER = struct.Struct("<4sBB10s")
_DIMS = struct.Struct("<III")


class Modality(enum.IntEnum):
    OCT = 0
    OCTA = 1
    OCT2OCTA = 2


@dataclass(frozen=True)
class Volume:
    """3D intensity grid with a modality tag.

    ``values`` has shape ``(L, W, D)``, dtype float32, every entry finite and
    within ``[0, 1]``.
    """

    values: np.ndarray
    modality: Modality = Modality.OCT

    def __post_init__(self) -> None:
        arr = np.asarray(self.values)
        if arr.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {arr.shape}")
        if arr.size == 0:
            raise ValidationError("volume must be non-empty")
        if arr.dtype != np.float32:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(
                f"volume values outside [0, 1]: min={arr.min()}, max={arr.max()}"
            )
        object.__setattr__(self, "values", arr)
        object.__setattr__(self, "modality", Modality(self.modality))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


@dataclass(frozen=True)
class ProjectionMap:
    """2D en-face map over the ``(L, W)`` plane, values in ``[0, 1]``."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.size == 0:
            raise ValidationError(f"projection map must be non-empty 2D, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("projection map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError("projection map values outside [0, 1]")
        object.__setattr__(self, "values", arr)

    @property
    def dims(self) -> tuple[int, int]:
        return tuple(self.values.shape)  # type: ignore[return-value]


def projection_map(vol: Volume) -> ProjectionMap:
    """Depth-average a volume into its en-face projection map.

    ``out[l, w] = mean_d vol[l, w, d]``. The mean is accumulated in float64;
    no display normalization is applied here.
    """
    means = np.mean(vol.values, axis=2, dtype=np.float64)
    return ProjectionMap(np.clip(means, 0.0, 1.0))


def write_volume(vol: Volume, path: str | Path) -> None:
    """Serialize a volume to the MVOL container."""
    path = Path(path)
    length, width, depth = vol.dims
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MVOL_MAGIC, MVOL_VERSION, int(vol.modality), b"\x00" * 10))
        fh.write(_DIMS.pack(length, width, depth))
        fh.write(np.ascontiguousarray(vol.values, dtype="<f4").tobytes())


def read_volume(path: str | Path) -> Volume:
    """Read an MVOL file, validating header and payload."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise VolumeFormatError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size + _DIMS.size:
        raise VolumeFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, modality_code, _ = _HEADER.unpack_from(raw, 0)
    if magic != MVOL_MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}, expected {MVOL_MAGIC!r}")
    if version != MVOL_VERSION:
        raise VolumeFormatError(
            f"{path}: unsupported version {version}, expected {MVOL_VERSION}"
        )
    try:
        modality = Modality(modality_code)
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: unknown modality code {modality_code}") from exc
    length, width, depth = _DIMS.unpack_from(raw, _HEADER.size)
    if length == 0 or width == 0 or depth == 0:
        raise VolumeFormatError(f"{path}: zero dimension in header ({length},{width},{depth})")
    expected = _HEADER.size + _DIMS.size + 4 * length * width * depth
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: payload size mismatch, expected {expected} bytes, found {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + _DIMS.size)
    values = values.reshape(length, width, depth).copy()
    return Volume(values=values, modality=modality)


@dataclass(frozen=True)
class PairEntry:
    oct_path: str
    octa_path: str
    subject_id: str


@dataclass
class PairManifest:
    """Ordered list of (OCT path, OCTA path, subject id) records.

    Paths are stored as written; relative paths resolve against ``root``
    (the manifest file's directory once loaded from disk).
    """

    entries: list[PairEntry]
    split: str = "train"
    root: Path = field(default_factory=Path)

    SPLITS = ("train", "val", "test")

    def __post_init__(self) -> None:
        if self.split not in self.SPLITS:
            raise ManifestError(f"unknown split {self.split!r}, expected one of {self.SPLITS}")
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.entries)

    def resolve(self, entry: PairEntry) -> tuple[Path, Path]:
        def _res(p: str) -> Path:
            path = Path(p)
            return path if path.is_absolute() else self.root / path

        return _res(entry.oct_path), _res(entry.octa_path)

    def load_pair(self, index: int) -> tuple[Volume, Volume]:
        oct_path, octa_path = self.resolve(self.entries[index])
        return read_volume(oct_path), read_volume(octa_path)


def write_manifest(manifest: PairManifest, path: str | Path) -> None:
    """Write one tab-separated record per line, with a split header comment."""
    path = Path(path)
    lines = [f"# split={manifest.split}"]
    for e in manifest.entries:
        lines.append(f"{e.oct_path}\t{e.octa_path}\t{e.subject_id}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path, split: str | None = None) -> PairManifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    entries: list[PairEntry] = []
    file_split = "train"
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line.lstrip("#").strip()
            if body.startswith("split="):
                file_split = body.split("=", 1)[1].strip()
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ManifestError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
        entries.append(PairEntry(oct_path=parts[0], octa_path=parts[1], subject_id=parts[2]))
    return PairManifest(entries=entries, split=split or file_split, root=path.parent)


def validate_manifest(manifest: PairManifest) -> None:
    """Decode every referenced pair and check that paired dims match."""
    if not manifest.entries:
        raise ManifestError("manifest is empty")
    for i, entry in enumerate(manifest.entries):
        oct_path, octa_path = manifest.resolve(entry)
        for p in (oct_path, octa_path):
            if not p.exists():
                raise ManifestError(f"manifest entry {i} ({entry.subject_id}): missing file {p}")
        vol_oct = read_volume(oct_path)
        vol_octa = read_volume(octa_path)
        if vol_oct.dims != vol_octa.dims:
            raise ManifestError(
                f"manifest entry {i} ({entry.subject_id}): paired dims differ "
                f"{vol_oct.dims} vs {vol_octa.dims}"
            )
