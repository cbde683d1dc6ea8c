"""Exception hierarchy shared across the package.

Every error carries a short machine-parseable ``code`` so the CLI can emit a
single-line diagnostic and a stable exit status.
"""


class Oct2OctaError(Exception):
    """Base class for all package errors."""

    code = "INTERNAL"


class VolumeFormatError(Oct2OctaError):
    """Malformed volume container (bad magic, version, header, or payload)."""

    code = "FORMAT"


class ValidationError(Oct2OctaError):
    """Data violates a declared invariant (range, finiteness, normalization)."""

    code = "VALIDATION"


class ShapeError(Oct2OctaError):
    """Dimension mismatch or indivisible spatial dims."""

    code = "SHAPE"


class ConfigError(Oct2OctaError):
    """Invalid configuration value."""

    code = "CONFIG"


class ManifestError(Oct2OctaError):
    """Missing, empty, or inconsistent dataset manifest."""

    code = "MANIFEST"


class CheckpointError(Oct2OctaError):
    """Unreadable checkpoint or version mismatch."""

    code = "CHECKPOINT"


class TrainingDivergedError(Oct2OctaError):
    """Non-finite loss encountered during training."""

    code = "DIVERGED"
