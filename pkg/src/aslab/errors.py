"""Typed error surface shared by the library and the CLI.

The CLI maps these onto its exit codes: configuration problems exit 2,
input/output problems exit 3, numeric failures exit 4.
"""


class AslabError(Exception):
    """Base class for all library errors."""


class ConfigError(AslabError):
    """Invalid configuration: bad flag/key values, inconsistent plans."""


class ShapeError(AslabError):
    """Tensor shape mismatch; the message names the offending dimensions."""


class FormatError(AslabError):
    """Malformed file content: bad magic, truncation, bad header fields."""


class NumericError(AslabError):
    """Numeric failure: divergence, NaN payloads, degenerate normalizers."""


class TrainingDiverged(NumericError):
    """Raised when the training loss becomes non-finite."""


class DegenerateMapError(NumericError):
    """Raised when an operation needs a positive normalizer but the map
    has none (e.g. a CAM whose maximum projection is <= 0)."""
