"""Deterministic simulator for privacy-preserving federated learning via
model splitting, with dynamic quantization and a mechanical privacy auditor.
"""

__version__ = "0.1.0"

from .errors import (
    CodecError,
    ConfigError,
    FedsplitError,
    ProtocolIntegrityError,
    ScheduleValidationError,
    WitnessDegenerateError,
)

__all__ = [
    "CodecError",
    "ConfigError",
    "FedsplitError",
    "ProtocolIntegrityError",
    "ScheduleValidationError",
    "WitnessDegenerateError",
    "__version__",
]
