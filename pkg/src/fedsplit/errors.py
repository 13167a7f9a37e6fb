"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, ProtocolIntegrityError
and failed audits -> 3.
"""


class FedsplitError(Exception):
    pass


class ConfigError(FedsplitError):
    """A configuration or schedule gate is violated (named in the message)."""


class ScheduleValidationError(ConfigError):
    """Step-weight / mixing-parameter condition violated."""


class ProtocolIntegrityError(FedsplitError):
    """A runtime invariant of the protocol failed (conservation, interval
    containment, z-recursion, operating-ball excursion)."""


class WitnessDegenerateError(FedsplitError):
    """A witness denominator vanished; redraw the split and retry."""


class CodecError(FedsplitError):
    """Malformed or inconsistent wire payload."""
