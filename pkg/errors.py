"""
Error types shared by every egoflow module.

The CLI maps each type to an exit code, see EXIT_CODES.
"""


class EgoFlowError(Exception):
    """Base class for all egoflow failures."""


class DimensionError(EgoFlowError):
    """Tensor shapes or widths do not line up."""


class InvalidInputError(EgoFlowError):
    """Input values violate an operation's precondition."""


class ConfigurationError(EgoFlowError):
    """A configuration value is out of range or inconsistent."""


class DomainError(EgoFlowError):
    """A value lies outside the mathematical domain of an operation."""


class StationaryError(InvalidInputError):
    """Two consecutive ego poses coincide, so no forward direction exists."""


class KinematicInfeasibleError(EgoFlowError):
    """The steering radius is too small for the ego width."""


class FormatError(EgoFlowError):
    """A file on disk is corrupt, truncated or malformed."""


class NumericFailure(EgoFlowError):
    """Training produced a non-finite loss."""


EXIT_CODES = {
    ConfigurationError: 1,
    DimensionError: 2,
    InvalidInputError: 2,
    KinematicInfeasibleError: 2,
    FormatError: 2,
    DomainError: 3,
    NumericFailure: 3,
}


def exit_code_for(error: BaseException) -> int:
    """Exit code for an error raised inside a subcommand."""
    for error_type in type(error).__mro__:
        if error_type in EXIT_CODES:
            return EXIT_CODES[error_type]
    if isinstance(error, OSError):
        return 2
    return 1
