"""Exception hierarchy shared across the package.

Every error raised deliberately by this package derives from
:class:`PrefcurateError`, so callers (and the CLI) can catch one type.
"""


class PrefcurateError(Exception):
    """Base class for all errors raised by this package."""


class InputError(PrefcurateError):
    """A caller-supplied value violates a documented precondition."""


class NumericalError(PrefcurateError):
    """A computation produced non-finite values or lost numerical validity."""


class CurvatureError(NumericalError):
    """The damped Hessian was not positive definite along a CG direction."""


class TrainingError(PrefcurateError):
    """An optimization run failed (divergence, non-finite loss, no convergence)."""


class OracleError(PrefcurateError):
    """A leave-one-out reference computation could not be completed."""


class ManifestError(PrefcurateError):
    """A run manifest is missing, inconsistent, or references stale artifacts."""
