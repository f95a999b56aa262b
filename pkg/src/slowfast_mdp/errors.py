"""Exception hierarchy shared by every module.

Two families are distinguished because the command line maps them to
different exit codes: violated modelling assumptions (exit 2) and
numerical faults of an otherwise admissible computation (exit 1).
"""


class SlowFastError(Exception):
    """Base class for all package errors."""


class ConfigError(SlowFastError, ValueError):
    """Malformed or inconsistent configuration."""


class AssumptionViolation(SlowFastError):
    """A standing structural assumption fails at a probed point."""


class EllipticityFault(AssumptionViolation):
    """Fast diffusion a(x, y, mu) is not strictly positive on the grid."""


class CenteringFault(AssumptionViolation):
    """The fast drift b is not centred under the frozen invariant measure."""

    def __init__(self, defect):
        super().__init__(f"centering defect |int b dpi| = {defect:.3e}")
        self.defect = defect


class NumericalFault(SlowFastError):
    """A numerical procedure could not deliver the requested accuracy."""


class GridTooSmallFault(NumericalFault):
    pass


class NonFiniteFault(NumericalFault):
    pass


class ExtrapolationFault(NumericalFault):
    pass


class PerturbationFault(NumericalFault):
    pass


class HorizonTooShortFault(NumericalFault):
    pass


class CFLFault(NumericalFault):
    pass


class StiffnessFault(NumericalFault):
    pass


class DivergenceFault(NumericalFault):
    pass


class DictionaryTooSmallFault(NumericalFault):
    pass


class StepInstabilityFault(NumericalFault):
    pass


class DegeneracyFault(NumericalFault):
    pass


class RankFault(NumericalFault):
    pass


class UnsupportedFault(NumericalFault):
    pass


class ShapeMismatchFault(NumericalFault, ValueError):
    pass
