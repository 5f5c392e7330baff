"""Exception hierarchy shared by all jumplab modules."""


class JumplabError(Exception):
    """Base class for every error raised by jumplab."""


class NonSymmetricMatrix(JumplabError):
    pass


class NonPositiveDefinite(JumplabError):
    pass


class QuadratureNonConvergent(JumplabError):
    pass


class OutOfChart(JumplabError):
    pass


class MissingDerivatives(JumplabError):
    pass


class UnsupportedKernel(JumplabError):
    pass


class RejectionStall(JumplabError):
    pass


class TimeBudgetExceeded(JumplabError):
    pass


class ExcessiveCensoring(JumplabError):
    pass


class UnboundedBoundaryData(JumplabError):
    pass


class NonPositiveValue(JumplabError):
    pass


class ReferenceDegenerate(JumplabError):
    pass


class SolverFailure(JumplabError):
    pass


class DegenerateColumn(JumplabError):
    pass


class ZeroSolution(JumplabError):
    pass


class ConfigError(JumplabError):
    pass


class HeavyTailWarning(UserWarning):
    """The e_q weights look heavy-tailed; the gauge may be close to infinite."""


class NonMonotoneStencil(UserWarning):
    """Cross-derivative terms produced negative off-diagonal rates."""


class NotGaugeable:
    """Refusal value returned when the Feynman-Kac Neumann series cannot converge.

    Not an exception: callers test ``isinstance(result, NotGaugeable)``.
    """

    def __init__(self, radius: float, top_eigenvalue: float):
        self.radius = float(radius)
        self.top_eigenvalue = float(top_eigenvalue)

    def __repr__(self) -> str:
        return f"NotGaugeable(radius={self.radius:.6g}, top={self.top_eigenvalue:.6g})"


class NoCertificate:
    """Khasminskii refusal: eta >= 1, which says nothing about gaugeability."""

    def __init__(self, eta: float):
        self.eta = float(eta)

    def __repr__(self) -> str:
        return f"NoCertificate(eta={self.eta:.6g})"
