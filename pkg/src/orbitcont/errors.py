"""Exception hierarchy."""


class OrbitContError(Exception):
    """Base class for all errors raised by the package."""


class SchurConvergenceError(OrbitContError):
    def __init__(self, info: int):
        super().__init__(f"real Schur QR iteration failed to converge (LAPACK info={info})")
        self.info = info


class ClassificationError(OrbitContError):
    """An eigenvalue selection would split a complex-conjugate pair."""


class SwapError(OrbitContError):
    """Adjacent diagonal blocks could not be exchanged stably."""


class SylvesterSingularError(OrbitContError):
    def __init__(self, sep: float, threshold: float):
        super().__init__(f"Sylvester operator nearly singular: sep={sep:.3e} < {threshold:.3e}")
        self.sep = sep
        self.threshold = threshold


class RiccatiDivergenceError(OrbitContError):
    def __init__(self, message: str, kappa: float, history: list[float]):
        super().__init__(f"{message} (kappa={kappa:.3e}, iterations={max(len(history) - 1, 0)})")
        self.kappa = kappa
        self.history = history


class RefinementInsufficientError(OrbitContError):
    def __init__(self, t21_norm: float, threshold: float):
        super().__init__(f"||T21(s)||_F = {t21_norm:.3e} exceeds {threshold:.3e}")
        self.t21_norm = t21_norm
        self.threshold = threshold


class CisStepRejected(OrbitContError):
    """A CIS step failed; the caller should shorten the continuation step."""

    def __init__(self, reason: str, kappa: float = float("nan"), sep: float = float("nan"),
                 safeguard_ok: bool | None = None):
        super().__init__(reason)
        self.reason = reason
        self.kappa = kappa
        self.sep = sep
        self.safeguard_ok = safeguard_ok


class BifurcationProximity(OrbitContError):
    """Repeated CIS rejections: eigenvalues from the two groups are merging."""


class CountingError(OrbitContError):
    """A discretized system violates n_c - n_v = n - 1."""


class NewtonFailure(OrbitContError):
    def __init__(self, message: str, iterations: int, residual: float):
        super().__init__(f"{message} after {iterations} iterations (residual {residual:.3e})")
        self.iterations = iterations
        self.residual = residual


class ContinuationStopped(OrbitContError):
    pass


class HyperbolicityError(OrbitContError):
    pass


class ScheduleError(OrbitContError):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class ConfigError(OrbitContError):
    pass
