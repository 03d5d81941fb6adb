class FraclinfError(Exception):
    """Base class for every error raised by the solver library."""


class ConfigError(FraclinfError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        joined = "; ".join(self.violations)
        super().__init__(f"{len(self.violations)} configuration violation(s): {joined}")


class GridError(FraclinfError):
    pass


class DomainError(FraclinfError):
    pass


class ExteriorDataError(FraclinfError):
    pass


class OperatorError(FraclinfError):
    pass


class OracleConvergenceError(FraclinfError):
    def __init__(self, message: str, achieved_error: float):
        self.achieved_error = achieved_error
        super().__init__(f"{message} (achieved error {achieved_error:.3e})")


class SupremandError(FraclinfError):
    pass


class SolverError(FraclinfError):
    pass


class DualUndefinedError(FraclinfError):
    pass


class VerificationError(FraclinfError):
    pass
