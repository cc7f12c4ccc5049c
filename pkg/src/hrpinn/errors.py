"""Exception hierarchy shared by every module."""


class HrpinnError(Exception):
    pass


class StructuralError(HrpinnError, ValueError):
    """Shapes, widths or lengths that do not fit together."""


class DivergenceError(HrpinnError, FloatingPointError):
    """A computation produced a non-finite value.

    ``where`` names the offending node or step so sweeps can report it.
    """

    def __init__(self, message, where=None):
        super().__init__(message)
        self.where = where


class StateError(HrpinnError, RuntimeError):
    pass


class SingularityError(HrpinnError, ArithmeticError):
    pass


class DomainError(HrpinnError, ValueError):
    pass


class ConstraintQualificationError(HrpinnError, ArithmeticError):
    """Constraint Jacobian lost full row rank."""


class NonConvergenceError(HrpinnError, RuntimeError):
    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NonDegeneracyError(HrpinnError, ArithmeticError):
    """Bordered KKT matrix of the projection is singular."""


class ConfigError(HrpinnError, ValueError):
    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
