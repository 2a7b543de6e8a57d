"""Exception hierarchy shared by all modules.

Each exception carries an ``exit_code`` used by the command line front end:
1 for invalid input, 2 for constraint failures and 3 for solver failures.
"""


class MultibumpError(Exception):
    exit_code = 3


class InputError(MultibumpError, ValueError):
    exit_code = 1


class ConstraintError(MultibumpError):
    exit_code = 2


class SolverError(MultibumpError):
    exit_code = 3


# radial ground state
class NonConvergence(SolverError):
    pass


class WindowTooCoarse(InputError):
    pass


class NoAdmissibleSigma(ConstraintError):
    pass


# grids and splitting
class GridTooCoarse(InputError):
    pass


class SizeMismatch(InputError):
    pass


class NotEmerging(ConstraintError):
    pass


class ZeroPiece(ConstraintError):
    pass


class SolverStall(SolverError):
    pass


class DegenerateGram(SolverError):
    pass


# energy and minimization
class HypothesisViolated(ConstraintError):
    pass


class NoRoot(SolverError):
    pass


class MaxIterations(SolverError):
    pass


# verification
class PreconditionFail(ConstraintError):
    pass


class HypothesisFail(ConstraintError):
    pass
