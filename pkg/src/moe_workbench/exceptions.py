"""Exception types raised across the workbench."""


class WorkbenchError(Exception):
    """Base class for all workbench errors."""


class ShapeError(WorkbenchError, ValueError):
    """Operand shapes are incompatible."""


class InputError(WorkbenchError, ValueError):
    """Caller-supplied data is malformed (token ids, traces, configs)."""


class NumericError(WorkbenchError, ArithmeticError):
    """A numerical routine failed (e.g. Hessian factorization)."""


class ConsistencyError(WorkbenchError, ValueError):
    """Redundant quantities disagree (e.g. counts that must sum to l*K)."""


class CheckpointError(WorkbenchError, IOError):
    """A checkpoint could not be written or failed validation on load."""
