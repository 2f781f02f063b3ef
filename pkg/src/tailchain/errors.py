"""Exception types shared across the package.

Two failure categories are distinguished so that callers (and the command
line tool) can map them to distinct exit codes: problems with the inputs
themselves, and numerical problems encountered while processing valid
inputs.
"""


class InputError(ValueError):
    """Raised when inputs violate a documented precondition."""


class FitError(RuntimeError):
    """Raised when an optimisation fails to converge.

    The best parameter vector seen is attached as ``best`` together with
    its objective value ``best_value`` so that callers can inspect how far
    the search got.
    """

    def __init__(self, message, best=None, best_value=None):
        super().__init__(message)
        self.best = best
        self.best_value = best_value
