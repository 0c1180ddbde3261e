"""Exception hierarchy.

Every exception keeps its constructor arguments in ``args`` so that it
survives pickling across worker processes.
"""

import numpy as np


class OEDError(Exception):
    """Base class for all package errors."""


class NotSPD(OEDError):
    """A covariance or precision matrix failed its Cholesky factorization."""

    def __init__(self, what="matrix"):
        super().__init__(what)
        self.what = what

    def __str__(self):
        return f"{self.what} is not symmetric positive definite"


class NotPD(OEDError):
    """The small-noise correction term is not positive definite at ``theta``."""

    def __init__(self, theta, min_eigenvalue=float("nan"), diagnostics=None):
        super().__init__(theta, min_eigenvalue, diagnostics)
        self.theta = np.asarray(theta, dtype=float)
        self.min_eigenvalue = float(min_eigenvalue)
        self.diagnostics = diagnostics

    def __str__(self):
        return (f"correction term not positive definite at theta={self.theta.tolist()} "
                f"(min eigenvalue {self.min_eigenvalue:.3e})")


class NoConvergence(OEDError):
    def __init__(self, iters, grad_norm):
        super().__init__(iters, grad_norm)
        self.iters = iters
        self.grad_norm = grad_norm

    def __str__(self):
        return f"MAP search did not converge after {self.iters} iterations (|grad|={self.grad_norm:.3e})"


class MapFailure(OEDError):
    """Repeated MAP failures inside an importance-sampling estimator."""


class NoRootInUnitInterval(OEDError):
    def __init__(self, tol, roots=()):
        super().__init__(tol, tuple(roots))
        self.tol = tol
        self.roots = tuple(roots)

    def __str__(self):
        return f"splitting-parameter quadratic has no root in (0, 1) at tol={self.tol:g} (roots {self.roots})"


class Infeasible(OEDError):
    """Requested tolerance is below the irreducible Laplace bias."""

    def __init__(self, tol, tol_min):
        super().__init__(tol, tol_min)
        self.tol = tol
        self.tol_min = tol_min

    def __str__(self):
        return f"tol={self.tol:g} is not attainable; the Laplace bias alone is {self.tol_min:g}"


class KirchhoffViolation(OEDError):
    def __init__(self, total):
        super().__init__(total)
        self.total = total

    def __str__(self):
        return f"injected currents must sum to zero (sum={self.total:.3e})"


class InvalidDesign(OEDError):
    pass


class SolverFailure(OEDError):
    pass


class DegeneratePilot(OEDError):
    pass
