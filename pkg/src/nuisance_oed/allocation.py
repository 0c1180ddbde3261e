"""Pilot estimates of the error constants and the closed-form optimal sample allocations.

Error models (``beta = 1 + gamma / (2 eta)``, mesh-free models use ``gamma/eta = 0``):

double loop
    variance ``c_dl1/N + c_dl2/(N M) <= (kappa tol / c_alpha)^2``,
    bias ``c_dl3 h^eta + c_dl4/M <= (1 - kappa) tol``;
Laplace
    variance ``c_la1/N <= (kappa tol / c_alpha)^2``,
    bias ``c_la3 h^eta + c_la2/N_e <= (1 - kappa) tol``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import estimators
from .core import ExperimentSpec, ForwardModel
from .errors import DegeneratePilot, Infeasible, NoRootInUnitInterval

C_ALPHA = 1.96
MIN_PILOT = 30


@dataclass(frozen=True)
class PilotConstants:
    c_dl1: float = 0.0
    c_dl2: float = 0.0
    c_dl4: float = 0.0
    c_la1: float = 0.0
    c_la2: float = 0.0
    c_dl3: float | None = None
    c_la3: float | None = None
    c1: float = 0.0
    c2: float = 0.0
    eta: float | None = None
    gamma: float | None = None

    def __post_init__(self):
        for name in ("c_dl1", "c_dl2", "c_dl4", "c_la1", "c_la2", "c1", "c2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a finite nonnegative number, got {v}")
        for name in ("eta", "gamma"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def gamma_over_eta(self, c3) -> float:
        if c3 is None or self.eta is None or self.gamma is None:
            return 0.0
        return self.gamma / self.eta

    def merged(self, **kw) -> "PilotConstants":
        return replace(self, **kw)


@dataclass(frozen=True)
class OptimalSetting:
    """Allocation for one tolerance.

    ``n_raw``/``m_raw`` are the continuous optimizers; ``n_star``/``m_star``
    their integer ceilings. ``predicted_work`` uses the continuous values so
    that its dependence on ``tol`` follows the formulas exactly. ``m_formula``
    keeps the unconstrained inner size even when it was pinned to 1.
    """

    tol: float
    n_star: int
    m_star: int | None
    h_star: float | None
    kappa_star: float
    feasible: bool
    predicted_work: float
    n_raw: float
    m_raw: float | None = None
    m_pinned: bool = False
    method: str = ""
    m_formula: float | None = None


class TwoLoopAllocation(NamedTuple):
    m1: int
    m2: int
    total: float


# --------------------------------------------------------------------- pilots

def _check_pilot_size(**sizes):
    for name, v in sizes.items():
        if int(v) < MIN_PILOT:
            raise ValueError(f"pilot {name}={v} is below the minimum of {MIN_PILOT}")


def pilot_dlmc(model: ForwardModel, spec: ExperimentSpec, n_outer: int, n_inner: int, rng, importance=False,
               workers=None, base: PilotConstants | None = None) -> PilotConstants:
    """Double-loop constants from a pilot run.

    ``c_dl1`` is the sample variance of the outer terms and ``c_dl2`` the mean
    relative variance of the inner weights, with the inner mean standing in for
    the evidence. With ``importance=True`` the pilot runs the Laplace
    importance-sampling estimator, whose weights are the ratio of corrected
    likelihood times prior to the Laplace density.
    """
    _check_pilot_size(n_outer=n_outer, n_inner=n_inner)
    run = estimators.dlmcis if importance else estimators.dlmc_small_noise
    est = run(model, spec, n_outer, n_inner, rng, workers=workers)
    c1 = float(np.var(est.terms, ddof=1))
    c2 = float(np.mean(est.extras["inner_rel_var"]))
    if not (np.isfinite(c1) and c1 > 0):
        raise DegeneratePilot(f"outer variance is {c1}; the pilot carries no information")
    base = base or PilotConstants(eta=getattr(model, "eta", None), gamma=getattr(model, "gamma", None))
    return base.merged(c_dl1=c1, c_dl2=c2, c_dl4=c2 / 2.0)


def pilot_two_loop(model: ForwardModel, spec: ExperimentSpec, n_outer: int, n_inner1: int, n_inner2: int, rng,
                   workers=None, base: PilotConstants | None = None) -> PilotConstants:
    """Inner-loop bias constants of the two-loop estimator: half the mean relative weight variance of each loop."""
    _check_pilot_size(n_outer=n_outer, n_inner1=n_inner1, n_inner2=n_inner2)
    est = estimators.dlmc_two_loops(model, spec, n_outer, n_inner1, n_inner2, rng, workers=workers)
    c1 = 0.5 * float(np.mean(est.extras["inner1_rel_var"]))
    c2 = 0.5 * float(np.mean(est.extras["inner_rel_var"]))
    base = base or PilotConstants()
    return base.merged(c1=c1, c2=c2, c_dl1=float(np.var(est.terms, ddof=1)))


def pilot_mcla(model: ForwardModel, spec: ExperimentSpec, n_outer: int, rng, reference_eig: float,
               workers=None, base: PilotConstants | None = None) -> PilotConstants:
    """Laplace constants: ``c_la1`` from the outer variance, ``c_la2 = N_e |I_LA - reference|``."""
    _check_pilot_size(n_outer=n_outer)
    est = estimators.mcla(model, spec, n_outer, rng, workers=workers)
    c1 = float(np.var(est.terms, ddof=1))
    if not (np.isfinite(c1) and c1 > 0):
        raise DegeneratePilot(f"outer variance is {c1}; the pilot carries no information")
    base = base or PilotConstants(eta=getattr(model, "eta", None), gamma=getattr(model, "gamma", None))
    return base.merged(c_la1=c1, c_la2=spec.n_exp * abs(est.value - float(reference_eig)))


# ---------------------------------------------------------------- double loop

def _kappa_roots(c_dl1, tol, beta):
    a = beta ** 2 * tol / c_dl1
    b = -(0.25 + (0.5 + 2.0 * tol / c_dl1) * beta)
    c = 0.5 + tol / c_dl1
    if a == 0.0:
        return np.array([-c / b])
    disc = b * b - 4.0 * a * c
    if disc < 0:
        return np.array([])
    sq = math.sqrt(disc)
    # numerically stable pair
    qq = -0.5 * (b + math.copysign(sq, b))
    return np.array(sorted({qq / a, c / qq}))


def _work_dlmc(consts, tol, kappa, c_alpha, ge):
    beta = 1.0 + 0.5 * ge
    n = c_alpha ** 2 * consts.c_dl1 / (2.0 * kappa * (1.0 - kappa * beta)) / tol ** 2
    m = consts.c_dl2 / (2.0 * (1.0 - kappa * beta)) / tol
    h = None
    work = n * m
    if ge > 0:
        h = (ge * kappa / (2.0 * consts.c_dl3)) ** (1.0 / consts.eta) * tol ** (1.0 / consts.eta)
        work *= h ** (-consts.gamma)
    return n, m, h, work


def optimal_kappa_dlmc(consts: PilotConstants, tol: float) -> float:
    """Splitting parameter from the quadratic optimality condition; root in (0, 1)."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    if not consts.c_dl1 > 0:
        raise ValueError("c_dl1 must be positive")
    ge = consts.gamma_over_eta(consts.c_dl3)
    beta = 1.0 + 0.5 * ge
    roots = _kappa_roots(consts.c_dl1, tol, beta)
    # the variance budget needs kappa * beta < 1 as well
    ok = [r for r in roots if 0.0 < r < 1.0 and r * beta < 1.0]
    if not ok:
        raise NoRootInUnitInterval(tol, roots.tolist())
    if len(ok) == 1:
        return float(ok[0])
    return float(min(ok, key=lambda k: _work_dlmc(consts, tol, k, C_ALPHA, ge)[3]))


def optimal_setting_dlmc(consts: PilotConstants, tol: float, c_alpha: float = C_ALPHA,
                         method="dlmc") -> OptimalSetting:
    """Optimal outer/inner sample sizes (and mesh size for mesh models).

    When the continuous inner optimum drops below one sample, the inner size is
    pinned to 1 and the remaining two-variable problem is re-solved; this only
    lowers the work relative to rounding up.
    """
    ge = consts.gamma_over_eta(consts.c_dl3)
    beta = 1.0 + 0.5 * ge
    kappa = optimal_kappa_dlmc(consts, tol)
    n, m, h, work = _work_dlmc(consts, tol, kappa, c_alpha, ge)
    m_formula = m
    pinned = False
    if m < 1.0:
        k1 = (1.0 - consts.c_dl4 / tol) / beta
        if 0.0 < k1 < 1.0 or (k1 == 1.0 and ge == 0):
            pinned = True
            kappa = k1
            n = (consts.c_dl1 + consts.c_dl2) * (c_alpha / (kappa * tol)) ** 2
            m = 1.0
            work = n
            if ge > 0:
                h = (((1.0 - kappa) * tol - consts.c_dl4) / consts.c_dl3) ** (1.0 / consts.eta)
                work *= h ** (-consts.gamma)
    return OptimalSetting(float(tol), int(math.ceil(n)), max(1, int(math.ceil(m))), h, float(kappa), True,
                          float(work), float(n), float(m), pinned, method, float(m_formula))


# --------------------------------------------------------------------- Laplace

def optimal_setting_mcla(consts: PilotConstants, tol: float, c_alpha: float = C_ALPHA,
                         n_exp: int = 1) -> OptimalSetting:
    """Optimal outer size for the Laplace estimator.

    Raises :class:`Infeasible` when the Laplace bias ``c_la2/N_e`` alone uses
    up the tolerance (equality included, since it forces ``kappa = 0``).
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    bias = consts.c_la2 / n_exp
    if tol <= bias:
        raise Infeasible(tol, bias)
    ge = consts.gamma_over_eta(consts.c_la3)
    kappa = (1.0 - bias / tol) / (1.0 + 0.5 * ge)
    n = consts.c_la1 * (c_alpha / kappa) ** 2 / tol ** 2
    h = None
    work = n
    if ge > 0:
        h = (ge * kappa / (2.0 * consts.c_la3)) ** (1.0 / consts.eta) * tol ** (1.0 / consts.eta)
        work *= h ** (-consts.gamma)
    return OptimalSetting(float(tol), max(1, int(math.ceil(n))), None, h, float(kappa), True, float(work),
                          float(n), None, False, "mcla")


def infeasible_setting(tol, method="mcla") -> OptimalSetting:
    return OptimalSetting(float(tol), 0, None, None, 0.0, False, float("inf"), float("nan"), None, False, method)


# -------------------------------------------------------------- two inner loops

def two_loop_allocation(c1: float, c2: float, tol: float) -> TwoLoopAllocation:
    """Inner sample sizes minimizing ``M1 + M2`` subject to ``c1/M1 + c2/M2 <= tol``.

    The integers are ceilings of the continuous optimum (at least 1); ``total``
    is the continuous optimum ``(c1 + 2 sqrt(c1 c2) + c2)/tol``.
    """
    if not c1 > 0:
        raise ValueError("c1 must be positive")
    if c2 < 0 or not tol > 0:
        raise ValueError("need c2 >= 0 and tol > 0")
    root = math.sqrt(c1 * c2)
    m1 = (c1 + root) / tol
    m2 = math.sqrt(c2 / c1) * m1
    total = (c1 + 2.0 * root + c2) / tol
    return TwoLoopAllocation(max(1, math.ceil(m1)), max(1, math.ceil(m2)), total)


# ------------------------------------------------------------------ mesh rates

@dataclass
class MeshRate:
    c3: float
    eta_hat: float
    levels: np.ndarray
    errors: np.ndarray
    warning: str | None = None
    extra: dict = field(default_factory=dict)


def estimate_h_constant(family: Callable[[float], ForwardModel], levels: Sequence[float], reference_h: float,
                        thetas, phis=None) -> MeshRate:
    """Fit ``E|g_h - g_ref| ~ c3 h^eta`` over mesh levels against a fine reference.

    ``family(h)`` builds the model at mesh size ``h``. A warning flag is set
    (and a :class:`UserWarning` emitted) when the errors are not monotone or
    are at roundoff level.
    """
    levels = np.asarray(sorted(levels, reverse=True), dtype=float)
    if levels.size < 3:
        raise ValueError("need at least three mesh levels")
    thetas = np.atleast_2d(thetas)
    ref = family(reference_h)
    if phis is None:
        phis = np.zeros((thetas.shape[0], ref.d_phi))
    g_ref = ref.eval_batch(thetas, phis)
    errs = np.array([np.mean(np.linalg.norm(family(h).eval_batch(thetas, phis) - g_ref, axis=1))
                     for h in levels])
    scale = max(1.0, float(np.abs(g_ref).max()))
    warning = None
    if np.any(errs <= 1e-12 * scale):
        warning = "errors at roundoff level; rate fit is meaningless"
    elif np.any(np.diff(errs) >= 0):
        warning = "errors do not decrease monotonically under refinement"
    if warning:
        warnings.warn(warning)
    with np.errstate(divide="ignore"):
        slope, icept = np.polyfit(np.log(levels), np.log(np.maximum(errs, np.finfo(float).tiny)), 1)
    return MeshRate(float(np.exp(icept)), float(slope), levels, errs, warning)


# ----------------------------------------------------------------- dispatcher

def allocate(method: str, consts: PilotConstants, tol: float, c_alpha: float = C_ALPHA,
             n_exp: int = 1) -> OptimalSetting:
    """Optimal setting for ``method`` in {dlmc, dlmcis, mcla}; infeasible Laplace rows are returned flagged."""
    if method in ("dlmc", "dlmcis"):
        return optimal_setting_dlmc(consts, tol, c_alpha, method)
    if method == "mcla":
        try:
            return optimal_setting_mcla(consts, tol, c_alpha, n_exp)
        except Infeasible:
            return infeasible_setting(tol)
    raise ValueError(f"unknown method {method!r}")
