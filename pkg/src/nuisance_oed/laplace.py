"""MAP estimation under the corrected likelihood and the resulting Laplace posterior.

The objective is the negative log-posterior with additive constants dropped,

    F(theta) = 1/2 sum_i r_i' L^{-T} C L^{-1} r_i - log pi(theta),

with ``r_i = y_i - g(theta, 0)``. The Hessian used throughout is the
Gauss-Newton one, ``N_e Jw' C Jw - hess log pi`` with ``Jw = L^{-1} J_theta``;
residual-weighted second-order terms are dropped because they grow only like
``sqrt(N_e)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import LOG_2PI, DataSet, ExperimentSpec, ForwardModel, UniformBoxPrior, as_generator, chol_spd
from .errors import NoConvergence, NotPD
from .smallnoise import PD_TOLERANCE, correction_batch

DC_STEP = 1e-5


@dataclass(frozen=True, eq=False)
class LaplacePosterior:
    map: np.ndarray
    precision: np.ndarray
    cov: np.ndarray
    log_det_cov: float
    newton_iters: int
    chol: np.ndarray  # lower factor of cov

    @property
    def dim(self) -> int:
        return self.map.size


@dataclass
class MapOptions:
    gtol: float | None = None  # None: 1e-8 * (1 + |F(theta0)|)
    max_iters: int = 50
    backtrack: float = 0.5
    armijo: float = 1e-4


def posterior_from_precision(theta_hat, precision, newton_iters=0) -> LaplacePosterior:
    """Package a mode and precision; raises :class:`NotSPD` if the precision is not SPD."""
    theta_hat = np.atleast_1d(np.asarray(theta_hat, dtype=float))
    precision = 0.5 * (precision + precision.T)
    pchol = chol_spd(precision, "Laplace precision")
    # cov = P^{-1} through the factor, so precision @ cov = I to roundoff
    inv_factor = np.linalg.inv(pchol)
    cov = inv_factor.T @ inv_factor
    log_det_cov = -2.0 * float(np.log(np.diag(pchol)).sum())
    return LaplacePosterior(theta_hat, precision, cov, log_det_cov, int(newton_iters),
                            chol_spd(cov, "Laplace covariance"))


def _stats(data, spec):
    if isinstance(data, DataSet):
        return data.whitened_stats(spec)
    ybar, scatter = data
    return np.asarray(ybar, dtype=float), np.asarray(scatter, dtype=float)


def _value(model, theta, ybar, scatter, spec):
    g = model.eval(theta, np.zeros(model.d_phi))
    d = ybar - spec.whiten(g)
    C, eig = correction_batch(model, theta[None, :], spec)
    if eig[0, 0] <= PD_TOLERANCE:
        raise NotPD(theta, eig[0, 0])
    C = C[0]
    lp = spec.prior.logpdf(theta)
    return 0.5 * (np.sum(C * scatter) + spec.n_exp * d @ C @ d) - lp, d, C


def _dC(model, theta, spec):
    """Central differences of the correction term along each parameter; shape (d_theta, q, q)."""
    k = theta.size
    if spec.d_phi == 0:
        return np.zeros((k, spec.q, spec.q))
    steps = DC_STEP * (1.0 + np.abs(theta))
    pts = np.concatenate([theta + np.diag(steps), theta - np.diag(steps)])
    C, _ = correction_batch(model, pts, spec)
    return (C[:k] - C[k:]) / (2.0 * steps)[:, None, None]


def map_objective(model: ForwardModel, theta, data, spec: ExperimentSpec):
    """Negative log-posterior, its gradient and the Gauss-Newton Hessian.

    Parameters
    ----------
    data : DataSet or (ybar, scatter)
        Observations, or their whitened mean and scatter.

    Returns
    -------
    value, gradient, gauss_newton_hessian
    """
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ybar, scatter = _stats(data, spec)
    value, d, C = _value(model, theta, ybar, scatter, spec)
    n_e = spec.n_exp
    jw = spec.noise_inv @ model.jac_theta0(theta)
    dC = _dC(model, theta, spec)
    grad = (-n_e * jw.T @ (C @ d)
            + 0.5 * (np.einsum("kij,ji->k", dC, scatter) + n_e * np.einsum("i,kij,j->k", d, dC, d))
            - spec.prior.grad_logpdf(theta))
    hess = n_e * jw.T @ C @ jw - spec.prior.hess_logpdf(theta)
    return float(value), grad, 0.5 * (hess + hess.T)


def _projected_grad_norm(prior, theta, grad):
    if not isinstance(prior, UniformBoxPrior):
        return float(np.linalg.norm(grad))
    g = grad.copy()
    g[(theta <= prior.lower) & (g > 0)] = 0.0
    g[(theta >= prior.upper) & (g < 0)] = 0.0
    return float(np.linalg.norm(g))


def find_map(model: ForwardModel, data, spec: ExperimentSpec, theta0=None,
             opts: MapOptions | None = None) -> LaplacePosterior:
    """Damped Gauss-Newton search for the MAP with Armijo backtracking.

    Box priors are handled by projecting every trial point. If the line
    search cannot reduce ``F`` before the step shrinks to roundoff, the current
    iterate is accepted as the minimizer; :class:`NoConvergence` is raised only
    when ``max_iters`` is exhausted.
    """
    opts = opts or MapOptions()
    prior = spec.prior
    ybar, scatter = _stats(data, spec)
    theta = prior.default_start() if theta0 is None else np.atleast_1d(np.asarray(theta0, dtype=float))
    theta = prior.project(theta)
    F, grad, hess = map_objective(model, theta, (ybar, scatter), spec)
    gtol = opts.gtol if opts.gtol is not None else 1e-8 * (1.0 + abs(F))
    iters = 0
    while True:
        gnorm = _projected_grad_norm(prior, theta, grad)
        if gnorm <= gtol:
            break
        if iters >= opts.max_iters:
            raise NoConvergence(iters, gnorm)
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            step = -grad / max(np.abs(np.diag(hess)).max(), 1.0)
        t = 1.0
        accepted = False
        while t * np.linalg.norm(step) > 1e-15 * (1.0 + np.linalg.norm(theta)):
            cand = prior.project(theta + t * step)
            try:
                F_c = _value(model, cand, ybar, scatter, spec)[0]
            except NotPD:
                F_c = np.inf
            if F_c < F and F_c <= F + opts.armijo * grad @ (cand - theta):
                accepted = True
                break
            t *= opts.backtrack
        if not accepted:
            break  # no decrease is representable; theta is as good as it gets
        theta = cand
        iters += 1
        F, grad, hess = map_objective(model, theta, (ybar, scatter), spec)
    # the Gauss-Newton Hessian at the final iterate is the Laplace precision
    return posterior_from_precision(theta, hess, iters)


def laplace_precision_batch(model: ForwardModel, thetas, spec: ExperimentSpec, jac_theta=None,
                            C=None) -> np.ndarray:
    """Gauss-Newton posterior precision at a stack of points, shape (K, d, d).

    Raises :class:`NotPD` at the first point whose correction term fails the gate.
    """
    thetas = np.atleast_2d(thetas)
    if jac_theta is None:
        jac_theta = model.jac_theta0_batch(thetas)
    if C is None:
        C, eig = correction_batch(model, thetas, spec)
        bad = np.flatnonzero(eig[:, 0] <= PD_TOLERANCE)
        if bad.size:
            raise NotPD(thetas[bad[0]], eig[bad[0], 0])
    jw = spec.noise_inv @ jac_theta
    prec = spec.n_exp * np.swapaxes(jw, -1, -2) @ C @ jw
    prec = prec - np.stack([spec.prior.hess_logpdf(t) for t in thetas])
    return 0.5 * (prec + np.swapaxes(prec, -1, -2))


def laplace_log_pdf(post: LaplacePosterior, theta):
    """Gaussian log-density of the Laplace posterior at one point, or at each row of a 2D array."""
    theta = np.asarray(theta, dtype=float)
    z = np.linalg.solve(post.chol, (np.atleast_2d(theta) - post.map).T)
    out = -0.5 * (post.dim * LOG_2PI + post.log_det_cov + np.sum(z * z, axis=0))
    return float(out[0]) if theta.ndim < 2 else out


def sample_laplace(post: LaplacePosterior, rng, n: int | None = None) -> np.ndarray:
    gen = as_generator(rng)
    if n is None:
        return post.map + post.chol @ gen.standard_normal(post.dim)
    return post.map + gen.standard_normal((n, post.dim)) @ post.chol.T
