"""Small-noise marginalization of nuisance parameters.

The nuisance parameters enter only through the Jacobian ``d g / d phi`` at
``phi = 0``. Writing ``L`` for the lower Cholesky factor of the noise
covariance and ``M = J_phi Lphi``, the correction term is

    C(theta) = I - L^{-1} M M' L^{-T}

and the corrected likelihood is Gaussian with precision ``L^{-T} C L^{-1}``
(equivalently covariance ``L C^{-1} L'``). The corrected likelihood is only a
density while ``C`` is positive definite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (LOG_2PI, DataSet, ExperimentSpec, ForwardModel, as_generator, chol_spd,
                   gaussian_columns)
from .errors import NotPD

PD_TOLERANCE = 1e-10


@dataclass(frozen=True, eq=False)
class CorrectionTerm:
    matrix_c: np.ndarray
    min_eigenvalue: float
    is_pd: bool
    theta: np.ndarray


@dataclass(frozen=True, eq=False)
class CorrectedLikelihood:
    updated_precision: np.ndarray
    updated_cov: np.ndarray
    log_norm_const: float  # per observation


@dataclass(frozen=True)
class ApplicabilityReport:
    applicable: bool
    worst: float
    margin: float
    method: str
    n_samples: int


def scaled_jacobian(model: ForwardModel, theta, nuisance_cov) -> np.ndarray:
    """``M = J_phi(theta) Lphi`` with ``Lphi`` the lower factor of ``nuisance_cov``."""
    jac = np.asarray(model.jac_phi0(np.asarray(theta, dtype=float)))
    if jac.shape[1] == 0:
        return jac
    return jac @ chol_spd(nuisance_cov, "nuisance covariance")


def correction_batch(model: ForwardModel, thetas, spec: ExperimentSpec, jac_phi=None):
    """Correction terms and their spectra for a stack of parameters.

    Returns ``(C, eigvals)`` with shapes ``(K, q, q)`` and ``(K, q)``.
    """
    thetas = np.atleast_2d(thetas)
    K, q = thetas.shape[0], spec.q
    if spec.d_phi == 0:
        return np.broadcast_to(np.eye(q), (K, q, q)).copy(), np.ones((K, q))
    if jac_phi is None:
        jac_phi = model.jac_phi0_batch(thetas)
    B = spec.noise_inv @ (jac_phi @ spec.nuisance_chol)
    C = np.eye(q) - B @ np.swapaxes(B, -1, -2)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    return C, np.linalg.eigvalsh(C)


def correction_term(model: ForwardModel, theta, spec: ExperimentSpec) -> CorrectionTerm:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    C, eig = correction_batch(model, theta[None, :], spec)
    lam = float(eig[0].min())
    return CorrectionTerm(C[0], lam, lam > PD_TOLERANCE, theta)


def corrected_likelihood(model: ForwardModel, theta, spec: ExperimentSpec) -> CorrectedLikelihood:
    ct = correction_term(model, theta, spec)
    if not ct.is_pd:
        raise NotPD(theta, ct.min_eigenvalue)
    Linv = spec.noise_inv
    L = spec.noise_chol
    prec = Linv.T @ ct.matrix_c @ Linv
    cov = L @ np.linalg.inv(ct.matrix_c) @ L.T
    logdet_c = float(np.log(np.linalg.eigvalsh(ct.matrix_c)).sum())
    log_norm = -0.5 * (spec.q * LOG_2PI + spec.noise_logdet - logdet_c)
    return CorrectedLikelihood(0.5 * (prec + prec.T), 0.5 * (cov + cov.T), log_norm)


def check_small_noise_applicability(model: ForwardModel, spec: ExperimentSpec, n_samples: int,
                                    rng, nuisance_var: float | None = None) -> ApplicabilityReport:
    """Monte Carlo check that the correction term stays positive definite under the prior.

    With isotropic noise and nuisance covariances (or an explicit scalar
    ``nuisance_var``) this tests ``sigma_phi^2 |J_phi|_2^2 < sigma_eps^2`` and
    reports the margin in noise-variance units. Otherwise it scans the smallest
    eigenvalue of ``C`` and reports that as the margin.
    """
    gen = as_generator(rng)
    thetas = spec.prior.sample(gen, n_samples)
    noise = spec.noise_cov
    sig_eps2 = noise[0, 0]
    iso_noise = np.allclose(noise, sig_eps2 * np.eye(spec.q))
    if nuisance_var is None and spec.d_phi > 0:
        nv = spec.nuisance_cov[0, 0]
        iso_nuis = np.allclose(spec.nuisance_cov, nv * np.eye(spec.d_phi))
    else:
        nv = 0.0 if nuisance_var is None else float(nuisance_var)
        iso_nuis = True
    if iso_noise and iso_nuis:
        if nv == 0.0:
            return ApplicabilityReport(True, 0.0, float(sig_eps2), "scalar", n_samples)
        jac = model.jac_phi0_batch(thetas)
        norms2 = np.linalg.norm(jac, ord=2, axis=(1, 2)) ** 2
        worst = float(nv * norms2.max())
        return ApplicabilityReport(worst < sig_eps2, worst, float(sig_eps2 - worst), "scalar", n_samples)
    _, eig = correction_batch(model, thetas, spec)
    lam = float(eig.min())
    return ApplicabilityReport(lam > PD_TOLERANCE, 1.0 - lam, lam, "eigenvalue-scan", n_samples)


def log_likelihood_tilde(model: ForwardModel, theta, data: DataSet, spec: ExperimentSpec) -> float:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ybar, scatter = data.whitened_stats(spec)
    vals, lam = loglik_tilde_batch(model, theta[None, :], ybar, scatter, spec)
    if lam[0] <= PD_TOLERANCE:
        raise NotPD(theta, lam[0])
    return float(vals[0])


def loglik_tilde_batch(model: ForwardModel, thetas, ybar, scatter, spec: ExperimentSpec,
                       g=None, correction=True):
    """Corrected log-likelihoods at a stack of parameters from whitened data statistics.

    Returns ``(values, min_eigenvalues)``. Entries whose correction term fails
    the PD gate get ``nan`` values; the caller decides whether that is fatal.
    With ``correction=False`` the plain likelihood at ``phi = 0`` is returned.
    """
    thetas = np.atleast_2d(thetas)
    K = thetas.shape[0]
    if g is None:
        g = model.eval_batch(thetas, np.zeros((K, model.d_phi)))
    d = ybar[None, :] - spec.whiten(g)
    n_e, q = spec.n_exp, spec.q
    if not correction or spec.d_phi == 0:
        quad = np.trace(scatter) + n_e * np.einsum("ki,ki->k", d, d)
        vals = -0.5 * n_e * (q * LOG_2PI + spec.noise_logdet) - 0.5 * quad
        return vals, np.ones(K)
    C, eig = correction_batch(model, thetas, spec)
    lam = eig[:, 0]
    ok = lam > PD_TOLERANCE
    with np.errstate(invalid="ignore", divide="ignore"):
        logdet_c = np.log(np.where(ok[:, None], eig, 1.0)).sum(axis=1)
    quad = np.einsum("kij,ji->k", C, scatter) + n_e * np.einsum("ki,kij,kj->k", d, C, d)
    vals = -0.5 * n_e * (q * LOG_2PI + spec.noise_logdet - logdet_c) - 0.5 * quad
    return np.where(ok, vals, np.nan), lam


def loglik_exact_batch(model: ForwardModel, thetas, phis, ybar, scatter, spec: ExperimentSpec):
    """Plain Gaussian log-likelihood at explicit ``(theta, phi)`` pairs."""
    g = model.eval_batch(np.atleast_2d(thetas), np.atleast_2d(phis))
    d = ybar[None, :] - spec.whiten(g)
    n_e, q = spec.n_exp, spec.q
    quad = np.trace(scatter) + n_e * np.einsum("ki,ki->k", d, d)
    return -0.5 * n_e * (q * LOG_2PI + spec.noise_logdet) - 0.5 * quad


def updated_cov_factor(C: np.ndarray, spec: ExperimentSpec) -> np.ndarray:
    """Lower factor of ``L C^{-1} L'``; exactly ``L`` when ``C`` is the identity."""
    if np.array_equal(C, np.eye(spec.q)):
        return spec.noise_chol
    cinv = np.linalg.inv(C)
    return spec.noise_chol @ chol_spd(0.5 * (cinv + cinv.T), "inverse correction term")


def sample_data_tilde(model: ForwardModel, theta, spec: ExperimentSpec, rng) -> DataSet:
    """Draw a data set from the corrected likelihood at ``theta``."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    ct = correction_term(model, theta, spec)
    if not ct.is_pd:
        raise NotPD(theta, ct.min_eigenvalue)
    g = model.eval(theta, np.zeros(model.d_phi))
    return DataSet(gaussian_columns(as_generator(rng), g, updated_cov_factor(ct.matrix_c, spec), spec.n_exp))

