"""Shared domain types: priors, experiment settings, data, forward models and RNG streams."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NotSPD

LOG_2PI = float(np.log(2.0 * np.pi))


# --------------------------------------------------------------------------- rng

@dataclass(frozen=True)
class RngStream:
    """Value-like handle on a counter-based random stream.

    A stream is identified by ``(seed, path)``. Children extend the path, so
    draws made for outer sample ``n`` never depend on how many other samples
    were drawn before it or on which worker drew them.
    """

    seed: int
    path: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "seed", int(self.seed))
        object.__setattr__(self, "path", tuple(int(p) for p in self.path))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.path + tuple(int(k) for k in keys))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        return np.random.Generator(np.random.Philox(ss))

    @property
    def label(self) -> str:
        return "/".join(str(p) for p in self.path) or "root"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng).__name__}")


# ----------------------------------------------------------------- linear algebra

def chol_spd(matrix, what="matrix") -> np.ndarray:
    """Lower Cholesky factor; raises :class:`NotSPD` for non-symmetric or indefinite input."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.shape[0] != a.shape[1]:
        raise NotSPD(what)
    if not np.all(np.isfinite(a)):
        raise NotSPD(what)
    if a.size and np.abs(a - a.T).max() > 1e-10 * np.abs(a).max():
        raise NotSPD(what)
    try:
        return np.linalg.cholesky(0.5 * (a + a.T))
    except np.linalg.LinAlgError:
        raise NotSPD(what) from None


def log_gaussian(x, mean, cov) -> float:
    """Log-density of ``N(mean, cov)`` at ``x`` through a triangular factorization."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    L = chol_spd(cov, "covariance")
    z = solve_triangular(L, x - mean, lower=True)
    d = x.size
    return float(-0.5 * (d * LOG_2PI + z @ z) - np.log(np.diag(L)).sum())


# ------------------------------------------------------------------------- priors

class PriorSpec:
    """Prior over the parameters of interest."""

    dim: int

    def sample(self, gen: np.random.Generator, n: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def logpdf(self, theta) -> np.ndarray | float:
        raise NotImplementedError

    def grad_logpdf(self, theta) -> np.ndarray:
        raise NotImplementedError

    def hess_logpdf(self, theta) -> np.ndarray:
        raise NotImplementedError

    def default_start(self) -> np.ndarray:
        raise NotImplementedError

    def project(self, theta) -> np.ndarray:
        return np.asarray(theta, dtype=float)

    def scale(self) -> np.ndarray:
        """Per-component spread, used to size random restarts."""
        raise NotImplementedError


class GaussianPrior(PriorSpec):
    kind = "gaussian"

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float)).copy()
        self.cov = np.atleast_2d(np.asarray(cov, dtype=float)).copy()
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise ValueError("prior covariance shape does not match mean")
        self.chol = chol_spd(self.cov, "prior covariance")
        self.precision = np.linalg.inv(self.cov)
        self.precision = 0.5 * (self.precision + self.precision.T)
        self.dim = self.mean.size
        self._inv_chol = np.linalg.inv(self.chol)
        self._log_norm = -0.5 * self.dim * LOG_2PI - np.log(np.diag(self.chol)).sum()

    def sample(self, gen, n=None):
        if n is None:
            return self.mean + self.chol @ gen.standard_normal(self.dim)
        return self.mean + gen.standard_normal((n, self.dim)) @ self.chol.T

    def logpdf(self, theta):
        z = (np.asarray(theta, dtype=float) - self.mean) @ self._inv_chol.T
        quad = np.sum(z * z, axis=-1)
        out = self._log_norm - 0.5 * quad
        return float(out) if out.ndim == 0 else out

    def grad_logpdf(self, theta):
        return -self.precision @ (np.asarray(theta, dtype=float) - self.mean)

    def hess_logpdf(self, theta):
        return -self.precision

    def default_start(self):
        return self.mean.copy()

    def scale(self):
        return np.sqrt(np.diag(self.cov))

    def __repr__(self):
        return f"GaussianPrior(mean={self.mean.tolist()}, cov={self.cov.tolist()})"


class UniformBoxPrior(PriorSpec):
    kind = "uniform_box"

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float)).copy()
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float)).copy()
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds must have equal shapes")
        if not np.all(self.lower < self.upper):
            raise ValueError("uniform prior needs lower < upper in every component")
        self.dim = self.lower.size
        self._log_density = -float(np.log(self.upper - self.lower).sum())

    def sample(self, gen, n=None):
        size = self.dim if n is None else (n, self.dim)
        return self.lower + (self.upper - self.lower) * gen.random(size)

    def contains(self, theta):
        theta = np.asarray(theta, dtype=float)
        return np.all((theta >= self.lower) & (theta <= self.upper), axis=-1)

    def logpdf(self, theta):
        inside = self.contains(theta)
        out = np.where(inside, self._log_density, -np.inf)
        return float(out) if out.ndim == 0 else out

    def grad_logpdf(self, theta):
        return np.zeros(self.dim)

    def hess_logpdf(self, theta):
        return np.zeros((self.dim, self.dim))

    def default_start(self):
        return 0.5 * (self.lower + self.upper)

    def project(self, theta):
        return np.clip(np.asarray(theta, dtype=float), self.lower, self.upper)

    def scale(self):
        return (self.upper - self.lower) / np.sqrt(12.0)

    def __repr__(self):
        return f"UniformBoxPrior(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


# ----------------------------------------------------------------- experiment spec

@dataclass(frozen=True, eq=False)
class ExperimentSpec:
    """Everything about one experiment that is not the forward model.

    Covariances are validated once here; downstream code assumes SPD input.
    ``nuisance_cov`` may be 0x0 for nuisance-free models.
    """

    n_exp: int
    noise_cov: np.ndarray
    nuisance_cov: np.ndarray
    prior: PriorSpec
    design: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if int(self.n_exp) < 1:
            raise ValueError("n_exp must be >= 1")
        noise = np.atleast_2d(np.asarray(self.noise_cov, dtype=float))
        nuis = np.asarray(self.nuisance_cov, dtype=float)
        nuis = nuis.reshape(0, 0) if nuis.size == 0 else np.atleast_2d(nuis)
        object.__setattr__(self, "n_exp", int(self.n_exp))
        object.__setattr__(self, "noise_cov", noise)
        object.__setattr__(self, "nuisance_cov", nuis)
        object.__setattr__(self, "design", np.atleast_1d(np.asarray(self.design, dtype=float)))
        object.__setattr__(self, "noise_chol", chol_spd(noise, "noise covariance"))
        nchol = np.zeros((0, 0)) if nuis.size == 0 else chol_spd(nuis, "nuisance covariance")
        object.__setattr__(self, "nuisance_chol", nchol)
        object.__setattr__(self, "noise_logdet", 2.0 * float(np.log(np.diag(self.noise_chol)).sum()))
        object.__setattr__(self, "noise_inv", solve_triangular(self.noise_chol, np.eye(noise.shape[0]), lower=True))

    @property
    def q(self) -> int:
        return self.noise_cov.shape[0]

    @property
    def d_phi(self) -> int:
        return self.nuisance_cov.shape[0]

    @property
    def d_theta(self) -> int:
        return self.prior.dim

    def with_nuisance_cov(self, nuisance_cov) -> "ExperimentSpec":
        return ExperimentSpec(self.n_exp, self.noise_cov, nuisance_cov, self.prior, self.design)

    def with_n_exp(self, n_exp) -> "ExperimentSpec":
        return ExperimentSpec(n_exp, self.noise_cov, self.nuisance_cov, self.prior, self.design)

    def sample_nuisance(self, gen, n=None):
        d = self.d_phi
        if n is None:
            return self.nuisance_chol @ gen.standard_normal(d)
        return gen.standard_normal((n, d)) @ self.nuisance_chol.T

    def whiten(self, v):
        """Apply the inverse noise factor to column vectors (or a stack of them along axis 0)."""
        v = np.asarray(v, dtype=float)
        return v @ self.noise_inv.T


# --------------------------------------------------------------------------- data

@dataclass(frozen=True, eq=False)
class DataSet:
    observations: np.ndarray  # q x N_e

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        if obs.ndim == 1:
            obs = obs[:, None]
        object.__setattr__(self, "observations", obs)

    @property
    def n_exp(self) -> int:
        return self.observations.shape[1]

    def whitened_stats(self, spec: ExperimentSpec):
        """Mean and scatter of the whitened columns.

        The sum of per-column quadratic forms against any ``g`` is
        ``tr(A S) + N_e (ybar - g)' A (ybar - g)``, so likelihoods never need
        to touch individual columns again.
        """
        if self.n_exp != spec.n_exp:
            raise ValueError(f"data has {self.n_exp} columns, spec expects {spec.n_exp}")
        if self.observations.shape[0] != spec.q:
            raise ValueError("observation dimension does not match noise covariance")
        w = spec.noise_inv @ self.observations
        ybar = w.mean(axis=1)
        dev = w - ybar[:, None]
        return ybar, dev @ dev.T


# ------------------------------------------------------------------ forward model

class ForwardModel:
    """Capability contract for forward models ``g(theta, phi)``.

    Subclasses implement :meth:`eval`. Jacobians at ``phi = 0`` fall back to
    central differences; batch methods fall back to loops. Models must be
    deterministic and hold no mutable state after construction.
    """

    q: int
    d_theta: int
    d_phi: int
    mesh_param: float | None = None
    eta: float | None = None
    gamma: float | None = None
    fd_step_theta: float = 1e-6
    fd_step_phi: float = 1e-6
    fd_relative: bool = True

    def eval(self, theta, phi) -> np.ndarray:
        raise NotImplementedError

    def eval_batch(self, thetas, phis=None) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        if phis is None:
            phis = np.zeros((thetas.shape[0], self.d_phi))
        return np.stack([self.eval(t, p) for t, p in zip(thetas, np.atleast_2d(phis))])

    def jac_theta0(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        phi0 = np.zeros(self.d_phi)
        return _central_jacobian(lambda t: self.eval(t, phi0), theta, self.fd_step_theta, self.fd_relative)

    def jac_phi0(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.d_phi == 0:
            return np.zeros((self.q, 0))
        return _central_jacobian(lambda p: self.eval(theta, p), np.zeros(self.d_phi), self.fd_step_phi,
                                 self.fd_relative)

    def jac_theta0_batch(self, thetas) -> np.ndarray:
        return np.stack([self.jac_theta0(t) for t in np.atleast_2d(thetas)])

    def jac_phi0_batch(self, thetas) -> np.ndarray:
        return np.stack([self.jac_phi0(t) for t in np.atleast_2d(thetas)])


def _central_jacobian(f, x, step, relative=True):
    x = np.asarray(x, dtype=float)
    cols = []
    for k in range(x.size):
        hk = step * (1.0 + abs(x[k])) if relative else step
        e = np.zeros_like(x)
        e[k] = hk
        cols.append((f(x + e) - f(x - e)) / (2.0 * hk))
    return np.stack(cols, axis=-1)


# ------------------------------------------------------------------- operations

def sample_prior(prior: PriorSpec, rng) -> np.ndarray:
    return prior.sample(as_generator(rng))


def simulate_data(model: ForwardModel, theta_t, phi_t, spec: ExperimentSpec, rng) -> DataSet:
    """Draw ``N_e`` noisy replicates ``y_i = g(theta_t, phi_t) + eps_i``."""
    theta_t = np.atleast_1d(np.asarray(theta_t, dtype=float))
    phi_t = np.asarray(phi_t, dtype=float).reshape(-1)
    if theta_t.size != model.d_theta or phi_t.size != model.d_phi:
        raise ValueError("theta/phi dimensions do not match the model")
    if spec.q != model.q:
        raise ValueError("noise covariance dimension does not match model output")
    g = model.eval(theta_t, phi_t)
    return DataSet(gaussian_columns(as_generator(rng), g, spec.noise_chol, spec.n_exp))


def gaussian_columns(gen, mean, chol, n) -> np.ndarray:
    z = gen.standard_normal((len(mean), n))
    return np.asarray(mean)[:, None] + chol @ z


def ensure_1d(x: Sequence[float] | np.ndarray | float) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=float))
