"""Forward models: a bilinear three-output toy, a linear Gaussian toy and the EIT laminate."""

from __future__ import annotations

import numpy as np

from . import fem
from .core import ExperimentSpec, ForwardModel, GaussianPrior, UniformBoxPrior

A_EXAMPLE1 = np.array([[10.0, 2.0], [5.0, 20.0], [50.0, -2.0]])


class Example1Model(ForwardModel):
    """``g(theta, phi) = A theta (1 + phi . e)`` with ``e = (1, 1)``."""

    q, d_theta, d_phi = 3, 2, 2

    def __init__(self, a_matrix=A_EXAMPLE1):
        self.a_matrix = np.array(a_matrix, dtype=float)
        self.e_vector = np.ones(2)

    def eval(self, theta, phi):
        return self.a_matrix @ np.asarray(theta, dtype=float) * (1.0 + np.asarray(phi, dtype=float) @ self.e_vector)

    def eval_batch(self, thetas, phis=None):
        thetas = np.atleast_2d(thetas)
        scale = 1.0 if phis is None else 1.0 + np.atleast_2d(phis) @ self.e_vector
        return (thetas @ self.a_matrix.T) * np.reshape(scale, (-1, 1))

    def jac_theta0(self, theta):
        return self.a_matrix.copy()

    def jac_phi0(self, theta):
        return np.outer(self.a_matrix @ np.asarray(theta, dtype=float), self.e_vector)

    def jac_theta0_batch(self, thetas):
        return np.broadcast_to(self.a_matrix, (np.atleast_2d(thetas).shape[0], 3, 2)).copy()

    def jac_phi0_batch(self, thetas):
        return (np.atleast_2d(thetas) @ self.a_matrix.T)[:, :, None] * self.e_vector[None, None, :]


class LinearModel(ForwardModel):
    """``g(theta, phi) = G theta + H phi``."""

    def __init__(self, g_matrix, h_matrix=None):
        self.g_matrix = np.atleast_2d(np.asarray(g_matrix, dtype=float))
        self.q, self.d_theta = self.g_matrix.shape
        h = np.zeros((self.q, 0)) if h_matrix is None else np.asarray(h_matrix, dtype=float)
        self.h_matrix = h.reshape(self.q, -1)
        self.d_phi = self.h_matrix.shape[1]

    def eval(self, theta, phi):
        out = self.g_matrix @ np.atleast_1d(np.asarray(theta, dtype=float))
        if self.d_phi:
            out = out + self.h_matrix @ np.asarray(phi, dtype=float).reshape(-1)
        return out

    def eval_batch(self, thetas, phis=None):
        out = np.atleast_2d(thetas) @ self.g_matrix.T
        if self.d_phi and phis is not None:
            out = out + np.atleast_2d(phis) @ self.h_matrix.T
        return out

    def jac_theta0(self, theta):
        return self.g_matrix.copy()

    def jac_phi0(self, theta):
        return self.h_matrix.copy()

    def jac_theta0_batch(self, thetas):
        return np.broadcast_to(self.g_matrix, (np.atleast_2d(thetas).shape[0],) + self.g_matrix.shape).copy()

    def jac_phi0_batch(self, thetas):
        return np.broadcast_to(self.h_matrix, (np.atleast_2d(thetas).shape[0],) + self.h_matrix.shape).copy()


class Example2Model(LinearModel):
    """``g = diag(xi, 1 - xi) (theta, phi)``; without nuisance the second slot is a second parameter."""

    def __init__(self, xi, with_nuisance=True):
        xi = float(xi)
        if not 0.0 <= xi <= 1.0:
            raise ValueError("xi must lie in [0, 1]")
        self.xi = xi
        self.with_nuisance = bool(with_nuisance)
        if with_nuisance:
            super().__init__([[xi], [0.0]], [[0.0], [1.0 - xi]])
        else:
            super().__init__(np.diag([xi, 1.0 - xi]))


class EitModel(ForwardModel):
    """Electrode potentials of the two-ply laminate under the complete electrode model.

    Parameters are the fibre angles of the two plies; nuisance parameters are
    log-scale perturbations of each ply's principal conductivities. Jacobians
    come from central differences of FEM solves with absolute steps.
    """

    d_theta, d_phi = 2, 2
    fd_step_theta = 1e-4
    fd_step_phi = 1e-4
    fd_relative = False

    def __init__(self, design=(2.0, 2.0), h=0.5, current_pattern=None, mu=fem.DEFAULT_MU,
                 z_contact=fem.Z_CONTACT, hz=None, eta=2.0, gamma=2.0):
        self.design = tuple(float(x) for x in design)
        self.electrodes = fem.design_electrodes(*self.design)
        self.mesh_param = float(h)
        self.mesh = fem.make_mesh(self.mesh_param, self.electrodes, hz=0.5 * h if hz is None else float(hz))
        self.n_el = self.mesh.n_el
        self.q = self.n_el - 1
        if current_pattern is None:
            current_pattern = DEFAULT_CURRENT_AMPLITUDE * fem.default_currents(self.n_el)
        self.currents = np.asarray(current_pattern, dtype=float)
        self.mu = tuple(float(m) for m in mu)
        self.z_contact = z_contact
        self.eta, self.gamma = eta, gamma

    def solve(self, theta, phi):
        cond = fem.build_conductivity(theta[0], theta[1], phi[0], phi[1], self.mu)
        return fem.solve(fem.assemble(self.mesh, cond, self.z_contact, self.currents))

    def eval(self, theta, phi):
        return self.solve(np.asarray(theta, dtype=float), np.asarray(phi, dtype=float))[1][:-1]


# puts the largest measured potential near 9 at the default design and fibre angles,
# the top of the range reported for the laminate
DEFAULT_CURRENT_AMPLITUDE = 0.16


def make_example1(a_matrix=A_EXAMPLE1) -> Example1Model:
    return Example1Model(a_matrix)


def make_example2(xi, with_nuisance=True) -> Example2Model:
    return Example2Model(xi, with_nuisance)


def make_eit(design=(2.0, 2.0), h=0.5, current_pattern=None, **kw) -> EitModel:
    return EitModel(design, h, current_pattern, **kw)


def example1_spec(nuisance_var=1.44e-8, n_exp=1, noise_var=1e-4, prior_var=1e-4) -> ExperimentSpec:
    return ExperimentSpec(n_exp, noise_var * np.eye(3), nuisance_var * np.eye(2),
                          GaussianPrior(np.ones(2), prior_var * np.eye(2)))


def example2_spec(xi, with_nuisance=True, n_exp=1, noise_var=1e-2, nuisance_var=1e-2,
                  prior_var=1.0) -> ExperimentSpec:
    d_theta = 1 if with_nuisance else 2
    nuis = nuisance_var * np.eye(1) if with_nuisance else np.zeros((0, 0))
    return ExperimentSpec(n_exp, noise_var * np.eye(2), nuis,
                          GaussianPrior(np.zeros(d_theta), prior_var * np.eye(d_theta)), design=[xi])


def eit_spec(design=(2.0, 2.0), nuisance_var=1e-10, n_exp=10, noise_var=1e-4, half_width=0.05,
             n_el=10) -> ExperimentSpec:
    centre = np.array([-np.pi / 4, np.pi / 4])
    return ExperimentSpec(n_exp, noise_var * np.eye(n_el - 1), nuisance_var * np.eye(2),
                          UniformBoxPrior(centre - half_width, centre + half_width), design=design)


def analytic_eig_linear_gaussian(xi, spec: ExperimentSpec, with_nuisance=True, small_noise=False) -> float:
    """Closed-form EIG of the linear Gaussian toy for ``N_e`` repetitions.

    With ``G`` the parameter block, ``H`` the nuisance block and ``Lt`` the prior
    factor, the EIG is ``1/2 logdet(I + N_e Lt' G' S^{-1} G Lt)`` where ``S``
    is the per-observation covariance after marginalizing the nuisance: the
    noise covariance plus ``H Sphi H'`` (exact), or ``L C^{-1} L'`` (small
    noise). Each repetition is treated as carrying its own nuisance draw, which
    is how the corrected likelihood factorizes; for the toy model the two
    readings agree because ``H`` and ``G`` act on different outputs.
    """
    if not isinstance(spec.prior, GaussianPrior):
        raise TypeError("analytic EIG needs a Gaussian prior")
    model = Example2Model(xi, with_nuisance)
    G = model.g_matrix
    S = spec.noise_cov.copy()
    if with_nuisance:
        H = model.h_matrix
        if small_noise:
            Linv = spec.noise_inv
            B = Linv @ H @ spec.nuisance_chol
            C = np.eye(spec.q) - B @ B.T
            S = spec.noise_chol @ np.linalg.inv(C) @ spec.noise_chol.T
        else:
            S = S + H @ spec.nuisance_cov @ H.T
    Lt = spec.prior.chol
    F = Lt.T @ G.T @ np.linalg.solve(S, G @ Lt)
    sign, logdet = np.linalg.slogdet(np.eye(G.shape[1]) + spec.n_exp * F)
    return 0.5 * float(logdet)
