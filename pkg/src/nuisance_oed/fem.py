"""Complete electrode model on a two-ply rectangle, bilinear elements.

Unknowns are ordered as nodal potentials ``u``, electrode potentials ``U``
and one Lagrange multiplier enforcing ``sum(U) = 0``. The weak form is

    int_D  grad(v) . K grad(u)  +  sum_l (1/z_l) int_{E_l} (U_l - u)(V_l - v)  =  sum_l I_l V_l

with ``K`` the in-plane (x, z) block of the rotated conductivity tensor of
each ply. The sparsity pattern depends only on the mesh, so every mesh keeps
the unit contributions of each coefficient and assembly reduces to one
weighted ``bincount``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import InvalidDesign, KirchhoffViolation, SolverFailure

LENGTH = 20.0
HEIGHT = 2.0
INTERFACE = 1.0
DEFAULT_MU = (np.log(0.1), np.log(0.02), np.log(0.02))
N_PER_FACE = 5
ELECTRODE_WIDTH = 1.0
Z_CONTACT = 0.1


@dataclass(frozen=True)
class Electrode:
    face: str  # "top" or "bottom"
    start: float
    width: float

    @property
    def end(self) -> float:
        return self.start + self.width


def design_electrodes(shift, spacing, n_per_face=N_PER_FACE, width=ELECTRODE_WIDTH, length=LENGTH):
    """Electrode layout for a design ``(shift, spacing)``.

    Each face carries ``n_per_face`` electrodes with centre-to-centre distance
    ``spacing``, centred on the middle of the face; the top row is moved by
    ``-shift/2`` and the bottom row by ``+shift/2``, so a positive shift pulls
    the first top electrode away from the last bottom one. Top electrodes come first,
    each row ordered left to right.
    """
    shift, spacing = float(shift), float(spacing)
    if not spacing > width:
        raise InvalidDesign(f"spacing {spacing:g} must exceed the electrode width {width:g}")
    offsets = (np.arange(n_per_face) - (n_per_face - 1) / 2.0) * spacing
    out = []
    for face, sgn in (("top", -1.0), ("bottom", 1.0)):
        for c in length / 2.0 + sgn * shift / 2.0 + offsets:
            s = c - width / 2.0
            if s < -1e-12 or s + width > length + 1e-12:
                raise InvalidDesign(f"electrode centred at {c:g} leaves the face [0, {length:g}]")
            out.append(Electrode(face, float(s), float(width)))
    return tuple(out)


def _check_electrodes(electrodes, length):
    for face in ("top", "bottom"):
        segs = sorted((e.start, e.end) for e in electrodes if e.face == face)
        for (s0, e0), (s1, _) in zip(segs, segs[1:]):
            if s1 < e0 - 1e-12:
                raise InvalidDesign(f"electrodes overlap on the {face} face near x={s1:g}")
        for s, e in segs:
            if s < -1e-12 or e > length + 1e-12 or e <= s:
                raise InvalidDesign(f"electrode [{s:g}, {e:g}] is not a valid segment of the {face} face")
    if any(e.face not in ("top", "bottom") for e in electrodes):
        raise InvalidDesign("electrode face must be 'top' or 'bottom'")


def _x_lines(h, electrodes, length):
    fixed = np.unique(np.round(np.concatenate([[0.0, length], [e.start for e in electrodes],
                                               [e.end for e in electrodes]]), 12))
    n = max(1, int(np.ceil(length / h - 1e-9)))
    uniform = np.linspace(0.0, length, n + 1)
    dist = np.abs(uniform[:, None] - fixed[None, :]).min(axis=1)
    return np.unique(np.concatenate([fixed, uniform[dist > 0.25 * h]]))


# reference Q1 element on the unit square, nodes (0,0), (1,0), (1,1), (0,1)
def _reference_matrices():
    gp = 0.5 + np.array([-1.0, 1.0]) / (2.0 * np.sqrt(3.0))
    sxx = np.zeros((4, 4))
    szz = np.zeros((4, 4))
    sxz = np.zeros((4, 4))
    for a in gp:
        for b in gp:
            dxi = np.array([-(1 - b), 1 - b, b, -b])
            deta = np.array([-(1 - a), -a, a, 1 - a])
            sxx += 0.25 * np.outer(dxi, dxi)
            szz += 0.25 * np.outer(deta, deta)
            sxz += 0.25 * (np.outer(dxi, deta) + np.outer(deta, dxi))
    return sxx, szz, sxz


_SXX, _SZZ, _SXZ = _reference_matrices()


class Mesh:
    """Structured Q1 mesh of ``[0, length] x [0, height]`` with electrode-aligned x-lines.

    ``nz`` is forced even so the ply interface at mid-height is a mesh line.
    """

    def __init__(self, h, electrodes, length=LENGTH, height=HEIGHT, interface=INTERFACE, hz=None):
        hz = h if hz is None else hz
        if not (h > 0 and hz > 0):
            raise ValueError("mesh size must be positive")
        electrodes = tuple(electrodes)
        _check_electrodes(electrodes, length)
        self.h = float(h)
        self.length, self.height, self.interface = float(length), float(height), float(interface)
        self.electrodes = electrodes
        self.xs = _x_lines(h, electrodes, length)
        self.hz = float(hz)
        nz = int(np.ceil(height / hz - 1e-9))
        nz += nz % 2
        self.zs = np.linspace(0.0, height, nz + 1)
        if not np.any(np.isclose(self.zs, interface)):
            raise ValueError("ply interface does not fall on a mesh line")
        self.nx, self.nz = self.xs.size - 1, nz
        self.n_nodes = (self.nx + 1) * (self.nz + 1)
        self.n_el = len(electrodes)
        self._build()

    def node(self, i, j):
        return j * (self.nx + 1) + i

    @property
    def coordinates(self):
        X, Z = np.meshgrid(self.xs, self.zs)
        return np.column_stack([X.ravel(), Z.ravel()])

    def _build(self):
        nx, nz = self.nx, self.nz
        I, J = np.meshgrid(np.arange(nx), np.arange(nz), indexing="xy")
        I, J = I.ravel(), J.ravel()
        conn = np.stack([self.node(I, J), self.node(I + 1, J), self.node(I + 1, J + 1), self.node(I, J + 1)],
                        axis=1)
        dx = np.diff(self.xs)[I]
        dz = np.diff(self.zs)[J]
        ply = (0.5 * (self.zs[J] + self.zs[J + 1]) > self.interface).astype(int)
        rows, cols, vals, ids = [], [], [], []
        rr = np.repeat(conn, 4, axis=1).ravel()
        cc = np.tile(conn, (1, 4)).ravel()
        for c, (ref, scale) in enumerate(((_SXX, dz / dx), (_SZZ, dx / dz), (_SXZ, np.ones_like(dx)))):
            v = (scale[:, None] * ref.ravel()[None, :]).ravel()
            rows.append(rr)
            cols.append(cc)
            vals.append(v)
            ids.append(np.repeat(3 * ply + c, 16))
        n = self.n_nodes
        self.electrode_area = np.zeros(self.n_el)
        self.electrode_load = []  # b_l as (nodes, weights)
        for l, e in enumerate(self.electrodes):
            j = nz if e.face == "top" else 0
            idx = np.flatnonzero((self.xs[:-1] >= e.start - 1e-9) & (self.xs[1:] <= e.end + 1e-9))
            ln = np.diff(self.xs)[idx]
            a, b = self.node(idx, j), self.node(idx + 1, j)
            m_r = np.concatenate([a, a, b, b])
            m_c = np.concatenate([a, b, a, b])
            m_v = np.concatenate([ln / 3, ln / 6, ln / 6, ln / 3])
            bn = np.concatenate([a, b])
            bv = np.concatenate([ln / 2, ln / 2])
            U = n + l
            rows += [m_r, bn, np.full(bn.size, U), [U]]
            cols += [m_c, np.full(bn.size, U), bn, [U]]
            vals += [m_v, -bv, -bv, [ln.sum()]]
            ids += [np.full(m_r.size + 2 * bn.size + 1, 6 + l)]
            self.electrode_area[l] = ln.sum()
            self.electrode_load.append((bn, bv))
        lag = n + self.n_el
        el = n + np.arange(self.n_el)
        rows += [el, np.full(self.n_el, lag)]
        cols += [np.full(self.n_el, lag), el]
        vals += [np.ones(self.n_el), np.ones(self.n_el)]
        ids += [np.full(2 * self.n_el, 6 + self.n_el)]
        rows, cols = np.concatenate(rows).astype(np.int64), np.concatenate(cols).astype(np.int64)
        self.n_dofs = lag + 1
        keys = cols * self.n_dofs + rows  # column-major order matches CSC storage
        uniq, self._slot = np.unique(keys, return_inverse=True)
        self._indices = (uniq % self.n_dofs).astype(np.int32)
        self._indptr = np.searchsorted(uniq // self.n_dofs, np.arange(self.n_dofs + 1)).astype(np.int32)
        self._vals = np.concatenate(vals).astype(float)
        self._ids = np.concatenate(ids)
        self._nnz = uniq.size

    def matrix(self, coefficients) -> sp.csc_matrix:
        """System matrix for per-term coefficients ``[ply0 xx, zz, xz, ply1 xx, zz, xz, 1/z_l..., 1]``."""
        coef = np.asarray(coefficients, dtype=float)
        data = np.bincount(self._slot, weights=self._vals * coef[self._ids], minlength=self._nnz)
        return sp.csc_matrix((data, self._indices.copy(), self._indptr.copy()), shape=(self.n_dofs, self.n_dofs))


@lru_cache(maxsize=32)
def make_mesh(h, electrodes, length=LENGTH, height=HEIGHT, interface=INTERFACE, hz=None) -> Mesh:
    return Mesh(h, tuple(electrodes), length, height, interface, hz)


def build_conductivity(theta1, theta2, phi1, phi2, mu=DEFAULT_MU) -> np.ndarray:
    """In-plane conductivity of each ply, shape (2, 2, 2) indexed (ply, x/z, x/z).

    The principal conductivities ``exp(mu_j + phi_i)`` are rotated in the x-z
    plane by the fibre angle of the ply; the y row and column decouple.
    """
    mu = np.asarray(mu, dtype=float)
    out = np.empty((2, 2, 2))
    for p, (t, f) in enumerate(((theta1, phi1), (theta2, phi2))):
        s1, _, s3 = np.exp(mu + f)
        c, s = np.cos(t), np.sin(t)
        out[p] = [[c * c * s1 + s * s * s3, c * s * (s3 - s1)],
                  [c * s * (s3 - s1), s * s * s1 + c * c * s3]]
    return out


@dataclass(frozen=True, eq=False)
class CemSystem:
    matrix: sp.csc_matrix
    rhs: np.ndarray
    n_nodes: int
    n_el: int


def default_currents(n_el: int) -> np.ndarray:
    """Unit current in at the first top electrode and out at the last bottom one."""
    cur = np.zeros(n_el)
    cur[0], cur[-1] = 1.0, -1.0
    return cur


def assemble(mesh: Mesh, conductivity, z_contact, currents) -> CemSystem:
    currents = np.asarray(currents, dtype=float)
    if currents.shape != (mesh.n_el,):
        raise ValueError(f"expected {mesh.n_el} electrode currents")
    total = float(currents.sum())
    if abs(total) > 1e-12:
        raise KirchhoffViolation(total)
    K = np.asarray(conductivity, dtype=float)
    z = np.broadcast_to(np.asarray(z_contact, dtype=float), (mesh.n_el,))
    if np.any(z <= 0):
        raise ValueError("contact impedances must be positive")
    coef = np.concatenate([[K[0, 0, 0], K[0, 1, 1], K[0, 0, 1], K[1, 0, 0], K[1, 1, 1], K[1, 0, 1]],
                           1.0 / z, [1.0]])
    rhs = np.zeros(mesh.n_dofs)
    rhs[mesh.n_nodes:mesh.n_nodes + mesh.n_el] = currents
    return CemSystem(mesh.matrix(coef), rhs, mesh.n_nodes, mesh.n_el)


def solve(system: CemSystem):
    """Direct sparse solve; returns nodal and electrode potentials."""
    try:
        x = splu(system.matrix).solve(system.rhs)
    except (RuntimeError, ValueError) as exc:
        raise SolverFailure(str(exc)) from None
    if not np.all(np.isfinite(x)):
        raise SolverFailure("non-finite potentials")
    n = system.n_nodes
    return x[:n], x[n:n + system.n_el]


def forward_map(design, h, current_pattern, theta, phi, mu=DEFAULT_MU, z_contact=Z_CONTACT, hz=None):
    """Electrode potentials ``U_1..U_{N_el-1}`` for a design ``(shift, spacing)``."""
    mesh = make_mesh(float(h), design_electrodes(*design), hz=None if hz is None else float(hz))
    cur = default_currents(mesh.n_el) if current_pattern is None else current_pattern
    cond = build_conductivity(theta[0], theta[1], phi[0], phi[1], mu)
    _, U = solve(assemble(mesh, cond, z_contact, cur))
    return U[:-1]


def export_fields(path, mesh: Mesh, u, U):
    """Write nodal and electrode potentials as one CSV with a ``kind`` column."""
    xy = mesh.coordinates
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "index", "x", "z", "potential"])
        for k, ((x, z), val) in enumerate(zip(xy, u)):
            w.writerow(["node", k, f"{x:.10g}", f"{z:.10g}", f"{val:.12g}"])
        for l, (e, val) in enumerate(zip(mesh.electrodes, U)):
            zc = mesh.height if e.face == "top" else 0.0
            w.writerow(["electrode", l, f"{e.start + e.width / 2:.10g}", f"{zc:.10g}", f"{val:.12g}"])
