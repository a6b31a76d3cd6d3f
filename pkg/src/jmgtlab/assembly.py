"""Energy-consistent P1 operator assembly and the 3x3-block generators.

All boundary couplings of the feedback law are realized as boundary mass
terms, which makes the continuous-level integration-by-parts identities hold
exactly at the semi-discrete level.  Variable coefficients enter through
weighted mass matrices with the coefficient interpolated in P1 and integrated
exactly, so that the derived damping field gamma = alpha - tau*c^2/b is an
exact operator relation:  W(alpha) - W(gamma) = (tau*c^2/b) * M.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigurationError, ParameterError
from .geometry import GAMMA0, GAMMA1, BoundaryPartition, Mesh


def _as_nodal(mesh, value):
    """Constant / callable / array -> nodal vector."""
    if callable(value):
        pts = mesh.nodes
        if mesh.dim == 1:
            return np.asarray(value(pts[:, 0]), dtype=float) * np.ones(mesh.n_nodes)
        return np.asarray(value(pts[:, 0], pts[:, 1]), dtype=float) * np.ones(mesh.n_nodes)
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(mesh.n_nodes, float(arr))
    if arr.shape != (mesh.n_nodes,):
        raise ConfigurationError(
            f"nodal field has shape {arr.shape}, expected ({mesh.n_nodes},)")
    return arr


def _as_facet(mesh, facets, value):
    """Constant / callable / array -> per-facet values (at facet midpoints)."""
    if callable(value):
        mids = mesh.nodes[mesh.facet_nodes[facets]].mean(axis=1)
        if mesh.dim == 1:
            return np.asarray(value(mids[:, 0]), dtype=float) * np.ones(len(facets))
        return np.asarray(value(mids[:, 0], mids[:, 1]), dtype=float) * np.ones(len(facets))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(len(facets), float(arr))
    if arr.shape != (len(facets),):
        raise ConfigurationError(
            f"facet field has shape {arr.shape}, expected ({len(facets)},)")
    return arr


@dataclass
class PhysicalParams:
    """Model coefficients; b and gamma are always derived, never stored."""

    tau: float = 1.0
    c: float = 1.0
    delta: float = 1.0
    k: float = 0.5
    lam: float = 1.0
    alpha: np.ndarray = None          # nodal field
    kappa0: np.ndarray = None         # per GAMMA0 facet
    kappa1: np.ndarray = None         # per GAMMA1 facet
    forcing: Optional[Callable] = None  # f(points, t) -> values, or None

    @property
    def b(self):
        return self.delta + self.tau * self.c ** 2

    @property
    def gamma(self):
        return self.alpha - self.tau * self.c ** 2 / self.b

    @property
    def cb(self):
        """The transform weight c^2/b."""
        return self.c ** 2 / self.b

    @staticmethod
    def build(mesh, partition, tau=1.0, c=1.0, delta=1.0, k=0.5, lam=1.0,
              alpha="critical", kappa0=1.0, kappa1=1.0, forcing=None,
              allow_undamped=False):
        """Resolve coefficient specs against a mesh/partition.

        alpha accepts a constant, callable, nodal array, or the string
        "critical" (optionally "critical+<float>") pinning gamma = const >= 0
        exactly.
        """
        if tau <= 0 or c <= 0:
            raise ParameterError(f"tau and c must be positive, got {tau}, {c}")
        if lam <= 0:
            raise ParameterError(f"lambda must be positive, got {lam}")
        b = delta + tau * c ** 2
        if b <= 0:
            raise ParameterError(f"b = delta + tau*c^2 must be positive, got {b}")
        if isinstance(alpha, str):
            base = tau * c ** 2 / b
            if alpha == "critical":
                alpha_n = np.full(mesh.n_nodes, base)
            elif alpha.startswith("critical+"):
                alpha_n = np.full(mesh.n_nodes, base + float(alpha[len("critical+"):]))
            else:
                raise ParameterError(f"unrecognized alpha spec {alpha!r}")
        else:
            alpha_n = _as_nodal(mesh, alpha)
        k0 = _as_facet(mesh, partition.gamma0_facets, kappa0)
        k1 = _as_facet(mesh, partition.gamma1_facets, kappa1)
        if np.any(k0 <= 0):
            raise ParameterError(
                "kappa0 must be strictly positive on GAMMA0 (coercivity of the "
                "Robin form is lost otherwise)")
        if np.any(k1 < 0) or (not allow_undamped and len(k1) and np.any(k1 <= 0)):
            raise ParameterError(
                "kappa1 must be strictly positive on GAMMA1 (pass "
                "allow_undamped=True for conservative runs with kappa1 = 0)")
        return PhysicalParams(float(tau), float(c), float(delta), float(k),
                              float(lam), alpha_n, k0, k1, forcing)

    def gamma_min(self):
        return float(np.min(self.gamma))

    def rescaled_gamma(self, gamma_value):
        """Copy with alpha replaced so gamma equals the given constant/nodal field."""
        g = np.full_like(self.alpha, gamma_value) if np.ndim(gamma_value) == 0 \
            else np.asarray(gamma_value, dtype=float)
        return PhysicalParams(self.tau, self.c, self.delta, self.k, self.lam,
                              g + self.tau * self.c ** 2 / self.b,
                              self.kappa0, self.kappa1, self.forcing)


@dataclass
class DiscreteOperators:
    """P1 Galerkin matrices for one mesh/partition/params triple."""

    mesh: Mesh
    partition: BoundaryPartition
    params: PhysicalParams
    M: sp.csr_matrix          # mass
    Kgrad: sp.csr_matrix      # pure gradient stiffness
    K: sp.csr_matrix          # Robin stiffness: Kgrad + (kappa0/lam) GAMMA0 mass
    R0: sp.csr_matrix         # (kappa0/lam)-weighted GAMMA0 boundary mass
    B1: sp.csr_matrix         # kappa1-weighted GAMMA1 boundary mass
    Mb0: sp.csr_matrix        # unweighted GAMMA0 boundary mass
    Mb1: sp.csr_matrix        # unweighted GAMMA1 boundary mass
    Wgamma: sp.csr_matrix     # gamma-weighted mass
    _M_lu: object = field(default=None, repr=False)
    _K_lu: object = field(default=None, repr=False)
    _Walpha: object = field(default=None, repr=False)

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def Walpha(self):
        # exact operator form of gamma = alpha - tau c^2 / b
        if self._Walpha is None:
            p = self.params
            self._Walpha = (self.Wgamma + (p.tau * p.c ** 2 / p.b) * self.M).tocsr()
        return self._Walpha

    def M_solve(self, rhs):
        if self._M_lu is None:
            self._M_lu = spla.splu(self.M.tocsc())
        return self._M_lu.solve(np.asarray(rhs, dtype=float))

    def K_solve(self, rhs):
        if self._K_lu is None:
            self._K_lu = spla.splu(self.K.tocsc())
        return self._K_lu.solve(np.asarray(rhs, dtype=float))

    def weighted_mass(self, nodal):
        return _weighted_mass(self.mesh, np.asarray(nodal, dtype=float))

    def boundary_load(self, tag, facet_values):
        """Load vector l_i = int_{Gamma_tag} phi * v_i with facet-constant phi."""
        mesh = self.mesh
        facets = self.partition.gamma0_facets if tag == GAMMA0 \
            else self.partition.gamma1_facets
        vals = _as_facet(mesh, facets, facet_values)
        out = np.zeros(self.n)
        for v, f in zip(vals, facets):
            nodes = mesh.facet_nodes[f]
            meas = mesh.facet_measure[f]
            if mesh.dim == 1:
                out[nodes[0]] += v * meas
            else:
                out[nodes] += v * meas / 2.0
        return out

    def trace_quadrature_pairing(self, tag, facet_values, nodal):
        """int_{Gamma_tag} phi * u_h evaluated by independent facet quadrature."""
        mesh = self.mesh
        facets = self.partition.gamma0_facets if tag == GAMMA0 \
            else self.partition.gamma1_facets
        vals = _as_facet(mesh, facets, facet_values)
        _, w, lam = mesh.facet_quadrature()
        total = 0.0
        for v, f in zip(vals, facets):
            uq = lam @ nodal[mesh.facet_nodes[f]]
            total += v * float(np.dot(w[f], uq))
        return total


def _p1_matrices(mesh):
    """Mass and gradient stiffness via exact element integration."""
    n = mesh.n_nodes
    cells = mesh.cells
    vols = mesh.cell_volumes()
    g = mesh.cell_basis_gradients()
    nv = mesh.dim + 1
    ii, jj, mm, kk = [], [], [], []
    if mesh.dim == 1:
        Ml = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        Ml = (np.ones((3, 3)) + np.eye(3)) / 12.0
    for a in range(nv):
        for bb in range(nv):
            ii.append(cells[:, a])
            jj.append(cells[:, bb])
            mm.append(vols * Ml[a, bb])
            kk.append(vols * np.einsum("cd,cd->c", g[:, a], g[:, bb]))
    ii = np.concatenate(ii); jj = np.concatenate(jj)
    M = sp.coo_matrix((np.concatenate(mm), (ii, jj)), shape=(n, n)).tocsr()
    K = sp.coo_matrix((np.concatenate(kk), (ii, jj)), shape=(n, n)).tocsr()
    return M, K


def _weighted_mass(mesh, w_nodal):
    """W(w)_ij = int (P1 interp of w) phi_i phi_j, exact; linear in w."""
    n = mesh.n_nodes
    cells = mesh.cells
    vols = mesh.cell_volumes()
    nv = mesh.dim + 1
    ii, jj, vv = [], [], []
    wc = w_nodal[cells]  # (nc, nv)
    for a in range(nv):
        for b in range(nv):
            acc = np.zeros(mesh.n_cells)
            for k in range(nv):
                if mesh.dim == 1:
                    coef = 3.0 if (a == b == k) else 1.0
                    acc += wc[:, k] * coef / 12.0
                else:
                    same = (a == b) + (b == k) + (a == k)
                    coef = {3: 6.0, 1: 2.0, 0: 1.0}[same]
                    acc += wc[:, k] * coef / 60.0
            ii.append(cells[:, a]); jj.append(cells[:, b]); vv.append(vols * acc)
    return sp.coo_matrix(
        (np.concatenate(vv), (np.concatenate(ii), np.concatenate(jj))),
        shape=(n, n)).tocsr()


def _boundary_mass(mesh, facets, weights):
    """Facet mass matrix with facet-constant weights (exact for P1 traces)."""
    n = mesh.n_nodes
    ii, jj, vv = [], [], []
    for wgt, f in zip(weights, facets):
        nodes = mesh.facet_nodes[f]
        meas = mesh.facet_measure[f]
        if mesh.dim == 1:
            ii.append(nodes[0]); jj.append(nodes[0]); vv.append(wgt * meas)
        else:
            loc = wgt * meas / 6.0 * np.array([[2.0, 1.0], [1.0, 2.0]])
            for a in range(2):
                for b in range(2):
                    ii.append(nodes[a]); jj.append(nodes[b]); vv.append(loc[a, b])
    return sp.coo_matrix((vv, (ii, jj)), shape=(n, n)).tocsr()


def assemble_core(mesh, partition, params):
    """Assemble all matrices of DiscreteOperators for the given data."""
    if np.any(params.kappa0 <= 0):
        raise ParameterError("kappa0 must be positive on GAMMA0")
    M, Kgrad = _p1_matrices(mesh)
    g0, g1 = partition.gamma0_facets, partition.gamma1_facets
    R0 = _boundary_mass(mesh, g0, params.kappa0 / params.lam)
    B1 = _boundary_mass(mesh, g1, params.kappa1)
    Mb0 = _boundary_mass(mesh, g0, np.ones(len(g0)))
    Mb1 = _boundary_mass(mesh, g1, np.ones(len(g1)))
    K = (Kgrad + R0).tocsr()
    Wgamma = _weighted_mass(mesh, params.gamma)
    return DiscreteOperators(mesh, partition, params, M, Kgrad, K, R0, B1,
                             Mb0, Mb1, Wgamma)


def solve_neumann_map(ops, phi):
    """Discrete harmonic extension: K psi = l(phi) with Neumann data phi on
    GAMMA1 and the homogeneous Robin condition on GAMMA0 built into K."""
    rhs = ops.boundary_load(GAMMA1, phi)
    return ops.K_solve(rhs)


class BlockOperator:
    """3x3-block operator in mass form: action(v) = Mb^{-1} (S v).

    S and Mb are sparse over the 3N-dimensional state; Mb is block diagonal.
    Shifted solves (s*Mb - S) x = Mb*rhs share a cached factorization per s.
    """

    def __init__(self, name, S, Mb, n):
        self.name = name
        self.S = S.tocsr()
        self.Mb = Mb.tocsc()
        self.n = n
        self._mb_lu = None
        self._shift_cache = {}

    @property
    def dim(self):
        return self.S.shape[0]

    def apply(self, v):
        if self._mb_lu is None:
            self._mb_lu = spla.splu(self.Mb)
        return self._mb_lu.solve(self.S @ np.asarray(v, dtype=float))

    def solve_shifted(self, s, rhs):
        """Solve (s*I - A) x = rhs where A = Mb^{-1} S."""
        key = float(s)
        if key not in self._shift_cache:
            self._shift_cache[key] = spla.splu((s * self.Mb - self.S).tocsc())
        return self._shift_cache[key].solve(self.Mb @ np.asarray(rhs, dtype=float))

    def dense(self, limit=3000):
        if self.dim > limit:
            raise ConfigurationError(
                f"dense form requested for dimension {self.dim} > {limit}")
        if self._mb_lu is None:
            self._mb_lu = spla.splu(self.Mb)
        return self._mb_lu.solve(self.S.toarray())

    def blocks(self):
        """Return the 3x3 block view of S as dense arrays (small systems only)."""
        n = self.n
        Sd = self.S.toarray()
        return [[Sd[i * n:(i + 1) * n, j * n:(j + 1) * n] for j in range(3)]
                for i in range(3)]


def _block3(rows, n):
    Z = sp.csr_matrix((n, n))
    grid = [[blk if blk is not None else Z for blk in r] for r in rows]
    return sp.bmat(grid, format="csr")


def build_generator_u(ops, params):
    """Semi-discrete generator of the third-order-in-time pressure problem,
    first-order in (u, u_t, u_tt):

        tau M u''' + W(alpha) u'' + c^2 K u + b K u' + c^2 B1 u' + b B1 u'' = M f
    """
    n = ops.n
    M, K, B1 = ops.M, ops.K, ops.B1
    b, c2, tau = params.b, params.c ** 2, params.tau
    Wa = ops.Walpha
    S = _block3([
        [None, M, None],
        [None, None, M],
        [-c2 * K, -(b * K + c2 * B1), -(b * B1 + Wa)],
    ], n)
    Mb = sp.block_diag([M, M, tau * M], format="csc")
    return BlockOperator("generator_u", S, Mb, n)


def build_transform_M(params, n_nodes):
    """Block lower-triangular change of variables (u, u_t, u_tt) -> (u, z, z_t)
    with scalar part [[1,0,0],[c^2/b,1,0],[0,c^2/b,1]]."""
    m = params.cb
    I = sp.identity(n_nodes, format="csr")
    S = _block3([
        [I, None, None],
        [m * I, I, None],
        [None, m * I, I],
    ], n_nodes)
    Mb = sp.identity(3 * n_nodes, format="csc")
    op = BlockOperator("transform", S, Mb, n_nodes)
    op.scalar_part = np.array([[1.0, 0.0, 0.0], [m, 1.0, 0.0], [0.0, m, 1.0]])
    return op


def transform_inverse(params, n_nodes):
    m = params.cb
    I = sp.identity(n_nodes, format="csr")
    S = _block3([
        [I, None, None],
        [-m * I, I, None],
        [m * m * I, -m * I, I],
    ], n_nodes)
    Mb = sp.identity(3 * n_nodes, format="csc")
    return BlockOperator("transform_inv", S, Mb, n_nodes)


def build_generator_z(ops, params):
    """Generators in the (u, z, z_t) variables: the transformed operator, its
    maximal-dissipative part, and the bounded remainder, with

        A_z = A_d + P         (exactly, by construction)
        A_z = T A_u T^{-1}    (operator identity, consistent weighted masses)
    """
    n = ops.n
    M, K, B1, Wg = ops.M, ops.K, ops.B1, ops.Wgamma
    b, tau = params.b, params.tau
    m = params.cb
    S_z = _block3([
        [-m * M, M, None],
        [None, None, M],
        [-(m * m / tau) * Wg, (m / tau) * Wg - (b / tau) * K,
         -(1.0 / tau) * Wg - (b / tau) * B1],
    ], n)
    S_d = _block3([
        [-m * M, None, None],
        [None, None, M],
        [None, -(b / tau) * K, -M - (b / tau) * B1],
    ], n)
    S_p = (S_z - S_d).tocsr()
    Mb = sp.block_diag([M, M, M], format="csc")
    A_z = BlockOperator("generator_z", S_z, Mb, n)
    A_d = BlockOperator("generator_z_dissipative", S_d, Mb.copy(), n)
    P = BlockOperator("generator_z_remainder", S_p, Mb.copy(), n)
    return A_z, A_d, P


def h_inner(ops, params, xi, phi):
    """Discrete phase-space inner product:
    (xi1, phi1)_K + (b/tau)(xi2, phi2)_K + (xi3, phi3)_M."""
    n = ops.n
    x1, x2, x3 = xi[:n], xi[n:2 * n], xi[2 * n:]
    p1, p2, p3 = phi[:n], phi[n:2 * n], phi[2 * n:]
    return (x1 @ (ops.K @ p1)
            + (params.b / params.tau) * (x2 @ (ops.K @ p2))
            + x3 @ (ops.M @ p3))


def h_norm_sq_state(ops, params, u, ut, utt):
    """||(u, u_t, u_tt)||^2 in the discrete phase-space norm."""
    return (u @ (ops.K @ u)
            + (params.b / params.tau) * (ut @ (ops.K @ ut))
            + utt @ (ops.M @ utt))


def export_triplets(matrix, path, name):
    """Plain-text COO dump for debugging."""
    coo = matrix.tocoo()
    with open(path, "w") as fh:
        fh.write(f"# {name} shape={coo.shape[0]}x{coo.shape[1]} nnz={coo.nnz}\n")
        for i, j, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{i} {j} {v:.17g}\n")
