"""Meshes, boundary partitions and multiplier vector fields.

Supports uniform interval meshes (d=1) and structured triangulations of
rectangles (d=2).  Boundary facets carry unit outward normals and exact
quadrature rules so that boundary integrals of the discretization are exact
for the piecewise-polynomial data used elsewhere.

The multiplier field h must satisfy h.nu = 0 on the undissipated boundary
part and have a uniformly positive-definite symmetric Jacobian; for flat
undissipated sides the field is analytic (affine), otherwise it is
synthesized as a polynomial via a small conic program and certified by
dense sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FieldSynthesisFailed

GAMMA0 = 0
GAMMA1 = 1

# Dunavant degree-4 rule on the reference triangle (barycentric, weights sum to 1)
_TRI_QP = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)
_TRI_QW = np.array(
    [
        0.223381589678011,
        0.223381589678011,
        0.223381589678011,
        0.109951743655322,
        0.109951743655322,
        0.109951743655322,
    ]
)

# 3-point Gauss-Legendre on [0,1]
_GL3_X = np.array([0.5 - np.sqrt(15) / 10, 0.5, 0.5 + np.sqrt(15) / 10])
_GL3_W = np.array([5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0])


@dataclass
class Mesh:
    """Simplicial mesh with tagged boundary facets.

    nodes: (N, dim) coordinates; cells: (nc, dim+1) node indices.
    Boundary facets are endpoints (1D) or edges (2D); each one knows its
    owning cell, unit outward normal, measure and side label.
    """

    dim: int
    nodes: np.ndarray
    cells: np.ndarray
    facet_nodes: np.ndarray      # (nf, dim) node indices per boundary facet
    facet_cell: np.ndarray       # (nf,) owning cell index
    facet_normal: np.ndarray     # (nf, dim) unit outward normals
    facet_measure: np.ndarray    # (nf,) length (2D) or 1 (1D counting measure)
    facet_label: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_cells(self):
        return self.cells.shape[0]

    @property
    def n_facets(self):
        return self.facet_nodes.shape[0]

    def cell_volumes(self):
        if self.dim == 1:
            a = self.nodes[self.cells[:, 0], 0]
            b = self.nodes[self.cells[:, 1], 0]
            return b - a
        p = self.nodes[self.cells]  # (nc, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def cell_basis_gradients(self):
        """Gradients of the P1 basis per cell, shape (nc, dim+1, dim)."""
        if self.dim == 1:
            h = self.cell_volumes()
            g = np.empty((self.n_cells, 2, 1))
            g[:, 0, 0] = -1.0 / h
            g[:, 1, 0] = 1.0 / h
            return g
        p = self.nodes[self.cells]
        vol2 = 2.0 * self.cell_volumes()
        g = np.empty((self.n_cells, 3, 2))
        for i in range(3):
            a = p[:, (i + 1) % 3]
            b = p[:, (i + 2) % 3]
            # gradient of barycentric coordinate i: rotate opposite edge
            g[:, i, 0] = (a[:, 1] - b[:, 1]) / vol2
            g[:, i, 1] = (b[:, 0] - a[:, 0]) / vol2
        return g

    def cell_quadrature(self):
        """Physical quadrature: points (nc, nq, dim), weights (nc, nq), plus
        the barycentric table (nq, dim+1) for P1 interpolation."""
        vols = self.cell_volumes()
        if self.dim == 1:
            lam = np.stack([1.0 - _GL3_X, _GL3_X], axis=1)  # (nq, 2)
        else:
            lam = _TRI_QP  # (nq, 3)
        pts = np.einsum("qv,cvd->cqd", lam, self.nodes[self.cells])
        if self.dim == 1:
            w = np.outer(vols, _GL3_W)
        else:
            w = np.outer(vols, _TRI_QW)
        return pts, w, lam

    def facet_quadrature(self):
        """Boundary quadrature: points (nf, nq, dim), weights (nf, nq),
        barycentric table (nq, dim) over the facet nodes."""
        if self.dim == 1:
            pts = self.nodes[self.facet_nodes[:, 0]][:, None, :]
            w = np.ones((self.n_facets, 1))
            lam = np.ones((1, 1))
            return pts, w, lam
        lam = np.stack([1.0 - _GL3_X, _GL3_X], axis=1)  # (nq, 2)
        p = self.nodes[self.facet_nodes]  # (nf, 2, 2)
        pts = np.einsum("qv,fvd->fqd", lam, p)
        w = np.outer(self.facet_measure, _GL3_W)
        return pts, w, lam

    def bounding_box(self):
        return self.nodes.min(axis=0), self.nodes.max(axis=0)

    def validate(self):
        vols = self.cell_volumes()
        if np.any(vols <= 0):
            raise ConfigurationError("mesh has non-positive cell measures")
        norms = np.linalg.norm(self.facet_normal, axis=1)
        if np.max(np.abs(norms - 1.0)) > 1e-12:
            raise ConfigurationError("boundary facet normals are not unit")
        return self


def build_interval_mesh(length, n_cells):
    """Uniform mesh of [0, length] with endpoint facets."""
    if not length > 0:
        raise ConfigurationError(f"length must be positive, got {length}")
    if n_cells < 2:
        raise ConfigurationError(f"n_cells must be >= 2, got {n_cells}")
    n_cells = int(n_cells)
    x = np.linspace(0.0, float(length), n_cells + 1)
    nodes = x[:, None]
    cells = np.stack([np.arange(n_cells), np.arange(1, n_cells + 1)], axis=1)
    facet_nodes = np.array([[0], [n_cells]])
    facet_cell = np.array([0, n_cells - 1])
    facet_normal = np.array([[-1.0], [1.0]])
    facet_measure = np.array([1.0, 1.0])
    labels = ["endpoint0", "endpoint1"]
    return Mesh(1, nodes, cells, facet_nodes, facet_cell, facet_normal,
                facet_measure, labels).validate()


def build_rect_mesh(lx, ly, nx, ny):
    """Structured triangulation of [0,lx] x [0,ly]; each grid cell split in two."""
    if not (lx > 0 and ly > 0):
        raise ConfigurationError(f"rectangle sides must be positive, got {lx}, {ly}")
    if nx < 2 or ny < 2:
        raise ConfigurationError(f"nx, ny must be >= 2, got {nx}, {ny}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, float(lx), nx + 1)
    ys = np.linspace(0.0, float(ly), ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    def nid(i, j):
        return i * (ny + 1) + j

    cells = []
    cell_of_quad = {}
    for i in range(nx):
        for j in range(ny):
            v00, v10 = nid(i, j), nid(i + 1, j)
            v01, v11 = nid(i, j + 1), nid(i + 1, j + 1)
            cell_of_quad[(i, j)] = len(cells)
            cells.append((v00, v10, v11))   # lower-right triangle
            cells.append((v00, v11, v01))   # upper-left triangle
    cells = np.array(cells, dtype=int)

    fn, fc, fnu, fm, labels = [], [], [], [], []
    hx, hy = lx / nx, ly / ny
    for j in range(ny):  # left (x=0): edge of upper-left triangle of quad (0, j)
        fn.append((nid(0, j), nid(0, j + 1)))
        fc.append(cell_of_quad[(0, j)] + 1)
        fnu.append((-1.0, 0.0)); fm.append(hy); labels.append("left")
    for j in range(ny):  # right (x=lx): lower-right triangle of quad (nx-1, j)
        fn.append((nid(nx, j), nid(nx, j + 1)))
        fc.append(cell_of_quad[(nx - 1, j)])
        fnu.append((1.0, 0.0)); fm.append(hy); labels.append("right")
    for i in range(nx):  # bottom (y=0): lower-right triangle of quad (i, 0)
        fn.append((nid(i, 0), nid(i + 1, 0)))
        fc.append(cell_of_quad[(i, 0)])
        fnu.append((0.0, -1.0)); fm.append(hx); labels.append("bottom")
    for i in range(nx):  # top (y=ly): upper-left triangle of quad (i, ny-1)
        fn.append((nid(i, ny), nid(i + 1, ny)))
        fc.append(cell_of_quad[(i, ny - 1)] + 1)
        fnu.append((0.0, 1.0)); fm.append(hx); labels.append("top")

    return Mesh(2, nodes, cells, np.array(fn), np.array(fc), np.array(fnu),
                np.array(fm), labels).validate()


@dataclass
class BoundaryPartition:
    """Total, disjoint tagging of boundary facets into GAMMA0 / GAMMA1."""

    mesh: Mesh
    tags: np.ndarray  # (nf,) of GAMMA0/GAMMA1

    @property
    def gamma0_facets(self):
        return np.flatnonzero(self.tags == GAMMA0)

    @property
    def gamma1_facets(self):
        return np.flatnonzero(self.tags == GAMMA1)

    def nodes_of(self, tag):
        sel = self.mesh.facet_nodes[self.tags == tag]
        return np.unique(sel.ravel())


def partition_boundary(mesh, gamma0_spec, allow_empty_gamma0=False):
    """Tag facets whose side label appears in the comma-separated gamma0 spec;
    the rest become GAMMA1.  An empty GAMMA0 set is rejected unless the
    all-dissipative scenario flag is set explicitly."""
    wanted = [s.strip() for s in str(gamma0_spec).split(",") if s.strip()]
    known = set(mesh.facet_label)
    for s in wanted:
        if s not in known:
            raise ConfigurationError(
                f"gamma0 selector {s!r} matches no boundary side of this mesh "
                f"(known: {sorted(known)})")
    tags = np.full(mesh.n_facets, GAMMA1, dtype=int)
    for k, lab in enumerate(mesh.facet_label):
        if lab in wanted:
            tags[k] = GAMMA0
    if not np.any(tags == GAMMA0) and not allow_empty_gamma0:
        raise ConfigurationError(
            "gamma0 selection is empty: the stabilization theory requires a "
            "nonempty undissipated boundary part (use the all-dissipative "
            "scenario flag to run with the entire boundary absorbing)")
    return BoundaryPartition(mesh, tags)


@dataclass
class StarShapedReport:
    max_dot: float
    passed: bool
    x0: np.ndarray
    per_facet: np.ndarray


def check_star_shaped(partition, x0, tol=1e-12):
    """Evaluate (x - x0).nu at GAMMA0 facet quadrature points; pass iff <= tol."""
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if not np.all(np.isfinite(x0)):
        raise ConfigurationError("x0 must be finite")
    mesh = partition.mesh
    pts, _, _ = mesh.facet_quadrature()
    g0 = partition.gamma0_facets
    per_facet = np.empty(len(g0))
    for row, f in enumerate(g0):
        dots = (pts[f] - x0[None, :]) @ mesh.facet_normal[f]
        per_facet[row] = dots.max()
    max_dot = float(per_facet.max()) if len(g0) else -np.inf
    return StarShapedReport(max_dot, max_dot <= tol, x0, per_facet)


# ---------------------------------------------------------------------------
# multiplier field: polynomial representation with sampled certificates
# ---------------------------------------------------------------------------

def _poly_exponents(dim, degree):
    if dim == 1:
        return [(p,) for p in range(degree + 1)]
    return [(p, q) for p in range(degree + 1) for q in range(degree + 1 - p)]


@dataclass
class MultiplierField:
    """Vector field h as tensor polynomials with sampled certificates.

    coeffs has shape (dim, n_basis) over the monomial list for `degree`.
    delta_h is the certified lower bound of min eig(sym J(h)) over interior
    samples; bd_residual the certified max |h.nu| over GAMMA0 samples.
    """

    dim: int
    degree: int
    coeffs: np.ndarray
    delta_h: float = np.nan
    bd_residual: float = np.nan
    kind: str = "analytic"

    def _exps(self):
        return _poly_exponents(self.dim, self.degree)

    def __call__(self, pts):
        """Evaluate h at pts (m, dim) -> (m, dim)."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        V = _monomials(pts, self._exps())
        return V @ self.coeffs.T

    def jacobian(self, pts):
        """J(h) at pts -> (m, dim, dim), J_ij = d h_i / d x_j."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        exps = self._exps()
        out = np.zeros((pts.shape[0], self.dim, self.dim))
        for j in range(self.dim):
            D = _monomials_dx(pts, exps, j)
            out[:, :, j] = D @ self.coeffs.T
        return out

    def divergence(self, pts):
        J = self.jacobian(pts)
        return np.trace(J, axis1=1, axis2=2)

    def grad_divergence(self, pts):
        """Gradient of div h -> (m, dim); needs degree >= 2 terms, exact for polys."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        exps = self._exps()
        out = np.zeros((pts.shape[0], self.dim))
        for j in range(self.dim):  # d/dx_j of sum_i d h_i / d x_i
            for i in range(self.dim):
                D2 = _monomials_dx2(pts, exps, i, j)
                out[:, j] += D2 @ self.coeffs[i]
        return out

    def min_sym_jacobian_eig(self, pts):
        J = self.jacobian(pts)
        S = 0.5 * (J + np.transpose(J, (0, 2, 1)))
        if self.dim == 1:
            return S[:, 0, 0]
        tr = S[:, 0, 0] + S[:, 1, 1]
        disc = np.sqrt((S[:, 0, 0] - S[:, 1, 1]) ** 2 + 4.0 * S[:, 0, 1] ** 2)
        return 0.5 * (tr - disc)


def _monomials(pts, exps):
    cols = []
    for e in exps:
        v = np.ones(pts.shape[0])
        for d, p in enumerate(e):
            if p:
                v = v * pts[:, d] ** p
        cols.append(v)
    return np.stack(cols, axis=1)


def _monomials_dx(pts, exps, j):
    cols = []
    for e in exps:
        if e[j] == 0:
            cols.append(np.zeros(pts.shape[0]))
            continue
        v = np.full(pts.shape[0], float(e[j]))
        for d, p in enumerate(e):
            pw = p - 1 if d == j else p
            if pw:
                v = v * pts[:, d] ** pw
        cols.append(v)
    return np.stack(cols, axis=1)


def _monomials_dx2(pts, exps, i, j):
    cols = []
    for e in exps:
        ei = list(e)
        coef = ei[i]
        if coef == 0:
            cols.append(np.zeros(pts.shape[0]))
            continue
        ei[i] -= 1
        coef2 = coef * ei[j]
        if coef2 == 0:
            cols.append(np.zeros(pts.shape[0]))
            continue
        ei[j] -= 1
        v = np.full(pts.shape[0], float(coef2))
        for d, p in enumerate(ei):
            if p:
                v = v * pts[:, d] ** p
        cols.append(v)
    return np.stack(cols, axis=1)


def _interior_samples(mesh, refine):
    """Tensor grid of interior sample points, `refine` times the base resolution."""
    lo, hi = mesh.bounding_box()
    if mesh.dim == 1:
        n = max(4, (mesh.n_cells) * refine)
        x = np.linspace(lo[0], hi[0], n + 1)
        return x[:, None]
    n = max(4, int(np.sqrt(mesh.n_cells / 2)) * refine)
    x = np.linspace(lo[0], hi[0], n + 1)
    y = np.linspace(lo[1], hi[1], n + 1)
    X, Y = np.meshgrid(x, y, indexing="ij")
    return np.stack([X.ravel(), Y.ravel()], axis=1)


def _gamma0_samples(partition, per_facet):
    """per_facet evenly spaced points on every GAMMA0 facet (with normals)."""
    mesh = partition.mesh
    pts, nus = [], []
    for f in partition.gamma0_facets:
        if mesh.dim == 1:
            pts.append(mesh.nodes[mesh.facet_nodes[f, 0]])
            nus.append(mesh.facet_normal[f])
        else:
            a, b = mesh.nodes[mesh.facet_nodes[f]]
            for s in np.linspace(0.0, 1.0, per_facet):
                pts.append((1 - s) * a + s * b)
                nus.append(mesh.facet_normal[f])
    return np.array(pts), np.array(nus)


def _flat_side_field(mesh, partition):
    """Analytic field when GAMMA0 is a single flat side (or 1D endpoint)."""
    labels = {mesh.facet_label[f] for f in partition.gamma0_facets}
    if len(labels) != 1:
        return None
    side = labels.pop()
    lo, hi = mesh.bounding_box()
    exps = _poly_exponents(mesh.dim, 1)
    coeffs = np.zeros((mesh.dim, len(exps)))
    if mesh.dim == 1:
        # h(x) = x - x_side vanishes on the endpoint, J = 1
        x_side = lo[0] if side == "endpoint0" else hi[0]
        coeffs[0, exps.index((0,))] = -x_side
        coeffs[0, exps.index((1,))] = 1.0
    else:
        cx, cy = 0.5 * (lo + hi)
        i1 = exps.index((0, 0))
        ix, iy = exps.index((1, 0)), exps.index((0, 1))
        coeffs[0, ix] = 1.0
        coeffs[1, iy] = 1.0
        if side in ("left", "right"):
            # h = (x - x_side, y - midheight): tangent to the vertical side
            coeffs[0, i1] = -(lo[0] if side == "left" else hi[0])
            coeffs[1, i1] = -cy
        else:
            coeffs[0, i1] = -cx
            coeffs[1, i1] = -(lo[1] if side == "bottom" else hi[1])
    return MultiplierField(mesh.dim, 1, coeffs, kind="analytic")


def synthesize_multiplier_field(mesh, partition, basis_degree=2, delta_target=0.5):
    """Construct and certify a multiplier field for the given partition.

    Flat single-side GAMMA0 gets the analytic affine field.  Otherwise a
    polynomial field is synthesized: the tangency constraints h.nu = 0 at
    GAMMA0 sample points (4x quadrature density) are eliminated exactly via a
    nullspace basis, and the best uniform lower bound t on min eig(sym J(h))
    over interior samples is maximized subject to a unit coefficient budget.
    The result is rescaled so the certified bound meets delta_target.
    """
    if len(partition.gamma0_facets) == 0:
        raise ConfigurationError("field synthesis needs a nonempty GAMMA0")

    fld = _flat_side_field(mesh, partition)
    if fld is not None:
        return _certify(fld, mesh, partition, refine=4)

    import cvxpy as cp

    exps = _poly_exponents(mesh.dim, basis_degree)
    nb = len(exps)
    dim = mesh.dim

    bpts, bnus = _gamma0_samples(partition, per_facet=4 * 3)  # 4x the 3-pt rule
    V = _monomials(bpts, exps)
    # rows of C: constraint sum_i nu_i * h_i(p) = 0, unknowns = coeffs.ravel()
    C = np.concatenate([bnus[:, i:i + 1] * V for i in range(dim)], axis=1)
    _, sv, Vt = np.linalg.svd(C, full_matrices=True)
    rank = int(np.sum(sv > 1e-10 * max(sv[0], 1.0))) if len(sv) else 0
    Z = Vt[rank:].T  # exact nullspace basis so h.nu = 0 holds to roundoff
    if Z.shape[1] == 0:
        raise FieldSynthesisFailed(
            "tangency constraints leave no free polynomial coefficients",
            best_delta=0.0)

    ipts = _interior_samples(mesh, refine=4)
    theta = cp.Variable(Z.shape[1])
    t = cp.Variable()
    cons = [cp.norm(theta, 2) <= 1.0]
    # sym Jacobian entries are linear in theta
    Dmats = [_monomials_dx(ipts, exps, j) for j in range(dim)]
    if dim == 1:
        Zc = Z  # coeffs = Z @ theta, single component
        a11 = Dmats[0] @ Zc
        cons.append(a11 @ theta >= t)
    else:
        Z1, Z2 = Z[:nb], Z[nb:]
        J11 = Dmats[0] @ Z1
        J12 = Dmats[1] @ Z1
        J21 = Dmats[0] @ Z2
        J22 = Dmats[1] @ Z2
        a = J11 @ theta
        d = J22 @ theta
        bsym = 0.5 * (J12 + J21) @ theta
        # min eig >= t for 2x2 symmetric: ||(2b, a-d)|| <= a + d - 2t
        cons.append(cp.SOC(a + d - 2 * t, cp.vstack([2 * bsym, a - d])))
    prob = cp.Problem(cp.Maximize(t), cons)
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # near-infeasible cases warn; we report them
        prob.solve(solver=cp.CLARABEL)
    if prob.status not in ("optimal", "optimal_inaccurate") or t.value is None:
        raise FieldSynthesisFailed(
            f"field synthesis solver ended with status {prob.status}",
            best_delta=None)
    best = float(t.value)
    if best <= 1e-8:
        raise FieldSynthesisFailed(
            f"no polynomial field of degree {basis_degree} has a positive "
            f"Jacobian bound on this GAMMA0 (best achieved {best:.3e})",
            best_delta=best)
    scale = delta_target / best
    coeffs = (Z @ theta.value).reshape(dim, nb) * scale
    fld = MultiplierField(mesh.dim, basis_degree, coeffs, kind="synthesized")
    fld = _certify(fld, mesh, partition, refine=4)
    if fld.delta_h <= 0:
        raise FieldSynthesisFailed(
            f"synthesized field failed dense certification "
            f"(delta {fld.delta_h:.3e})", best_delta=fld.delta_h)
    return fld


def _certify(fld, mesh, partition, refine):
    ipts = _interior_samples(mesh, refine)
    fld.delta_h = float(np.min(fld.min_sym_jacobian_eig(ipts)))
    bpts, bnus = _gamma0_samples(partition, per_facet=max(4, 3 * refine))
    hv = fld(bpts)
    fld.bd_residual = float(np.max(np.abs(np.sum(hv * bnus, axis=1))))
    return fld


@dataclass
class FieldReport:
    bd_max: float
    lam_min: float
    passed: bool
    bd_margin: float
    delta_margin: float


def verify_field(fld, mesh, partition, refine=10, bd_tol=1e-10, delta_slack=1e-8):
    """Re-certify a field on samples `refine` times denser than synthesis."""
    ipts = _interior_samples(mesh, refine)
    lam_min = float(np.min(fld.min_sym_jacobian_eig(ipts)))
    bpts, bnus = _gamma0_samples(partition, per_facet=max(4, 3 * refine))
    hv = fld(bpts)
    bd_max = float(np.max(np.abs(np.sum(hv * bnus, axis=1))))
    passed = bd_max <= bd_tol and lam_min >= fld.delta_h - delta_slack
    return FieldReport(bd_max, lam_min, passed,
                       bd_tol - bd_max, lam_min - (fld.delta_h - delta_slack))
