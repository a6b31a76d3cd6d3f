import numpy as np
import pytest
import scipy.sparse as sp

import jmgtlab as jl
from jmgtlab.assembly import (build_transform_M, transform_inverse, h_inner,
                              _weighted_mass)
from jmgtlab.errors import ParameterError
from jmgtlab.geometry import GAMMA1
from jmgtlab.spectral import spectral_distance


class TestPhysicalParams:
    def test_b_and_gamma_derived(self, interval_setup):
        mesh, part, params, _ = interval_setup
        assert params.b == params.delta + params.tau * params.c ** 2
        assert np.allclose(params.gamma,
                           params.alpha - params.tau * params.c ** 2 / params.b)

    def test_critical_spec_pins_gamma(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        part = jl.partition_boundary(mesh, "endpoint0")
        p = jl.PhysicalParams.build(mesh, part, alpha="critical")
        assert np.max(np.abs(p.gamma)) == 0.0
        p2 = jl.PhysicalParams.build(mesh, part, alpha="critical+0.3")
        assert np.allclose(p2.gamma, 0.3)

    def test_kappa_validation(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        part = jl.partition_boundary(mesh, "endpoint0")
        with pytest.raises(ParameterError):
            jl.PhysicalParams.build(mesh, part, kappa0=0.0)
        with pytest.raises(ParameterError):
            jl.PhysicalParams.build(mesh, part, kappa1=0.0)
        # conservative runs opt in explicitly
        p = jl.PhysicalParams.build(mesh, part, kappa1=0.0, allow_undamped=True)
        assert np.all(p.kappa1 == 0.0)

    def test_positivity_validation(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        part = jl.partition_boundary(mesh, "endpoint0")
        with pytest.raises(ParameterError):
            jl.PhysicalParams.build(mesh, part, tau=-1.0)
        with pytest.raises(ParameterError):
            jl.PhysicalParams.build(mesh, part, lam=0.0)


class TestCoreAssembly:
    def test_hand_assembled_interval(self):
        # two P1 cells on [0,1]: 1/h = 2, Robin entry kappa0/lam at node 0
        mesh = jl.build_interval_mesh(1.0, 2)
        part = jl.partition_boundary(mesh, "endpoint0")
        p = jl.PhysicalParams.build(mesh, part, kappa0=1.0, kappa1=1.0)
        ops = jl.assemble_core(mesh, part, p)
        K_expect = np.array([[3.0, -2.0, 0.0], [-2.0, 4.0, -2.0],
                             [0.0, -2.0, 2.0]])
        assert np.allclose(ops.K.toarray(), K_expect, atol=1e-14)
        assert abs(ops.M.sum() - 1.0) < 1e-14

    def test_symmetry_and_definiteness(self, rect_setup):
        _, _, params, ops = rect_setup
        for mat in (ops.M, ops.K):
            d = mat - mat.T
            assert abs(d).max() <= 1e-13 * abs(mat).max()
        assert np.all(np.linalg.eigvalsh(ops.K.toarray()) > 0)
        evals = np.linalg.eigvalsh(ops.B1.toarray())
        assert evals.min() > -1e-14

    def test_b1_supported_on_gamma1_nodes(self, rect_setup):
        _, part, _, ops = rect_setup
        g1 = set(part.nodes_of(GAMMA1))
        coo = ops.B1.tocoo()
        live = set(coo.row[coo.data != 0]) | set(coo.col[coo.data != 0])
        assert live <= g1

    def test_weighted_mass_linearity(self, interval_setup):
        mesh, _, params, ops = interval_setup
        # W(alpha) - W(gamma) = (tau c^2 / b) M exactly
        diff = ops.Walpha - ops.Wgamma \
            - (params.tau * params.c ** 2 / params.b) * ops.M
        assert abs(diff).max() < 1e-15
        # constant weight reproduces the plain mass matrix
        Wc = _weighted_mass(mesh, np.full(mesh.n_nodes, 3.5))
        assert abs(Wc - 3.5 * ops.M).max() < 1e-14

    def test_kappa0_zero_rejected(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        part = jl.partition_boundary(mesh, "endpoint0")
        with pytest.raises(ParameterError):
            jl.PhysicalParams.build(mesh, part, kappa0=0.0)


class TestNeumannMap:
    def test_zero_data(self, interval_setup):
        _, _, _, ops = interval_setup
        psi = jl.solve_neumann_map(ops, 0.0)
        assert np.allclose(psi, 0.0)

    def test_affine_solution_exact(self):
        # kappa0 = lam = 1, point flux g at x=1: continuous solution g(1+x)
        mesh = jl.build_interval_mesh(1.0, 7)
        part = jl.partition_boundary(mesh, "endpoint0")
        p = jl.PhysicalParams.build(mesh, part, kappa0=1.0, kappa1=1.0)
        ops = jl.assemble_core(mesh, part, p)
        g = 1.7
        psi = jl.solve_neumann_map(ops, g)
        exact = g * (1.0 + mesh.nodes[:, 0])
        assert np.allclose(psi, exact, atol=1e-12)

    def test_adjoint_identity(self, rect_setup, rng):
        _, part, params, ops = rect_setup
        nf = len(part.gamma1_facets)
        for _ in range(50):
            phi = rng.standard_normal(nf)
            xi = rng.standard_normal(ops.n)
            psi = jl.solve_neumann_map(ops, phi)
            lhs = (ops.K @ psi) @ xi
            rhs = ops.trace_quadrature_pairing(GAMMA1, phi, xi)
            assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), abs(rhs), 1.0)


class TestTransform:
    def test_action_example(self):
        # c^2/b = 0.5 sends (1, 0, 0) per node to (1, 0.5, 0)
        mesh = jl.build_interval_mesh(1.0, 3)
        part = jl.partition_boundary(mesh, "endpoint0")
        p = jl.PhysicalParams.build(mesh, part, tau=1.0, c=1.0, delta=1.0)
        assert p.cb == 0.5
        T = build_transform_M(p, mesh.n_nodes)
        n = mesh.n_nodes
        v = np.zeros(3 * n)
        v[:n] = 1.0
        out = T.apply(v)
        assert np.allclose(out[:n], 1.0)
        assert np.allclose(out[n:2 * n], 0.5)
        assert np.allclose(out[2 * n:], 0.0)

    def test_inverse_roundtrip(self, interval_setup, rng):
        _, _, params, ops = interval_setup
        T = build_transform_M(params, ops.n)
        Ti = transform_inverse(params, ops.n)
        v = rng.standard_normal(3 * ops.n)
        assert np.max(np.abs(T.apply(Ti.apply(v)) - v)) < 1e-14

    def test_unit_determinant(self, interval_setup):
        _, _, params, ops = interval_setup
        T = build_transform_M(params, ops.n)
        assert abs(np.linalg.det(T.scalar_part) - 1.0) < 1e-15


class TestGeneratorU:
    def test_companion_rows(self, interval_setup, rng):
        _, _, params, ops = interval_setup
        gen = jl.build_generator_u(ops, params)
        n = ops.n
        u = rng.standard_normal(n)
        # (u, 0, 0): third block is -(c^2/tau) M^{-1} K u
        out = gen.apply(np.concatenate([u, np.zeros(2 * n)]))
        expect = -(params.c ** 2 / params.tau) * ops.M_solve(ops.K @ u)
        assert np.allclose(out[:n], 0.0)
        assert np.allclose(out[n:2 * n], 0.0)
        assert np.allclose(out[2 * n:], expect, atol=1e-11)
        # (0, v, 0): first block is v
        v = rng.standard_normal(n)
        out = gen.apply(np.concatenate([np.zeros(n), v, np.zeros(n)]))
        assert np.allclose(out[:n], v)

    def test_two_cell_dense_oracle(self):
        """Independent dense assembly of the 9x9 generator from the weak form."""
        mesh = jl.build_interval_mesh(1.0, 2)
        part = jl.partition_boundary(mesh, "endpoint0")
        p = jl.PhysicalParams.build(mesh, part, tau=1.5, c=1.2, delta=0.8,
                                    alpha=0.9, kappa0=1.3, kappa1=0.7)
        ops = jl.assemble_core(mesh, part, p)
        gen = jl.build_generator_u(ops, p)

        h = 0.5
        M = h / 6.0 * np.array([[2, 1, 0], [1, 4, 1], [0, 1, 2]], dtype=float)
        Kg = 1.0 / h * np.array([[1, -1, 0], [-1, 2, -1], [0, -1, 1]],
                                dtype=float)
        K = Kg.copy()
        K[0, 0] += p.kappa0[0] / p.lam          # Robin at x=0
        B1 = np.zeros((3, 3))
        B1[2, 2] = p.kappa1[0]                  # absorbing endpoint at x=1
        Wa = 0.9 * M                            # constant alpha
        b, c2, tau = p.b, p.c ** 2, p.tau
        Minv = np.linalg.inv(M)
        A = np.zeros((9, 9))
        A[0:3, 3:6] = np.eye(3)
        A[3:6, 6:9] = np.eye(3)
        A[6:9, 0:3] = -(c2 / tau) * Minv @ K
        A[6:9, 3:6] = -Minv @ (b * K + c2 * B1) / tau
        A[6:9, 6:9] = -Minv @ (b * B1 + Wa) / tau
        assert np.allclose(gen.dense(), A, atol=1e-12)


class TestGeneratorZ:
    def test_similarity_on_random_vectors(self, interval_setup, rng):
        _, _, params, ops = interval_setup
        Au = jl.build_generator_u(ops, params)
        Az, _, _ = jl.build_generator_z(ops, params)
        T = build_transform_M(params, ops.n)
        Ti = transform_inverse(params, ops.n)
        for _ in range(20):
            v = rng.standard_normal(3 * ops.n)
            lhs = Az.apply(v)
            rhs = T.apply(Au.apply(Ti.apply(v)))
            assert (np.linalg.norm(lhs - rhs)
                    <= 1e-10 * max(np.linalg.norm(lhs), 1.0))

    def test_splitting_exact(self, interval_setup):
        _, _, params, ops = interval_setup
        Az, Ad, P = jl.build_generator_z(ops, params)
        assert abs(Az.S - (Ad.S + P.S)).max() < 1e-14

    def test_remainder_blocks_critical_case(self):
        # gamma = 0 leaves only the two identity couplings of the remainder:
        # the (1,2) companion entry and the (3,3) entry
        mesh = jl.build_interval_mesh(1.0, 6)
        part = jl.partition_boundary(mesh, "endpoint0")
        p = jl.PhysicalParams.build(mesh, part, alpha="critical")
        ops = jl.assemble_core(mesh, part, p)
        _, _, P = jl.build_generator_z(ops, p)
        blocks = P.blocks()
        for i in range(3):
            for j in range(3):
                blk = blocks[i][j]
                if (i, j) in ((0, 1), (2, 2)):
                    assert np.allclose(blk, ops.M.toarray(), atol=1e-14)
                else:
                    assert np.max(np.abs(blk)) < 1e-14

    def test_spectrum_similarity(self, interval_setup):
        _, _, params, ops = interval_setup
        su = jl.spectrum(jl.build_generator_u(ops, params))
        sz = jl.spectrum(jl.build_generator_z(ops, params)[0])
        assert spectral_distance(su, sz) <= 1e-8


class TestDissipativityAndResolvent:
    def test_dissipativity_quantitative(self, interval_setup, rng):
        _, _, params, ops = interval_setup
        _, Ad, _ = jl.build_generator_z(ops, params)
        n = ops.n
        m = params.cb
        for _ in range(30):
            xi = rng.standard_normal(3 * n)
            form = h_inner(ops, params, Ad.apply(xi), xi)
            x1, x3 = xi[:n], xi[2 * n:]
            closed = (-m * (x1 @ (ops.K @ x1)) - x3 @ (ops.M @ x3)
                      - (params.b / params.tau) * (x3 @ (ops.B1 @ x3)))
            assert form <= 1e-11 * abs(closed)
            assert abs(form - closed) <= 1e-11 * abs(closed)

    def test_middle_component_form_vanishes(self, interval_setup, rng):
        _, _, params, ops = interval_setup
        _, Ad, _ = jl.build_generator_z(ops, params)
        n = ops.n
        xi = np.zeros(3 * n)
        xi[n:2 * n] = rng.standard_normal(n)
        form = h_inner(ops, params, Ad.apply(xi), xi)
        assert abs(form) < 1e-12

    def test_interior_state_sees_no_boundary_damping(self, interval_setup, rng):
        _, part, params, ops = interval_setup
        _, Ad, _ = jl.build_generator_z(ops, params)
        n = ops.n
        xi = np.zeros(3 * n)
        x3 = rng.standard_normal(n)
        x3[-1] = 0.0  # kill the absorbing endpoint value
        xi[2 * n:] = x3
        form = h_inner(ops, params, Ad.apply(xi), xi)
        closed = -(x3 @ (ops.M @ x3))
        assert abs(form - closed) <= 1e-12 * abs(closed)

    def test_resolvent_first_component(self, interval_setup, rng):
        _, _, params, ops = interval_setup
        _, Ad, _ = jl.build_generator_z(ops, params)
        n = ops.n
        s = 1.0
        f = rng.standard_normal(n)
        L = np.concatenate([f, np.zeros(2 * n)])
        psi = Ad.solve_shifted(s, L)
        expect = params.b * f / (params.b * s + params.c ** 2)
        assert np.allclose(psi[:n], expect, atol=1e-11)
        assert np.allclose(psi[n:], 0.0, atol=1e-11)

    def test_resolvent_elimination_vs_direct(self, interval_setup):
        _, _, params, ops = interval_setup
        _, Ad, _ = jl.build_generator_z(ops, params)
        for s in (0.5, 1.0, 2.0):
            rep = jl.resolvent_check(Ad, ops, params, s=s)
            assert rep.discrepancy_rel <= 1e-10
            assert rep.ks_form_min > 0
