import numpy as np
import pytest

import jmgtlab as jl
from jmgtlab.errors import ConfigurationError, FieldSynthesisFailed
from jmgtlab.geometry import GAMMA0, GAMMA1


class TestIntervalMesh:
    def test_nodes_and_facets(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        assert np.allclose(mesh.nodes[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
        assert mesh.n_facets == 2
        assert np.allclose(mesh.facet_normal.ravel(), [-1.0, 1.0])

    def test_two_cells(self):
        mesh = jl.build_interval_mesh(2.0, 2)
        assert mesh.n_nodes == 3
        assert mesh.facet_normal[0, 0] == -1.0
        assert mesh.facet_normal[1, 0] == 1.0

    def test_rejects_single_cell(self):
        with pytest.raises(ConfigurationError):
            jl.build_interval_mesh(1.0, 1)
        with pytest.raises(ConfigurationError):
            jl.build_interval_mesh(-1.0, 4)


class TestRectMesh:
    def test_counts(self):
        mesh = jl.build_rect_mesh(1, 1, 2, 2)
        assert mesh.n_nodes == 9
        assert mesh.n_cells == 8
        assert mesh.n_facets == 8

    def test_perimeter(self):
        mesh = jl.build_rect_mesh(1, 1, 2, 2)
        assert abs(mesh.facet_measure.sum() - 4.0) < 1e-10

    def test_uniform_areas(self):
        mesh = jl.build_rect_mesh(1, 2, 4, 8)
        assert np.allclose(mesh.cell_volumes(), 0.25 * 0.25 / 2)

    def test_normals_unit_and_outward(self):
        mesh = jl.build_rect_mesh(2.0, 1.0, 3, 4)
        assert np.allclose(np.linalg.norm(mesh.facet_normal, axis=1), 1.0,
                           atol=1e-12)
        # outward: midpoint + eps*normal leaves the box
        mids = mesh.nodes[mesh.facet_nodes].mean(axis=1)
        outside = mids + 1e-6 * mesh.facet_normal
        inside_box = ((outside[:, 0] >= 0) & (outside[:, 0] <= 2.0)
                      & (outside[:, 1] >= 0) & (outside[:, 1] <= 1.0))
        assert not inside_box.any()

    def test_facets_have_one_owner_cell(self):
        mesh = jl.build_rect_mesh(1, 1, 3, 3)
        for f in range(mesh.n_facets):
            cell_nodes = set(mesh.cells[mesh.facet_cell[f]])
            assert set(mesh.facet_nodes[f]) <= cell_nodes


class TestPartition:
    def test_left_side(self):
        mesh = jl.build_rect_mesh(1, 1, 2, 3)
        part = jl.partition_boundary(mesh, "left")
        assert len(part.gamma0_facets) == 3
        assert len(part.gamma1_facets) == mesh.n_facets - 3
        labels = {mesh.facet_label[f] for f in part.gamma0_facets}
        assert labels == {"left"}

    def test_interval_endpoints(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        part = jl.partition_boundary(mesh, "endpoint0")
        assert list(part.gamma0_facets) == [0]
        assert list(part.gamma1_facets) == [1]

    def test_total_and_disjoint(self):
        mesh = jl.build_rect_mesh(1, 1, 3, 3)
        part = jl.partition_boundary(mesh, "left,bottom")
        assert len(part.gamma0_facets) + len(part.gamma1_facets) == mesh.n_facets
        assert not set(part.gamma0_facets) & set(part.gamma1_facets)

    def test_empty_selection_rejected(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        with pytest.raises(ConfigurationError, match="nonempty"):
            jl.partition_boundary(mesh, "")
        jl.partition_boundary(mesh, "", allow_empty_gamma0=True)  # flagged path

    def test_unknown_selector(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        with pytest.raises(ConfigurationError, match="matches no boundary"):
            jl.partition_boundary(mesh, "west")


class TestStarShaped:
    def test_square_pass(self):
        mesh = jl.build_rect_mesh(1, 1, 4, 4)
        part = jl.partition_boundary(mesh, "left")
        rep = jl.check_star_shaped(part, [-1.0, 0.5])
        assert rep.passed
        assert abs(rep.max_dot - (-1.0)) < 1e-12

    def test_square_fail(self):
        mesh = jl.build_rect_mesh(1, 1, 4, 4)
        part = jl.partition_boundary(mesh, "left")
        rep = jl.check_star_shaped(part, [2.0, 0.5])
        assert not rep.passed
        assert abs(rep.max_dot - 2.0) < 1e-12

    def test_interval_fail(self):
        mesh = jl.build_interval_mesh(1.0, 4)
        part = jl.partition_boundary(mesh, "endpoint0")
        rep = jl.check_star_shaped(part, [0.5])
        assert not rep.passed
        assert abs(rep.max_dot - 0.5) < 1e-12

    def test_translation_invariance(self):
        mesh = jl.build_rect_mesh(1, 1, 4, 4)
        part = jl.partition_boundary(mesh, "left")
        base = jl.check_star_shaped(part, [-0.7, 0.3]).max_dot
        shift = np.array([3.1, -2.4])
        mesh2 = jl.build_rect_mesh(1, 1, 4, 4)
        mesh2.nodes = mesh2.nodes + shift
        part2 = jl.partition_boundary(mesh2, "left")
        moved = jl.check_star_shaped(part2, np.array([-0.7, 0.3]) + shift).max_dot
        assert abs(base - moved) < 1e-12


class TestMultiplierField:
    def test_square_analytic(self):
        mesh = jl.build_rect_mesh(1, 1, 6, 6)
        part = jl.partition_boundary(mesh, "left")
        fld = jl.synthesize_multiplier_field(mesh, part, 1, 0.5)
        assert fld.kind == "analytic"
        assert abs(fld.delta_h - 1.0) < 1e-12
        assert fld.bd_residual <= 1e-10
        pt = np.array([[0.3, 0.8]])
        assert np.allclose(fld(pt), [[0.3, 0.3]])  # (x, y - 0.5)
        assert np.allclose(fld.jacobian(pt)[0], np.eye(2))

    def test_interval_analytic(self):
        mesh = jl.build_interval_mesh(1.0, 8)
        part = jl.partition_boundary(mesh, "endpoint0")
        fld = jl.synthesize_multiplier_field(mesh, part, 1, 0.5)
        assert abs(fld.delta_h - 1.0) < 1e-12
        assert fld.bd_residual == 0.0
        assert np.allclose(fld(np.array([[0.4]])), [[0.4]])

    def test_refinement_keeps_analytic_certificates(self):
        for n in (4, 8, 16):
            mesh = jl.build_rect_mesh(1, 1, n, n)
            part = jl.partition_boundary(mesh, "left")
            fld = jl.synthesize_multiplier_field(mesh, part, 1, 0.5)
            assert abs(fld.delta_h - 1.0) < 1e-12
            assert fld.bd_residual < 1e-12

    def test_corner_synthesis_with_fine_grid_oracle(self):
        mesh = jl.build_rect_mesh(1, 1, 8, 8)
        part = jl.partition_boundary(mesh, "left,bottom")
        fld = jl.synthesize_multiplier_field(mesh, part, 2, 0.5)
        assert fld.kind == "synthesized"
        assert fld.delta_h > 0
        assert fld.bd_residual <= 1e-10
        # oracle: dense minimum-eigenvalue sweep on a 10x finer grid
        xs = np.linspace(0, 1, 81)
        X, Y = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([X.ravel(), Y.ravel()], axis=1)
        lam = fld.min_sym_jacobian_eig(pts)
        assert lam.min() >= fld.delta_h - 1e-8

    def test_opposite_sides_infeasible(self):
        mesh = jl.build_rect_mesh(1, 1, 8, 8)
        part = jl.partition_boundary(mesh, "left,right")
        with pytest.raises(FieldSynthesisFailed) as exc:
            jl.synthesize_multiplier_field(mesh, part, 2, 0.5)
        assert exc.value.best_delta is not None
        assert exc.value.best_delta <= 1e-8

    def test_verify_rejects_shear_field(self):
        # h = (y, 0): sym J = [[0, .5], [.5, 0]], minimum eigenvalue -1/2
        mesh = jl.build_rect_mesh(1, 1, 6, 6)
        part = jl.partition_boundary(mesh, "left")
        from jmgtlab.geometry import MultiplierField, _poly_exponents
        exps = _poly_exponents(2, 1)
        coeffs = np.zeros((2, len(exps)))
        coeffs[0, exps.index((0, 1))] = 1.0
        fld = MultiplierField(2, 1, coeffs, delta_h=0.5, bd_residual=0.0)
        rep = jl.verify_field(fld, mesh, part)
        assert not rep.passed
        assert abs(rep.lam_min - (-0.5)) < 1e-12

    def test_verify_matches_stored_certificates(self):
        mesh = jl.build_rect_mesh(1, 1, 8, 8)
        part = jl.partition_boundary(mesh, "left,bottom")
        fld = jl.synthesize_multiplier_field(mesh, part, 2, 0.5)
        rep = jl.verify_field(fld, mesh, part)
        assert rep.passed
        assert rep.lam_min >= fld.delta_h - 1e-8
