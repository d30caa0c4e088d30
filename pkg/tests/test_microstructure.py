import numpy as np
import pytest

import catalog
from convexify import CaratheodoryDecomposition
from errors import (MarginTooSmall, NonConformingInterface, OscillationUnresolvable, UnsupportedDecomposition,
                    ValidationError)
from mesh import build_box_mesh, energy, interpolate, sup_distance
from microstructure import OscillationCell, assemble, build_cell, delta_schedule, partition


def _zero(x):
    return np.zeros(np.shape(x)[:1])


def _pair(points, weights=(0.5, 0.5)):
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    weights = np.asarray(weights, dtype=float)
    return CaratheodoryDecomposition(points, weights, weights @ points, 0.0, 0.0, 0.0)


class TestDeltaSchedule:
    def test_shares_follow_measure(self):
        deltas = delta_schedule([0.5, 0.25, 0.25], 0.1, 1.0)
        assert deltas == pytest.approx([0.05, 0.025, 0.025])
        assert sum(deltas) == pytest.approx(0.1)

    def test_equal_cells_get_equal_shares(self):
        deltas = delta_schedule([1.0 / 32] * 32, 0.1, 1.0)
        assert deltas == pytest.approx([0.1 / 32] * 32)

    def test_excluded_measure_leaves_slack(self):
        deltas = delta_schedule([0.25, 0.25], 0.1, 1.0)
        assert sum(deltas) < 0.1


class TestPartition:
    def test_autonomous_single_cell(self, double_well):
        part = partition(((0.0, 1.0),), double_well, _zero, 1e-2, 4.0)
        assert len(part.cells) == 1
        assert part.cells[0].delta == pytest.approx(0.5 * 1e-2 / 2)
        assert part.excluded == []

    def test_x_dependent_cells_cover_domain(self):
        f = catalog.get('x_double_well')
        eps = 1e-2
        part = partition(((0.0, 1.0),), f, _zero, eps, 4.0, xi_probes=np.array([-1.0, 0.0, 1.0]))
        assert part.excluded_measure == 0.0
        assert sum(c.measure for c in part.cells) == pytest.approx(1.0)
        assert all(c.oscillation <= part.tolerance for c in part.cells)
        assert part.tolerance == pytest.approx(eps / 9)
        assert sum(c.delta for c in part.cells) <= eps / 2 * (1 + 1e-12)
        starts = [c.region[0][0] for c in part.cells]
        assert starts == sorted(starts)

    def test_discontinuous_in_x_is_unresolvable(self):
        f = catalog.get('tangent_step')
        with pytest.raises(OscillationUnresolvable) as err:
            partition(((-1.5, 1.5),), f, _zero, 0.1, 4.0, max_depth=4)
        assert err.value.details['excluded_measure'] > err.value.details['delta']

    def test_rejects_nonpositive_eps(self, double_well):
        with pytest.raises(ValidationError):
            partition(((0.0, 1.0),), double_well, _zero, 0.0, 4.0)


class TestSawtooth:
    def test_double_well_cell(self):
        delta = 1.0 / 16
        cell = OscillationCell(((0.0, 1.0),), np.array([0.5]), delta, 4.0, _pair([-1.0, 1.0]))
        built = build_cell(cell, (0.0, 0.0))
        grads = built.v.gradients()[:, 0]
        np.testing.assert_allclose(np.abs(grads), 1.0)
        np.testing.assert_allclose(built.fractions, [0.5, 0.5], atol=1e-12)
        assert built.fraction_residual <= 1e-12
        assert built.sup_dev <= delta + 1e-15
        assert built.grad_bound == pytest.approx(1.0)
        assert built.v.values[0] == pytest.approx(0.0)
        assert built.v.values[-1] == pytest.approx(0.0, abs=1e-14)

    def test_tilted_mean_keeps_boundary_values(self):
        cell = OscillationCell(((0.25, 0.5),), np.array([0.375]), 0.01, 4.0, _pair([-1.0, 2.0], (0.25, 0.75)))
        built = build_cell(cell, (1.25, 0.1))
        u_end = 0.1 + 1.25 * np.array([0.25, 0.5])
        np.testing.assert_allclose(built.v.values[[0, -1]], u_end, atol=1e-12)
        np.testing.assert_allclose(built.fractions, built.targets, atol=1e-12)
        assert built.sup_dev <= 0.01 + 1e-15

    def test_no_decomposition_keeps_affine(self):
        cell = OscillationCell(((0.0, 2.0),), np.array([1.0]), 0.1, 4.0)
        built = build_cell(cell, (3.0, 1.0))
        np.testing.assert_allclose(built.v.values, [1.0, 7.0])
        assert built.sup_dev == 0.0
        assert built.grad_bound == pytest.approx(3.0)

    def test_margin_too_small(self):
        cell = OscillationCell(((0.0, 1.0),), np.array([0.5]), 0.1, 1.0, _pair([-1.0, 1.0]))
        assert cell.margin == 0.0
        with pytest.raises(MarginTooSmall):
            build_cell(cell, (0.0, 0.0))


class TestLaminate:
    def test_two_gradients_on_square(self):
        delta = 0.05
        cell = OscillationCell(((0.0, 1.0), (0.0, 1.0)), np.array([0.5, 0.5]), delta, 4.0,
                               _pair([[-1.0, 0.0], [1.0, 0.0]]))
        built = build_cell(cell, (np.zeros(2), 0.0))
        mesh = built.v.mesh
        np.testing.assert_allclose(built.v.values[mesh.boundary], 0.0, atol=1e-14)
        assert np.all(np.abs(built.fractions - built.targets) <= 0.5 * delta)
        assert built.sup_dev <= delta
        assert built.grad_bound < 4.0
        assert mesh.measures().sum() == pytest.approx(1.0)

    def test_laminate_energy_is_small_for_radial_well(self):
        f = catalog.get('radial_well')
        cell = OscillationCell(((0.0, 1.0), (0.0, 1.0)), np.array([0.5, 0.5]), 0.02, 4.0,
                               _pair([[-1.0, 0.0], [1.0, 0.0]]))
        built = build_cell(cell, (np.zeros(2), 0.0))
        # the affine competitor u = 0 costs 1
        assert energy(f, built.v) < 0.1

    def test_three_points_unsupported(self):
        dec = _pair([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0]], (0.25, 0.25, 0.5))
        cell = OscillationCell(((0.0, 1.0), (0.0, 1.0)), np.array([0.5, 0.5]), 0.05, 4.0, dec)
        with pytest.raises(UnsupportedDecomposition):
            build_cell(cell, (dec.target, 0.0))


class TestAssemble:
    def test_one_cell_replaced(self, double_well):
        background_mesh = build_box_mesh(1, (0.0, 1.0), 4)
        background = interpolate('0', background_mesh)
        cell = OscillationCell(((0.25, 0.5),), np.array([0.375]), 0.01, 4.0, _pair([-1.0, 1.0]))
        v = assemble([build_cell(cell, (0.0, 0.0))], background)
        v.mesh.check()
        assert v.mesh.num_cells > background_mesh.num_cells
        assert energy(double_well, v) == pytest.approx(0.75)
        assert sup_distance(v, background) <= 0.01 + 1e-15

    def test_nothing_to_assemble(self, zero_on_unit):
        assert assemble([], zero_on_unit) is zero_on_unit

    def test_offset_cell_does_not_conform(self):
        background = interpolate('0', build_box_mesh(1, (0.0, 1.0), 4))
        cell = OscillationCell(((0.25, 0.5),), np.array([0.375]), 0.01, 4.0, _pair([-1.0, 1.0]))
        with pytest.raises(NonConformingInterface):
            assemble([build_cell(cell, (0.0, 0.5))], background)

    def test_square_cell_in_background(self):
        background_mesh = build_box_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 2)
        background = interpolate('0', background_mesh)
        cell = OscillationCell(((0.0, 0.5), (0.0, 0.5)), np.array([0.25, 0.25]), 0.02, 4.0,
                               _pair([[-1.0, 0.0], [1.0, 0.0]]))
        v = assemble([build_cell(cell, (np.zeros(2), 0.0))], background)
        assert v.mesh.measures().sum() == pytest.approx(1.0)
        assert np.max(np.abs(v.values)) <= 0.02
