import math

import numpy as np
import pytest

import catalog
from convexify import truncate
from errors import DegenerateBox, EvalFailure, GradientOutOfBounds, MeshMismatch
from expr import LagrangianSpec
from mesh import P1Function, QuadratureRule, build_box_mesh, energy, grad_sup, interpolate, sup_distance


def test_unit_interval_mesh():
    mesh = build_box_mesh(1, (0.0, 1.0), 4)
    assert mesh.num_nodes == 5
    assert mesh.num_cells == 4
    np.testing.assert_array_equal(mesh.nodes[mesh.boundary], [0.0, 1.0])
    mesh.check()


def test_unit_square_mesh():
    mesh = build_box_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 2)
    assert mesh.num_nodes == 9
    assert mesh.num_cells == 8
    assert mesh.measures().sum() == pytest.approx(1.0)
    assert len(mesh.boundary) == 8
    mesh.check()


def test_graded_mesh_refines_near_origin():
    n = 8
    mesh = build_box_mesh(1, (0.0, 1.0), n, grading=2.0)
    assert 0.0 < mesh.nodes[1] < 1.0 / n
    assert mesh.nodes[1] == pytest.approx(1.0 / n ** 2)


def test_degenerate_box():
    with pytest.raises(DegenerateBox):
        build_box_mesh(1, (1.0, 1.0), 4)


def test_affine_is_reproduced_on_graded_mesh():
    mesh = build_box_mesh(1, (0.0, 1.0), 10, grading=3.0)
    u = interpolate('x', mesh)
    np.testing.assert_allclose(u.gradients(), 1.0, rtol=1e-12)


def test_tent_gradients():
    u = interpolate('abs(x - 0.5)', build_box_mesh(1, (0.0, 1.0), 8))
    assert set(np.round(u.gradients(), 12)) == {-1.0, 1.0}


def test_affine_in_two_dimensions():
    u = interpolate('x1 + 2*x2', build_box_mesh(2, [(0.0, 1.0), (0.0, 1.0)], (3, 5)))
    np.testing.assert_allclose(u.gradients(), np.tile([1.0, 2.0], (30, 1)), atol=1e-12)
    assert u.evaluate(np.array([0.3, 0.4])) == pytest.approx(1.1)


def test_interpolation_failure_names_the_node():
    with pytest.raises(EvalFailure) as info:
        interpolate('log(x)', build_box_mesh(1, (0.0, 1.0), 4))
    assert info.value.details['node'] == 0


def test_double_well_energies(double_well):
    mesh = build_box_mesh(1, (0.0, 1.0), 16)
    assert energy(double_well, interpolate('x', mesh)) == pytest.approx(0.0, abs=1e-14)
    assert energy(double_well, interpolate('0', mesh)) == pytest.approx(1.0)


def test_affine_energy_is_mesh_independent():
    f = LagrangianSpec.from_expression('g1^2 + u^2')
    coarse = energy(f, interpolate('2*x', build_box_mesh(1, (0.0, 1.0), 4)))
    fine = energy(f, interpolate('2*x', build_box_mesh(1, (0.0, 1.0), 32)))
    assert coarse == pytest.approx(16.0 / 3.0, rel=1e-13)
    assert fine == pytest.approx(coarse, abs=1e-12)


def test_energy_is_additive_over_cells(double_well):
    u = interpolate('sin(3*x)', build_box_mesh(1, (0.0, 1.0), 20))
    total, per_cell = energy(double_well, u, per_cell=True)
    assert per_cell[:7].sum() + per_cell[7:].sum() == pytest.approx(total, rel=1e-14)


def test_mania_first_cell_on_graded_interpolant():
    # u = x^(1/3) interpolated: the first cell carries 8 / (105 h)
    mesh = build_box_mesh(1, (0.0, 1.0), 64, grading=3.0)
    u = interpolate('x^(1/3)', mesh)
    _, per_cell = energy(catalog.get('mania'), u, per_cell=True)
    h = mesh.nodes[1]
    assert per_cell[0] == pytest.approx(8.0 / (105.0 * h), rel=1e-10)


def test_mania_vanishes_on_mapped_mesh():
    mesh = build_box_mesh(1, (0.0, 1.0), 4096, map_exponent=1.0 / 3.0)
    u = interpolate('x^(1/3)', mesh)
    assert energy(catalog.get('mania'), u) <= 1e-3


def test_gradient_outside_declared_bounds():
    f = LagrangianSpec.from_expression('g1^2', xi_bounds=[(-1.0, 1.0)])
    with pytest.raises(GradientOutOfBounds) as info:
        energy(f, interpolate('2*x', build_box_mesh(1, (0.0, 1.0), 4)))
    assert info.value.cell == 0


def test_truncated_lagrangian_gives_infinite_energy(double_well):
    u = interpolate('2*x', build_box_mesh(1, (0.0, 1.0), 4))
    assert math.isinf(energy(truncate(double_well, 1.0), u))


def test_sawtooth_distances():
    n = 8
    fine = build_box_mesh(1, (0.0, 1.0), 2 * n)
    saw = P1Function(fine, np.where(np.arange(2 * n + 1) % 2 == 1, 1.0 / (2 * n), 0.0))
    zero = interpolate('0', fine)
    assert sup_distance(zero, zero) == 0.0
    assert sup_distance(saw, zero) == pytest.approx(1.0 / (2 * n))
    assert grad_sup(saw) == pytest.approx(1.0)
    coarse_zero = interpolate('0', build_box_mesh(1, (0.0, 1.0), n))
    assert sup_distance(coarse_zero, saw) == pytest.approx(1.0 / (2 * n))


def test_unrelated_meshes():
    a = interpolate('x', build_box_mesh(1, (0.0, 1.0), 3))
    b = interpolate('x', build_box_mesh(1, (0.0, 1.0), 4))
    with pytest.raises(MeshMismatch):
        sup_distance(a, b)


def test_quadrature_exactness():
    rule = QuadratureRule.gauss(6)
    assert np.dot(rule.weights, rule.points ** 7) == pytest.approx(1.0 / 8.0, rel=1e-14)
    tri = QuadratureRule.triangle(4)
    assert tri.weights.sum() == pytest.approx(1.0)
    lam = tri.points
    assert np.dot(tri.weights, lam[:, 0] ** 2 * lam[:, 1] ** 2) == pytest.approx(1.0 / 90.0, rel=1e-12)
