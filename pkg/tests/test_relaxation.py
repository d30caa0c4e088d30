import time

import numpy as np
import pytest

import catalog
from errors import MarginTooSmall, ValidationError
from expr import LagrangianSpec
from mesh import build_box_mesh, energy, interpolate
from relaxation import (FrozenLagrangian, RelaxedLagrangian, recover, recover_general, recover_sequence,
                        relaxed_energy, relaxed_truncation_inequality, sc_minus_estimate, screen_hypotheses,
                        truncation_limit)


@pytest.fixture
def coarse_zero():
    return interpolate('0', build_box_mesh(1, (0.0, 1.0), 4))


class TestRelaxedLagrangian:
    def test_double_well_bipolar(self, double_well):
        relaxed = RelaxedLagrangian(double_well, 4.0)
        values = relaxed.evaluate(0.0, 0.0, np.array([-1.0, 0.0, 0.5, 2.0]))
        np.testing.assert_allclose(values, [0.0, 0.0, 0.0, 9.0], atol=1e-9)

    def test_hull_is_cached(self, double_well):
        relaxed = RelaxedLagrangian(double_well, 4.0)
        relaxed.evaluate(0.0, 0.0, np.array([0.0]))
        relaxed.evaluate(0.5, 0.3, np.array([0.25]))
        assert relaxed.hits >= 1
        assert len(relaxed._cache) == 1

    def test_frozen_profile_fills_u(self):
        f = catalog.get('u_double_well')
        u_bar = interpolate('x', build_box_mesh(1, (0.0, 1.0), 4))
        frozen = FrozenLagrangian(f, u_bar.evaluate)
        assert frozen.depends_on_x
        assert not frozen.depends_on_u
        assert frozen.evaluate(0.5, None, 1.0) == pytest.approx(0.25)


class TestRelaxedEnergy:
    def test_inside_and_outside_the_wells(self, double_well, unit_mesh):
        assert relaxed_energy(double_well, interpolate('0', unit_mesh)) == pytest.approx(0.0, abs=1e-9)
        assert relaxed_energy(double_well, interpolate('2*x', unit_mesh)) == pytest.approx(9.0, rel=1e-9)

    def test_below_energy(self, double_well, unit_mesh):
        u = interpolate('sin(3*x)/2', unit_mesh)
        assert relaxed_energy(double_well, u) <= energy(double_well, u) + 1e-9


class TestRecover:
    def test_double_well_on_zero(self, double_well, zero_on_unit):
        eps = 0.25
        v, cert = recover(double_well, zero_on_unit, eps, 4.0)
        assert cert.energy == pytest.approx(0.0, abs=1e-12)
        assert cert.relaxed_energy == pytest.approx(0.0, abs=1e-9)
        assert cert.energy_gap < eps
        assert cert.sup_dev < eps
        assert cert.grad_bound == pytest.approx(1.0)
        np.testing.assert_allclose(v.values[v.mesh.boundary], 0.0, atol=1e-14)

    def test_convex_region_keeps_u(self, double_well, unit_mesh):
        u = interpolate('2*x', unit_mesh)
        v, cert = recover(double_well, u, 0.1, 4.0)
        assert cert.energy == pytest.approx(9.0, rel=1e-12)
        assert cert.sup_dev == pytest.approx(0.0, abs=1e-12)

    def test_schedule(self, double_well, coarse_zero):
        schedule = [0.5, 0.25, 0.125]
        run = recover_sequence(double_well, coarse_zero, schedule, 4.0)
        assert run.diagnostic is None
        assert len(run.steps) == 3
        for eps, (_, cert) in zip(schedule, run.steps):
            assert cert.eps == eps
            assert cert.sup_dev < eps
            assert cert.energy_gap < eps

    def test_ten_levels_stay_small(self, double_well, zero_on_unit):
        schedule = [2.0 ** -n for n in range(1, 11)]
        start = time.perf_counter()
        run = recover_sequence(double_well, zero_on_unit, schedule, 4.0)
        elapsed = time.perf_counter() - start
        assert run.diagnostic is None
        assert len(run.steps) == 10
        nodes = [v.mesh.num_nodes for v, _ in run.steps]
        assert nodes[-1] <= 16 * 2 * 1024 + 1
        assert all(b <= 2 * a + 16 for a, b in zip(nodes, nodes[1:]))
        for eps, (_, cert) in zip(schedule, run.steps):
            assert cert.sup_dev < eps
            assert cert.energy_gap < eps
        assert elapsed < 5.0

    def test_x_dependent_wells(self, unit_mesh):
        f = catalog.get('x_double_well')
        eps = 1e-2
        _, cert = recover(f, interpolate('0', unit_mesh), eps, 4.0)
        assert cert.energy_gap < eps
        assert cert.sup_dev < eps
        assert cert.excluded_measure == 0.0
        assert cert.excluded_contribution == 0.0
        assert cert.cells >= 1024

    def test_excluded_band_is_reported(self, unit_mesh):
        f = LagrangianSpec.from_expression('pw(x < 0.5: g1^2, else: 2*g1^2)')
        _, cert = recover(f, interpolate('x', unit_mesh), 0.1, 4.0)
        assert cert.excluded_measure == pytest.approx(2.0 ** -12)
        assert cert.excluded_contribution == pytest.approx(2.0 ** -11)
        assert cert.to_dict()['excluded_contribution'] == cert.excluded_contribution
        assert cert.energy == pytest.approx(1.5, rel=1e-9)
        assert cert.sup_dev == pytest.approx(0.0, abs=1e-12)

    def test_affine_square(self):
        f = catalog.get('radial_well')
        u = interpolate('0', build_box_mesh(2, [(0.0, 1.0), (0.0, 1.0)], 2))
        eps = 0.5
        v, cert = recover(f, u, eps, 4.0)
        assert cert.energy < eps
        assert cert.sup_dev < eps
        assert cert.grad_bound < 4.0

    def test_gradient_at_truncation_radius(self, double_well, unit_mesh):
        with pytest.raises(MarginTooSmall):
            recover(double_well, interpolate('3*x', unit_mesh), 0.1, 2.0)

    def test_rejects_nonpositive_eps(self, double_well, zero_on_unit):
        with pytest.raises(ValidationError):
            recover(double_well, zero_on_unit, -1.0, 4.0)


class TestGeneralRecovery:
    def test_swap_error_decays(self, coarse_zero):
        f = catalog.get('u_double_well')
        schedule = [0.5, 0.25, 0.125]
        result = recover_general(f, coarse_zero, 4.0, 3)
        assert result.diagnostic is None
        assert len(result.energies) == 3
        for eps, swap in zip(schedule, result.swap_errors):
            assert swap <= eps ** 2
        assert result.energies[-1] <= 1e-3
        assert result.relaxed == pytest.approx(0.0, abs=1e-9)

    def test_flat_swap_error_at_noise_level(self):
        f = catalog.get('u_weighted_well')
        u_bar = interpolate('x', build_box_mesh(1, (0.0, 1.0), 4))
        result = recover_general(f, u_bar, 3.0, 4)
        assert result.diagnostic is None
        assert len(result.swap_errors) == 4
        assert max(result.swap_errors) <= 1e-8
        assert result.energies[-1] <= 1e-4
        assert result.relaxed == pytest.approx(0.0, abs=1e-4)

    def test_standing_margin(self):
        f = catalog.get('u_double_well')
        u_bar = interpolate('2 + x', build_box_mesh(1, (0.0, 1.0), 4))
        with pytest.raises(MarginTooSmall):
            recover_general(f, u_bar, 3.0, 2)


class TestTruncation:
    def test_sublinear_tail_has_no_plateau(self):
        f = catalog.get('sublinear_tail')
        u_bar = interpolate('3*x', build_box_mesh(1, (0.0, 1.0), 4))
        trace = truncation_limit(f, u_bar, [8.0, 16.0, 32.0])
        expected = [2 * (0.5 + K / 10) / (K - 1) for K in (8.0, 16.0, 32.0)]
        np.testing.assert_allclose(trace.relaxed, expected, rtol=1e-2)
        assert trace.relaxed[0] > trace.relaxed[1] > trace.relaxed[2]
        assert not trace.plateau
        assert trace.flagged

    def test_u_dependent_trace_is_constant(self, coarse_zero):
        f = catalog.get('u_double_well')
        trace = truncation_limit(f, coarse_zero, [2.0, 4.0, 8.0], n=3)
        assert trace.plateau
        assert trace.limit == pytest.approx(0.0, abs=1e-9)
        assert all(r is not None and r <= 1e-3 for r in trace.recovery)

    def test_support_inside_for_double_well(self, double_well, zero_on_unit):
        trace = truncation_limit(double_well, zero_on_unit, [2.0, 4.0])
        assert trace.support_inside == [True, True]

    def test_standing_margin(self, double_well, unit_mesh):
        with pytest.raises(MarginTooSmall):
            truncation_limit(double_well, interpolate('3*x', unit_mesh), [2.0, 4.0])

    @pytest.mark.parametrize('name', ['double_well', 'sublinear_tail'])
    def test_truncated_bipolar_dominates(self, name):
        holds, worst = relaxed_truncation_inequality(catalog.get(name), 2.0)
        assert holds
        assert worst >= 0.0


class TestScEstimate:
    def test_bounds_are_ordered(self, double_well, coarse_zero):
        est = sc_minus_estimate(double_well, coarse_zero, 4.0, [0.5, 0.25])
        assert len(est.certificates) == 2
        assert est.lower <= est.upper + 1e-9
        assert est.upper - est.lower < 0.25


class TestScreen:
    def test_autonomous(self, double_well):
        report = screen_hypotheses(double_well, 2.0)
        assert report['autonomous']
        assert report['u_independent']
        assert report['locally_bounded']
        assert report['x_modulus'] == 0.0
        assert report['sup_on_ball'] == pytest.approx(9.0)

    def test_u_dependence_is_seen(self):
        report = screen_hypotheses(catalog.get('u_double_well'), 2.0)
        assert not report['u_independent']
        assert report['u_modulus'] > 0.0

    def test_jump_in_x(self):
        report = screen_hypotheses(catalog.get('tangent_step'), 2.0, box=((-1.5, 1.5),))
        assert report['x_modulus'] == pytest.approx(1.0)
