import math

import numpy as np
import pytest

import catalog
from config import Config
from errors import (ArityMismatch, DomainError, ExprSyntaxError, NonFiniteError, UnknownIdentifier,
                    ValidationError)
from expr import GridSamples, LagrangianSpec, evaluate, free_variables, parse, pretty

MANIA = '(x - u^3)^2 * g1^6'


def test_mania_has_three_free_variables():
    assert free_variables(parse(MANIA)) == {'x1', 'u', 'g1'}


def test_constant_in_two_dimensions():
    tree = parse('0', dim=2)
    assert free_variables(tree) == frozenset()
    assert evaluate(tree, g=np.array([0.3, -0.2]), dim=2) == 0.0


def test_unbalanced_paren_reports_position():
    with pytest.raises(ExprSyntaxError) as info:
        parse('(g1^2 - 1)^2 + (')
    assert info.value.position == 17


def test_trailing_token_is_rejected():
    with pytest.raises(ExprSyntaxError):
        parse('g1 g1')


def test_gradient_component_beyond_dimension():
    with pytest.raises(UnknownIdentifier) as info:
        parse('g1 + g2', dim=1)
    assert info.value.name == 'g2'
    assert free_variables(parse('g1 + g2', dim=2)) == {'g1', 'g2'}


def test_builtin_arity():
    with pytest.raises(ArityMismatch):
        parse('min(g1)')
    with pytest.raises(ArityMismatch):
        parse('abs(g1, u)')
    assert evaluate(parse('max(g1, u, 3)'), u=1.0, g=2.0) == 3.0


def test_inf_only_as_branch_value():
    with pytest.raises(ExprSyntaxError):
        parse('inf + g1')
    tree = parse('pw(abs(g1) <= 1: g1^2, else: inf)')
    assert evaluate(tree, g=0.5) == pytest.approx(0.25)
    assert evaluate(tree, g=2.0) == Config.SENTINEL


def test_piecewise_takes_first_true_guard():
    tree = parse('pw(g1 < 0: -1, g1 < 1: 0, else: 1)')
    out = evaluate(tree, g=np.array([-2.0, -0.5, 0.5, 3.0]))
    np.testing.assert_array_equal(out, [-1.0, -1.0, 0.0, 1.0])


def test_power_is_right_associative():
    assert evaluate(parse('2^3^2')) == 512.0
    assert evaluate(parse('-2^2')) == -4.0
    assert evaluate(parse('2^-1')) == 0.5


def test_domain_errors():
    with pytest.raises(DomainError):
        evaluate(parse('log(g1)'), g=0.0)
    with pytest.raises(DomainError):
        evaluate(parse('g1^(-1)'), g=0.0)
    with pytest.raises(DomainError):
        evaluate(parse('sqrt(g1)'), g=-1.0)
    with pytest.raises(DomainError):
        evaluate(parse('g1^0.5'), g=-4.0)


def test_overflow_is_reported():
    with pytest.raises(NonFiniteError):
        evaluate(parse('exp(g1)'), g=1000.0)


def test_mania_vanishes_on_cube_root():
    value = evaluate(parse(MANIA), x=0.5, u=0.5 ** (1 / 3), g=7.0)
    assert value == pytest.approx(0.0, abs=1e-20)


def test_double_well_values():
    tree = parse('(g1^2-1)^2')
    assert evaluate(tree, g=1.0) == 0.0
    assert evaluate(tree, g=0.0) == 1.0


def test_radial_well_in_two_dimensions():
    tree = parse('(g1^2 + g2^2 - 1)^2', dim=2)
    out = evaluate(tree, g=np.array([[1.0, 0.0], [0.0, 0.0], [0.6, 0.8]]), dim=2)
    np.testing.assert_allclose(out, [0.0, 1.0, 0.0], atol=1e-15)


@pytest.mark.parametrize('source', catalog.CORPUS_1D + [
    MANIA, '-(g1 - 1)', '(-1)*g1', 'x/(u + 2)', '2^(1/3)', '(g1^2)^3', 'g1 - (u - x)',
    'pw(g1 > sin(x)/cos(x): 0, else: 1)', 'min(g1, -g1, u)',
])
def test_pretty_print_is_a_fixed_point(source):
    once = pretty(parse(source))
    assert pretty(parse(once)) == once


def test_vectorized_matches_pointwise(rng):
    g = rng.uniform(-3.0, 3.0, 200)
    for source in catalog.CORPUS_1D:
        tree = parse(source)
        batch = evaluate(tree, g=g)
        single = np.array([evaluate(tree, g=float(v)) for v in g])
        np.testing.assert_allclose(batch, single, rtol=1e-14, atol=1e-300)


def test_dependence_flags_follow_free_variables():
    spec = LagrangianSpec.from_expression('(1 + x)*(g1^2 - 1)^2')
    assert spec.depends_on_x and not spec.depends_on_u
    with pytest.raises(ValidationError):
        LagrangianSpec(parse('u + g1'), 1, False, False)


def test_grid_samples_reject_nan():
    with pytest.raises(ValidationError):
        GridSamples((-1.0,), (1.0,), (3,), np.array([0.0, math.nan, 1.0]))
    grid = GridSamples((-1.0,), (1.0,), (3,), np.array([1.0, 0.0, math.inf]))
    assert grid.values[-1] == Config.SENTINEL
    assert grid.interpolate(-0.5) == pytest.approx(0.5)
