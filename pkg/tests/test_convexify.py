import numpy as np
import pytest

import catalog
from config import Config
from convexify import (SampledFunction, bipolar, conjugate, decompose, detached_radius, double_conjugate,
                       envelope_gap, hull_support_inside, is_convex, reduce_decomposition, sample, truncate)
from errors import AllInfinite, EmptyDualGrid, GapExceedsEpsilon, OutsideDomain, ValidationError
from expr import LagrangianSpec


def _spec(source, dim=1):
    return LagrangianSpec.from_expression(source, dim)


def _brute_envelope(xs, fs, at=None):
    """min over every pair of nodes bracketing each node of the chord value."""
    out = fs.copy()
    n = len(xs)
    for k in (range(1, n - 1) if at is None else at):
        i, j = np.arange(k), np.arange(k + 1, n)
        xi, xj = xs[i][:, None], xs[j][None, :]
        chord = ((xj - xs[k]) * fs[i][:, None] + (xs[k] - xi) * fs[j][None, :]) / (xj - xi)
        out[k] = min(out[k], chord.min())
    return out


def test_sample_double_well_on_five_nodes(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=5)
    np.testing.assert_array_equal(f.values, [9.0, 0.0, 1.0, 0.0, 9.0])


def test_sample_mania_slice_vanishes():
    f = sample(catalog.get('mania'), x=0.0, u=0.0, box=[(-2.0, 2.0)], counts=9)
    assert np.all(f.values == 0.0)


def test_sample_constant():
    f = sample(_spec('3'), box=[(-1.0, 1.0)], counts=7)
    assert np.all(f.values == 3.0)


def test_sample_box_must_lie_in_bounds(double_well):
    narrow = truncate(double_well, 1.0)
    sampled = LagrangianSpec.from_samples(sample(narrow, box=[(-1.0, 1.0)], counts=5))
    with pytest.raises(ValidationError):
        sample(sampled, box=[(-2.0, 2.0)], counts=5)


def test_double_well_envelope(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=4097)
    env = bipolar(f)
    xi = f.nodes()
    exact = np.where(np.abs(xi) <= 1.0, 0.0, (xi ** 2 - 1.0) ** 2)
    assert np.max(np.abs(env.evaluate(xi) - exact)) <= 5e-6
    assert envelope_gap(f, env) == pytest.approx(1.0, abs=1e-9)
    assert env.support_radius == 2.0


@pytest.mark.parametrize('source', ['g1^2/2', 'abs(g1)'])
def test_convex_samples_are_fixed_points(source):
    f = sample(_spec(source), box=[(-3.0, 3.0)], counts=601)
    env = bipolar(f)
    np.testing.assert_allclose(env.evaluate(f.nodes()), f.values, atol=1e-12)
    assert is_convex(f)


def test_constant_has_zero_gap():
    f = sample(_spec('2.5'), box=[(-1.0, 1.0)], counts=11)
    assert envelope_gap(f, bipolar(f)) == 0.0


@pytest.mark.parametrize('spec', catalog.corpus_1d(), ids=lambda s: s.name)
def test_envelope_matches_pairwise_infimum(spec):
    f = sample(spec, box=[(-4.0, 4.0)], counts=257)
    env = bipolar(f)
    brute = _brute_envelope(f.nodes(), f.values)
    got = env.evaluate(f.nodes())
    np.testing.assert_allclose(got, brute, rtol=0.0, atol=1e-9 * (1.0 + np.max(np.abs(f.values))))


@pytest.mark.parametrize('spec', catalog.corpus_1d(), ids=lambda s: s.name)
def test_envelope_matches_pairwise_infimum_on_fine_grid(spec):
    n = 2 ** 12 + 1
    f = sample(spec, box=[(-4.0, 4.0)], counts=n)
    env = bipolar(f)
    at = np.r_[np.arange(1, n - 1, 273), n // 2, n - 2]
    brute = _brute_envelope(f.nodes(), f.values, at)
    got = env.evaluate(f.nodes()[at])
    np.testing.assert_allclose(got, brute[at], rtol=0.0, atol=1e-9 * (1.0 + np.max(np.abs(f.values))))


@pytest.mark.parametrize('spec', catalog.corpus_1d(), ids=lambda s: s.name)
def test_envelope_properties_on_corpus(spec):
    f = sample(spec, box=[(-4.0, 4.0)], counts=513)
    env = bipolar(f)
    tol = env.tol_hull
    values = env.evaluate(f.nodes())
    assert np.all(values <= f.values + tol)
    # midpoint convexity over every pair whose midpoint is a node
    i, j = np.meshgrid(np.arange(513), np.arange(513), indexing='ij')
    even = (i + j) % 2 == 0
    mid = (i[even] + j[even]) // 2
    assert np.all(values[mid] <= 0.5 * (values[i[even]] + values[j[even]]) + tol)
    again = bipolar(env.as_samples(f))
    np.testing.assert_allclose(again.evaluate(f.nodes()), values, atol=tol)
    np.testing.assert_allclose(double_conjugate(f).values, values, atol=2 * tol)


def test_conjugate_of_half_square():
    f = sample(_spec('g1^2/2'), box=[(-4.0, 4.0)], counts=2049)
    g = conjugate(f, ((-2.0,), (2.0,), (101,)))
    s = g.nodes()
    h = max(f.spacing)
    assert np.max(np.abs(g.values - s ** 2 / 2)) <= h ** 2


def test_conjugate_of_zero_is_support_function():
    f = SampledFunction((-1.0,), (1.0,), (21,), np.zeros(21))
    g = conjugate(f, ((-3.0,), (3.0,), (61,)))
    np.testing.assert_array_equal(g.values, np.abs(g.nodes()))


def test_conjugate_reverses_order(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=401)
    h = SampledFunction(f.lo, f.hi, f.counts, f.values + np.linspace(0.0, 1.0, 401))
    dual = ((-30.0,), (30.0,), (301,))
    assert np.all(conjugate(h, dual).values <= conjugate(f, dual).values)


def test_conjugate_is_brute_force_max(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=257)
    s = np.linspace(-5.0, 5.0, 41)
    g = conjugate(f, ((-5.0,), (5.0,), (41,)))
    brute = np.max(s[:, None] * f.nodes()[None, :] - f.values[None, :], axis=1)
    np.testing.assert_array_equal(g.values, brute)


def test_conjugate_rejects_empty_dual_grid(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=5)
    with pytest.raises(EmptyDualGrid):
        conjugate(f, ((-1.0,), (1.0,), (0,)))


def test_all_infinite_samples():
    f = SampledFunction((-1.0,), (1.0,), (5,), np.full(5, np.inf))
    with pytest.raises(AllInfinite):
        bipolar(f)


def test_truncation(double_well):
    fK = truncate(double_well, 2.0)
    assert fK.evaluate(g=1.0) == 0.0
    assert fK.evaluate(g=3.0) == Config.SENTINEL
    with pytest.raises(ValidationError):
        truncate(double_well, 0.0)


def test_truncation_of_samples():
    spec = LagrangianSpec.from_samples(sample(_spec('abs(g1)'), box=[(-2.0, 2.0)], counts=9))
    values = truncate(spec, 1.0).form.values
    assert np.all(values[[0, 1, 7, 8]] == Config.SENTINEL)
    np.testing.assert_array_equal(values[2:7], [1.0, 0.5, 0.0, 0.5, 1.0])


def test_truncated_envelopes_decrease_in_K():
    spec = catalog.get('sublinear_tail')
    previous = None
    for K in (2.0, 4.0, 8.0):
        f = sample(truncate(spec, K), box=[(-8.0, 8.0)], counts=2049)
        env = bipolar(f)
        values = env.evaluate(f.nodes())
        if previous is not None:
            assert np.all(values <= previous + env.tol_hull)
        previous = values


def test_hull_support_of_double_well(double_well):
    f = sample(double_well, box=[(-4.0, 4.0)], counts=2049)
    env = bipolar(f)
    assert not hull_support_inside(env, 2.0)
    assert hull_support_inside(env, 5.0)


def test_detached_radius_ignores_convex_tails(double_well):
    f = sample(double_well, box=[(-4.0, 4.0)], counts=2049)
    env = bipolar(f)
    assert detached_radius(f, env) == pytest.approx(1.0)
    assert hull_support_inside(env, 2.0, f)
    convex = sample(_spec('g1^2/2'), box=[(-4.0, 4.0)], counts=257)
    assert detached_radius(convex, bipolar(convex)) == 0.0


def test_truncated_tail_reaches_the_ball():
    K = 8.0
    f = sample(truncate(catalog.get('sublinear_tail'), K), box=[(-K, K)], counts=2049)
    env = bipolar(f)
    assert detached_radius(f, env) == pytest.approx(K)
    assert not hull_support_inside(env, K, f)


def test_decompose_double_well_at_zero(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=4097)
    dec = decompose(bipolar(f), f, 0.0, 1e-6)
    np.testing.assert_array_equal(dec.points.ravel(), [-1.0, 1.0])
    np.testing.assert_allclose(dec.weights, [0.5, 0.5])
    assert dec.gap == 0.0
    assert dec.size == 2


def test_decompose_convex_on_node_is_single_point():
    f = sample(_spec('g1^2/2'), box=[(-2.0, 2.0)], counts=4097)
    dec = decompose(bipolar(f), f, 0.5, 1e-6)
    assert dec.size == 1
    assert dec.weights[0] == 1.0
    assert dec.points[0, 0] == 0.5


def test_decompose_reconstructs_random_targets(rng):
    for spec in catalog.corpus_1d()[:6]:
        f = sample(spec, box=[(-4.0, 4.0)], counts=1025)
        env = bipolar(f)
        for target in rng.uniform(-3.9, 3.9, 100):
            dec = decompose(env, f, target, 1e-6)
            assert abs(float(dec.weights @ dec.points[:, 0]) - target) <= 0.5 * f.spacing[0]
            assert dec.gap <= 1e-6
            assert np.isclose(dec.weights.sum(), 1.0)


def test_decompose_outside_domain(double_well):
    f = sample(double_well, box=[(-2.0, 2.0)], counts=65)
    with pytest.raises(OutsideDomain):
        decompose(bipolar(f), f, 5.0, 1e-3)


def test_decompose_reports_uncertified_gap(double_well):
    flat = SampledFunction((-2.0,), (2.0,), (65,), np.zeros(65))
    f = sample(double_well, box=[(-2.0, 2.0)], counts=65)
    with pytest.raises(GapExceedsEpsilon) as info:
        decompose(bipolar(flat), f, 0.0, 1e-3)
    assert info.value.gap == pytest.approx(9.0)


def test_radial_well_decomposition_at_origin():
    f = sample(catalog.get('radial_well'), box=[(-2.0, 2.0), (-2.0, 2.0)], counts=257)
    env = bipolar(f)
    dec = decompose(env, f, np.zeros(2), 1e-4)
    assert dec.gap <= 1e-4
    assert np.isclose(dec.weights.sum(), 1.0)
    radii = np.linalg.norm(dec.points, axis=1)
    assert np.all(np.abs(radii - 1.0) < 0.05)
    reduced = reduce_decomposition(env, f, dec, 1e-4)
    if reduced is not None:
        assert reduced.size <= 2
        assert reduced.gap <= 1e-4
