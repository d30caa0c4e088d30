from typing import Dict, List

from errors import ConfigError
from expr import LagrangianSpec

# Hypothesis flags a Lagrangian may declare:
#   measurable_in_x          f(., xi) measurable, f(x, .) lsc
#   locally_bounded          |f(x, u, xi)| <= a(x) on bounded gradient balls
#   uniform_lusin            continuity in x off a small compact complement, uniformly in xi
#   u_continuous             continuity in u uniformly over bounded gradient balls
#   bounded_on_bounded_sets  autonomous f bounded on bounded (u, xi) sets
#   autonomous               no explicit x dependence
#   superlinear              f >= theta with theta(xi)/|xi| -> infinity
_STANDARD = ('measurable_in_x', 'locally_bounded', 'uniform_lusin', 'u_continuous')
_AUTONOMOUS = _STANDARD + ('bounded_on_bounded_sets', 'autonomous')

LAGRANGIANS: Dict[str, dict] = {
    'double_well': {
        'source': '(g1^2 - 1)^2', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS + ('superlinear',), 'theta': 'g1^2/2 - 1',
    },
    'x_double_well': {
        'source': '(1 + x)*(g1^2 - 1)^2', 'dim': 1, 'nonneg': True,
        'hypotheses': _STANDARD,
    },
    'u_double_well': {
        'source': '(g1^2 - 1)^2 + u^2', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS + ('superlinear',), 'theta': 'g1^2/2 - 1',
    },
    'u_weighted_well': {
        'source': '(g1^2 - 1)^2*(1 + u^2)', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS + ('superlinear',), 'theta': 'g1^2/2 - 1',
    },
    'mania': {
        'source': '(x - u^3)^2*g1^6', 'dim': 1, 'nonneg': True,
        'hypotheses': _STANDARD, 'theta': '0',
    },
    'sublinear_tail': {
        'source': 'min((g1^2 - 1)^2, 0.5 + abs(g1)/10)', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS,
    },
    'quadratic': {
        'source': 'g1^2/2', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS + ('superlinear',), 'theta': 'g1^2/2',
    },
    'square': {
        'source': 'g1^2', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS + ('superlinear',), 'theta': 'g1^2',
    },
    'abs': {
        'source': 'abs(g1)', 'dim': 1, 'nonneg': True,
        'hypotheses': _AUTONOMOUS, 'theta': 'abs(g1)',
    },
    'radial_well': {
        'source': '(g1^2 + g2^2 - 1)^2', 'dim': 2, 'nonneg': True,
        'hypotheses': _AUTONOMOUS + ('superlinear',),
    },
    # upper semicontinuous, yet no compact set of large measure carries
    # continuity uniformly in xi: the jump follows xi = tan(x)
    'tangent_step': {
        'source': 'pw(g1 > sin(x)/cos(x): 0, else: 1)', 'dim': 1, 'nonneg': True,
        'hypotheses': ('measurable_in_x', 'locally_bounded'),
    },
}

CORPUS_1D: List[str] = [
    '(g1^2 - 1)^2',
    'g1^2/2',
    'abs(g1)',
    'min((g1^2 - 1)^2, 0.5 + abs(g1)/10)',
    '(g1^2 - 4)^2/16',
    '(g1 - 1)^2*(g1 + 2)^2/4',
    'min((g1 - 1)^2, (g1 + 1)^2)',
    'min((g1 - 2)^2, g1^2 + 0.5, (g1 + 3)^2/2)',
    'cos(pi*g1) + g1^2/8',
    'sin(3*g1) + abs(g1)',
    'exp(-g1^2)',
    '1/(1 + g1^2)',
    'sqrt(abs(g1))',
    'abs(abs(g1) - 1)',
    'g1^4 - 3*g1^2 + g1',
    'log(1 + g1^2)',
    'max(1 - g1^2, 0) + abs(g1)/4',
    'pw(abs(g1) <= 1: 1 - abs(g1), else: 2*(abs(g1) - 1))',
    '(g1^2 - 1)^2*(1 + 0.5*sin(5*g1))',
    'g1^6/64 - g1^2',
]


def names() -> List[str]:
    return sorted(LAGRANGIANS)


def get(name: str) -> LagrangianSpec:
    entry = LAGRANGIANS.get(name)
    if entry is None:
        raise ConfigError(f"unknown Lagrangian '{name}'", available=names())
    return LagrangianSpec.from_expression(entry['source'], entry['dim'], nonneg=entry['nonneg'],
                                          name=name, hypotheses=entry['hypotheses'])


def theta(name: str) -> str:
    """Declared superlinear minorant source for ``name`` (empty when none is known)."""
    return LAGRANGIANS[name].get('theta', '')


def corpus_1d() -> List[LagrangianSpec]:
    return [LagrangianSpec.from_expression(src, 1, name=f"corpus_{i:02d}")
            for i, src in enumerate(CORPUS_1D)]
