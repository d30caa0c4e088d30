import json
from typing import Any, Dict, Optional


class RelaxoError(Exception):
    """Base error carrying a code, a message and structured details."""

    exit_code = 1

    def __init__(self, code: str, message: str, details: Optional[Dict[str, Any]] = None):
        self.code = code
        self.message = message
        self.details = dict(details or {})
        super().__init__(f"{code}: {message}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'error': self.code,
            'kind': type(self).__name__,
            'message': self.message,
            'details': self.details,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=str)


class ValidationError(RelaxoError):
    exit_code = 2


class NumericalError(RelaxoError):
    exit_code = 3


# Input validation

class ExprSyntaxError(ValidationError):
    def __init__(self, position: int, expected, found: str = ''):
        expected = sorted(set(expected))
        message = f"unexpected {found or 'end of input'} at position {position}, expected one of {expected}"
        super().__init__('syntax_error', message, {'position': position, 'expected': expected, 'found': found})
        self.position = position
        self.expected = expected


class UnknownIdentifier(ValidationError):
    def __init__(self, name: str, position: int):
        super().__init__('unknown_identifier', f"unknown identifier '{name}' at position {position}",
                         {'name': name, 'position': position})
        self.name = name
        self.position = position


class ArityMismatch(ValidationError):
    def __init__(self, name: str, expected: str, got: int, position: int):
        super().__init__('arity_mismatch', f"{name} expects {expected} arguments, got {got}",
                         {'name': name, 'expected': expected, 'got': got, 'position': position})


class DegenerateBox(ValidationError):
    def __init__(self, box):
        super().__init__('degenerate_box', f"box {box} has an empty side", {'box': [list(map(float, b)) for b in box]})


class ConfigError(ValidationError):
    def __init__(self, message: str, **details):
        super().__init__('config_error', message, details)


# Numerical failures

class DomainError(NumericalError):
    def __init__(self, operation: str, value=None):
        super().__init__('domain_error', f"{operation} outside its domain", {'operation': operation, 'value': value})


class NonFiniteError(NumericalError):
    def __init__(self, message: str, index=None):
        super().__init__('non_finite', message, {'index': index})
        self.index = index


class AllInfinite(NumericalError):
    def __init__(self):
        super().__init__('all_infinite', "no finite sample to build an envelope from")


class EmptyDualGrid(NumericalError):
    def __init__(self):
        super().__init__('empty_dual_grid', "dual grid has no slopes")


class OutsideDomain(NumericalError):
    def __init__(self, point, box):
        super().__init__('outside_domain', f"point {point} outside envelope domain",
                         {'point': [float(p) for p in point], 'box': [list(map(float, b)) for b in box]})


class GapExceedsEpsilon(NumericalError):
    def __init__(self, gap: float, eps: float, point=None):
        super().__init__('gap_exceeds_epsilon', f"certified gap {gap:.3e} exceeds {eps:.3e}; refine the grid",
                         {'gap': gap, 'eps': eps, 'point': point})
        self.gap = gap


class EvalFailure(NumericalError):
    def __init__(self, node: int, reason: str):
        super().__init__('eval_failure', f"evaluation failed at node {node}: {reason}", {'node': node})


class GradientOutOfBounds(NumericalError):
    def __init__(self, cell: int, gradient):
        super().__init__('gradient_out_of_bounds', f"gradient on cell {cell} outside the Lagrangian's bounds",
                         {'cell': cell, 'gradient': [float(g) for g in gradient]})
        self.cell = cell


class NonFiniteIntegrand(NumericalError):
    def __init__(self, cell: int):
        super().__init__('non_finite_integrand', f"integrand not finite on cell {cell}", {'cell': cell})
        self.cell = cell


class MeshMismatch(NumericalError):
    def __init__(self, message: str = "functions live on unrelated meshes"):
        super().__init__('mesh_mismatch', message)


class OscillationUnresolvable(NumericalError):
    def __init__(self, excluded_measure: float, delta: float, regions):
        super().__init__('oscillation_unresolvable',
                         f"excluded measure {excluded_measure:.3e} exceeds {delta:.3e}",
                         {'excluded_measure': excluded_measure, 'delta': delta, 'regions': regions})


class MarginTooSmall(NumericalError):
    def __init__(self, needed: float, K: float):
        super().__init__('margin_too_small', f"gradient {needed:.6g} not strictly below K={K:.6g}",
                         {'needed': needed, 'K': K})


class UnsupportedDecomposition(NumericalError):
    def __init__(self, points: int):
        super().__init__('unsupported_decomposition',
                         f"{points}-point decomposition admits no two-point lamination", {'points': points})


class NonConformingInterface(NumericalError):
    def __init__(self, node: int, mismatch: float):
        super().__init__('non_conforming_interface', f"cell boundary node {node} differs from background by {mismatch:.3e}",
                         {'node': node, 'mismatch': mismatch})


class BudgetInfeasible(NumericalError):
    def __init__(self, sub_budget: str, value: float, limit: float):
        super().__init__('budget_infeasible', f"sub-budget '{sub_budget}' needs {value:.3e} > {limit:.3e}",
                         {'sub_budget': sub_budget, 'value': value, 'limit': limit})
        self.sub_budget = sub_budget


class SwapErrorStalled(NumericalError):
    def __init__(self, errors):
        super().__init__('swap_error_stalled', "swap error does not decay", {'errors': list(errors)})


class NonMonotoneTrace(NumericalError):
    def __init__(self, index: int, increase: float):
        super().__init__('non_monotone_trace', f"relaxed energy increases by {increase:.3e} at step {index}",
                         {'index': index, 'increase': increase})


class NoFeasibleStart(NumericalError):
    def __init__(self, slope: float, cap: float):
        super().__init__('no_feasible_start', f"boundary data needs slope {slope:.6g} above cap {cap:.6g}",
                         {'slope': slope, 'cap': cap})


class ConvexityViolated(NumericalError):
    def __init__(self, gap: float):
        super().__init__('convexity_violated', f"Lagrangian is not convex in the gradient (hull gap {gap:.3e})",
                         {'gap': gap})
