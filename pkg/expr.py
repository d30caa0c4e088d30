"""Expression language for Lagrangians f(x, u, g) and auxiliary functions.

Grammar (see docs/grammar.md): numbers, the constant ``pi``, variables
``x``/``x1..xN``, ``u``, ``g1..gN``, the operators ``+ - * / ^`` with the
usual precedence (``^`` binds tightest and associates to the right), the
builtins ``abs sqrt exp log sin cos`` (one argument) and ``min max`` (two or
more), and piecewise definitions ``pw(cond: e, ..., else: e)``.  ``inf`` may
only appear as a piecewise branch value.
"""
import math
import re
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy.interpolate import RegularGridInterpolator

from config import Config
from errors import (ArityMismatch, DomainError, ExprSyntaxError, NonFiniteError,
                    UnknownIdentifier, ValidationError)

TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op><=|>=|==|!=|<|>|[-+*/^(),:])
""", re.VERBOSE)

BINARY_BP = {'+': 10, '-': 10, '*': 20, '/': 20, '^': 40}
PREFIX_BP = 30
COMPARISONS = ('<', '<=', '>', '>=', '==', '!=')
UNARY_BUILTINS = ('abs', 'sqrt', 'exp', 'log', 'sin', 'cos')
VARIADIC_BUILTINS = ('min', 'max')
CONSTANTS = {'pi': math.pi}
OPERAND_START = ('number', 'identifier', '(', '-')
INT_POWER_LIMIT = 64


class Token(NamedTuple):
    type: str
    value: str
    where: int  # 1-based column


# AST

@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Const:
    name: str


@dataclass(frozen=True)
class Inf:
    pass


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Neg:
    operand: 'Node'


@dataclass(frozen=True)
class BinOp:
    op: str
    left: 'Node'
    right: 'Node'


@dataclass(frozen=True)
class Call:
    name: str
    args: Tuple['Node', ...]


@dataclass(frozen=True)
class Compare:
    op: str
    left: 'Node'
    right: 'Node'


@dataclass(frozen=True)
class Piecewise:
    branches: Tuple[Tuple[Compare, 'Node'], ...]
    otherwise: 'Node'


Node = Union[Num, Const, Inf, Var, Neg, BinOp, Call, Piecewise]


def tokenize(source: str):
    tokens = []
    pos = 0
    while pos < len(source):
        match = TOKEN_RE.match(source, pos)
        if not match:
            raise ExprSyntaxError(pos + 1, ('number', 'identifier', 'operator'), repr(source[pos]))
        kind = match.lastgroup
        if kind != 'ws':
            kind = 'identifier' if kind == 'name' else kind
            tokens.append(Token(kind, match.group(), pos + 1))
        pos = match.end()
    tokens.append(Token('end', '', len(source) + 1))
    return tokens


class _Parser:
    def __init__(self, source: str, dim: int):
        self.tokens = tokenize(source)
        self.i = 0
        self.dim = dim

    def peek(self, ahead: int = 0) -> Token:
        return self.tokens[min(self.i + ahead, len(self.tokens) - 1)]

    def advance(self) -> Token:
        tok = self.peek()
        self.i += 1
        return tok

    def expect(self, value: str, also=()) -> Token:
        tok = self.peek()
        if tok.value != value or tok.type == 'end':
            raise ExprSyntaxError(tok.where, (value,) + tuple(also), tok.value or 'end of input')
        return self.advance()

    def expression(self, rbp: int = 0) -> Node:
        left = self.nud(self.advance())
        while True:
            tok = self.peek()
            bp = BINARY_BP.get(tok.value) if tok.type == 'op' else None
            if bp is None or bp <= rbp:
                return left
            self.advance()
            right = self.expression(bp - 1 if tok.value == '^' else bp)
            left = BinOp(tok.value, left, right)

    def nud(self, tok: Token) -> Node:
        if tok.type == 'number':
            return Num(float(tok.value))
        if tok.type == 'identifier':
            if self.peek().value == '(':
                return self.call(tok)
            if tok.value in CONSTANTS:
                return Const(tok.value)
            if tok.value == 'inf':
                raise ExprSyntaxError(tok.where, OPERAND_START, "'inf' outside a piecewise branch value")
            return self.variable(tok)
        if tok.value == '(':
            inner = self.expression()
            self.expect(')', tuple(BINARY_BP))
            return inner
        if tok.value == '-':
            return Neg(self.expression(PREFIX_BP))
        raise ExprSyntaxError(tok.where, OPERAND_START, tok.value or 'end of input')

    def variable(self, tok: Token) -> Var:
        name = tok.value
        if name in ('x', 'u'):
            return Var(name)
        match = re.fullmatch(r'([xg])([1-9][0-9]*)', name)
        if match and int(match.group(2)) <= self.dim:
            return Var(name)
        raise UnknownIdentifier(name, tok.where)

    def call(self, tok: Token) -> Node:
        name = tok.value
        if name == 'pw':
            return self.piecewise()
        if name not in UNARY_BUILTINS and name not in VARIADIC_BUILTINS:
            raise UnknownIdentifier(name, tok.where)
        self.advance()
        args = []
        if self.peek().value != ')':
            while True:
                args.append(self.expression())
                if self.peek().value == ',':
                    self.advance()
                    continue
                self.expect(')', (',',) + tuple(BINARY_BP))
                break
        else:
            self.advance()
        if name in UNARY_BUILTINS and len(args) != 1:
            raise ArityMismatch(name, '1', len(args), tok.where)
        if name in VARIADIC_BUILTINS and len(args) < 2:
            raise ArityMismatch(name, 'at least 2', len(args), tok.where)
        return Call(name, tuple(args))

    def piecewise(self) -> Piecewise:
        self.advance()
        branches = []
        while True:
            if self.peek().value == 'else' and self.peek(1).value == ':':
                self.advance()
                self.advance()
                otherwise = self.branch_value()
                self.expect(')', tuple(BINARY_BP))
                return Piecewise(tuple(branches), otherwise)
            guard = self.comparison()
            self.expect(':', tuple(BINARY_BP))
            value = self.branch_value()
            # a final else branch is mandatory
            self.expect(',', tuple(BINARY_BP))
            branches.append((guard, value))

    def branch_value(self) -> Node:
        tok = self.peek()
        if tok.value == 'inf' and self.peek(1).value in (',', ')'):
            self.advance()
            return Inf()
        return self.expression()

    def comparison(self) -> Compare:
        left = self.expression()
        tok = self.peek()
        if tok.value not in COMPARISONS:
            raise ExprSyntaxError(tok.where, COMPARISONS + tuple(BINARY_BP), tok.value or 'end of input')
        self.advance()
        return Compare(tok.value, left, self.expression())


def parse(source: str, dim: int = 1) -> Node:
    if not source or not source.strip():
        raise ExprSyntaxError(1, OPERAND_START, 'empty expression')
    if dim < 1:
        raise ValidationError('invalid_dimension', f"dimension must be >= 1, got {dim}")
    parser = _Parser(source, dim)
    tree = parser.expression()
    tok = parser.peek()
    if tok.type != 'end':
        raise ExprSyntaxError(tok.where, ('end of input',) + tuple(BINARY_BP), tok.value)
    return tree


# Printing

def _precedence(node: Node) -> int:
    if isinstance(node, BinOp):
        return BINARY_BP[node.op]
    if isinstance(node, Neg):
        return PREFIX_BP
    return 100


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e16:
        return str(int(value))
    return repr(value)


def pretty(node: Node) -> str:
    if isinstance(node, Num):
        text = _format_number(node.value)
        return f"({text})" if node.value < 0 else text
    if isinstance(node, (Const, Var)):
        return node.name
    if isinstance(node, Inf):
        return 'inf'
    if isinstance(node, Neg):
        inner = pretty(node.operand)
        return f"-({inner})" if _precedence(node.operand) < PREFIX_BP else f"-{inner}"
    if isinstance(node, BinOp):
        p = BINARY_BP[node.op]
        left, right = pretty(node.left), pretty(node.right)
        if node.op == '^':
            left_wrap = _precedence(node.left) <= p
            right_wrap = _precedence(node.right) < p
        else:
            left_wrap = _precedence(node.left) < p
            right_wrap = _precedence(node.right) <= p
        if left_wrap:
            left = f"({left})"
        if right_wrap:
            right = f"({right})"
        op = '^' if node.op == '^' else f" {node.op} "
        return f"{left}{op}{right}"
    if isinstance(node, Call):
        return f"{node.name}({', '.join(pretty(a) for a in node.args)})"
    if isinstance(node, Compare):
        return f"{pretty(node.left)} {node.op} {pretty(node.right)}"
    if isinstance(node, Piecewise):
        parts = [f"{pretty(g)}: {pretty(v)}" for g, v in node.branches]
        parts.append(f"else: {pretty(node.otherwise)}")
        return f"pw({', '.join(parts)})"
    raise TypeError(f"not an expression node: {node!r}")


def _children(node):
    if isinstance(node, Neg):
        return (node.operand,)
    if isinstance(node, (BinOp, Compare)):
        return (node.left, node.right)
    if isinstance(node, Call):
        return node.args
    if isinstance(node, Piecewise):
        flat = []
        for guard, value in node.branches:
            flat.extend((guard, value))
        flat.append(node.otherwise)
        return tuple(flat)
    return ()


def free_variables(node: Node) -> FrozenSet[str]:
    if isinstance(node, Var):
        return frozenset({'x1' if node.name == 'x' else node.name})
    found = frozenset()
    for child in _children(node):
        found |= free_variables(child)
    return found


def contains_inf(node: Node) -> bool:
    return isinstance(node, Inf) or any(contains_inf(c) for c in _children(node))


# Evaluation

def _int_power(base: np.ndarray, n: int) -> np.ndarray:
    if n < 0 and np.any(base == 0):
        raise DomainError('0^negative', 0.0)
    result = np.ones_like(base)
    square = base
    k = abs(n)
    while k:
        if k & 1:
            result = result * square
        k >>= 1
        if k:
            square = square * square
    return 1.0 / result if n < 0 else result


def _power(node: BinOp, env, n) -> np.ndarray:
    base = _eval(node.left, env, n)
    if isinstance(node.right, Num) and node.right.value.is_integer() \
            and abs(node.right.value) <= INT_POWER_LIMIT:
        return _int_power(base, int(node.right.value))
    exponent = _eval(node.right, env, n)
    integral = exponent == np.round(exponent)
    if np.any((base == 0) & (exponent < 0)):
        raise DomainError('0^negative', 0.0)
    if np.any((base < 0) & ~integral):
        raise DomainError('negative base with non-integer exponent', float(base[(base < 0) & ~integral][0]))
    return np.power(base, exponent)


def _call(node: Call, env, n) -> np.ndarray:
    args = [_eval(a, env, n) for a in node.args]
    name = node.name
    if name == 'min':
        return np.minimum.reduce(args)
    if name == 'max':
        return np.maximum.reduce(args)
    a = args[0]
    if name == 'log':
        bad = a <= 0
        if np.any(bad):
            raise DomainError('log of nonpositive', float(a[bad][0]))
        return np.log(a)
    if name == 'sqrt':
        bad = a < 0
        if np.any(bad):
            raise DomainError('sqrt of negative', float(a[bad][0]))
        return np.sqrt(a)
    return {'abs': np.abs, 'exp': np.exp, 'sin': np.sin, 'cos': np.cos}[name](a)


def _compare(node: Compare, env, n) -> np.ndarray:
    left, right = _eval(node.left, env, n), _eval(node.right, env, n)
    return {
        '<': np.less, '<=': np.less_equal, '>': np.greater,
        '>=': np.greater_equal, '==': np.equal, '!=': np.not_equal,
    }[node.op](left, right)


def _piecewise(node: Piecewise, env, n) -> np.ndarray:
    out = np.empty(n)
    remaining = np.ones(n, dtype=bool)
    for guard, value in node.branches:
        idx = np.flatnonzero(remaining)
        if idx.size == 0:
            return out
        hit = idx[_compare(guard, {k: v[idx] for k, v in env.items()}, idx.size)]
        if hit.size:
            out[hit] = _eval(value, {k: v[hit] for k, v in env.items()}, hit.size)
            remaining[hit] = False
    idx = np.flatnonzero(remaining)
    if idx.size:
        out[idx] = _eval(node.otherwise, {k: v[idx] for k, v in env.items()}, idx.size)
    return out


def _eval(node: Node, env: Dict[str, np.ndarray], n: int) -> np.ndarray:
    if isinstance(node, Num):
        return np.full(n, node.value)
    if isinstance(node, Const):
        return np.full(n, CONSTANTS[node.name])
    if isinstance(node, Inf):
        return np.full(n, np.inf)
    if isinstance(node, Var):
        return env['x1' if node.name == 'x' else node.name]
    if isinstance(node, Neg):
        return -_eval(node.operand, env, n)
    if isinstance(node, BinOp):
        if node.op == '^':
            return _power(node, env, n)
        left, right = _eval(node.left, env, n), _eval(node.right, env, n)
        if node.op == '+':
            return left + right
        if node.op == '-':
            return left - right
        if node.op == '*':
            return left * right
        return left / right
    if isinstance(node, Call):
        return _call(node, env, n)
    if isinstance(node, Piecewise):
        return _piecewise(node, env, n)
    raise TypeError(f"cannot evaluate {node!r}")


def _components(value, dim: int):
    arr = np.asarray(0.0 if value is None else value, dtype=float)
    if dim == 1 or arr.ndim == 0:
        return [arr] * dim
    return [arr[..., i] for i in range(dim)]


def evaluate(node: Node, x=None, u=None, g=None, dim: int = 1):
    """Evaluate ``node`` at broadcast bindings.

    For ``dim == 1`` the arrays hold one value per point; otherwise ``x`` and
    ``g`` carry a trailing axis of length ``dim``.  Scalars in, float out.
    """
    named = {'u': np.asarray(0.0 if u is None else u, dtype=float)}
    for i, (xi, gi) in enumerate(zip(_components(x, dim), _components(g, dim)), start=1):
        named[f'x{i}'] = xi
        named[f'g{i}'] = gi
    arrays = np.broadcast_arrays(*named.values())
    shape = arrays[0].shape
    env = {k: np.ravel(a) for k, a in zip(named, arrays)}
    size = int(np.prod(shape)) if shape else 1
    if not shape:
        env = {k: v.reshape(1) for k, v in env.items()}
    with np.errstate(all='ignore'):
        out = _eval(node, env, size)
    if contains_inf(node):
        bad = np.isnan(out) | (out == -np.inf)
        out = np.where(out == np.inf, Config.SENTINEL, out)
    else:
        bad = ~np.isfinite(out)
    if np.any(bad):
        index = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(f"non-finite value {out[index]} at sample {index}", index)
    return float(out[0]) if not shape else out.reshape(shape)


# Sampled Lagrangians

@dataclass(frozen=True, eq=False)
class GridSamples:
    """Values on a uniform tensor grid in the gradient variable."""

    lo: Tuple[float, ...]
    hi: Tuple[float, ...]
    counts: Tuple[int, ...]
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lo))
        hi = tuple(float(v) for v in np.atleast_1d(self.hi))
        counts = tuple(int(c) for c in np.atleast_1d(self.counts))
        if not (len(lo) == len(hi) == len(counts)):
            raise ValidationError('invalid_grid', "lo, hi and counts must have one entry per axis")
        if any(c < 3 for c in counts) or any(a >= b for a, b in zip(lo, hi)):
            raise ValidationError('invalid_grid', f"need count >= 3 and lo < hi per axis, got {lo}, {hi}, {counts}")
        values = np.array(self.values, dtype=float).reshape(counts)
        if np.any(np.isnan(values)) or np.any(values == -np.inf):
            raise ValidationError('invalid_grid', "samples must be finite or +infinity")
        values[values >= Config.SENTINEL] = Config.SENTINEL
        values.setflags(write=False)
        object.__setattr__(self, 'lo', lo)
        object.__setattr__(self, 'hi', hi)
        object.__setattr__(self, 'counts', counts)
        object.__setattr__(self, 'values', values)

    @property
    def dim(self) -> int:
        return len(self.counts)

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple((b - a) / (c - 1) for a, b, c in zip(self.lo, self.hi, self.counts))

    @property
    def box(self):
        return tuple(zip(self.lo, self.hi))

    @property
    def finite(self) -> np.ndarray:
        return self.values < Config.SENTINEL

    def axes(self):
        return [np.linspace(a, b, c) for a, b, c in zip(self.lo, self.hi, self.counts)]

    def nodes(self) -> np.ndarray:
        axes = self.axes()
        if self.dim == 1:
            return axes[0]
        mesh = np.meshgrid(*axes, indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def interpolate(self, g) -> np.ndarray:
        g = np.asarray(g, dtype=float)
        values = np.where(self.finite, self.values, 0.0)
        blocked = (~self.finite).astype(float)
        if self.dim == 1:
            axis = self.axes()[0]
            out = np.interp(g, axis, values)
            hit = np.interp(g, axis, blocked) > 0
            outside = (g < self.lo[0]) | (g > self.hi[0])
        else:
            axes = tuple(self.axes())
            points = g.reshape(-1, self.dim)
            out = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=0.0)(points)
            hit = RegularGridInterpolator(axes, blocked, bounds_error=False, fill_value=1.0)(points) > 0
            outside = np.zeros(len(points), dtype=bool)
            out, hit = out.reshape(g.shape[:-1]), hit.reshape(g.shape[:-1])
            outside = outside.reshape(g.shape[:-1])
        return np.where(hit | outside, Config.SENTINEL, out)


@dataclass(frozen=True)
class LagrangianSpec:
    form: Union[Node, GridSamples]
    dim: int
    depends_on_x: bool
    depends_on_u: bool
    xi_bounds: Tuple[Tuple[float, float], ...] = None
    nonneg: bool = False
    name: str = ''
    source: str = ''
    hypotheses: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.dim < 1:
            raise ValidationError('invalid_dimension', f"dimension must be >= 1, got {self.dim}")
        bounds = self.xi_bounds or tuple((-math.inf, math.inf) for _ in range(self.dim))
        bounds = tuple((float(a), float(b)) for a, b in bounds)
        if len(bounds) != self.dim or any(a >= b for a, b in bounds):
            raise ValidationError('invalid_bounds', f"xi_bounds {bounds} do not describe a {self.dim}-D box")
        object.__setattr__(self, 'xi_bounds', bounds)
        if isinstance(self.form, GridSamples):
            if self.form.dim != self.dim or self.depends_on_x or self.depends_on_u:
                raise ValidationError('inconsistent_flags', "sampled Lagrangians are autonomous in x and u")
            return
        free = free_variables(self.form)
        uses_x = any(v.startswith('x') for v in free)
        if uses_x != self.depends_on_x or ('u' in free) != self.depends_on_u:
            raise ValidationError('inconsistent_flags',
                                  f"dependence flags disagree with free variables {sorted(free)}")

    @classmethod
    def from_expression(cls, source: str, dim: int = 1, xi_bounds=None, nonneg: bool = False,
                        name: str = '', hypotheses=()) -> 'LagrangianSpec':
        tree = parse(source, dim)
        free = free_variables(tree)
        return cls(tree, dim, any(v.startswith('x') for v in free), 'u' in free,
                   xi_bounds, nonneg, name, source, tuple(hypotheses))

    @classmethod
    def from_samples(cls, samples: GridSamples, nonneg: Optional[bool] = None,
                     name: str = '', source: str = '') -> 'LagrangianSpec':
        if nonneg is None:
            nonneg = bool(np.all(samples.values[samples.finite] >= 0))
        return cls(samples, samples.dim, False, False, samples.box, nonneg, name, source)

    @property
    def is_sampled(self) -> bool:
        return isinstance(self.form, GridSamples)

    @property
    def autonomous(self) -> bool:
        return not self.depends_on_x

    def describe(self) -> str:
        return self.source or (pretty(self.form) if not self.is_sampled else f"<samples {self.form.counts}>")

    def evaluate(self, x=None, u=None, g=None):
        if self.is_sampled:
            out = self.form.interpolate(g)
            shape = np.broadcast_shapes(np.shape(out), np.shape(np.asarray(0.0 if u is None else u)))
            out = np.broadcast_to(out, shape)
            return float(out) if not shape else np.array(out)
        return evaluate(self.form, x, u, g, self.dim)
