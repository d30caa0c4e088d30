import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config import Config
from convexify import (ConvexEnvelope, SampledFunction, bipolar, convexity_tol, decompose, envelope_gap,
                       hull_support_inside, reduce_decomposition, sample, truncate)
from errors import (BudgetInfeasible, GapExceedsEpsilon, MarginTooSmall, NonMonotoneTrace, NumericalError,
                    RelaxoError, SwapErrorStalled, UnsupportedDecomposition, ValidationError)
from expr import LagrangianSpec
from logger import get_logger
from mesh import Mesh, P1Function, QuadratureRule, energy, grad_sup
from microstructure import OscillationCell, assemble, build_cell, delta_schedule, partition

log = get_logger('relaxo.relaxation')


@dataclass
class RecoveryCertificate:
    eps: float
    sup_dev: float
    grad_bound: float
    energy: float
    relaxed_energy: float
    energy_gap: float
    excluded_measure: float
    excluded_contribution: float
    fraction_residual: float
    K: float
    cells: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class TruncationTrace:
    K: List[float]
    relaxed: List[float]
    recovery: List[Optional[float]]
    limit: float
    plateau: bool
    support_inside: List[Optional[bool]] = field(default_factory=list)

    @property
    def flagged(self) -> bool:
        return not self.plateau

    def to_dict(self) -> dict:
        return {'K': self.K, 'relaxed': self.relaxed, 'recovery': self.recovery, 'limit': self.limit,
                'plateau': self.plateau, 'flagged': self.flagged, 'support_inside': self.support_inside}


class RecoveryRun(NamedTuple):
    steps: List[Tuple[P1Function, RecoveryCertificate]]
    diagnostic: Optional[dict]


@dataclass
class GeneralRecovery:
    steps: List[Tuple[P1Function, RecoveryCertificate]]
    energies: List[float]
    frozen_energies: List[float]
    swap_errors: List[float]
    relaxed: float
    diagnostic: Optional[dict] = None


class ScEstimate(NamedTuple):
    lower: float
    upper: float
    certificates: List[RecoveryCertificate]


@dataclass(frozen=True, eq=False)
class FrozenLagrangian:
    """f(x, u_bar(x), xi): the u slot is filled from a fixed profile."""

    base: LagrangianSpec
    profile: Callable

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def xi_bounds(self):
        return self.base.xi_bounds

    @property
    def depends_on_x(self) -> bool:
        return self.base.depends_on_x or self.base.depends_on_u

    @property
    def depends_on_u(self) -> bool:
        return False

    @property
    def autonomous(self) -> bool:
        return not self.depends_on_x

    @property
    def is_sampled(self) -> bool:
        return False

    @property
    def name(self) -> str:
        return f"{self.base.name or 'f'}_frozen"

    @property
    def nonneg(self) -> bool:
        return self.base.nonneg

    @property
    def hypotheses(self):
        return self.base.hypotheses

    def evaluate(self, x=None, u=None, g=None):
        return self.base.evaluate(x, self.profile(np.asarray(x, dtype=float)), g)


def truncated(f, K: float):
    if isinstance(f, FrozenLagrangian):
        return FrozenLagrangian(truncate(f.base, K), f.profile)
    return truncate(f, K)


class RelaxedLagrangian:
    """Pointwise bipolar in xi of a (truncated) Lagrangian, hulls cached per frozen (x, u).

    The gradient grid is the cube of half-width ``radius`` (default K); the
    Lagrangian is truncated to the ball of radius K on it.
    """

    def __init__(self, f, K: float, radius: Optional[float] = None, counts=None,
                 quantum: float = Config.FREEZE_QUANTUM, extend: bool = False):
        self.f = f
        self.K = float(K)
        self.radius = float(radius or K)
        self.dim = f.dim
        self.fK = truncated(f, K)
        self.counts = counts
        self.quantum = quantum
        self.extend = extend
        self.depends_on_x = f.depends_on_x
        self.depends_on_u = getattr(f, 'depends_on_u', False)
        self.nonneg = getattr(f, 'nonneg', False)
        self.name = f"{getattr(f, 'name', '') or 'f'}**"
        bound = math.inf if extend else self.K
        self.xi_bounds = tuple((-bound, bound) for _ in range(self.dim))
        self._cache: Dict[tuple, Tuple[SampledFunction, ConvexEnvelope, bool]] = {}
        self.hits = 0

    def _box(self):
        box = [(-self.radius, self.radius)] * self.dim
        return [(max(a, lo), min(b, hi)) for (a, b), (lo, hi) in zip(box, self.f.xi_bounds)]

    def _key(self, x, u) -> tuple:
        if getattr(self.f, 'autonomous', False) and not getattr(self.f, 'depends_on_u', False):
            return ()
        parts = []
        if self.f.depends_on_x:
            parts.extend(np.atleast_1d(x).tolist())
        if getattr(self.f, 'depends_on_u', False):
            parts.append(float(u))
        return tuple(int(round(p / self.quantum)) for p in parts)

    def hull(self, x=None, u=0.0) -> Tuple[SampledFunction, ConvexEnvelope, bool]:
        key = self._key(x, u)
        cached = self._cache.get(key)
        if cached is not None:
            self.hits += 1
            return cached
        x = np.zeros(self.dim) if x is None else np.asarray(x, dtype=float)
        samples = sample(self.fK, x, u, box=self._box(), counts=self.counts)
        env = bipolar(samples)
        convex = envelope_gap(samples, env) <= convexity_tol(samples)
        self._cache[key] = (samples, env, convex)
        return self._cache[key]

    def evaluate(self, x=None, u=None, g=None):
        g = np.asarray(g, dtype=float)
        shape = g.shape if self.dim == 1 else g.shape[:-1]
        gf = g.reshape(-1) if self.dim == 1 else g.reshape(-1, self.dim)
        n = len(gf)
        xf = np.broadcast_to(np.asarray(0.0 if x is None else x, dtype=float),
                             shape if self.dim == 1 else shape + (self.dim,)).reshape(n, -1)
        uf = np.broadcast_to(np.asarray(0.0 if u is None else u, dtype=float), shape).reshape(n)
        out = np.empty(n)
        groups: Dict[tuple, List[int]] = {}
        for k in range(n):
            groups.setdefault(self._key(xf[k], uf[k]), []).append(k)
        for idx in groups.values():
            first = idx[0]
            xk = xf[first][0] if self.dim == 1 else xf[first]
            samples, env, convex = self.hull(xk, uf[first])
            pts = gf[idx]
            xs = xf[idx][:, 0] if self.dim == 1 else xf[idx]
            vals = np.array(self.fK.evaluate(xs, uf[idx], pts) if convex else env.evaluate(pts), dtype=float)
            if self.extend:
                # beyond the ball f** = f when f is convex there or the hull support stays inside
                far = np.abs(pts) > self.K if self.dim == 1 else np.linalg.norm(pts, axis=1) > self.K
                if np.any(far) and (convex or hull_support_inside(env, self.K, samples)):
                    vals[far] = self.f.evaluate(xs[far], uf[idx][far], pts[far])
            out[idx] = vals
        return out.reshape(shape)

    @property
    def autonomous(self) -> bool:
        return not self.depends_on_x


def relaxed_energy(f, u: P1Function, K: Optional[float] = None, counts=None,
                   quad: Optional[QuadratureRule] = None, relaxed: Optional[RelaxedLagrangian] = None) -> float:
    """Quadrature of f**(x, u, grad u) with the bipolar frozen per quadrature point."""
    if relaxed is None:
        if K is None:
            K = max(2.0, 2.0 * grad_sup(u))
        relaxed = RelaxedLagrangian(f, K, counts=counts)
    return energy(relaxed, u, quad)


def _refined_background(u: P1Function, boxes: Sequence) -> P1Function:
    mesh = u.mesh
    cuts = [mesh.nodes]
    for box in boxes:
        (a, b), = box
        cuts.append(np.array([a, b]))
    xs = np.unique(np.concatenate(cuts))
    scale = max(b - a for a, b in mesh.box)
    xs = xs[np.concatenate([[True], np.diff(xs) > 1e-12 * scale])]
    cells = np.column_stack([np.arange(len(xs) - 1), np.arange(1, len(xs))])
    return P1Function(Mesh(1, xs, cells, np.array([0, len(xs) - 1]), mesh.box), u.evaluate(xs))


def _decomposition(relaxed: RelaxedLagrangian, anchor, u_value: float, xi_bar, eps_dec: float):
    samples, env, _ = relaxed.hull(anchor, u_value)
    try:
        dec = decompose(env, samples, xi_bar, eps_dec)
    except GapExceedsEpsilon as e:
        raise BudgetInfeasible('decomposition', e.gap, eps_dec) from e
    if dec.size > 2:
        reduced = reduce_decomposition(env, samples, dec, eps_dec)
        if reduced is None:
            raise UnsupportedDecomposition(dec.size)
        dec = reduced
    return dec


def _gradients_in_use(relaxed: RelaxedLagrangian, u: P1Function, eps_dec: float) -> np.ndarray:
    mesh = u.mesh
    grads = u.gradients()
    centers = mesh.points[mesh.cells].mean(axis=1)
    values = u.evaluate(centers[:, 0] if mesh.dim == 1 else centers)
    found = [grads.reshape(-1, mesh.dim)]
    for c in range(mesh.num_cells):
        anchor = float(centers[c, 0]) if mesh.dim == 1 else centers[c]
        dec = _decomposition(relaxed, anchor, float(values[c]), grads[c], eps_dec)
        found.append(dec.points.reshape(-1, mesh.dim))
    probes = np.unique(np.concatenate(found), axis=0)
    return probes[:, 0] if mesh.dim == 1 else probes


def recover(f, u: P1Function, eps: float, K: float, counts=None,
            relaxed: Optional[RelaxedLagrangian] = None) -> Tuple[P1Function, RecoveryCertificate]:
    """One constructive step: partition, decompose per cell, build, assemble."""
    if eps <= 0:
        raise ValidationError('invalid_epsilon', f"eps must be positive, got {eps}")
    if u.mesh.map_exponent is not None:
        raise ValidationError('unsupported_mesh', "recovery runs on unmapped meshes")
    bound = grad_sup(u)
    if bound >= K:
        raise MarginTooSmall(bound, K)
    relaxed = relaxed or RelaxedLagrangian(f, K, counts=counts)
    mesh = u.mesh
    volume = mesh.volume
    delta = eps * Config.BUDGET['proximity']
    eps_dec = eps * Config.BUDGET['decomposition'] / volume
    probes = _gradients_in_use(relaxed, u, eps_dec) if f.depends_on_x else None
    part = partition(mesh.box, f, u.evaluate, eps, K, delta, xi_probes=probes)

    constructions = []
    if mesh.dim == 1:
        background = _refined_background(u, [c.region for c in part.cells] + list(part.excluded))
        bm = background.mesh
        ends = bm.nodes[bm.cells]
        mids = ends.mean(axis=1)
        skip = np.zeros(bm.num_cells, dtype=bool)
        for (a, b), in part.excluded:
            skip |= (mids > a) & (mids < b)
        work = np.flatnonzero(~skip)
        deltas = delta_schedule(bm.measures()[work], delta, volume)
        grads = background.gradients()
        for j, (c, d_j) in enumerate(zip(work, deltas)):
            a, b = ends[c]
            xi_bar = float(grads[c])
            anchor = float(mids[c])
            dec = _decomposition(relaxed, anchor, float(background.evaluate(anchor)), xi_bar, eps_dec)
            cell = OscillationCell(((a, b),), np.array([anchor]), d_j, K, dec, index=j)
            offset = float(background.values[bm.cells[c, 0]]) - xi_bar * a
            constructions.append(build_cell(cell, (xi_bar, offset)))
        v = assemble(constructions, background)
    else:
        grads = u.gradients()
        if np.max(np.abs(grads - grads[0])) > 1e-9 * (1.0 + np.max(np.abs(grads))):
            raise ValidationError('unsupported', "2D recovery needs an affine u")
        xi_bar = grads[0]
        offset = float(u.values[0] - mesh.points[0] @ xi_bar)
        layer_budget = eps * Config.BUDGET['fraction']
        for cell in part.cells:
            anchor = cell.anchor
            u_value = float(offset + anchor @ xi_bar)
            cell.decomposition = _decomposition(relaxed, anchor, u_value, xi_bar, eps_dec)
            density = (lambda g, x=anchor, w=u_value: relaxed.fK.evaluate(x, w, g))
            share = layer_budget * cell.measure / volume
            constructions.append(build_cell(cell, (xi_bar, offset), density, share))
        background = _excluded_background(part.excluded, mesh.box, xi_bar, offset)
        v = assemble(constructions, background, reference=u)

    pts = v.mesh.nodes if v.mesh.dim == 1 else v.mesh.points
    sup_dev = float(np.max(np.abs(v.values - u.evaluate(pts))))
    grad_bound = grad_sup(v)
    if grad_bound >= K:
        raise MarginTooSmall(grad_bound, K)
    F = energy(f, v)
    R = relaxed_energy(f, u, relaxed=relaxed)
    gap = abs(F - R)
    residual = max((c.fraction_residual for c in constructions), default=0.0)
    cert = RecoveryCertificate(eps, sup_dev, grad_bound, F, R, gap, part.excluded_measure, part.excluded_contribution,
                               residual, K, len(constructions))
    if sup_dev >= eps:
        raise BudgetInfeasible('proximity', sup_dev, eps)
    if gap >= eps:
        raise BudgetInfeasible('energy', gap, eps)
    log.info(f"✅ recovery eps={eps:.3e}: F(v)={F:.6e}, relaxed={R:.6e}, sup_dev={sup_dev:.3e}")
    return v, cert


def _excluded_background(boxes: Sequence, box, xi_bar: np.ndarray, offset: float) -> P1Function:
    nodes, cells = [], []
    for (a1, b1), (a2, b2) in boxes:
        k = len(nodes)
        nodes.extend([(a1, a2), (b1, a2), (b1, b2), (a1, b2)])
        cells.extend([(k, k + 1, k + 2), (k, k + 2, k + 3)])
    nodes = np.array(nodes, dtype=float).reshape(-1, 2)
    mesh = Mesh.from_arrays(2, nodes, np.array(cells, dtype=int).reshape(-1, 3), box)
    return P1Function(mesh, offset + nodes @ xi_bar)


def recover_sequence(f, u: P1Function, schedule: Sequence[float], K: float, counts=None) -> RecoveryRun:
    relaxed = RelaxedLagrangian(f, K, counts=counts)
    steps = []
    for n, eps in enumerate(schedule):
        try:
            steps.append(recover(f, u, eps, K, relaxed=relaxed))
        except NumericalError as e:
            log.warning(f"⚠️ recovery stopped at eps={eps:.3e}: {e.message}")
            diagnostic = e.to_dict()
            diagnostic['eps'] = eps
            diagnostic['step'] = n
            return RecoveryRun(steps, diagnostic)
    return RecoveryRun(steps, None)


def recover_general(f: LagrangianSpec, u_bar: P1Function, K: float, n: int,
                    schedule: Optional[Sequence[float]] = None, counts=None) -> GeneralRecovery:
    """Recovery for u-dependent f through the frozen Lagrangian f(x, u_bar(x), xi)."""
    pts = u_bar.mesh.nodes if u_bar.mesh.dim == 1 else u_bar.mesh.points
    standing = float(np.max(np.abs(u_bar.evaluate(pts)))) + grad_sup(u_bar)
    if standing >= K:
        raise MarginTooSmall(standing, K)
    frozen = FrozenLagrangian(f, u_bar.evaluate) if f.depends_on_u else f
    schedule = list(schedule) if schedule is not None else [2.0 ** -k for k in range(1, n + 1)]
    run = recover_sequence(frozen, u_bar, schedule, K, counts)
    energies, frozen_energies, swaps = [], [], []
    for v, _ in run.steps:
        true_energy = energy(f, v)
        frozen_energy = energy(frozen, v)
        energies.append(true_energy)
        frozen_energies.append(frozen_energy)
        swaps.append(abs(true_energy - frozen_energy))
    relaxed = relaxed_energy(frozen, u_bar, K, counts)
    floor = Config.SWAP_FLOOR * max(1.0, abs(energies[-1])) if energies else 0.0
    if len(swaps) >= 3 and swaps[-1] > floor and swaps[-1] >= 0.5 * swaps[0]:
        raise SwapErrorStalled(swaps)
    return GeneralRecovery(run.steps, energies, frozen_energies, swaps, relaxed, run.diagnostic)


def truncation_limit(f: LagrangianSpec, u_bar: P1Function, schedule: Sequence[float],
                     n: Optional[int] = None, counts=None) -> TruncationTrace:
    """Relaxed energies of the truncations f_K on one shared gradient grid."""
    schedule = sorted(float(K) for K in schedule)
    pts = u_bar.mesh.nodes if u_bar.mesh.dim == 1 else u_bar.mesh.points
    standing = float(np.max(np.abs(u_bar.evaluate(pts)))) + grad_sup(u_bar)
    if schedule[0] <= standing:
        raise MarginTooSmall(standing, schedule[0])
    radius = schedule[-1]
    if counts is None and f.dim == 1:
        counts = int(Config.XI_GRID_1D * max(1, round(radius / 8)))
    relaxed_values, recovery, inside = [], [], []
    tol = 0.0
    for k, K in enumerate(schedule):
        relaxed = RelaxedLagrangian(f, K, radius=radius, counts=counts)
        value = relaxed_energy(f, u_bar, relaxed=relaxed)
        samples, env, _ = relaxed.hull(np.zeros(f.dim) if f.dim > 1 else 0.0, 0.0)
        tol = max(tol, env.tol_hull * u_bar.mesh.volume)
        inside.append(hull_support_inside(env, K, samples) if f.autonomous else None)
        if relaxed_values and value > relaxed_values[-1] + tol:
            raise NonMonotoneTrace(k, value - relaxed_values[-1])
        relaxed_values.append(value)
        if n:
            if f.depends_on_u:
                result = recover_general(f, u_bar, K, n, counts=counts)
                recovery.append(result.energies[-1] if result.energies else None)
            else:
                run = recover_sequence(f, u_bar, [2.0 ** -j for j in range(1, n + 1)], K, counts)
                recovery.append(run.steps[-1][1].energy if run.steps else None)
        else:
            recovery.append(None)
    limit, plateau = relaxed_values[-1], False
    for k in range(1, len(relaxed_values)):
        prev = relaxed_values[k - 1]
        if abs(relaxed_values[k] - prev) <= Config.TRUNCATION_RTOL * max(abs(prev), 1e-300):
            limit, plateau = relaxed_values[k], True
            break
    if not plateau:
        log.warning(f"⚠️ truncation trace has no plateau over K={schedule}")
    return TruncationTrace(schedule, relaxed_values, recovery, limit, plateau, inside)


def sc_minus_estimate(f, u: P1Function, K: float, schedule: Sequence[float], counts=None) -> ScEstimate:
    """Lower bound from the relaxed energy, upper bound from the best recovery found."""
    relaxed = RelaxedLagrangian(f, K, counts=counts)
    lower = relaxed_energy(f, u, relaxed=relaxed)
    certificates = []
    for eps in schedule:
        try:
            _, cert = recover(f, u, eps, K, relaxed=relaxed)
        except RelaxoError as e:
            log.debug(f"sc- upper bound: eps={eps:.3e} failed with {e.code}")
            continue
        certificates.append(cert)
    upper = min((c.energy for c in certificates), default=Config.SENTINEL)
    return ScEstimate(lower, upper, certificates)


def screen_hypotheses(f: LagrangianSpec, K: float, box=None, depth: int = 4) -> dict:
    """Numerical surrogates for the standing hypotheses on probe grids."""
    box = box or tuple((0.0, 1.0) for _ in range(f.dim))
    xi = np.linspace(-K, K, Config.XI_PROBES)
    if f.dim == 2:
        xi = np.stack(np.meshgrid(xi, xi, indexing='ij'), axis=-1).reshape(-1, 2)
    xs = [np.linspace(a, b, 2 ** depth + 1) for a, b in box]
    x = xs[0] if f.dim == 1 else np.stack(np.meshgrid(*xs, indexing='ij'), axis=-1).reshape(-1, 2)
    us = np.linspace(-1.0, 1.0, 5)
    report = {'declared': sorted(f.hypotheses), 'autonomous': f.autonomous, 'u_independent': not f.depends_on_u}
    try:
        if f.dim == 1:
            vals = f.evaluate(x[:, None, None], us[None, :, None], xi[None, None, :])
        else:
            vals = f.evaluate(x[:, None, None, :], us[None, :, None], xi[None, None, :, :])
        vals = np.asarray(vals, dtype=float)
        report['locally_bounded'] = bool(np.all(vals < Config.SENTINEL))
        finite = np.where(vals < Config.SENTINEL, vals, np.nan)
        report['sup_on_ball'] = float(np.nanmax(np.abs(finite)))
        report['x_modulus'] = float(np.nanmax(np.abs(np.diff(finite, axis=0)))) if len(x) > 1 else 0.0
        report['u_modulus'] = float(np.nanmax(np.abs(np.diff(finite, axis=1))))
    except NumericalError as e:
        report['locally_bounded'] = False
        report['failure'] = e.code
    return report


def relaxed_truncation_inequality(f: LagrangianSpec, K: float, x=None, u: float = 0.0,
                                  scale: int = 4) -> Tuple[bool, float]:
    """Check (f_K)** >= (f**)_K on the ball of radius K; returns (holds, worst violation)."""
    counts = Config.XI_GRID_1D if f.dim == 1 else Config.XI_GRID_2D
    if f.dim == 2:
        scale = 2
    inner = RelaxedLagrangian(f, K, counts=counts)
    outer = RelaxedLagrangian(f, scale * K, counts=scale * (counts - 1) + 1)
    x = np.zeros(f.dim) if x is None and f.dim > 1 else (0.0 if x is None else x)
    samples, env_K, _ = inner.hull(x, u)
    _, env_big, _ = outer.hull(x, u)
    nodes = samples.nodes()
    pts = nodes.reshape(-1, f.dim)
    ball = np.linalg.norm(pts, axis=1) <= K
    query = nodes[ball]
    lhs = env_K.evaluate(query)
    rhs = env_big.evaluate(query)
    tol = env_K.tol_hull + env_big.tol_hull
    worst = float(np.max(rhs - lhs)) if len(lhs) else 0.0
    return worst <= tol, max(0.0, worst)
