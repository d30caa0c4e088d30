import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from convexify import CaratheodoryDecomposition
from errors import (BudgetInfeasible, MarginTooSmall, NonConformingInterface, OscillationUnresolvable,
                    UnsupportedDecomposition, ValidationError)
from expr import LagrangianSpec
from logger import get_logger
from mesh import Mesh, P1Function, build_box_mesh, grad_sup

log = get_logger('relaxo.microstructure')

Box = Tuple[Tuple[float, float], ...]


@dataclass
class OscillationCell:
    region: Box
    anchor: np.ndarray
    delta: float
    K: float
    decomposition: Optional[CaratheodoryDecomposition] = None
    oscillation: float = 0.0
    index: int = 0

    @property
    def measure(self) -> float:
        return float(np.prod([b - a for a, b in self.region]))

    @property
    def margin(self) -> float:
        if self.decomposition is None:
            return math.inf
        return self.K - float(np.max(np.linalg.norm(self.decomposition.points, axis=1)))


@dataclass
class Partition:
    cells: List[OscillationCell]
    excluded: List[Box]
    excluded_measure: float
    excluded_contribution: float  # surrogate for the integral of a over the excluded set
    tolerance: float
    warnings: List[str] = field(default_factory=list)


@dataclass
class CellConstruction:
    cell: OscillationCell
    v: P1Function
    fractions: np.ndarray  # realized measure per decomposition point
    targets: np.ndarray    # alpha_i |cell|
    sup_dev: float
    grad_bound: float

    @property
    def fraction_residual(self) -> float:
        return float(np.max(np.abs(self.fractions - self.targets))) if len(self.targets) else 0.0

    def to_dict(self) -> dict:
        return {
            'region': [list(r) for r in self.cell.region],
            'delta': self.cell.delta,
            'fractions': self.fractions.tolist(),
            'targets': self.targets.tolist(),
            'sup_dev': self.sup_dev,
            'grad_bound': self.grad_bound,
            'decomposition': self.cell.decomposition.to_dict() if self.cell.decomposition else None,
        }


def delta_schedule(measures: Sequence[float], delta: float, total: float) -> List[float]:
    """Split delta in proportion to cell measure, so the shares sum to at most delta."""
    return [delta * m / total for m in measures]


def _probe_points(box: Box, count: int) -> np.ndarray:
    axes = [np.linspace(a, b, count) for a, b in box]
    if len(box) == 1:
        return axes[0]
    return np.array(list(product(*axes)))


def _xi_probes(dim: int, K: float, count: int) -> np.ndarray:
    axis = np.linspace(-K, K, count)
    if dim == 1:
        return axis
    return np.array(list(product(*([axis] * dim))))


def _screen(f: LagrangianSpec, box: Box, u_profile: Callable, xi: np.ndarray) -> Tuple[float, float]:
    xs = _probe_points(box, Config.X_PROBES)
    us = np.asarray(u_profile(xs), dtype=float)
    if f.dim == 1:
        vals = f.evaluate(xs[:, None], us[:, None], xi[None, :])
    else:
        vals = f.evaluate(xs[:, None, :], us[:, None], xi[None, :, :])
    vals = np.asarray(vals, dtype=float)
    vals = np.where(vals >= Config.SENTINEL, np.nan, vals)
    osc = float(np.nanmax(np.nanmax(vals, axis=0) - np.nanmin(vals, axis=0)))
    return osc, float(np.nanmax(np.abs(vals)))


def _split(box: Box) -> List[Box]:
    halves = [((a, 0.5 * (a + b)), (0.5 * (a + b), b)) for a, b in box]
    return [tuple(choice) for choice in product(*halves)]


def partition(domain: Box, f: LagrangianSpec, u_profile: Callable, eps: float, K: float,
              delta: Optional[float] = None, max_depth: Optional[int] = None,
              xi_probes: Optional[np.ndarray] = None) -> Partition:
    """Dyadic cubes on which f(., u(.), xi) oscillates by at most eps/(9|domain|).

    Oscillation is probed on ``xi_probes`` when given, else on a grid of [-K, K]^N.
    """
    if eps <= 0:
        raise ValidationError('invalid_epsilon', f"eps must be positive, got {eps}")
    domain = tuple((float(a), float(b)) for a, b in domain)
    volume = float(np.prod([b - a for a, b in domain]))
    tol = eps * Config.BUDGET['oscillation'] / volume
    delta = eps * Config.BUDGET['proximity'] if delta is None else delta
    max_depth = Config.PARTITION_MAX_DEPTH if max_depth is None else max_depth
    if not f.depends_on_x:
        cell = OscillationCell(domain, np.array([0.5 * (a + b) for a, b in domain]), delta * 0.5, K)
        return Partition([cell], [], 0.0, 0.0, tol)

    xi = _xi_probes(f.dim, K, Config.XI_PROBES) if xi_probes is None else np.asarray(xi_probes, dtype=float)
    accepted, excluded, surrogate = [], [], 0.0
    stack = [(domain, 0)]
    while stack:
        box, depth = stack.pop()
        osc, sup_f = _screen(f, box, u_profile, xi)
        if osc <= tol:
            accepted.append((box, osc))
        elif depth < max_depth:
            stack.extend((child, depth + 1) for child in reversed(_split(box)))
        else:
            excluded.append(box)
            surrogate += float(np.prod([b - a for a, b in box])) * sup_f

    excluded_measure = sum(float(np.prod([b - a for a, b in box])) for box in excluded)
    if excluded_measure > delta:
        raise OscillationUnresolvable(excluded_measure, delta, [list(map(list, b)) for b in excluded[:20]])
    limit = eps * Config.BUDGET['excluded']
    if surrogate > limit:
        raise BudgetInfeasible('excluded', surrogate, limit)
    accepted.sort(key=lambda item: tuple(a for a, _ in item[0]))
    measures = [float(np.prod([b - a for a, b in box])) for box, _ in accepted]
    deltas = delta_schedule(measures, delta, volume)
    cells = [OscillationCell(box, np.array([0.5 * (a + b) for a, b in box]), d, K, oscillation=osc, index=j)
             for j, ((box, osc), d) in enumerate(zip(accepted, deltas))]
    log.debug(f"partition: {len(cells)} cells, excluded measure {excluded_measure:.3e}")
    return Partition(cells, excluded, excluded_measure, surrogate, tol)


def _identity_cell(cell: OscillationCell, xi_bar: np.ndarray, offset: float) -> CellConstruction:
    if len(cell.region) == 1:
        (a, b), = cell.region
        mesh = Mesh.from_arrays(1, [a, b], [[0, 1]], cell.region)
        v = P1Function(mesh, offset + xi_bar[0] * mesh.nodes)
    else:
        mesh = build_box_mesh(2, cell.region, 1)
        v = P1Function(mesh, offset + mesh.points @ xi_bar)
    return CellConstruction(cell, v, np.array([cell.measure]), np.array([cell.measure]), 0.0,
                            float(np.linalg.norm(xi_bar)))


def _sawtooth(cell: OscillationCell, xi_bar: float, offset: float) -> CellConstruction:
    dec = cell.decomposition
    (a, b), = cell.region
    width = b - a
    (x1, x2), (w1, w2) = dec.points[:, 0], dec.weights
    second = (xi_bar - w1 * x1) / w2  # closes each period on u
    teeth = max(1, math.ceil(w1 * w2 * abs(x1 - x2) * width / cell.delta - 1e-9))
    period = width / teeth
    starts = a + period * np.arange(teeth)
    mids = starts + w1 * period
    nodes = np.empty(2 * teeth + 1)
    nodes[0:-1:2], nodes[1::2], nodes[-1] = starts, mids, b
    values = offset + xi_bar * nodes
    values[1::2] = offset + xi_bar * starts + x1 * (mids - starts)
    cells = np.column_stack([np.arange(2 * teeth), np.arange(1, 2 * teeth + 1)])
    v = P1Function(Mesh.from_arrays(1, nodes, cells, cell.region), values)
    lengths = np.diff(nodes)
    fractions = np.array([np.sum(lengths[0::2]), np.sum(lengths[1::2])])
    if max(abs(x1), abs(second)) >= cell.K:
        raise MarginTooSmall(max(abs(x1), abs(second)), cell.K)
    sup_dev = float(np.max(np.abs(values - (offset + xi_bar * nodes))))
    return CellConstruction(cell, v, fractions, dec.weights * width, sup_dev, grad_sup(v))


def _clip(poly: List[np.ndarray], normal: np.ndarray, shift: float) -> List[np.ndarray]:
    """Sutherland-Hodgman step keeping {p : normal.p + shift <= 0}."""
    out = []
    for i in range(len(poly)):
        p, q = poly[i], poly[(i + 1) % len(poly)]
        fp, fq = normal @ p + shift, normal @ q + shift
        if fp <= 0:
            out.append(p)
        if (fp < 0 < fq) or (fq < 0 < fp):
            out.append(p + fp / (fp - fq) * (q - p))
    return out


def _polygon_area(poly) -> float:
    p = np.asarray(poly)
    return 0.5 * abs(np.dot(p[:, 0], np.roll(p[:, 1], -1)) - np.dot(p[:, 1], np.roll(p[:, 0], -1)))


def _laminate_pieces(region: Box, direction: np.ndarray, period: float, weights: np.ndarray, L: float,
                     layer_slope: float) -> List[List[np.ndarray]]:
    """Convex pieces on which u + min(L*psi(<x, n>), m*dist(x, boundary)) is affine.

    Pieces come from the nearest-side regions of the box, the strips of
    each period and the kink line of the min inside every strip.
    """
    (a1, b1), (a2, b2) = region
    corners = [np.array(c, dtype=float) for c in ((a1, a2), (b1, a2), (b1, b2), (a1, b2))]
    sides = [(np.array([1.0, 0.0]), -a1), (np.array([-1.0, 0.0]), b1),
             (np.array([0.0, 1.0]), -a2), (np.array([0.0, -1.0]), b2)]
    s = [direction @ c for c in corners]
    s_lo = min(s)
    n_periods = math.ceil((max(s) - s_lo) / period)
    w1, w2 = weights
    floor = 1e-16 * (b1 - a1) * (b2 - a2)
    pieces = []
    for k, (gk, ck) in enumerate(sides):
        roof = list(corners)
        for j, (gj, cj) in enumerate(sides):
            if j != k and len(roof) >= 3:
                roof = _clip(roof, gk - gj, ck - cj)
        if len(roof) < 3:
            continue
        dg, dc = layer_slope * gk, layer_slope * ck
        for p in range(n_periods):
            start = s_lo + p * period
            turn = start + w2 * period
            # rising part (gradient of the second point), then falling part
            for lo, hi, pg, pc in ((start, turn, w1 * L * direction, -w1 * L * start),
                                   (turn, start + period, -w2 * L * direction, w2 * L * (start + period))):
                strip = _clip(roof, direction, -hi)
                if len(strip) >= 3:
                    strip = _clip(strip, -direction, lo)
                if len(strip) < 3:
                    continue
                for sign in (1.0, -1.0):
                    piece = _clip(strip, sign * (pg - dg), sign * (pc - dc))
                    if len(piece) >= 3 and _polygon_area(piece) > floor:
                        pieces.append(piece)
    return pieces


def _laminate_correction(points: np.ndarray, region: Box, direction: np.ndarray, s_lo: float, period: float,
                         weights: np.ndarray, L: float, layer_slope: float) -> np.ndarray:
    (a1, b1), (a2, b2) = region
    w1, w2 = weights
    t = np.mod(points @ direction - s_lo, period)
    psi = np.where(t <= w2 * period, w1 * L * t, w2 * L * (period - t))
    dist = np.minimum.reduce([points[:, 0] - a1, b1 - points[:, 0], points[:, 1] - a2, b2 - points[:, 1]])
    return np.clip(np.minimum(psi, layer_slope * dist), 0.0, None)


def _laminate(cell: OscillationCell, xi_bar: np.ndarray, offset: float, density: Optional[Callable],
              energy_budget: Optional[float]) -> CellConstruction:
    dec = cell.decomposition
    if dec.size > 2:
        raise UnsupportedDecomposition(dec.size)
    points = dec.points + (xi_bar - dec.weights @ dec.points)  # mean is exactly xi_bar
    weights = dec.weights
    top = float(np.max(np.linalg.norm(points, axis=1)))
    if top >= cell.K:
        raise MarginTooSmall(top, cell.K)
    d = points[1] - points[0]
    L = float(np.linalg.norm(d))
    direction = d / L
    layer_slope = 0.5 * (cell.K - float(np.linalg.norm(xi_bar)))
    region = cell.region
    area = cell.measure
    widths = [b - a for a, b in region]
    perimeter = 2 * sum(widths)
    amplitude = min(cell.delta, layer_slope * float(np.min(weights)) * cell.delta / perimeter)
    if density is not None and energy_budget is not None:
        probes = [xi_bar + layer_slope * np.array(e, dtype=float) for e in ((1, 0), (-1, 0), (0, 1), (0, -1))]
        peak = max(abs(float(density(g))) for g in probes + list(points))
        if peak > 0:
            amplitude = min(amplitude, layer_slope * energy_budget / (perimeter * peak))
    period = min(amplitude / (L * weights[0] * weights[1]), 0.5 * min(widths))
    s_lo = min(direction @ np.array(c, dtype=float) for c in product(*region))
    targets = weights * area
    scale = max(widths)
    limit = math.hypot(*widths) / (4 * Config.XI_GRID_1D)

    for attempt in range(Config.LAMINATE_RETRIES):
        if period < limit:
            raise BudgetInfeasible('fraction', limit, period)
        index, nodes, tris = {}, [], []
        for piece in _laminate_pieces(region, direction, period, weights, L, layer_slope):
            ids = []
            for p in piece:
                key = _merge_key(p, scale)
                if key not in index:
                    index[key] = len(nodes)
                    nodes.append(p)
                if index[key] not in ids:
                    ids.append(index[key])
            tris.extend((ids[0], ids[k], ids[k + 1]) for k in range(1, len(ids) - 1))
        nodes = np.array(nodes)
        mesh = Mesh.from_arrays(2, nodes, np.array(tris), region)
        keep = mesh.measures() > 1e-14 * area
        if not np.all(keep):
            mesh = Mesh.from_arrays(2, nodes, mesh.cells[keep], region)
        values = offset + nodes @ xi_bar + _laminate_correction(nodes, region, direction, s_lo, period,
                                                                weights, L, layer_slope)
        values[mesh.boundary] = offset + nodes[mesh.boundary] @ xi_bar
        v = P1Function(mesh, values)
        grads = v.gradients()
        tol = 1e-7 * (1.0 + L)
        fractions = np.array([np.sum(mesh.measures()[np.linalg.norm(grads - p, axis=1) <= tol]) for p in points])
        bound = grad_sup(v)
        if np.all(np.abs(fractions - targets) <= weights * cell.delta) and bound < cell.K:
            sup_dev = float(np.max(np.abs(values - (offset + nodes @ xi_bar))))
            return CellConstruction(cell, v, fractions, targets, sup_dev, bound)
        log.debug(f"laminate attempt {attempt}: fraction residual {np.max(np.abs(fractions - targets)):.3e}, "
                  f"gradient {bound:.4f}")
        period *= 0.5
    raise BudgetInfeasible('fraction', float(np.max(np.abs(fractions - targets))), float(np.min(weights * cell.delta)))


def build_cell(cell: OscillationCell, u_affine: Tuple, density: Optional[Callable] = None,
               energy_budget: Optional[float] = None) -> CellConstruction:
    """Replace the affine u on ``cell`` by a function whose gradient realizes the decomposition.

    ``u_affine`` is ``(gradient, offset)`` with u(x) = offset + <gradient, x>.
    In 2D, ``density`` (gradient -> f value) and ``energy_budget`` bound the
    energy spent in the boundary layer.
    """
    xi_bar = np.atleast_1d(np.asarray(u_affine[0], dtype=float))
    offset = float(u_affine[1])
    dec = cell.decomposition
    if dec is None or dec.size == 1:
        return _identity_cell(cell, xi_bar, offset)
    if cell.delta <= 0:
        raise ValidationError('invalid_delta', f"delta_j must be positive, got {cell.delta}")
    if len(cell.region) == 1:
        top = float(np.max(np.abs(dec.points)))
        if top >= cell.K:
            raise MarginTooSmall(top, cell.K)
        return _sawtooth(cell, float(xi_bar[0]), offset)
    return _laminate(cell, xi_bar, offset, density, energy_budget)


def _merge_key(p: np.ndarray, scale: float):
    return tuple(np.round(np.atleast_1d(p) / scale, 11))


def assemble(constructions: Sequence[CellConstruction], background: P1Function,
             reference: Optional[P1Function] = None) -> P1Function:
    """Global P1 function: constructions inside their cells, background elsewhere."""
    mesh = background.mesh
    scale = max(b - a for a, b in mesh.box)
    tol = 1e-9 * (1.0 + float(np.max(np.abs(background.values), initial=0.0)))
    if not constructions:
        return background
    if mesh.dim == 1:
        nodes = {}
        covered = [c.cell.region[0] for c in constructions]
        for k, x in enumerate(mesh.nodes):
            nodes[_merge_key(x, scale)] = (float(x), float(background.values[k]), True)
        for c in constructions:
            (a, b), = c.cell.region
            for x, value in zip(c.v.mesh.nodes, c.v.values):
                key = _merge_key(x, scale)
                if key in nodes and nodes[key][2]:
                    if abs(nodes[key][1] - value) > tol:
                        raise NonConformingInterface(int(np.argmin(np.abs(mesh.nodes - x))),
                                                     abs(nodes[key][1] - value))
                    continue
                nodes[key] = (float(x), float(value), False)
        xs = np.array([v[0] for v in nodes.values()])
        vals = np.array([v[1] for v in nodes.values()])
        order = np.argsort(xs, kind='stable')
        xs, vals = xs[order], vals[order]
        for a, b in covered:
            inside = (xs > a) & (xs < b)
            if np.any(np.isin(np.round(mesh.nodes / scale, 11), np.round(xs[inside] / scale, 11))):
                raise NonConformingInterface(-1, 0.0)
        cells = np.column_stack([np.arange(len(xs) - 1), np.arange(1, len(xs))])
        return P1Function(Mesh(1, xs, cells, np.array([0, len(xs) - 1]), mesh.box), vals)

    # 2D: construction triangles plus background triangles outside every cell
    centroids = mesh.points[mesh.cells].mean(axis=1)
    outside = np.ones(mesh.num_cells, dtype=bool)
    for c in constructions:
        (a1, b1), (a2, b2) = c.cell.region
        outside &= ~((centroids[:, 0] > a1) & (centroids[:, 0] < b1)
                     & (centroids[:, 1] > a2) & (centroids[:, 1] < b2))
    points, values, tris, index = [], [], [], {}

    def add(p, value, check):
        key = _merge_key(p, scale)
        if key in index:
            k = index[key]
            if check and abs(values[k] - value) > tol:
                raise NonConformingInterface(k, abs(values[k] - value))
            return k
        index[key] = len(points)
        points.append(np.asarray(p, dtype=float))
        values.append(float(value))
        return index[key]

    for tri in mesh.cells[outside]:
        tris.append([add(mesh.points[k], background.values[k], False) for k in tri])
    for c in constructions:
        cm = c.v.mesh
        edge = np.zeros(cm.num_nodes, dtype=bool)
        edge[cm.boundary] = True
        expected = (reference or background).evaluate(cm.points[edge])
        mismatch = np.abs(expected - c.v.values[edge])
        if np.any(~(mismatch <= tol)):
            k = int(np.argmax(np.nan_to_num(mismatch, nan=np.inf)))
            raise NonConformingInterface(int(cm.boundary[k]), float(mismatch[k]))
        ids = [add(cm.points[k], c.v.values[k], edge[k]) for k in range(cm.num_nodes)]
        tris.extend([ids[k] for k in tri] for tri in cm.cells)
    return P1Function(Mesh.from_arrays(2, np.array(points), np.array(tris), mesh.box), np.array(values))
