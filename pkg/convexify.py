import io
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
from matplotlib.tri import Triangulation
from scipy.spatial import ConvexHull, Delaunay, QhullError

from config import Config
from errors import (AllInfinite, EmptyDualGrid, GapExceedsEpsilon, NonFiniteError, NumericalError,
                    OutsideDomain, ValidationError)
from expr import BinOp, Compare, GridSamples, Inf, LagrangianSpec, Num, Piecewise, Var, pretty
from logger import get_logger

log = get_logger('relaxo.convexify')

_HEADER = np.dtype([('lo', '<f8'), ('hi', '<f8'), ('count', '<i8')])


@dataclass(frozen=True, eq=False)
class SampledFunction(GridSamples):
    """A gradient slice of a Lagrangian on a uniform grid."""

    def lipschitz_estimate(self) -> float:
        best = 0.0
        for axis, h in enumerate(self.spacing):
            a = np.moveaxis(self.values, axis, 0)
            ok = (a[1:] < Config.SENTINEL) & (a[:-1] < Config.SENTINEL)
            if np.any(ok):
                best = max(best, float(np.max(np.abs(a[1:] - a[:-1])[ok])) / h)
        return best

    def tol_hull(self) -> float:
        return Config.HULL_TOL_FLOOR + max(self.spacing) * self.lipschitz_estimate()

    def to_bytes(self) -> bytes:
        header = np.array(list(zip(self.lo, self.hi, self.counts)), dtype=_HEADER)
        return (np.array([self.dim], dtype='<i8').tobytes() + header.tobytes()
                + np.ascontiguousarray(self.values, dtype='<f8').tobytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> 'SampledFunction':
        dim = int(np.frombuffer(blob, dtype='<i8', count=1)[0])
        if not 1 <= dim <= 2:
            raise ValidationError('invalid_samples', f"unsupported dimension {dim}")
        header = np.frombuffer(blob, dtype=_HEADER, count=dim, offset=8)
        size = int(np.prod(header['count']))
        values = np.frombuffer(blob, dtype='<f8', count=size, offset=8 + header.nbytes)
        return cls(tuple(header['lo']), tuple(header['hi']), tuple(header['count']), values.copy())

    def to_csv(self) -> str:
        nodes = self.nodes().reshape(-1, self.dim)
        names = ','.join(f"xi{i + 1}" for i in range(self.dim))
        buf = io.StringIO()
        np.savetxt(buf, np.column_stack([nodes, self.values.ravel()]), delimiter=',', fmt='%.17g',
                   header=f"{names},value", comments='')
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> 'SampledFunction':
        data = np.loadtxt(io.StringIO(text), delimiter=',', skiprows=1, ndmin=2)
        dim = data.shape[1] - 1
        axes = [np.unique(data[:, i]) for i in range(dim)]
        counts = tuple(len(a) for a in axes)
        if int(np.prod(counts)) != len(data):
            raise ValidationError('invalid_samples', "CSV nodes do not form a full tensor grid")
        order = np.lexsort(tuple(data[:, i] for i in reversed(range(dim))))
        return cls(tuple(a[0] for a in axes), tuple(a[-1] for a in axes), counts, data[order, -1])


@dataclass(frozen=True, eq=False)
class ConvexEnvelope:
    """Piecewise-linear lower convex hull of a sampled function.

    1D keeps sorted breakpoints.  2D keeps lower-hull facets over the
    projected vertices, each with its supporting plane ``a*xi1 + b*xi2 + c``.
    Outside the convex hull of finite samples the envelope is the sentinel.
    """

    dim: int
    box: Tuple[Tuple[float, float], ...]
    points: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)
    tol_hull: float = 0.0
    facets: Optional[np.ndarray] = field(default=None, repr=False)
    planes: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def breakpoints(self) -> np.ndarray:
        return self.points

    @property
    def support_radius(self) -> float:
        pts = self.points.reshape(len(self.points), -1)
        return float(np.max(np.linalg.norm(pts, axis=1)))

    def slopes(self) -> np.ndarray:
        if self.dim == 1:
            return np.diff(self.values) / np.diff(self.points)
        return self.planes[:, :2]

    def _triangulation(self):
        cached = self.__dict__.get('_tri')
        if cached is None:
            tri = Triangulation(self.points[:, 0], self.points[:, 1], self.facets)
            cached = (tri, tri.get_trifinder(), Delaunay(self.points))
            object.__setattr__(self, '_tri', cached)
        return cached

    def locate(self, xi) -> np.ndarray:
        q = np.asarray(xi, dtype=float).reshape(-1, 2)
        tri, finder, support = self._triangulation()
        found = np.asarray(finder(q[:, 0], q[:, 1]), dtype=int)
        missed = np.flatnonzero(found < 0)
        if missed.size:
            inside = support.find_simplex(q[missed], tol=1e-10) >= 0
            heights = q[missed] @ self.planes[:, :2].T + self.planes[:, 2]
            found[missed] = np.where(inside, np.argmax(heights, axis=1), -1)
        return found

    def evaluate(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.dim == 1:
            out = np.interp(xi, self.points, self.values)
            outside = (xi < self.points[0]) | (xi > self.points[-1])
            return np.where(outside, Config.SENTINEL, out)
        q = xi.reshape(-1, 2)
        facet = self.locate(q)
        plane = self.planes[np.maximum(facet, 0)]
        out = np.where(facet >= 0, np.sum(plane[:, :2] * q, axis=1) + plane[:, 2], Config.SENTINEL)
        return out.reshape(xi.shape[:-1])

    def as_samples(self, like: GridSamples) -> SampledFunction:
        return SampledFunction(like.lo, like.hi, like.counts, self.evaluate(like.nodes()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.dim == 1:
            np.savetxt(buf, np.column_stack([self.points, self.values]), delimiter=',', fmt='%.17g',
                       header='xi,value', comments='')
            return buf.getvalue()
        rows = []
        for k, (tri, plane) in enumerate(zip(self.facets, self.planes)):
            corners = np.concatenate([np.r_[self.points[v], self.values[v]] for v in tri])
            rows.append(np.r_[k, corners, plane])
        header = 'facet,' + ','.join(f"xi1_{c},xi2_{c},value_{c}" for c in 'abc') + ',slope1,slope2,offset'
        np.savetxt(buf, np.array(rows), delimiter=',', fmt='%.17g', header=header, comments='')
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class CaratheodoryDecomposition:
    points: np.ndarray
    weights: np.ndarray
    target: np.ndarray
    gap: float
    residual: float
    envelope_value: float

    @property
    def size(self) -> int:
        return len(self.weights)

    def to_dict(self) -> dict:
        return {
            'points': self.points.tolist(),
            'weights': self.weights.tolist(),
            'target': self.target.tolist(),
            'gap': self.gap,
            'residual': self.residual,
            'envelope_value': self.envelope_value,
        }


def _box(box, dim: int):
    box = np.asarray(box, dtype=float).reshape(dim, 2)
    return tuple((float(a), float(b)) for a, b in box)


def sample(spec: LagrangianSpec, x=None, u=0.0, box=None, counts=None) -> SampledFunction:
    dim = spec.dim
    box = _box(box if box is not None else spec.xi_bounds, dim)
    for (a, b), (lo, hi) in zip(box, spec.xi_bounds):
        if a < lo or b > hi:
            raise ValidationError('box_outside_bounds', f"sample box {box} leaves xi_bounds {spec.xi_bounds}")
    if counts is None:
        counts = Config.XI_GRID_1D if dim == 1 else Config.XI_GRID_2D
    counts = tuple(np.broadcast_to(np.asarray(counts, dtype=int), (dim,)))
    grid = GridSamples(tuple(a for a, _ in box), tuple(b for _, b in box), counts, np.zeros(counts))
    x = np.zeros(dim) if x is None else np.asarray(x, dtype=float)
    if dim == 1:
        x = x.reshape(())
    try:
        values = spec.evaluate(x, u, grid.nodes())
    except NonFiniteError as e:
        node = np.unravel_index(e.index, counts) if e.index is not None else None
        raise NonFiniteError(f"non-finite sample at grid node {tuple(int(n) for n in node)}", e.index) from e
    return SampledFunction(grid.lo, grid.hi, counts, np.asarray(values).reshape(counts))


def _lower_hull_1d(xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    # Andrew's monotone chain, lower half; collinear points are dropped
    hull = []
    for i in range(len(xs)):
        while len(hull) >= 2:
            j, k = hull[-2], hull[-1]
            cross = (xs[k] - xs[j]) * (ys[i] - ys[j]) - (ys[k] - ys[j]) * (xs[i] - xs[j])
            if cross > 0:
                break
            hull.pop()
        hull.append(i)
    return np.array(hull, dtype=int)


def _lower_facets_2d(pts: np.ndarray, vals: np.ndarray):
    lifted = np.column_stack([pts, vals])
    try:
        hull = ConvexHull(lifted)
    except QhullError:
        # every lifted point lies on one plane
        A = np.column_stack([pts, np.ones(len(pts))])
        plane = np.linalg.lstsq(A, vals, rcond=None)[0]
        simplices = Delaunay(pts).simplices
        return simplices, np.tile(plane, (len(simplices), 1))
    normals = hull.equations
    lower = normals[:, 2] < -1e-10
    simplices = hull.simplices[lower]
    eq = normals[lower]
    planes = np.column_stack([-eq[:, 0] / eq[:, 2], -eq[:, 1] / eq[:, 2], -eq[:, 3] / eq[:, 2]])
    p = pts[simplices]
    area = 0.5 * np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                        - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    keep = area > 1e-12 * np.ptp(pts[:, 0]) * np.ptp(pts[:, 1])
    return simplices[keep], planes[keep]


def bipolar(f: SampledFunction) -> ConvexEnvelope:
    finite = f.finite
    if not np.any(finite):
        raise AllInfinite()
    tol = f.tol_hull()
    if f.dim == 1:
        xs, ys = f.axes()[0][finite], f.values[finite]
        keep = _lower_hull_1d(xs, ys)
        return ConvexEnvelope(1, f.box, xs[keep], ys[keep], tol)
    pts = f.nodes()[finite.ravel()]
    vals = f.values.ravel()[finite.ravel()]
    if len(pts) < 3:
        raise NumericalError('degenerate_hull', "need three finite samples for a 2D envelope")
    simplices, planes = _lower_facets_2d(pts, vals)
    used = np.unique(simplices)
    remap = np.full(len(pts), -1)
    remap[used] = np.arange(len(used))
    env = ConvexEnvelope(2, f.box, pts[used], vals[used], tol, remap[simplices], planes)
    log.debug(f"2D envelope: {len(used)} vertices, {len(simplices)} facets")
    return env


def conjugate(f: GridSamples, dual) -> SampledFunction:
    """Discrete Legendre-Fenchel transform max_j (<s, xi_j> - f_j) on a dual grid."""
    lo, hi, counts = dual
    lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
    counts = np.atleast_1d(counts).astype(int)
    if counts.size == 0 or np.any(counts < 1) or np.any(lo > hi):
        raise EmptyDualGrid()
    slopes = [np.linspace(a, b, c) for a, b, c in zip(lo, hi, counts)]
    fv = np.where(f.finite, f.values, np.inf)
    axes = f.axes()
    chunk = Config.DUAL_CHUNK
    if f.dim == 1:
        xi = axes[0]
        s = slopes[0]
        out = np.empty(len(s))
        for start in range(0, len(s), chunk):
            block = s[start:start + chunk]
            out[start:start + chunk] = np.max(block[:, None] * xi[None, :] - fv[None, :], axis=1)
    else:
        # separable two-stage max: inner over xi2, outer over xi1
        inner = np.empty((len(axes[0]), len(slopes[1])))
        for i in range(len(axes[0])):
            inner[i] = np.max(slopes[1][:, None] * axes[1][None, :] - fv[i][None, :], axis=1)
        out = np.empty((len(slopes[0]), len(slopes[1])))
        for start in range(0, len(slopes[0]), chunk):
            block = slopes[0][start:start + chunk]
            out[start:start + chunk] = np.max(block[:, None, None] * axes[0][None, :, None]
                                              + inner[None, :, :], axis=1)
    return SampledFunction(tuple(lo), tuple(hi), tuple(counts), out)


def dual_grid_for(env: ConvexEnvelope, counts=None):
    slopes = env.slopes().reshape(-1, env.dim)
    if len(slopes) == 0:
        slopes = np.zeros((1, env.dim))
    lo, hi = slopes.min(axis=0), slopes.max(axis=0)
    hi = np.where(hi - lo < 1e-12, lo + 1.0, hi)
    if counts is None:
        counts = 2 * Config.XI_GRID_1D if env.dim == 1 else Config.XI_GRID_2D
    return tuple(lo), tuple(hi), tuple(np.broadcast_to(counts, (env.dim,)))


def double_conjugate(f: SampledFunction, dual=None) -> SampledFunction:
    if dual is None:
        dual = dual_grid_for(bipolar(f), 2 * max(f.counts) if f.dim == 1 else None)
    first = conjugate(f, dual)
    return conjugate(first, (f.lo, f.hi, f.counts))


def truncate(spec: LagrangianSpec, K: float) -> LagrangianSpec:
    # sentinel outside the closed K-ball
    if K <= 0:
        raise ValidationError('invalid_truncation', f"K must be positive, got {K}")
    name = f"{spec.name or 'f'}_K{K:g}"
    if spec.is_sampled:
        grid = spec.form
        nodes = grid.nodes().reshape(-1, grid.dim)
        outside = (np.linalg.norm(nodes, axis=1) > K).reshape(grid.counts)
        values = np.where(outside, Config.SENTINEL, grid.values)
        return LagrangianSpec.from_samples(GridSamples(grid.lo, grid.hi, grid.counts, values),
                                           nonneg=spec.nonneg, name=name)
    norm2 = BinOp('^', Var('g1'), Num(2.0))
    for i in range(2, spec.dim + 1):
        norm2 = BinOp('+', norm2, BinOp('^', Var(f'g{i}'), Num(2.0)))
    form = Piecewise(((Compare('<=', norm2, Num(float(K) ** 2)), spec.form),), Inf())
    return LagrangianSpec(form, spec.dim, spec.depends_on_x, spec.depends_on_u, spec.xi_bounds,
                          spec.nonneg, name, pretty(form), spec.hypotheses)


def _single_point(env: ConvexEnvelope, f: GridSamples, target: np.ndarray, env_value: float):
    idx = np.rint((target - np.array(f.lo)) / np.array(f.spacing))
    node = np.array(f.lo) + idx * np.array(f.spacing)
    if np.any(np.abs(node - target) > 1e-9 * np.array(f.spacing)) or np.any(idx < 0) \
            or np.any(idx > np.array(f.counts) - 1):
        return None
    value = float(np.asarray(f.interpolate(target if f.dim > 1 else target[0])))
    if value - env_value > Config.HULL_TOL_FLOOR:
        return None
    return np.array([target]), np.array([1.0])


def decompose(env: ConvexEnvelope, f: GridSamples, xi_bar, eps: float,
              tol_xi: Optional[float] = None) -> CaratheodoryDecomposition:
    """Weights and gradient points whose convex combination certifies env(xi_bar)."""
    target = np.atleast_1d(np.asarray(xi_bar, dtype=float))
    if eps <= 0:
        raise ValidationError('invalid_epsilon', f"eps must be positive, got {eps}")
    if any(t < a or t > b for t, (a, b) in zip(target, env.box)):
        raise OutsideDomain(target, env.box)
    if tol_xi is None:
        tol_xi = 0.5 * max(f.spacing)
    env_value = float(np.asarray(env.evaluate(target[0] if env.dim == 1 else target)))
    if env_value >= Config.SENTINEL:
        raise OutsideDomain(target, env.box)

    chosen = _single_point(env, f, target, env_value)
    if chosen is None and env.dim == 1:
        bp = env.points
        k = int(np.searchsorted(bp, target[0]))
        if k < len(bp) and np.isclose(bp[k], target[0], rtol=0, atol=1e-12 * max(1.0, abs(target[0]))):
            chosen = np.array([[bp[k]]]), np.array([1.0])
        else:
            k = min(max(k, 1), len(bp) - 1)
            a, b = bp[k - 1], bp[k]
            wa = (b - target[0]) / (b - a)
            chosen = np.array([[a], [b]]), np.array([wa, 1.0 - wa])
    elif chosen is None:
        facet = int(env.locate(target)[0])
        verts = env.points[env.facets[facet]]
        A = np.vstack([verts.T, np.ones(3)])
        weights = np.linalg.solve(A, np.r_[target, 1.0])
        weights[np.abs(weights) <= 1e-12] = 0.0
        weights = np.clip(weights, 0.0, None)
        keep = weights > 0
        verts, weights = verts[keep], weights[keep]
        order = np.lexsort(tuple(verts[:, i] for i in reversed(range(verts.shape[1]))))
        chosen = verts[order], weights[order]

    points, weights = chosen
    weights = weights / weights.sum()
    f_vals = np.asarray(f.interpolate(points[:, 0] if env.dim == 1 else points), dtype=float)
    gap = max(0.0, float(np.dot(weights, f_vals)) - env_value)
    residual = float(np.linalg.norm(weights @ points - target))
    if residual > tol_xi:
        raise NumericalError('reconstruction_failed', f"convex combination misses target by {residual:.3e}",
                             {'residual': residual, 'tol_xi': tol_xi})
    if gap > eps:
        raise GapExceedsEpsilon(gap, eps, target.tolist())
    return CaratheodoryDecomposition(points, weights, target, gap, residual, env_value)


def envelope_gap(f: GridSamples, env: ConvexEnvelope) -> float:
    finite = f.finite.ravel()
    nodes = f.nodes()[finite]
    diff = f.values.ravel()[finite] - env.evaluate(nodes)
    return max(0.0, float(np.max(diff)))


def detached_radius(f: GridSamples, env: ConvexEnvelope) -> float:
    """Largest |xi| over hull vertices spanning samples that sit above the envelope; 0 for convex f."""
    finite = f.finite.ravel()
    nodes = f.nodes()[finite]
    above = f.values.ravel()[finite] - env.evaluate(nodes) > convexity_tol(f)
    detached = nodes[above]
    if len(detached) == 0:
        return 0.0
    if env.dim == 1:
        bp = env.points
        k = np.clip(np.searchsorted(bp, detached), 1, len(bp) - 1)
        return float(np.max(np.abs(np.concatenate([bp[k - 1], bp[k]]))))
    facets = env.locate(detached)
    verts = env.points[env.facets[facets[facets >= 0]].ravel()]
    return float(np.max(np.linalg.norm(verts, axis=1), initial=0.0))


def hull_support_inside(env: ConvexEnvelope, K: float, f: Optional[GridSamples] = None) -> bool:
    """True when the hull vertices lie strictly inside the ball of radius K.

    With the samples ``f`` only vertices bridging a non-convex region count.
    """
    radius = env.support_radius if f is None else detached_radius(f, env)
    return radius < K


def convexity_tol(f: GridSamples) -> float:
    finite = f.values[f.finite]
    return Config.HULL_TOL_FLOOR * (1.0 + float(np.max(np.abs(finite), initial=0.0)))


def is_convex(f: SampledFunction, tol: Optional[float] = None) -> bool:
    env = bipolar(f)
    return envelope_gap(f, env) <= (tol if tol is not None else convexity_tol(f))


def reduce_decomposition(env: ConvexEnvelope, f: GridSamples, dec: CaratheodoryDecomposition,
                         eps: float, tol_xi: Optional[float] = None) -> Optional[CaratheodoryDecomposition]:
    """Look for a two-point decomposition of the same target among hull vertices.

    Candidates are vertices sitting within eps of the supporting plane at the
    target.  Returns None when no candidate pair has the target within tol_xi
    of its segment while certifying the envelope value within eps.
    """
    if dec.size <= 2:
        return dec
    tol_xi = 0.5 * max(f.spacing) if tol_xi is None else tol_xi
    target = dec.target
    plane = env.planes[int(env.locate(target)[0])]
    excess = env.values - (env.points @ plane[:2] + plane[2])
    candidates = np.flatnonzero(excess <= eps)
    candidates = candidates[np.argsort(excess[candidates], kind='stable')][:3000]
    P, V = env.points[candidates], env.values[candidates]
    best = None
    for i in range(len(P)):
        d = P - P[i]
        L2 = np.einsum('ij,ij->i', d, d)
        L2[L2 == 0] = np.inf
        t = np.einsum('ij,j->i', d, target - P[i]) / L2
        foot = P[i] + t[:, None] * d
        dist = np.linalg.norm(foot - target, axis=1)
        cost = (1 - t) * V[i] + t * V - dec.envelope_value
        ok = (dist <= tol_xi) & (cost <= eps) & (t > 0) & (t < 1)
        if np.any(ok):
            j = int(np.flatnonzero(ok)[np.argmin(cost[ok])])
            if best is None or cost[j] < best[0]:
                best = (float(cost[j]), i, j, float(t[j]), float(dist[j]))
    if best is None:
        return None
    cost, i, j, t, dist = best
    points = np.array([P[i], P[j]])
    weights = np.array([1 - t, t])
    order = np.lexsort(tuple(points[:, k] for k in reversed(range(points.shape[1]))))
    return CaratheodoryDecomposition(points[order], weights[order], target, max(0.0, cost), dist,
                                     dec.envelope_value)
