import io
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from matplotlib.tri import LinearTriInterpolator, Triangulation

from config import Config
from errors import (DegenerateBox, EvalFailure, GradientOutOfBounds, MeshMismatch, NonFiniteError,
                    NonFiniteIntegrand, RelaxoError, ValidationError)
from expr import Node, evaluate, parse

# Degree-4 symmetric rule on the reference triangle, barycentric points
_A, _WA = 0.445948490915965, 0.223381589678011
_B, _WB = 0.091576213509771, 0.109951743655322
_TRI_DEGREE_4 = (
    np.array([[_A, _A, 1 - 2 * _A], [_A, 1 - 2 * _A, _A], [1 - 2 * _A, _A, _A],
              [_B, _B, 1 - 2 * _B], [_B, 1 - 2 * _B, _B], [1 - 2 * _B, _B, _B]]),
    np.array([_WA] * 3 + [_WB] * 3),
)
_TRI_DEGREE_2 = (np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]]),
                 np.full(3, 1 / 3))
_TRI_DEGREE_1 = (np.array([[1 / 3, 1 / 3, 1 / 3]]), np.ones(1))


@dataclass(frozen=True, eq=False)
class Mesh:
    """Segments (1D) or triangles (2D) over a box.

    A 1D mesh with ``map_exponent`` gamma carries P1 functions in the
    reference variable t = ((x - a) / (b - a))**gamma rather than in x.
    """

    dim: int
    nodes: np.ndarray = field(repr=False)
    cells: np.ndarray = field(repr=False)
    boundary: np.ndarray = field(repr=False)
    box: Tuple[Tuple[float, float], ...] = ()
    map_exponent: Optional[float] = None

    def __post_init__(self):
        for name in ('nodes', 'cells', 'boundary'):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_arrays(cls, dim: int, nodes, cells, box=None, map_exponent=None) -> 'Mesh':
        nodes = np.asarray(nodes, dtype=float)
        pts = nodes.reshape(len(nodes), dim)
        if box is None:
            box = tuple((float(pts[:, i].min()), float(pts[:, i].max())) for i in range(dim))
        scale = max(b - a for a, b in box)
        on_edge = np.zeros(len(pts), dtype=bool)
        for i, (a, b) in enumerate(box):
            on_edge |= np.isclose(pts[:, i], a, rtol=0, atol=1e-12 * scale)
            on_edge |= np.isclose(pts[:, i], b, rtol=0, atol=1e-12 * scale)
        return cls(dim, nodes, np.asarray(cells, dtype=int), np.flatnonzero(on_edge), tuple(box), map_exponent)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def points(self) -> np.ndarray:
        return self.nodes.reshape(self.num_nodes, self.dim)

    @property
    def volume(self) -> float:
        return float(np.prod([b - a for a, b in self.box]))

    def reference(self, x) -> np.ndarray:
        """Coordinate in which P1 functions are affine (1D)."""
        x = np.asarray(x, dtype=float)
        if self.map_exponent is None:
            return x
        (a, b), = self.box
        return np.clip((x - a) / (b - a), 0.0, 1.0) ** self.map_exponent

    def physical(self, t) -> np.ndarray:
        (a, b), = self.box
        return a + (b - a) * np.asarray(t, dtype=float) ** (1.0 / self.map_exponent)

    def measures(self) -> np.ndarray:
        cached = self.__dict__.get('_measures')
        if cached is None:
            if self.dim == 1:
                cached = np.abs(np.diff(self.nodes[self.cells], axis=1)[:, 0])
            else:
                p = self.points[self.cells]
                cached = 0.5 * np.abs((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
            cached.setflags(write=False)
            object.__setattr__(self, '_measures', cached)
        return cached

    def triangulation(self) -> Triangulation:
        cached = self.__dict__.get('_tri')
        if cached is None:
            cached = Triangulation(self.points[:, 0], self.points[:, 1], self.cells)
            object.__setattr__(self, '_tri', cached)
        return cached

    def check(self):
        measures = self.measures()
        if np.any(measures <= 0):
            raise ValidationError('degenerate_cell', f"cell {int(np.argmin(measures))} has zero measure")
        if not math.isclose(float(np.sum(measures)), self.volume, rel_tol=1e-12):
            raise ValidationError('cover_mismatch', f"cells cover {np.sum(measures)} of {self.volume}")

    def same_as(self, other: 'Mesh') -> bool:
        return self is other or (self.dim == other.dim and self.map_exponent == other.map_exponent
                                 and np.array_equal(self.nodes, other.nodes)
                                 and np.array_equal(self.cells, other.cells))


def build_box_mesh(dim: int, box, resolution, grading: Union[None, float, Callable] = None,
                   map_exponent: Optional[float] = None) -> Mesh:
    """Uniform, graded or mapped segments in 1D, alternating-diagonal triangles in 2D."""
    box = tuple((float(a), float(b)) for a, b in np.asarray(box, dtype=float).reshape(dim, 2))
    if any(b <= a for a, b in box):
        raise DegenerateBox(box)
    res = tuple(int(r) for r in np.broadcast_to(np.asarray(resolution, dtype=int), (dim,)))
    if any(r < 1 for r in res):
        raise ValidationError('invalid_resolution', f"resolution must be >= 1, got {res}")
    if dim == 1:
        n = res[0]
        (a, b), = box
        s = np.arange(n + 1) / n
        if map_exponent is not None:
            t = s
            x = a + (b - a) * t ** (1.0 / map_exponent)
        elif grading is None:
            x = a + (b - a) * s
        else:
            spacing = grading if callable(grading) else (lambda r, p=float(grading): r ** p)
            x = a + (b - a) * np.asarray(spacing(s), dtype=float)
        x[0], x[-1] = a, b
        if np.any(np.diff(x) <= 0):
            raise ValidationError('invalid_grading', "graded nodes must increase strictly")
        cells = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        return Mesh(1, x, cells, np.array([0, n]), box, map_exponent)
    if dim != 2:
        raise ValidationError('invalid_dimension', f"meshes are 1D or 2D, got {dim}")
    nx, ny = res
    xs = np.linspace(box[0][0], box[0][1], nx + 1)
    ys = np.linspace(box[1][0], box[1][1], ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    cells = []
    for j in range(ny):
        for i in range(nx):
            p00 = j * (nx + 1) + i
            p10, p01, p11 = p00 + 1, p00 + nx + 1, p00 + nx + 2
            if (i + j) % 2 == 0:
                cells += [(p00, p10, p11), (p00, p11, p01)]
            else:
                cells += [(p00, p10, p01), (p10, p11, p01)]
    return Mesh.from_arrays(2, nodes, np.array(cells), box)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Reference-cell rule: 1D on [0, 1], 2D in barycentric coordinates."""

    dim: int
    order: int
    points: np.ndarray
    weights: np.ndarray

    @classmethod
    def gauss(cls, order: int = Config.QUAD_ORDER_1D) -> 'QuadratureRule':
        npts = max(1, math.ceil((order + 1) / 2))
        t, w = np.polynomial.legendre.leggauss(npts)
        return cls(1, 2 * npts - 1, 0.5 * (t + 1.0), 0.5 * w)

    @classmethod
    def triangle(cls, order: int = Config.QUAD_ORDER_2D) -> 'QuadratureRule':
        if order <= 1:
            pts, w = _TRI_DEGREE_1
            return cls(2, 1, pts, w)
        if order == 2:
            pts, w = _TRI_DEGREE_2
            return cls(2, 2, pts, w)
        if order > 4:
            raise ValidationError('invalid_order', f"triangle rules go up to degree 4, got {order}")
        pts, w = _TRI_DEGREE_4
        return cls(2, 4, pts, w / w.sum())

    @classmethod
    def default(cls, dim: int) -> 'QuadratureRule':
        return cls.gauss() if dim == 1 else cls.triangle()

    def cell_points(self, mesh: Mesh) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical points, weights and reference shape values per cell.

        The shape values give the barycentric weight of each cell vertex at
        each point, so P1 values at quadrature points are exact.
        """
        if mesh.dim == 1:
            shape = np.column_stack([1.0 - self.points, self.points])
            if mesh.map_exponent is None:
                ends = mesh.nodes[mesh.cells]
                x = ends[:, :1] + (ends[:, 1:] - ends[:, :1]) * self.points[None, :]
                w = mesh.measures()[:, None] * self.weights[None, :]
                return x, w, shape
            (a, b), = mesh.box
            gamma = mesh.map_exponent
            t_ends = mesh.reference(mesh.nodes)[mesh.cells]
            t = t_ends[:, :1] + (t_ends[:, 1:] - t_ends[:, :1]) * self.points[None, :]
            dxdt = (b - a) / gamma * np.power(t, 1.0 / gamma - 1.0)
            w = (t_ends[:, 1:] - t_ends[:, :1]) * self.weights[None, :] * dxdt
            return mesh.physical(t), w, shape
        corners = mesh.points[mesh.cells]
        x = np.einsum('qk,mkd->mqd', self.points, corners)
        w = mesh.measures()[:, None] * self.weights[None, :]
        return x, w, self.points


@dataclass(frozen=True, eq=False)
class P1Function:
    mesh: Mesh
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=float).reshape(self.mesh.num_nodes)
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)

    def with_values(self, values) -> 'P1Function':
        return P1Function(self.mesh, values)

    def gradients(self) -> np.ndarray:
        """Per-cell gradient, in the reference variable on mapped meshes."""
        mesh = self.mesh
        if mesh.dim == 1:
            t = mesh.reference(mesh.nodes)[mesh.cells]
            v = self.values[mesh.cells]
            return (v[:, 1] - v[:, 0]) / (t[:, 1] - t[:, 0])
        p = mesh.points[mesh.cells]
        v = self.values[mesh.cells]
        J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=1)
        rhs = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]], axis=1)
        return np.linalg.solve(J, rhs[..., None])[..., 0]

    def gradient_at(self, x_q: np.ndarray) -> np.ndarray:
        """Physical gradient at per-cell quadrature points."""
        grads = self.gradients()
        mesh = self.mesh
        if mesh.dim == 2:
            return np.broadcast_to(grads[:, None, :], x_q.shape)
        if mesh.map_exponent is None:
            return np.broadcast_to(grads[:, None], x_q.shape)
        (a, b), = mesh.box
        gamma = mesh.map_exponent
        s = np.clip((x_q - a) / (b - a), 0.0, 1.0)
        with np.errstate(divide='ignore'):
            dtdx = gamma * np.power(s, gamma - 1.0) / (b - a)
        return grads[:, None] * dtdx

    def evaluate(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        mesh = self.mesh
        if mesh.dim == 1:
            order = np.argsort(mesh.nodes, kind='stable')
            t_nodes = mesh.reference(mesh.nodes[order])
            return np.interp(mesh.reference(x), t_nodes, self.values[order])
        q = x.reshape(-1, 2)
        interp = LinearTriInterpolator(mesh.triangulation(), self.values)
        out = np.ma.filled(interp(q[:, 0], q[:, 1]).astype(float), np.nan)
        return out.reshape(x.shape[:-1])

    def to_csv(self) -> Dict[str, str]:
        files = {}
        buf = io.StringIO()
        names = 'x' if self.mesh.dim == 1 else 'x,y'
        np.savetxt(buf, self.mesh.points, delimiter=',', fmt='%.17g', header=names, comments='')
        files['nodes.csv'] = buf.getvalue()
        buf = io.StringIO()
        cols = ','.join(f"n{i}" for i in range(self.mesh.cells.shape[1]))
        np.savetxt(buf, self.mesh.cells, delimiter=',', fmt='%d', header=cols, comments='')
        files['cells.csv'] = buf.getvalue()
        buf = io.StringIO()
        np.savetxt(buf, self.values, delimiter=',', fmt='%.17g', header='value', comments='')
        files['values.csv'] = buf.getvalue()
        return files

    @classmethod
    def from_csv(cls, files: Dict[str, str], box=None, map_exponent=None) -> 'P1Function':
        nodes = np.loadtxt(io.StringIO(files['nodes.csv']), delimiter=',', skiprows=1, ndmin=2)
        cells = np.loadtxt(io.StringIO(files['cells.csv']), delimiter=',', skiprows=1, ndmin=2, dtype=int)
        values = np.loadtxt(io.StringIO(files['values.csv']), delimiter=',', skiprows=1, ndmin=1)
        dim = nodes.shape[1]
        mesh = Mesh.from_arrays(dim, nodes[:, 0] if dim == 1 else nodes, cells, box, map_exponent)
        return cls(mesh, values)


def interpolate(u: Union[Callable, Node, str], mesh: Mesh) -> P1Function:
    """Nodal interpolant of u, given as a callable of node coordinates or an expression of x."""
    if isinstance(u, str):
        u = parse(u, mesh.dim)
    pts = mesh.nodes if mesh.dim == 1 else mesh.points

    def at(p):
        if callable(u):
            return np.asarray(u(p), dtype=float)
        return np.asarray(evaluate(u, x=p, dim=mesh.dim), dtype=float)

    try:
        with np.errstate(all='ignore'):
            values = np.broadcast_to(at(pts), (mesh.num_nodes,)).copy()
    except (RelaxoError, ArithmeticError, ValueError):
        for k in range(mesh.num_nodes):
            try:
                value = float(at(pts[k:k + 1])[0])
            except (RelaxoError, ArithmeticError, ValueError) as e:
                raise EvalFailure(k, str(e)) from e
            if not math.isfinite(value):
                raise EvalFailure(k, f"value {value}")
        raise
    bad = ~np.isfinite(values)
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise EvalFailure(k, f"value {values[k]}")
    return P1Function(mesh, values)


def energy(f, u: P1Function, quad: Optional[QuadratureRule] = None, per_cell: bool = False):
    """Quadrature of f(x, u, grad u) over the mesh of u.

    ``f`` is anything exposing ``evaluate(x, u, g)`` and ``xi_bounds``.
    Sentinel values (a truncated Lagrangian beyond its ball) make the
    energy infinite; any other non-finite integrand raises.
    """
    mesh = u.mesh
    quad = quad or QuadratureRule.default(mesh.dim)
    x_q, w_q, shape = quad.cell_points(mesh)
    u_q = u.values[mesh.cells] @ shape.T
    g_q = u.gradient_at(x_q)
    g_cells = g_q.reshape(mesh.num_cells, -1)
    bounds = np.asarray(f.xi_bounds, dtype=float)
    comp = g_q.reshape(mesh.num_cells, -1, mesh.dim)
    outside = np.any((comp < bounds[:, 0]) | (comp > bounds[:, 1]), axis=(1, 2))
    if np.any(outside):
        cell = int(np.flatnonzero(outside)[0])
        raise GradientOutOfBounds(cell, comp[cell, 0])
    if not np.all(np.isfinite(g_cells)):
        cell = int(np.flatnonzero(~np.all(np.isfinite(g_cells), axis=1))[0])
        raise NonFiniteIntegrand(cell)
    try:
        vals = np.asarray(f.evaluate(x_q, u_q, g_q), dtype=float).reshape(w_q.shape)
    except NonFiniteError as e:
        raise NonFiniteIntegrand(int(e.index // w_q.shape[1]) if e.index is not None else -1) from e
    blocked = vals >= Config.SENTINEL
    with np.errstate(invalid='ignore', over='ignore'):
        contrib = np.sum(np.where(blocked, 0.0, vals) * w_q, axis=1)
    contrib = np.where(np.any(blocked, axis=1), math.inf, contrib)
    total = float(np.sum(contrib))
    return (total, contrib) if per_cell else total


def _refines(coarse: Mesh, fine: Mesh) -> bool:
    if coarse.dim != fine.dim or coarse.map_exponent != fine.map_exponent:
        return False
    tol = 1e-12 * max(b - a for a, b in coarse.box)
    if coarse.dim == 1:
        idx = np.searchsorted(np.sort(fine.nodes), coarse.nodes)
        idx = np.clip(idx, 0, fine.num_nodes - 1)
        return bool(np.all(np.abs(np.sort(fine.nodes)[idx] - coarse.nodes) <= tol))
    finder = coarse.triangulation().get_trifinder()
    centroids = fine.points[fine.cells].mean(axis=1)
    host = np.asarray(finder(centroids[:, 0], centroids[:, 1]))
    if np.any(host < 0):
        return False
    corners = coarse.points[coarse.cells[host]]
    for k in range(3):
        p = fine.points[fine.cells[:, k]]
        J = np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0]], axis=2)
        lam = np.linalg.solve(J, (p - corners[:, 0])[..., None])[..., 0]
        if np.any(lam < -1e-9) or np.any(lam.sum(axis=1) > 1 + 1e-9):
            return False
    return True


def sup_distance(u: P1Function, v: P1Function) -> float:
    if u.mesh.same_as(v.mesh):
        return float(np.max(np.abs(u.values - v.values)))
    if _refines(u.mesh, v.mesh):
        coarse, fine = u, v
    elif _refines(v.mesh, u.mesh):
        coarse, fine = v, u
    else:
        raise MeshMismatch()
    pts = fine.mesh.nodes if fine.mesh.dim == 1 else fine.mesh.points
    return float(np.max(np.abs(fine.values - coarse.evaluate(pts))))


def grad_sup(u: P1Function) -> float:
    grads = u.gradients()
    mesh = u.mesh
    if mesh.dim == 2:
        return float(np.max(np.linalg.norm(grads, axis=1)))
    if mesh.map_exponent is None or mesh.map_exponent >= 1:
        scale = 1.0
        if mesh.map_exponent is not None:
            (a, b), = mesh.box
            scale = mesh.map_exponent / (b - a)
        return float(np.max(np.abs(grads))) * scale
    (a, b), = mesh.box
    gamma = mesh.map_exponent
    t_left = mesh.reference(mesh.nodes)[mesh.cells].min(axis=1)
    with np.errstate(divide='ignore', invalid='ignore'):
        dtdx = gamma * np.power(np.clip(t_left, 0.0, 1.0), (gamma - 1.0) / gamma) / (b - a)
        slopes = np.where(grads == 0, 0.0, np.abs(grads) * dtdx)
    return float(np.max(slopes))
