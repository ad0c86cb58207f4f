"""Torus-reduced Kahler geometry in log coordinates.

A torus-invariant Kahler potential on a toric Fano manifold is a convex
function F of the log coordinates x in R^n. Every (1,1)-form becomes a
real symmetric matrix field, volume forms become determinants, and
averages (1/V) int f omega^n become (1/V) sum w f det D^2F over the nodes.

The computational domain is a lattice polygon adapted to the fan of the
polytope. Near each toric divisor a smooth invariant function depends on
the tangential coordinates and on zeta = e^{-s}, where s runs toward the
divisor along the facet normal. The domain faces cut these strips
transversally, and ghost values beyond a face are extrapolated
polynomially in zeta. Quantities derived from the reference potential F0
are analytic; only perturbations are differentiated numerically.
"""
from __future__ import annotations

import itertools
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, HalfspaceIntersection
from scipy.special import logsumexp

from . import kernels
from .errors import AdmissibilityError, ConfigurationError, DomainTooSmallError

# centred difference coefficients, offsets -r..r
_D2 = {
    2: [1.0, -2.0, 1.0],
    4: [-1 / 12, 4 / 3, -5 / 2, 4 / 3, -1 / 12],
    6: [1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90],
    8: [-1 / 560, 8 / 315, -1 / 5, 8 / 5, -205 / 72, 8 / 5, -1 / 5, 8 / 315, -1 / 560],
}
_D1 = {
    2: [-1 / 2, 0.0, 1 / 2],
    4: [1 / 12, -2 / 3, 0.0, 2 / 3, -1 / 12],
    6: [-1 / 60, 3 / 20, -3 / 4, 0.0, 3 / 4, -3 / 20, 1 / 60],
    8: [1 / 280, -4 / 105, 1 / 5, -4 / 5, 0.0, 4 / 5, -1 / 5, 4 / 105, -1 / 280],
}
ORDERS = tuple(sorted(_D2))


# --------------------------------------------------------------------------
# presets


@dataclass(frozen=True, eq=False)
class ReducedModel:
    name: str
    n: int
    lattice_points: np.ndarray
    polytope_volume: float
    symmetry: tuple = ()
    has_ke_expected: bool = False
    default_L: float = 14.0
    default_N: int = 81
    ke_points: np.ndarray | None = None
    ke_scale: float = 1.0

    @cached_property
    def group(self):
        """All elements of the group generated by ``symmetry``."""
        return _generate_group(self.symmetry, self.n)

    @cached_property
    def facets(self):
        """(a, b, nu) per facet: endpoints and primitive outward normal.

        In 1D a facet is an endpoint and a = b.
        """
        return _facets(self.lattice_points)

    @cached_property
    def vertices(self):
        return np.array([f[0] for f in self.facets])


def _generate_group(generators, n):
    eye = np.eye(n, dtype=np.int64)
    elements = [eye]
    seen = {eye.tobytes()}
    frontier = [eye]
    while frontier:
        nxt = []
        for g in frontier:
            for s in generators:
                m = s @ g
                key = m.tobytes()
                if key not in seen:
                    seen.add(key)
                    elements.append(m)
                    nxt.append(m)
        frontier = nxt
        if len(elements) > 1000:
            raise ConfigurationError("symmetry generators do not generate a finite group")
    return elements


def _facets(points):
    pts = np.asarray(points, dtype=np.int64)
    if pts.shape[1] == 1:
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        return [(lo, lo, np.array([-1])), (hi, hi, np.array([1]))]
    hull = ConvexHull(pts.astype(float))
    verts = pts[hull.vertices]  # counter-clockwise
    out = []
    for i in range(len(verts)):
        a, b = verts[i], verts[(i + 1) % len(verts)]
        e = (b - a) // np.gcd.reduce(np.abs(b - a))
        nu = np.array([e[1], -e[0]])
        if nu @ a < 0:
            nu = -nu
        if nu @ a != 1 or nu @ b != 1:
            raise ConfigurationError(f"polytope with vertices {verts.tolist()} is not reflexive")
        out.append((a, b, nu))
    return out


def _parse_matrix(text, n):
    rows = [r for r in text.strip("[]").split(";")]
    m = np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64)
    if m.shape != (n, n):
        raise ConfigurationError(f"symmetry matrix {text} is not {n}x{n}")
    return m


def _parse_points(text):
    pts = re.findall(r"\(([^)]*)\)", text)
    return np.array([[int(v) for v in p.split(",")] for p in pts], dtype=np.int64)


def parse_registry(text):
    """Parse the preset manifest into ``{name: ReducedModel}``."""
    models = {}
    block = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        head, _, rest = line.partition(" ")
        rest = rest.strip()
        if head == "preset":
            block = {"name": rest, "has_ke": False, "grid": None, "ke": None}
        elif block is None:
            raise ConfigurationError(f"line {lineno}: entry outside a preset block")
        elif head == "n":
            block["n"] = int(rest)
        elif head == "points":
            block["points"] = _parse_points(rest)
        elif head == "symmetry":
            block["symmetry_text"] = re.findall(r"\[[^\]]*\]", rest)
        elif head == "has_ke":
            block["has_ke"] = rest.lower() == "true"
        elif head == "grid":
            L, N = rest.split()
            block["grid"] = (float(L), int(N))
        elif head == "ke":
            pts, _, scale = rest.partition("scale")
            block["ke"] = (_parse_points(pts), float(scale))
        elif head == "end":
            models[block["name"]] = _finish_model(block)
            block = None
        else:
            raise ConfigurationError(f"line {lineno}: unknown manifest entry {head!r}")
    if block is not None:
        raise ConfigurationError("manifest ends inside a preset block")
    return models


def _finish_model(block):
    n = block["n"]
    pts = block["points"]
    if pts.shape[1] != n:
        raise ConfigurationError(f"preset {block['name']}: points are not {n}-dimensional")
    sym = tuple(_parse_matrix(s, n) for s in block.get("symmetry_text", []))
    centred = pts - pts.mean(axis=0)
    if np.linalg.matrix_rank(centred.astype(float)) < n:
        raise ConfigurationError(f"preset {block['name']}: lattice points do not span R^{n}")
    pset = {tuple(p) for p in pts}
    for s in sym:
        if {tuple(s @ p) for p in pts} != pset:
            raise ConfigurationError(f"preset {block['name']}: symmetry {s.tolist()} does not preserve the points")
    volume = polytope_volume(pts)
    L, N = block["grid"] or ((18.0, 513) if n == 1 else (14.0, 81))
    ke_pts, ke_scale = block["ke"] or (None, 1.0)
    return ReducedModel(block["name"], n, pts, volume, sym, block["has_ke"], L, N, ke_pts, ke_scale)


def polytope_volume(points):
    pts = np.asarray(points, dtype=float)
    if pts.shape[1] == 1:
        return float(pts.max() - pts.min())
    return float(ConvexHull(pts).volume)


_REGISTRY = None


def registry():
    global _REGISTRY
    if _REGISTRY is None:
        text = resources.files("krflow").joinpath("presets.txt").read_text()
        _REGISTRY = parse_registry(text)
    return _REGISTRY


def build_model(preset_name):
    try:
        return registry()[preset_name]
    except KeyError:
        raise ConfigurationError(
            f"unknown preset {preset_name!r}; known: {', '.join(sorted(registry()))}", key="preset"
        ) from None


# --------------------------------------------------------------------------
# domain and grid


@dataclass(frozen=True)
class Face:
    """Half-plane <normal, k> <= offset in node-index units.

    Ghost points beyond the face are extrapolated along ``direction``.
    """

    normal: tuple
    offset: int
    direction: tuple


def _vertex_need(a, b, u, u_next, arm):
    """Vertex-face offset putting the corner on facet [a, b] ``arm`` away from its strip."""
    # corner x solves <a+b, x> = 2 arm, <u, x> = c; require <u - u_next, x> >= arm
    z = np.linalg.solve(np.array([a + b, u], float).T, (u - u_next).astype(float))
    return (arm - 2.0 * arm * z[0]) / z[1]


def _integral_corner(m1, c1, m2, c2):
    A = np.array([m1, m2], dtype=float)
    if abs(np.linalg.det(A)) < 1e-12:
        return True
    k = np.linalg.solve(A, [c1, c2])
    return np.allclose(k, np.round(k), atol=1e-9)


def _polygon(faces):
    hs = np.array([[*f.normal, -f.offset] for f in faces], dtype=float)
    return HalfspaceIntersection(hs, np.zeros(2))


def domain_faces(model, N):
    """Faces of the computational domain in node-index units (spacing 1)."""
    if N % 2 == 0:
        raise ConfigurationError(f"N must be odd so that faces pass through nodes, got {N}", key="N")
    arm = (N - 1) // 2
    if model.n == 1:
        return (Face((1,), arm, (1,)), Face((-1,), arm, (-1,)))
    faces = [Face(tuple(int(c) for c in a + b), 2 * arm, tuple(int(c) for c in nu)) for a, b, nu in model.facets]
    vfaces = []
    for i, (a, b, nu) in enumerate(model.facets):
        pa, pb, nu_prev = model.facets[i - 1]  # the facet ending at vertex a
        e = (b - a) // np.gcd.reduce(np.abs(b - a))
        ep = (pb - pa) // np.gcd.reduce(np.abs(pb - pa))
        need = max(_vertex_need(a, b, a, a + e, arm), _vertex_need(pa, pb, a, a - ep, arm))
        start = int(np.ceil(need - 1e-9))
        offsets = range(start, start + 24)
        meet = np.linalg.solve(np.array([faces[i].normal, faces[i - 1].normal], float), [2 * arm, 2 * arm])
        if a @ meet <= start + 1e-9:
            # the two strips already meet inside; cut their corner only if it is off-lattice
            if np.allclose(meet, np.round(meet), atol=1e-9):
                offsets = [start]
            else:
                top = int(np.floor(a @ meet - 1e-9))
                offsets = range(top, top - 24, -1)
        for off in offsets:
            if all(_integral_corner(a, off, f.normal, f.offset) for f in (faces[i], faces[i - 1])):
                break
        else:
            raise ConfigurationError(f"{model.name}: no lattice-aligned domain found for N={N}")
        vfaces.append(Face(tuple(int(c) for c in a), off, tuple(int(c) for c in nu + nu_prev)))
    allf = faces + vfaces
    corners = _polygon(allf).intersections
    if not np.allclose(corners, np.round(corners), atol=1e-9):
        raise ConfigurationError(f"{model.name}: no lattice-aligned domain found for N={N}")
    return tuple(f for f in allf if _is_edge(f, corners))


def _is_edge(face, corners):
    on = np.abs(corners @ np.array(face.normal, float) - face.offset) < 1e-9
    return len({tuple(np.round(c, 6)) for c in corners[on]}) >= 2


@dataclass(frozen=True, eq=False)
class Grid:
    """Nodes k*h (k integer) of a lattice polygon, with FD operators.

    ``L`` is the depth at which faces cross the divisor strips and
    h = 2L/(N-1). Fields are flat arrays over the nodes.
    """

    n: int
    L: float
    N: int
    faces: tuple
    lines: tuple
    order: int = 6
    zeta_degree: int = 2

    def __post_init__(self):
        if self.N < 8:
            raise ConfigurationError(f"N must be >= 8, got {self.N}", key="N")
        if not self.L > 0:
            raise ConfigurationError(f"L must be positive, got {self.L}", key="L")
        if self.n not in (1, 2):
            raise ConfigurationError(f"only n = 1, 2 are supported, got {self.n}")
        if self.order not in _D2:
            raise ConfigurationError(f"stencil order must be one of {ORDERS}, got {self.order}", key="order")

    @property
    def h(self):
        return 2.0 * self.L / (self.N - 1)

    @cached_property
    def _face_arrays(self):
        m = np.array([f.normal for f in self.faces], dtype=np.int64)
        c = np.array([f.offset for f in self.faces], dtype=np.int64)
        d = np.array([f.direction for f in self.faces], dtype=np.int64)
        return m, c, d

    @cached_property
    def radius(self):
        """Half-size of the node-index bounding box."""
        if self.n == 1:
            return int(max(f.offset for f in self.faces))
        return int(np.abs(np.round(_polygon(self.faces).intersections)).max())

    @cached_property
    def index(self):
        """Integer node offsets, shape (M, n), in row-major box order."""
        R = self.radius
        box = np.stack(np.meshgrid(*([np.arange(-R, R + 1)] * self.n), indexing="ij"), -1).reshape(-1, self.n)
        return box[self.inside(box)]

    def inside(self, k):
        m, c, _ = self._face_arrays
        return np.all(k @ m.T <= c, axis=1)

    @property
    def size(self):
        return len(self.index)

    @cached_property
    def lookup(self):
        R = self.radius
        table = -np.ones((2 * R + 1,) * self.n, dtype=np.int64)
        table[tuple((self.index + R).T)] = np.arange(self.size)
        return table

    def node_of(self, k):
        return self.lookup[tuple((np.asarray(k) + self.radius).T)]

    @cached_property
    def x(self):
        """Node coordinates, shape (n, M)."""
        return (self.index * self.h).T.copy()

    @cached_property
    def weights(self):
        m, c, _ = self._face_arrays
        on = (self.index @ m.T == c).sum(axis=1)
        w = np.ones(self.size)
        w[on == 1] = 0.5
        k = len(self.faces)
        w[on >= 2] = 0.5 if self.n == 1 else (k - 2) / (2.0 * k)
        return w * self.h**self.n

    @cached_property
    def boundary_path(self):
        """Domain corners in x, counter-clockwise (2D) or the two ends (1D)."""
        if self.n == 1:
            return np.array([[-self.radius], [self.radius]]) * self.h
        pts = np.unique(np.round(_polygon(self.faces).intersections), axis=0)
        ang = np.arctan2(pts[:, 1], pts[:, 0])
        return pts[np.argsort(ang)] * self.h

    # ghost extrapolation ------------------------------------------------
    def _ghosts(self, P):
        """Nodes and weights giving values at outside points ``P``."""
        m, c, d = self._face_arrays
        q = self.zeta_degree
        g = len(P)
        cols = np.full((g, q + 1), -1, dtype=np.int64)
        wts = np.zeros((g, q + 1))
        viol = P @ m.T - c
        rank = np.argsort(-viol, axis=1, kind="stable")
        todo = np.arange(g)
        steps = np.arange(q + 1)

        def walk(sel, v):
            # first q+1 consecutive nodes inside, stepping back along v
            for j0 in range(1, 4 * self.radius):
                if not sel.size:
                    break
                pts = P[sel, None, :] - (j0 + steps)[None, :, None] * v[sel, None, :]
                ok = self.inside(pts.reshape(-1, self.n)).reshape(len(sel), q + 1).all(axis=1)
                hit = sel[ok]
                cols[hit] = self.node_of(pts[ok].reshape(-1, self.n)).reshape(-1, q + 1)
                wts[hit] = _zeta_weights(j0, q, self.h)
                sel = sel[~ok]

        for r in range(len(self.faces)):
            if not todo.size:
                break
            fi = rank[todo, r]
            sel = todo[viol[todo, fi] > 0]
            walk(sel, d[rank[:, r]])
            todo = todo[cols[todo, 0] < 0]
        if todo.size:
            # outside a corner: step back along the sum of the violated directions
            walk(todo, (viol > 0).astype(np.int64) @ d)
            todo = todo[cols[todo, 0] < 0]
        extra = [d[i] for i in range(len(d))] + [d[i] + d[j] for i, j in itertools.combinations(range(len(d)), 2)]
        for v in extra:
            if not todo.size:
                break
            walk(todo, np.broadcast_to(v, (g, self.n)))
            todo = todo[cols[todo, 0] < 0]
        if todo.size:
            raise ConfigurationError(f"domain too thin for the stencil near {P[todo[0]].tolist()}")
        return cols, wts

    def _directional(self, coef, d, scale):
        r = len(coef) // 2
        rows, cols, vals = [], [], []
        all_rows = np.arange(self.size)
        for j, cj in zip(range(-r, r + 1), coef):
            if cj == 0.0:
                continue
            P = self.index + j * np.asarray(d)[None, :]
            ok = self.inside(P)
            rows.append(all_rows[ok])
            cols.append(self.node_of(P[ok]))
            vals.append(np.full(ok.sum(), cj / scale))
            if not ok.all():
                gc, gw = self._ghosts(P[~ok])
                rows.append(np.repeat(all_rows[~ok], gc.shape[1]))
                cols.append(gc.ravel())
                vals.append((gw * cj / scale).ravel())
        A = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(self.size, self.size)
        )
        A.sum_duplicates()
        return A

    @cached_property
    def second_ops(self):
        """Second differences along each stencil line d, approximating d^T D^2 f d."""
        return [self._directional(_D2[self.order], d, self.h**2) for d in self.lines]

    @cached_property
    def first_ops(self):
        return [self._directional(_D1[self.order], d, self.h) for d in self.lines]

    @cached_property
    def hessian_ops(self):
        """Sparse operators for the independent Hessian entries.

        1D: [H11]; 2D: [H11, H12, H22].
        """
        S = dict(zip(self.lines, self.second_ops))
        if self.n == 1:
            return [S[(1,)].tocsr()]
        s1, s2 = S[(1, 0)], S[(0, 1)]
        diag = [(d, op) for d, op in S.items() if abs(d[0]) == abs(d[1]) == 1]
        mixed = sum(np.sign(d[0] * d[1]) * (op - s1 - s2) * 0.5 for d, op in diag) / len(diag)
        return [s1.tocsr(), mixed.tocsr(), s2.tocsr()]

    @cached_property
    def gradient_ops(self):
        """Least-squares gradient from directional first differences."""
        D = np.array(self.lines, dtype=float)
        G = np.linalg.solve(D.T @ D, D.T)  # (n, lines)
        return [sum(G[a, l] * op for l, op in enumerate(self.first_ops)).tocsr() for a in range(self.n)]

    @cached_property
    def _centred_ops(self):
        def arrays(op):
            op = op.tocsr()
            return op.data.astype(np.float64), op.indices.astype(np.int32), op.indptr.astype(np.int32)

        return [arrays(op) for op in self.hessian_ops], [arrays(op) for op in self.gradient_ops]

    @staticmethod
    def _centred(arrays, f):
        # sum_j A_ij (f_j - f_i): equal to A f since rows annihilate constants, but rounding
        # scales with the local variation of f rather than with |f|
        return kernels.centred_matvec(*arrays, f)

    def hessian(self, f):
        f = np.ascontiguousarray(f, dtype=float)
        ops = [self._centred(a, f) for a in self._centred_ops[0]]
        H = np.empty((self.n, self.n, self.size))
        if self.n == 1:
            H[0, 0] = ops[0]
        else:
            H[0, 0] = ops[0]
            H[0, 1] = H[1, 0] = ops[1]
            H[1, 1] = ops[2]
        return H

    def gradient(self, f):
        f = np.ascontiguousarray(f, dtype=float)
        return np.stack([self._centred(a, f) for a in self._centred_ops[1]])

    @cached_property
    def _pattern(self):
        """Union sparsity pattern of the Hessian operators and the identity."""
        ops = self.hessian_ops + [sp.identity(self.size, format="csr")]
        union = sum(abs(op) for op in ops).tocsr()
        union.sort_indices()
        rows = np.repeat(np.arange(self.size), np.diff(union.indptr))
        key = rows * self.size + union.indices
        aligned = []
        for op in ops:
            o = op.tocoo()
            pos = np.searchsorted(key, o.row.astype(np.int64) * self.size + o.col)
            data = np.zeros(union.nnz)
            np.add.at(data, pos, o.data)
            aligned.append(data)
        return union.indptr.astype(np.int64), union.indices, np.ascontiguousarray(np.stack(aligned))

    def combine(self, coefs):
        """CSR matrix sum_k diag(coefs[k]) @ op_k over the Hessian ops and the identity."""
        indptr, indices, data = self._pattern
        c = np.ascontiguousarray(coefs, dtype=float)
        vals = kernels.row_scaled_sum(c, data, indptr)
        return sp.csr_matrix((vals, indices, indptr), shape=(self.size, self.size))


def _zeta_weights(j0, q, h):
    """Lagrange weights extrapolating to zeta = 1 from zeta_i = e^{(j0+i) h}."""
    z = np.exp((j0 + np.arange(q + 1)) * h)
    w = np.ones(q + 1)
    for i in range(q + 1):
        for j in range(q + 1):
            if i != j:
                w[i] *= (1.0 - z[j]) / (z[i] - z[j])
    return w


def _stencil_lines(model):
    if model.n == 1:
        return ((1,),)
    normals = {tuple(int(c) for c in nu) for _, _, nu in model.facets}
    diag = [d for d in ((1, 1), (1, -1)) if d in normals or (-d[0], -d[1]) in normals]
    if len(diag) != 1:
        diag = [(1, 1), (1, -1)]
    return ((1, 0), (0, 1), *diag)


def make_grid(model, L=None, N=None, order=6):
    L = float(model.default_L if L is None else L)
    N = int(model.default_N if N is None else N)
    if N < 8:
        raise ConfigurationError(f"N must be >= 8, got {N}", key="N")
    return Grid(model.n, L, N, domain_faces(model, N), _stencil_lines(model), order)


# --------------------------------------------------------------------------
# symmetric matrix field helpers


def mat_inverse(H, det=None):
    """det, log det and inverse of a symmetric matrix field (n, n, M).

    ``det`` optionally supplies the determinants (2D only). Raises
    AdmissibilityError at the first node that is not positive definite.
    """
    if H.shape[0] == 1:
        det = H[0, 0].copy()
        bad = np.flatnonzero(~(det > 0))
        if bad.size:
            node = int(bad[0])
            raise AdmissibilityError(f"det H = {det[node]:.3e} <= 0 at node {node}", node=node)
        return det, np.log(det), (1.0 / det)[None, None]
    det, logdet, i11, i12, i22, bad = kernels.sym2_inverse(
        np.ascontiguousarray(H[0, 0]), np.ascontiguousarray(H[0, 1]), np.ascontiguousarray(H[1, 1]),
        None if det is None else np.ascontiguousarray(det),
    )
    if bad >= 0:
        raise AdmissibilityError(f"H not positive definite at node {bad} (det {det[bad]:.3e})", node=int(bad))
    inv = np.empty_like(H)
    inv[0, 0] = i11
    inv[0, 1] = inv[1, 0] = i12
    inv[1, 1] = i22
    return det, logdet, inv


def trace_product(A, B):
    """Per-node tr(A B) for symmetric matrix fields."""
    return np.einsum("ijm,jim->m", A, B)


# --------------------------------------------------------------------------
# reference potential


@dataclass
class ReferenceData:
    grid: Grid
    kind: str
    F0: np.ndarray
    gradF0: np.ndarray
    H0: np.ndarray
    det0: np.ndarray
    logdet0: np.ndarray
    grad_logdet0: np.ndarray
    hess_logdet0: np.ndarray
    h_ref: np.ndarray
    h_const: float
    V_red: float
    volume: float
    tail: float
    model: ReducedModel | None = None
    _perms: list | None = field(default=None, repr=False)

    @property
    def n(self):
        return self.grid.n

    @property
    def grad_h_ref(self):
        return -self.grad_logdet0 - self.gradF0

    @property
    def perms(self):
        if self._perms is None:
            self._perms = node_permutations(self.model, self.grid)
        return self._perms


def _guillemin(points, X):
    """F0 = log sum exp <u, x> and its cumulant derivatives at nodes X (n, M)."""
    U = np.asarray(points).astype(float)
    z = U @ X  # (P, M)
    F0 = logsumexp(z, axis=0)
    p = np.exp(z - F0)
    mean = U.T @ p
    P, n = U.shape
    # second moments from pairwise differences: no cancellation in the tails
    H = np.zeros((n, n, X.shape[1]))
    for a, b in itertools.combinations(range(P), 2):
        d = U[a] - U[b]
        H += np.multiply.outer(np.outer(d, d), p[a] * p[b])
    if n == 1:
        det = H[0, 0].copy()
    else:
        det = np.zeros(X.shape[1])
        for a, b, c in itertools.combinations(range(P), 3):
            e1, e2 = U[b] - U[a], U[c] - U[a]
            det += p[a] * p[b] * p[c] * (e1[0] * e2[1] - e1[1] * e2[0]) ** 2
    C = U[:, :, None] - mean[None]
    k3 = np.einsum("pm,pim,pjm,pkm->ijkm", p, C, C, C)
    m4 = np.einsum("pm,pim,pjm,pkm,plm->ijklm", p, C, C, C, C)
    k4 = (m4 - np.einsum("ijm,klm->ijklm", H, H) - np.einsum("ikm,jlm->ijklm", H, H)
          - np.einsum("ilm,jkm->ijklm", H, H))
    return F0, mean, H, det, k3, k4


def _scaled_potential(points, scale, X):
    """s * logsumexp(<u, x>/s) and its derivatives."""
    F, mean, H, det, k3, k4 = _guillemin(points, X / scale)
    n = X.shape[0]
    return scale * F, mean, H / scale, det / scale**n, k3 / scale**2, k4 / scale**3


def _logdet_derivatives(H, Hinv, k3, k4):
    grad = np.einsum("ijm,jikm->km", Hinv, k3)
    hess = (np.einsum("ijm,jiklm->klm", Hinv, k4)
            - np.einsum("iam,ablm,bjm,jikm->klm", Hinv, k3, Hinv, k3))
    return grad, hess


def _inverse_field(H):
    if H.shape[0] == 1:
        return 1.0 / H
    det = H[0, 0] * H[1, 1] - H[0, 1] ** 2
    inv = np.empty_like(H)
    inv[0, 0] = H[1, 1] / det
    inv[1, 1] = H[0, 0] / det
    inv[0, 1] = inv[1, 0] = -H[0, 1] / det
    return inv


def reference_potential(model, kind):
    """(points, scale) describing the reference as s * logsumexp(<u, x>/s)."""
    if kind == "guillemin":
        return model.lattice_points, 1.0
    if kind == "ke":
        if model.ke_points is None:
            raise ConfigurationError(f"no closed-form KE potential for {model.name}", key="reference")
        return model.ke_points, model.ke_scale
    raise ConfigurationError(f"unknown reference potential {kind!r}", key="reference")


def build_reference(model, grid, potential="guillemin", tail_tol=1e-5):
    """Reference potential data on ``grid``.

    ``potential`` is ``"guillemin"`` (log-sum-exp over lattice points) or
    ``"ke"``, a closed-form Kahler-Einstein potential of the same shape
    with rescaled exponents (cp1, p1xp1, cp2).
    """
    if grid.n != model.n:
        raise ConfigurationError(f"grid dimension {grid.n} != model dimension {model.n}")
    pts, scale = reference_potential(model, potential)
    F0, mean, H, det, k3, k4 = _scaled_potential(pts, scale, grid.x)
    g, hs = _logdet_derivatives(H, _inverse_field(H), k3, k4)
    logdet = np.log(det)
    tail = tail_fraction(model, grid, pts, scale)
    if tail > tail_tol:
        raise DomainTooSmallError(
            f"{model.name}: reference mass outside the domain is {tail:.2e} > {tail_tol:.0e} (L={grid.L})"
        )
    w = grid.weights
    volume = kernels.pairwise_sum(w * det)
    # h = -log det0 - F0 + c with (1/V) int e^h det0 = 1
    c = np.log(volume) - logsumexp(-F0, b=w)
    return ReferenceData(
        grid=grid, kind=potential, F0=F0, gradF0=mean, H0=H, det0=det, logdet0=logdet,
        grad_logdet0=g, hess_logdet0=hs, h_ref=-logdet - F0 + c, h_const=float(c),
        V_red=model.polytope_volume, volume=float(volume), tail=float(tail), model=model,
    )


def tail_fraction(model, grid, points=None, scale=1.0, samples=400):
    """Fraction of the polytope volume not covered by grad F of the domain.

    int det D^2 F dx over the domain is the area enclosed by the image of
    its boundary under grad F, evaluated by a dense shoelace sum.
    """
    pts = model.lattice_points if points is None else points
    corners = grid.boundary_path
    if grid.n == 1:
        _, mean, *_ = _scaled_potential(pts, scale, corners.T)
        covered = mean[0, 1] - mean[0, 0]
    else:
        s = np.linspace(0.0, 1.0, samples, endpoint=False)
        nxt = np.roll(corners, -1, axis=0)
        path = np.concatenate([a + s[:, None] * (b - a) for a, b in zip(corners, nxt)]).T
        _, m, *_ = _scaled_potential(pts, scale, path)
        x, y = m
        covered = 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
    return max(0.0, 1.0 - covered / model.polytope_volume)


# --------------------------------------------------------------------------
# potential fields


@dataclass
class PotentialField:
    values: np.ndarray
    H: np.ndarray
    detH: np.ndarray
    logdetH: np.ndarray
    Hinv: np.ndarray
    grad: np.ndarray


def hessian_field(phi, ref, grid=None):
    """Hessian data of F0 + phi; raises AdmissibilityError if not convex."""
    grid = ref.grid if grid is None else grid
    phi = np.asarray(phi, dtype=float)
    if phi.shape != (grid.size,):
        raise ValueError(f"phi has shape {phi.shape}, grid expects ({grid.size},)")
    if not np.all(np.isfinite(phi)):
        raise AdmissibilityError("phi has non-finite values")
    D = grid.hessian(phi)
    H = ref.H0 + D
    det = None
    if grid.n == 2:
        # expand around the accurate det0: H11 H22 - H12^2 cancels badly where H0 is nearly singular
        H0 = ref.H0
        det = (ref.det0 + (H0[0, 0] * D[1, 1] + H0[1, 1] * D[0, 0] - 2.0 * H0[0, 1] * D[0, 1])
               + (D[0, 0] * D[1, 1] - D[0, 1] * D[0, 1]))
    det, logdet, inv = mat_inverse(H, det)
    return PotentialField(phi, H, det, logdet, inv, grid.gradient(phi))


def field_from_matrix(phi, H, grad=None):
    """PotentialField with an explicitly supplied Hessian (testing/overrides)."""
    det, logdet, inv = mat_inverse(H)
    phi = np.asarray(phi, float)
    if grad is None:
        grad = np.zeros((H.shape[0], phi.size))
    return PotentialField(phi, H, det, logdet, inv, grad)


def ma_ratio(pf, ref):
    """omega_phi^n / omega^n = det H / det H0 per node."""
    return np.exp(pf.logdetH - ref.logdet0)


def log_ma_ratio(pf, ref):
    return pf.logdetH - ref.logdet0


def ricci_potential(pf, ref):
    """Normalised Ricci potential of F0 + phi and its additive constant.

    h = -log det H - (F0 + phi) + c with (1/V) int e^h det H dx = 1.
    """
    base = -(ref.F0 + pf.values)
    c = np.log(ref.volume) - logsumexp(base, b=ref.grid.weights)
    return base - pf.logdetH + c, float(c)


def ricci_potential_gradient(pf, ref):
    """grad h_phi = grad h_ref - grad(log det ratio + phi)."""
    return ref.grad_h_ref - ref.grid.gradient(log_ma_ratio(pf, ref) + pf.values)


def scalar_curvature(pf, ref):
    """R = -tr(H^-1 D^2 log det H), so that R = n at a Kahler-Einstein metric."""
    hess = ref.hess_logdet0 + ref.grid.hessian(log_ma_ratio(pf, ref))
    return -trace_product(pf.Hinv, hess)


def integrate(f, measure, pf, ref):
    """(1/V) sum w f density with density det H0 ("reference") or det H ("evolved")."""
    if measure == "reference":
        dens = ref.det0
    elif measure == "evolved":
        dens = pf.detH
    else:
        raise ValueError(f"measure must be 'reference' or 'evolved', got {measure!r}")
    f = np.broadcast_to(np.asarray(f, dtype=float), dens.shape)
    return kernels.pairwise_sum(np.ascontiguousarray(ref.grid.weights * f * dens)) / ref.volume


def grad_norm_sq(grad, pf):
    """grad^T H^-1 grad per node."""
    return np.einsum("im,ijm,jm->m", grad, pf.Hinv, grad)


def grad_norm_sq_field(f, pf, grid):
    """|grad f|^2 in the metric of F0 + phi."""
    return grad_norm_sq(grid.gradient(np.asarray(f, float)), pf)


def core_mask(ref, floor=1e-2):
    """Nodes where det H0 exceeds ``floor`` times its maximum."""
    return ref.det0 >= floor * ref.det0.max()


# --------------------------------------------------------------------------
# symmetry


def node_permutations(model, grid):
    """perm[i] = node at B x_i for each group element, with B = A^{-T}.

    The lattice action u -> A u leaves F0 invariant under x -> B x. The
    domain is built from the polytope, so every element maps nodes to nodes.
    """
    perms = []
    for A in model.group:
        B = np.round(np.linalg.inv(A.astype(float)).T).astype(np.int64)
        tgt = grid.index @ B.T
        if not grid.inside(tgt).all():
            raise ConfigurationError(f"{model.name}: domain is not invariant under {A.tolist()}")
        perms.append(grid.node_of(tgt))
    return perms


def symmetrize(values, perms):
    """Average of ``values`` over the node orbits given by ``perms``."""
    acc = np.zeros_like(values)
    for p in perms:
        acc += values[p]
    return acc / len(perms)


# --------------------------------------------------------------------------
# perturbations


def relative_hessian_bounds(phi, ref):
    """Extreme generalised eigenvalues of (D^2 phi, H0) over the grid.

    F0 + phi stays convex exactly when the minimum exceeds -1.
    """
    D = ref.grid.hessian(np.asarray(phi, float))
    H0 = ref.H0
    if ref.n == 1:
        lam = D[0, 0] / H0[0, 0]
        return float(lam.min()), float(lam.max())
    # roots of det(D - lam H0) = 0
    a = ref.det0
    b = H0[0, 0] * D[1, 1] + H0[1, 1] * D[0, 0] - 2.0 * H0[0, 1] * D[0, 1]
    c = D[0, 0] * D[1, 1] - D[0, 1] ** 2
    mid = b / (2.0 * a)
    rad = np.sqrt(np.maximum(mid * mid - c / a, 0.0))
    return float((mid - rad).min()), float((mid + rad).max())


def gaussian_bumps(grid, centers, widths, amplitudes):
    """Sum of Gaussians in x."""
    out = np.zeros(grid.size)
    for c, s, a in zip(centers, widths, amplitudes):
        c = np.asarray(c, float).reshape(-1, 1)
        out += a * np.exp(-np.sum((grid.x - c) ** 2, axis=0) / (2.0 * s * s))
    return out


def admissible_scale(phi, ref, margin=0.5):
    """Largest factor t <= 1 with min eig(H0^-1 D^2 (t phi)) >= -margin."""
    lo, _ = relative_hessian_bounds(phi, ref)
    if lo >= -margin:
        return 1.0
    return margin / -lo


# --------------------------------------------------------------------------
# binary field layout: (n, N_box, L_box) then the bounding box row-major,
# NaN at nodes outside the domain


_HEADER = struct.Struct("<qqd")


def save_field(path, values, grid):
    values = np.asarray(values, dtype="<f8")
    if values.shape != (grid.size,):
        raise ValueError("field shape does not match grid")
    R = grid.radius
    box = np.full((2 * R + 1,) * grid.n, np.nan, dtype="<f8")
    box[tuple((grid.index + R).T)] = values
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(grid.n, 2 * R + 1, R * grid.h))
        fh.write(box.tobytes(order="C"))


def load_field(path, grid=None):
    """Read a field; returns (values on ``grid`` nodes or the raw box, header)."""
    data = Path(path).read_bytes()
    n, Nb, Lb = _HEADER.unpack_from(data)
    box = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape((Nb,) * n).copy()
    header = (int(n), int(Nb), float(Lb))
    if grid is None:
        return box, header
    R = (Nb - 1) // 2
    if n != grid.n or R != grid.radius or not np.isclose(Lb, R * grid.h):
        raise ConfigurationError(f"field file {path} does not match the grid")
    return box[tuple((grid.index + R).T)].copy(), header
