"""Scattered-node generation on irregular 2D domains and 1D intervals.

Two point sets are produced: an interpolation set ``Y`` carrying the local
stencils, and an evaluation set ``X`` that contains ``Y`` plus optional
interior oversampling.  Every evaluation point is assigned to the stencil of
its nearest interpolation point.

Boundary nodes are placed by uniform-arclength sampling of the boundary
parametrization; interior nodes come from seeded Poisson-disk rejection
sampling, so node sets are reproducible from (domain, h, q, n, seed) alone.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Domains
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Domain:
    """Computational domain.

    kind:
        ``"square"``   axis-aligned square ``[lo, hi]^2``
        ``"star"``     star-shaped region ``r <= base + sum_j a_j sin(j*gamma)``
        ``"interval"`` 1D interval ``[lo, hi]``, optionally periodic
    """

    kind: str
    lo: float = -1.0
    hi: float = 1.0
    base_radius: float = 1.0
    sin_coefficients: dict = field(default_factory=dict)  # harmonic -> amplitude
    bbox_pad: float = 0.05
    periodic: bool = False

    def __post_init__(self):
        if self.kind not in ("square", "star", "interval"):
            raise GeometryError(f"unknown domain kind {self.kind!r}")
        if self.kind != "interval" and self.periodic:
            raise GeometryError("periodic domains are supported in 1D only")
        if self.kind in ("square", "interval") and not self.hi > self.lo:
            raise GeometryError("domain upper bound must exceed lower bound")
        if self.kind == "star":
            gamma = np.linspace(0.0, 2.0 * np.pi, 4096)
            if np.min(self.radius(gamma)) <= 0.0:
                raise GeometryError("star-shaped radius must stay positive")

    @property
    def dim(self) -> int:
        return 1 if self.kind == "interval" else 2

    def radius(self, gamma: np.ndarray) -> np.ndarray:
        """Boundary radius of a star domain at polar angle gamma."""
        r = np.full_like(np.asarray(gamma, dtype=float), self.base_radius)
        for j, a in self.sin_coefficients.items():
            r = r + a * np.sin(int(j) * np.asarray(gamma, dtype=float))
        return r

    def bounding_box(self) -> np.ndarray:
        """(2, dim) array [[lo...], [hi...]] strictly containing the domain."""
        if self.kind == "interval":
            pad = self.bbox_pad * (self.hi - self.lo)
            return np.array([[self.lo - pad], [self.hi + pad]])
        if self.kind == "square":
            pad = self.bbox_pad * (self.hi - self.lo)
            return np.array([[self.lo - pad] * 2, [self.hi + pad] * 2])
        rmax = float(np.max(self.radius(np.linspace(0, 2 * np.pi, 4096))))
        ext = rmax * (1.0 + self.bbox_pad)
        return np.array([[-ext, -ext], [ext, ext]])

    def contains(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(pts)
        if self.kind == "interval":
            return (pts[:, 0] >= self.lo) & (pts[:, 0] <= self.hi)
        if self.kind == "square":
            inside = np.ones(pts.shape[0], dtype=bool)
            for k in range(2):
                inside &= (pts[:, k] >= self.lo) & (pts[:, k] <= self.hi)
            return inside
        r = np.hypot(pts[:, 0], pts[:, 1])
        gamma = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2.0 * np.pi)
        return r <= self.radius(gamma)

    # boundary parametrization ------------------------------------------------

    def boundary_curve(self, gamma: np.ndarray):
        """Point and outward unit normal of the star boundary at gamma."""
        if self.kind != "star":
            raise GeometryError("boundary_curve is defined for star domains")
        gamma = np.asarray(gamma, dtype=float)
        r = self.radius(gamma)
        dr = np.zeros_like(gamma)
        for j, a in self.sin_coefficients.items():
            dr = dr + a * int(j) * np.cos(int(j) * gamma)
        cg, sg = np.cos(gamma), np.sin(gamma)
        pts = np.stack([r * cg, r * sg], axis=-1)
        # tangent d/dgamma, rotated by -90 degrees gives the outward normal
        tx = dr * cg - r * sg
        ty = dr * sg + r * cg
        nrm = np.stack([ty, -tx], axis=-1)
        nrm /= np.linalg.norm(nrm, axis=-1, keepdims=True)
        # orient outward (positive projection on the radial direction)
        flip = np.sum(nrm * pts, axis=-1) < 0
        nrm[flip] *= -1.0
        return pts, nrm


def _square_boundary(domain: Domain, h: float):
    lo, hi = domain.lo, domain.hi
    side = hi - lo
    k = max(1, int(round(side / h)))
    t = lo + side * np.arange(k) / k
    pts, normals = [], []
    for p in t:  # bottom, left to right
        pts.append((p, lo)); normals.append((0.0, -1.0))
    for p in t:  # right, bottom to top
        pts.append((hi, p)); normals.append((1.0, 0.0))
    for p in t:  # top, right to left
        pts.append((hi + lo - p, hi)); normals.append((0.0, 1.0))
    for p in t:  # left, top to bottom
        pts.append((lo, hi + lo - p)); normals.append((-1.0, 0.0))
    pts = np.array(pts)
    normals = np.array(normals)
    # corners get the diagonal of their two faces
    for corner, nv in (((lo, lo), (-1, -1)), ((hi, lo), (1, -1)),
                       ((hi, hi), (1, 1)), ((lo, hi), (-1, 1))):
        i = np.where((pts[:, 0] == corner[0]) & (pts[:, 1] == corner[1]))[0]
        if i.size:
            normals[i[0]] = np.asarray(nv, dtype=float) / math.sqrt(2.0)
    return pts, normals


def _star_boundary(domain: Domain, h: float):
    dense = np.linspace(0.0, 2.0 * np.pi, 20001)
    pts, _ = domain.boundary_curve(dense)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    total = arc[-1]
    k = max(4, int(round(total / h)))
    targets = total * np.arange(k) / k
    gam = np.interp(targets, arc, dense)
    return domain.boundary_curve(gam)


# ---------------------------------------------------------------------------
# Grid-hash nearest-neighbour structure
# ---------------------------------------------------------------------------

class _GridHash:
    """Uniform-grid spatial hash for kNN queries on small point sets."""

    def __init__(self, pts: np.ndarray, cell: float):
        self.pts = pts
        self.cell = cell
        self.dim = pts.shape[1]
        self.span = float(np.ptp(pts, axis=0).max()) if pts.size else 0.0
        self.table: dict = {}
        keys = np.floor(pts / cell).astype(np.int64)
        for i, key in enumerate(map(tuple, keys)):
            self.table.setdefault(key, []).append(i)

    def _ring_cells(self, center_key, ring):
        if self.dim == 1:
            (cx,) = center_key
            if ring == 0:
                yield (cx,)
            else:
                yield (cx - ring,)
                yield (cx + ring,)
            return
        cx, cy = center_key
        if ring == 0:
            yield (cx, cy)
            return
        for dx in range(-ring, ring + 1):
            yield (cx + dx, cy - ring)
            yield (cx + dx, cy + ring)
        for dy in range(-ring + 1, ring):
            yield (cx - ring, cy + dy)
            yield (cx + ring, cy + dy)

    def has_point_within(self, p: np.ndarray, radius: float) -> bool:
        key = tuple(np.floor(p / self.cell).astype(np.int64))
        rings = int(math.ceil(radius / self.cell))
        r2 = radius * radius
        for ring in range(rings + 1):
            for ck in self._ring_cells(key, ring):
                for i in self.table.get(ck, ()):
                    d = self.pts[i] - p
                    if float(d @ d) < r2:
                        return True
        return False

    def insert(self, i: int):
        key = tuple(np.floor(self.pts[i] / self.cell).astype(np.int64))
        self.table.setdefault(key, []).append(i)

    def knn(self, p: np.ndarray, k: int) -> np.ndarray:
        """Indices of the k nearest stored points, ties broken by lower index."""
        key = tuple(np.floor(p / self.cell).astype(np.int64))
        found: list = []
        ring = 0
        while True:
            for ck in self._ring_cells(key, ring):
                for i in self.table.get(ck, ()):
                    d = self.pts[i] - p
                    found.append((float(d @ d), i))
            if len(found) >= k:
                found.sort()
                # rings 0..ring cover every point within ring*cell of p
                covered = ring * self.cell
                if found[k - 1][0] <= covered * covered:
                    return np.array([i for _, i in found[:k]], dtype=np.int64)
                if ring * self.cell > self.span + 2.0 * self.cell:
                    return np.array([i for _, i in found[:k]], dtype=np.int64)
            ring += 1
            if ring * self.cell > 4.0 * self.span + 8.0 * self.cell and found:
                found.sort()
                return np.array([i for _, i in found[:min(k, len(found))]],
                                dtype=np.int64)
            if ring > 100000:
                raise GeometryError("kNN query failed to terminate")

    def nearest(self, p: np.ndarray) -> int:
        return int(self.knn(p, 1)[0])


# ---------------------------------------------------------------------------
# NodeSet
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NodeSet:
    """Immutable container of interpolation/evaluation points and stencils.

    ``points_x[:n_y] == points_y`` always holds; the evaluation set extends
    the interpolation set.  ``stencils[i]`` lists the ``stencil_size`` nearest
    interpolation points of ``y_i`` (including itself); ``assignment[j]`` is
    the interpolation index whose stencil serves evaluation point ``x_j``.
    """

    domain: Domain
    points_y: np.ndarray          # (N, d)
    points_x: np.ndarray          # (M, d)
    y_is_boundary: np.ndarray     # (N,) bool
    x_is_boundary: np.ndarray     # (M,) bool
    y_normals: np.ndarray         # (N, d), zero rows for interior points
    spacing: float
    oversample: float
    stencil_size: int
    stencils: np.ndarray          # (N, n) int
    assignment: np.ndarray        # (M,) int
    seed: int

    def __post_init__(self):
        for name in ("points_y", "points_x", "y_is_boundary", "x_is_boundary",
                     "y_normals", "stencils", "assignment"):
            getattr(self, name).setflags(write=False)

    @property
    def n_y(self) -> int:
        return self.points_y.shape[0]

    @property
    def n_x(self) -> int:
        return self.points_x.shape[0]

    @property
    def dim(self) -> int:
        return self.points_y.shape[1]

    @property
    def x_equals_y(self) -> bool:
        return self.n_x == self.n_y

    @property
    def x_normals(self) -> np.ndarray:
        out = np.zeros_like(self.points_x)
        out[: self.n_y] = self.y_normals
        return out

    def periodic_delta(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Displacement a-b folded into the periodic cell when applicable."""
        d = a - b
        if self.domain.kind == "interval" and self.domain.periodic:
            period = self.domain.hi - self.domain.lo
            d = d - period * np.round(d / period)
        return d


def _min_distance_ok(p, hash_, radius) -> bool:
    return not hash_.has_point_within(p, radius)


def _smooth_interior(domain: Domain, pts: np.ndarray, n_fixed: int,
                     h: float, iterations: int = 25, step: float = 0.25) -> np.ndarray:
    """Relax interior nodes with short-range repulsion (boundary fixed).

    Deterministic: improves fill uniformity, which sharpens the convergence
    of derivative stencils without changing the sampling contract.
    """
    out = pts.copy()
    n = out.shape[0]
    if n - n_fixed <= 0:
        return out
    rest = 1.15 * h
    k = min(12, n - 1)
    for it in range(iterations):
        if it % 5 == 0:
            cell = max(np.ptp(out, axis=0).max() / max(8, int(math.sqrt(n))), 1e-12)
            hash_ = _GridHash(out, cell=cell)
            neigh = np.empty((n, k), dtype=np.int64)
            for i in range(n):
                neigh[i] = hash_.knn(out[i], k + 1)[1:]
        delta = out[:, None, :] - out[neigh]
        dist = np.linalg.norm(delta, axis=2)
        push = np.maximum(rest - dist, 0.0) / np.maximum(dist, 1e-12)
        disp = step * np.einsum("ij,ijd->id", push, delta)
        cand = out + disp
        ok = domain.contains(cand)
        ok[:n_fixed] = False
        out[ok] = cand[ok]
    return out


def _poisson_fill(domain: Domain, rng: np.random.Generator, radius: float,
                  existing: np.ndarray) -> np.ndarray:
    """Dart-throwing rejection sampler at the given exclusion radius."""
    box = domain.bounding_box()
    lo, hi = box[0], box[1]
    vol = float(np.prod(hi - lo))
    dim = domain.dim
    attempts = int(math.ceil(60.0 * vol / radius ** dim))
    allpts = np.vstack([existing, np.zeros((attempts, dim))])
    hash_ = _GridHash(allpts[: len(existing)], cell=radius)
    # the hash keeps a view over a growing prefix of allpts
    hash_.pts = allpts
    count = len(existing)
    for _ in range(attempts):
        cand = lo + (hi - lo) * rng.random(dim)
        if not domain.contains(cand[None, :])[0]:
            continue
        if _min_distance_ok(cand, hash_, radius):
            allpts[count] = cand
            hash_.insert(count)
            count += 1
    return allpts[len(existing):count].copy()


def generate_nodes(domain: Domain, h: float, oversample: float = 1.0,
                   stencil_size: int = 13, seed: int = 0) -> NodeSet:
    """Generate interpolation and evaluation sets with stencil tables.

    Parameters
    ----------
    domain : Domain
    h : float
        Target node spacing (boundary arclength spacing; interior fill uses
        a Poisson-disk radius of 0.7*h).
    oversample : float
        Ratio q = |X| / |Y|; q = 1 gives X = Y.
    stencil_size : int
        Number of nearest neighbours per stencil (stencil includes its
        own center).
    seed : int
        Seed for the interior rejection sampler.
    """
    if h <= 0:
        raise GeometryError("spacing h must be positive")
    if oversample < 1.0:
        raise GeometryError("oversample ratio must be >= 1")
    rng = np.random.default_rng(seed)

    if domain.kind == "interval":
        n_cells = int(round((domain.hi - domain.lo) / h))
        if n_cells < 2:
            raise GeometryError("insufficient nodes: spacing too large")
        if domain.periodic:
            y = domain.lo + (domain.hi - domain.lo) * np.arange(n_cells) / n_cells
            y = y[:, None]
            y_bnd = np.zeros(n_cells, dtype=bool)
        else:
            y = np.linspace(domain.lo, domain.hi, n_cells + 1)[:, None]
            y_bnd = np.zeros(n_cells + 1, dtype=bool)
            y_bnd[0] = y_bnd[-1] = True
        normals = np.zeros_like(y)
        if not domain.periodic:
            normals[0, 0], normals[-1, 0] = -1.0, 1.0
        if oversample > 1.0:
            extra = _poisson_fill(domain, rng, 0.7 * h / oversample, y)
        else:
            extra = np.zeros((0, 1))
    else:
        if domain.kind == "square":
            bpts, normals_b = _square_boundary(domain, h)
        else:
            bpts, normals_b = _star_boundary(domain, h)
        interior = _poisson_fill(domain, rng, 0.7 * h, bpts)
        y = np.vstack([bpts, interior])
        y = _smooth_interior(domain, y, bpts.shape[0], h)
        y_bnd = np.zeros(y.shape[0], dtype=bool)
        y_bnd[: bpts.shape[0]] = True
        normals = np.zeros_like(y)
        normals[: bpts.shape[0]] = normals_b
        if oversample > 1.0:
            extra = _poisson_fill(domain, rng, 0.7 * h / math.sqrt(oversample), y)
        else:
            extra = np.zeros((0, 2))

    x = np.vstack([y, extra])
    x_bnd = np.concatenate([y_bnd, np.zeros(extra.shape[0], dtype=bool)])

    n = int(stencil_size)
    if y.shape[0] < n:
        raise GeometryError(
            f"insufficient nodes: {y.shape[0]} generated, stencil needs {n}")

    stencils, assignment = _build_tables(domain, y, x, n)
    return NodeSet(domain=domain, points_y=y, points_x=x,
                   y_is_boundary=y_bnd, x_is_boundary=x_bnd,
                   y_normals=normals, spacing=float(h),
                   oversample=float(oversample), stencil_size=n,
                   stencils=stencils, assignment=assignment, seed=int(seed))


def _build_tables(domain: Domain, y: np.ndarray, x: np.ndarray, n: int):
    N, M = y.shape[0], x.shape[0]
    if domain.kind == "interval" and domain.periodic:
        # uniform periodic grid: neighbours are index offsets
        order = [0]
        for k in range(1, N):
            order.extend([-k, k])
        offsets = np.array(order[:n])
        base = np.arange(N)[:, None]
        stencils = np.mod(base + offsets[None, :], N)
        period = domain.hi - domain.lo
        d = x[:, 0:1] - y[:, 0][None, :]
        d -= period * np.round(d / period)
        assignment = np.argmin(d * d, axis=1)  # argmin takes the lowest index on ties
        return stencils.astype(np.int64), assignment.astype(np.int64)

    cell = max(np.ptp(y, axis=0).max() / max(8, int(math.sqrt(N))), 1e-12)
    hash_y = _GridHash(y, cell=cell)
    stencils = np.empty((N, n), dtype=np.int64)
    for i in range(N):
        stencils[i] = hash_y.knn(y[i], n)
    assignment = np.empty(M, dtype=np.int64)
    for j in range(M):
        assignment[j] = hash_y.nearest(x[j])
    return stencils, assignment


def nearest_stencil(nodeset: NodeSet, point) -> int:
    """Index of the interpolation point nearest to ``point``.

    Ties are broken toward the lowest index; matches an exhaustive scan.
    """
    if nodeset.n_y == 0:
        raise GeometryError("empty node set")
    p = np.atleast_1d(np.asarray(point, dtype=float))
    box = nodeset.domain.bounding_box()
    if np.any(p < box[0]) or np.any(p > box[1]):
        raise GeometryError("query point outside the bounding box")
    d = nodeset.periodic_delta(nodeset.points_y, p[None, :])
    return int(np.argmin(np.einsum("ij,ij->i", d, d)))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_nodes(nodeset: NodeSet, path) -> None:
    """Write the node set as CSV with columns x, y, is_boundary, set."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "is_boundary", "set"])
        for i in range(nodeset.n_x):
            px = nodeset.points_x[i]
            py = px[1] if nodeset.dim == 2 else 0.0
            tag = "Y" if i < nodeset.n_y else "X"
            w.writerow([f"{px[0]:.17g}", f"{py:.17g}",
                        int(nodeset.x_is_boundary[i]), tag])


def load_nodes(path, domain: Domain, h: float, oversample: float,
               stencil_size: int, seed: int = 0) -> NodeSet:
    """Rebuild a NodeSet from its CSV; stencil tables are re-derived."""
    xs, ys, bnd, tags = [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            xs.append(float(row["x"]))
            ys.append(float(row["y"]))
            bnd.append(bool(int(row["is_boundary"])))
            tags.append(row["set"])
    pts = np.column_stack([xs, ys])[:, : domain.dim]
    tags = np.asarray(tags)
    bnd = np.asarray(bnd, dtype=bool)
    n_y = int(np.sum(tags == "Y"))
    y = pts[:n_y]
    y_bnd = bnd[:n_y]
    normals = np.zeros_like(y)
    if domain.kind == "star":
        p, nv = domain.boundary_curve(
            np.mod(np.arctan2(y[y_bnd, 1], y[y_bnd, 0]), 2 * np.pi))
        normals[y_bnd] = nv
    elif domain.kind == "square":
        bpts, bn = _square_boundary(domain, h)
        if bpts.shape[0] == int(np.sum(y_bnd)):
            normals[y_bnd] = bn
    elif not domain.periodic:
        normals[0, 0], normals[-1, 0] = -1.0, 1.0
    stencils, assignment = _build_tables(domain, y, pts, stencil_size)
    return NodeSet(domain=domain, points_y=y, points_x=pts,
                   y_is_boundary=y_bnd, x_is_boundary=bnd, y_normals=normals,
                   spacing=float(h), oversample=float(oversample),
                   stencil_size=int(stencil_size), stencils=stencils,
                   assignment=assignment, seed=int(seed))
