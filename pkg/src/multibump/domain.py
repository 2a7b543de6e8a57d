"""Grids, ball-union domains, the emerging/submerged split and region-wise norms.

All grids are cell centred on the global lattice ``h * Z^N``: cell ``idx`` has
centre ``h * (lo + idx)``.  Two grids with the same spacing therefore share
cell centres, and fields can be moved between them by slicing.

Two conventions are used for arrays on a grid:

* a *field* holds point values ``u(x_c)``;
* a *functional* holds ``f_c`` with ``f(v) = sum_c f_c v_c``, i.e. point
  values already multiplied by the cell volume ``h^N``.

The H^1 Gram matrix on a cell set S is ``h^N (L_S + I)``, where ``L_S`` is the
(2N+1)-point negative Laplacian with zero values outside S.  The dual norm of
a functional ``f`` on S is ``sqrt(f . g)`` with ``h^N (L_S + I) g = f``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy import ndimage
from scipy.sparse.linalg import cg, splu

from .errors import DegenerateGram, GridTooCoarse, InputError, NotEmerging, SizeMismatch, SolverStall, ZeroPiece

__all__ = [
    "Configuration",
    "Grid",
    "DomainMask",
    "Field",
    "EmergingSplit",
    "sigma_of",
    "config_dist",
    "neighbor_counts",
    "build_domain",
    "emerging_split",
    "barycenter",
    "h1_norm",
    "norm_xd",
    "helmholtz_matrix",
    "dual_norm_patch",
    "dual_norm_xd",
    "projected_residual",
    "write_field_csv",
    "write_field_rows",
    "read_field_csv",
    "write_mask_csv",
]


# ---------------------------------------------------------------------------
# configurations


@dataclass(frozen=True)
class Configuration:
    """Unordered set of bump centres together with the support radius R*."""

    points: np.ndarray
    R_star: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InputError("points must be a non-empty (k, N) array")
        if not np.all(np.isfinite(pts)):
            raise InputError("points must be finite")
        if not self.R_star > 0:
            raise InputError("R_star must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def k(self) -> int:
        return self.points.shape[0]

    @property
    def N(self) -> int:
        return self.points.shape[1]

    @property
    def sigma(self) -> float:
        return sigma_of(self)

    def translated(self, tau) -> "Configuration":
        return Configuration(self.points + np.asarray(tau, dtype=float), self.R_star)

    def moved(self, i: int, new_point) -> "Configuration":
        pts = self.points.copy()
        pts[i] = new_point
        return Configuration(pts, self.R_star)


def _pairwise(points):
    diff = points[:, None, :] - points[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def sigma_of(config: Configuration) -> float:
    """Separation defect (2R* - min_{i != j} |x_i - x_j|)^+, zero for one point."""
    if config.k == 1:
        return 0.0
    dist = _pairwise(config.points)
    np.fill_diagonal(dist, np.inf)
    return max(0.0, 2.0 * config.R_star - float(dist.min()))


def config_dist(a: Configuration, b: Configuration) -> float:
    """Two-sided Hausdorff sum  max_x min_y |x-y| + max_y min_x |x-y|."""
    if a.k != b.k:
        raise SizeMismatch(f"configurations have {a.k} and {b.k} points")
    diff = a.points[:, None, :] - b.points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    return float(dist.min(axis=1).max() + dist.min(axis=0).max())


def neighbor_counts(config: Configuration, radius: float) -> np.ndarray:
    """Number of centres (including x_i itself) in the open ball B(x_i, radius)."""
    return np.sum(_pairwise(config.points) < radius, axis=1)


# ---------------------------------------------------------------------------
# grids and masks


@dataclass(frozen=True)
class Grid:
    h: float
    lo: tuple
    shape: tuple

    @property
    def N(self) -> int:
        return len(self.shape)

    @property
    def cell_volume(self) -> float:
        return self.h**self.N

    @cached_property
    def axes(self) -> list:
        return [self.h * (l + np.arange(n)) for l, n in zip(self.lo, self.shape)]

    @cached_property
    def coords(self) -> list:
        """Cell centres, one broadcastable array per axis."""
        out = []
        for ax, a in enumerate(self.axes):
            shp = [1] * self.N
            shp[ax] = a.size
            out.append(a.reshape(shp))
        return out

    def dist_to(self, point) -> np.ndarray:
        r2 = sum((c - p) ** 2 for c, p in zip(self.coords, point))
        return np.sqrt(np.broadcast_to(r2, self.shape))

    def offset_in(self, other: "Grid") -> tuple:
        """Index slices locating this grid inside ``other`` (same spacing)."""
        if not math.isclose(self.h, other.h, rel_tol=1e-12):
            raise InputError("grids have different spacings")
        start = [a - b for a, b in zip(self.lo, other.lo)]
        if any(s < 0 or s + n > m for s, n, m in zip(start, self.shape, other.shape)):
            raise InputError("grid does not fit inside the target grid")
        return tuple(slice(s, s + n) for s, n in zip(start, self.shape))


def _grid_for(points, radius, h, pad_cells=3):
    lo = np.floor((points.min(axis=0) - radius) / h).astype(int) - pad_cells
    hi = np.ceil((points.max(axis=0) + radius) / h).astype(int) + pad_cells
    return Grid(float(h), tuple(int(v) for v in lo), tuple(int(v) for v in hi - lo + 1))


class DomainMask:
    """Cells of the ball union A(x, d) = U_j B(x_j, R* + d) on a lattice grid.

    ``patch(i)`` is A(x, d) intersected with B(x_i, 2 R0).
    """

    def __init__(self, config: Configuration, d: float, h: float, R0: float | None = None, grid: Grid | None = None):
        if d < 0:
            raise InputError(f"margin d must be non-negative, got {d}")
        if not h > 0:
            raise InputError(f"spacing h must be positive, got {h}")
        self.config = config
        self.d = float(d)
        self.radius = config.R_star + self.d
        self.R0 = float(R0) if R0 is not None else self.radius
        self.grid = grid if grid is not None else _grid_for(config.points, self.radius, h)
        self.h = self.grid.h
        self.dists = np.stack([self.grid.dist_to(p) for p in config.points])
        self.balls = self.dists < self.radius
        self.inside = self.balls.any(axis=0)
        counts = self.balls.reshape(config.k, -1).sum(axis=1)
        if counts.min() < 100:
            raise GridTooCoarse(f"a ball holds only {int(counts.min())} cells; refine h")
        border = np.zeros(self.grid.shape, dtype=bool)
        for ax in range(self.grid.N):
            sl = [slice(None)] * self.grid.N
            sl[ax] = slice(0, 2)
            border[tuple(sl)] = True
            sl[ax] = slice(-2, None)
            border[tuple(sl)] = True
        if np.any(self.inside & border):
            raise InputError("grid box is not padded by two cells beyond the balls")

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def volume(self) -> float:
        return float(self.inside.sum()) * self.grid.cell_volume

    def ball(self, i: int, radius: float) -> np.ndarray:
        return self.dists[i] < radius

    def union_of_balls(self, radius: float) -> np.ndarray:
        return (self.dists < radius).any(axis=0)

    def patch(self, i: int) -> np.ndarray:
        return self.inside & (self.dists[i] < 2.0 * self.R0)

    @cached_property
    def _helmholtz_lu(self):
        return splu(helmholtz_matrix(self.grid, self.inside).tocsc())

    def riesz(self, functional: np.ndarray) -> np.ndarray:
        """H^1_0(A) representer of a functional (sparse LU, cached per mask)."""
        g = np.zeros(self.grid.shape)
        g[self.inside] = self._helmholtz_lu.solve(np.ascontiguousarray(functional[self.inside]))
        return g


def build_domain(config: Configuration, d: float, h: float, R0: float | None = None) -> DomainMask:
    return DomainMask(config, d, h, R0)


def laplacian(u: np.ndarray, h: float) -> np.ndarray:
    """Negative (2N+1)-point Laplacian with zero values beyond the array."""
    out = 2.0 * u.ndim * u
    for ax in range(u.ndim):
        lo = [slice(None)] * u.ndim
        hi = [slice(None)] * u.ndim
        lo[ax], hi[ax] = slice(0, -1), slice(1, None)
        out[tuple(lo)] -= u[tuple(hi)]
        out[tuple(hi)] -= u[tuple(lo)]
    return out / (h * h)


def edge_differences(u: np.ndarray):
    """Forward differences along each axis (one array per axis)."""
    return [np.diff(u, axis=ax) for ax in range(u.ndim)]


def helmholtz_matrix(grid: Grid, sel: np.ndarray) -> sp.csr_matrix:
    """h^N (L + I) restricted to the cells of ``sel``, zero values outside."""
    n = int(sel.sum())
    index = np.full(grid.shape, -1, dtype=np.int64)
    index[sel] = np.arange(n)
    h = grid.h
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    vals = [np.full(n, 2.0 * grid.N / h**2 + 1.0)]
    for ax in range(grid.N):
        lo = [slice(None)] * grid.N
        hi = [slice(None)] * grid.N
        lo[ax], hi[ax] = slice(0, -1), slice(1, None)
        a = index[tuple(lo)]
        b = index[tuple(hi)]
        both = (a >= 0) & (b >= 0)
        a, b = a[both], b[both]
        rows += [a, b]
        cols += [b, a]
        vals += [np.full(a.size, -1.0 / h**2)] * 2
    mat = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return (grid.cell_volume * mat).tocsr()


# ---------------------------------------------------------------------------
# fields


@dataclass(frozen=True, eq=False)
class Field:
    """Values on the cells of ``mask.grid``, zero outside ``mask.inside``."""

    mask: DomainMask
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.mask.grid.shape:
            raise InputError(f"field shape {vals.shape} does not match grid {self.mask.grid.shape}")
        if not np.all(np.isfinite(vals)):
            raise InputError("field holds non-finite values")
        if np.any(vals[~self.mask.inside] != 0.0):
            raise InputError("field is nonzero outside the mask")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_array(cls, mask: DomainMask, values) -> "Field":
        vals = np.where(mask.inside, values, 0.0)
        return cls(mask, vals)

    @classmethod
    def zeros(cls, mask: DomainMask) -> "Field":
        return cls(mask, np.zeros(mask.grid.shape))

    def transfer(self, mask: DomainMask) -> "Field":
        """Same lattice values on another mask; cells outside it are dropped."""
        out = np.zeros(mask.grid.shape)
        src = self.mask.grid
        dst = mask.grid
        lo = [max(a, b) for a, b in zip(src.lo, dst.lo)]
        hi = [min(a + n, b + m) for a, n, b, m in zip(src.lo, src.shape, dst.lo, dst.shape)]
        if all(h > l for l, h in zip(lo, hi)):
            s_src = tuple(slice(l - a, h - a) for l, h, a in zip(lo, hi, src.lo))
            s_dst = tuple(slice(l - a, h - a) for l, h, a in zip(lo, hi, dst.lo))
            out[s_dst] = self.values[s_src]
        return Field.from_array(mask, out)


# ---------------------------------------------------------------------------
# emerging split


@dataclass(frozen=True, eq=False)
class EmergingSplit:
    """u = sub + sum(pieces); ``pieces[i]`` is the emerging part owned by x_i."""

    mask: DomainMask
    delta: float
    sub: np.ndarray
    pieces: list

    @property
    def emerging(self) -> np.ndarray:
        return np.sum(self.pieces, axis=0)

    def reconstruct(self) -> np.ndarray:
        return self.sub + self.emerging


def emerging_split(u: Field, config: Configuration, params) -> EmergingSplit:
    """Split u into u_delta = min(u, delta) and per-centre pieces of (u - delta)^+.

    Each face-connected component of {u > delta} must lie in exactly one
    ball B(x_i, rho); every centre must own at least one component.
    """
    vals = u.values
    if np.any(vals < 0):
        raise InputError("emerging split needs a nonnegative field")
    delta, rho = params.delta, params.rho
    mask = u.mask
    up = np.maximum(vals - delta, 0.0)
    sub = vals - up
    labels, n = ndimage.label(up > 0)
    pieces = [np.zeros_like(vals) for _ in range(config.k)]
    if n:
        index = np.arange(1, n + 1)
        reach = np.stack([ndimage.maximum(mask.dists[i], labels, index) for i in range(config.k)])
        owned = reach < rho
        for lab in range(n):
            owners = np.nonzero(owned[:, lab])[0]
            if owners.size != 1:
                where = "no" if owners.size == 0 else "more than one"
                raise NotEmerging(f"an emerging component lies in {where} ball B(x_i, rho)")
            sel = labels == lab + 1
            pieces[owners[0]][sel] = up[sel]
    for i, p in enumerate(pieces):
        if not np.any(p > 0):
            raise NotEmerging(f"no emerging part around centre {i}")
    return EmergingSplit(mask, float(delta), sub, pieces)


def barycenter(split: EmergingSplit, i: int, config: Configuration) -> np.ndarray:
    """beta_i = int (x - x_i) (u_i^delta)^2 / int (u_i^delta)^2."""
    p2 = split.pieces[i] ** 2
    mass = p2.sum()
    if mass == 0.0:
        raise ZeroPiece(f"piece {i} vanishes")
    grid = split.mask.grid
    return np.array([float(np.sum((c - x) * p2)) / mass for c, x in zip(grid.coords, config.points[i])])


# ---------------------------------------------------------------------------
# norms


def h1_norm(values: np.ndarray, h: float, cells: np.ndarray | None = None) -> float:
    """Discrete H^1 norm; with ``cells`` only cells and edges touching them count."""
    vol = h ** values.ndim
    if cells is None:
        cells = np.ones(values.shape, dtype=bool)
    total = float(np.sum(values[cells] ** 2))
    for ax, diff in enumerate(edge_differences(values)):
        lo = [slice(None)] * values.ndim
        hi = [slice(None)] * values.ndim
        lo[ax], hi[ax] = slice(0, -1), slice(1, None)
        touch = cells[tuple(lo)] | cells[tuple(hi)]
        total += float(np.sum(diff[touch] ** 2)) / (h * h)
    return math.sqrt(vol * total)


def norm_xd(u: Field, config: Configuration, d: float) -> float:
    """max_j ||u||_{H^1(B(x_j, R*+d))}."""
    grid = u.mask.grid
    radius = config.R_star + d
    return max(h1_norm(u.values, grid.h, grid.dist_to(p) < radius) for p in config.points)


def _riesz_cg(functional: np.ndarray, grid: Grid, patch: np.ndarray) -> np.ndarray:
    A = helmholtz_matrix(grid, patch)
    b = functional[patch]
    g = np.zeros(grid.shape)
    if not np.any(b):
        return g
    n = b.size
    sol, info = cg(A, b, rtol=1e-10, atol=0.0, maxiter=10 * n)
    if info != 0:
        raise SolverStall(f"conjugate gradients did not converge on a patch of {n} cells")
    g[patch] = sol
    return g


def dual_norm_patch(hfun: Field, patch: np.ndarray) -> float:
    """H^{-1} norm of a functional on a cell set, zero values outside it."""
    if not np.any(patch):
        raise InputError("empty patch")
    g = _riesz_cg(hfun.values, hfun.mask.grid, patch)
    return math.sqrt(max(float(np.sum(hfun.values[patch] * g[patch])), 0.0))


def dual_norm_xd(hfun: Field) -> float:
    """max_j of the patch dual norms (the unprojected norm ||.||_{*,x,d})."""
    mask = hfun.mask
    return max(dual_norm_patch(hfun, mask.patch(j)) for j in range(mask.k))


def constraint_functionals(split: EmergingSplit, j: int, point) -> list:
    """Functionals v -> int (x - x_j)_m u_j^delta v, one per coordinate m."""
    grid = split.mask.grid
    p = split.pieces[j]
    return [grid.cell_volume * (c - x) * p for c, x in zip(grid.coords, point)]


def projected_residual(hfun: Field, split: EmergingSplit, config: Configuration, mask: DomainMask | None = None):
    """Dual norm of h after removing span{(x - x_j) u_j^delta} on each patch.

    Returns
    -------
    norm : float
        max over patches of min_lambda ||h - lambda . (x - x_j) u_j^delta||_*.
    lambdas : list of ndarray
        The minimising lambda_j per bump.
    """
    mask = mask if mask is not None else hfun.mask
    grid = mask.grid
    f = hfun.values
    worst = 0.0
    lambdas = []
    for j in range(config.k):
        patch = mask.patch(j)
        cols = constraint_functionals(split, j, config.points[j])
        reps = [_riesz_cg(b, grid, patch) for b in cols]
        g = _riesz_cg(f, grid, patch)
        G = np.array([[np.sum(bi[patch] * rj[patch]) for rj in reps] for bi in cols])
        scale = np.abs(np.diag(G)).max()
        if scale == 0.0 or np.linalg.cond(G) > 1e12:
            raise DegenerateGram(f"constraint representers on patch {j} are linearly dependent")
        rhs = np.array([np.sum(bi[patch] * g[patch]) for bi in cols])
        lam = np.linalg.solve(G, rhs)
        sq = float(np.sum(f[patch] * g[patch]) - lam @ rhs)
        worst = max(worst, math.sqrt(max(sq, 0.0)))
        lambdas.append(lam)
    return worst, lambdas


# ---------------------------------------------------------------------------
# export


def write_field_rows(coords: np.ndarray, values: np.ndarray, path) -> None:
    """Rows ``x1,...,xN,u`` sorted lexicographically by coordinates, 17 digits."""
    coords = np.asarray(coords, dtype=float).reshape(len(values), -1) if len(values) else np.asarray(coords)
    N = coords.shape[1]
    order = np.lexsort(coords.T[::-1]) if len(values) else []
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(N)] + ["u"])
        for j in order:
            writer.writerow([f"{c:.17g}" for c in coords[j]] + [f"{values[j]:.17g}"])


def write_field_csv(u: Field, path) -> None:
    """One row ``x1,...,xN,u`` per in-mask cell, in lattice order."""
    idx = np.argwhere(u.mask.inside)
    coords = u.mask.grid.h * (idx + np.asarray(u.mask.grid.lo))
    write_field_rows(coords, u.values[u.mask.inside], path)


def write_mask_csv(mask: DomainMask, path) -> None:
    N = mask.grid.N
    idx = np.argwhere(np.ones(mask.grid.shape, dtype=bool))
    coords = mask.grid.h * (idx + np.asarray(mask.grid.lo))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"x{i + 1}" for i in range(N)] + ["inside"])
        for x, flag in zip(coords, mask.inside.ravel()):
            writer.writerow([f"{c:.17g}" for c in x] + [str(int(flag))])


def read_field_csv(path):
    """Return (coords, values) from a field CSV; empty arrays for a header-only file."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    n = len(header) - 1
    if not rows:
        return np.empty((0, n)), np.empty(0)
    data = np.array(rows)
    return data[:, :n], data[:, n]


def field_from_points(mask: DomainMask, coords: np.ndarray, values: np.ndarray) -> Field:
    """Place point values given at lattice cell centres onto ``mask``."""
    out = np.zeros(mask.grid.shape)
    if len(values):
        idx = np.rint(coords / mask.grid.h).astype(int) - np.asarray(mask.grid.lo)
        if np.any(idx < 0) or np.any(idx >= np.asarray(mask.grid.shape)):
            raise InputError("field points fall outside the grid")
        out[tuple(idx.T)] = values
    return Field(mask, out)
