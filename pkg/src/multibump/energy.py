"""Discrete energies, gradients, Nehari scaling and potentials.

On a grid with spacing h the functional

    I(u) = 1/2 int |grad u|^2 - K u^2  +  1/q int u^q

is evaluated with the midpoint rule and edge differences, so that its exact
gradient is the functional ``h^N (L u - K u + u^(q-1))`` with ``L`` the
(2N+1)-point negative Laplacian and ``0^(q-1) := 0``.

For the emerging split u = u_delta + sum_i u_i^delta the discrete energy is

    I(u) = I(u_delta) + sum_i J_delta(u_i^delta) + coupling,

where ``coupling = h^N sum_edges D u_delta . D u^delta / h^2`` collects the
edges that straddle the level set {u = delta}.  It vanishes in the continuum
and is included whenever a derivative along a piece is needed exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .domain import (
    Configuration,
    DomainMask,
    EmergingSplit,
    Field,
    dual_norm_xd,
    edge_differences,
    laplacian,
)
from .errors import HypothesisViolated, InputError, NoRoot
from .radial import RadialProfile, eval_w, eval_wp

__all__ = [
    "Potential",
    "EnergyReport",
    "potential_make",
    "alpha_estimate",
    "potential_checks",
    "sample_bumps",
    "energy_I",
    "energy_Iinf",
    "J_delta",
    "edge_coupling",
    "grad_I",
    "grad_Iinf",
    "nehari_derivative",
    "nehari_scale",
    "overlap_defect",
    "overlap_exponent",
    "min_overlap_energy",
    "comparison_field",
    "energy_report",
]

KINDS = ("unit", "radial_dip", "compact_bump")


# ---------------------------------------------------------------------------
# potentials


@dataclass(frozen=True)
class Potential:
    """K(x) for one of the parametric families, with its caps.

    ``a1`` bounds K from above, ``a2`` is the radius of a ball containing
    {K >= 1}.
    """

    kind: str
    alpha: float
    q: float
    a1: float
    a2: float

    def excess(self, coords) -> np.ndarray:
        """K - 1, free of the cancellation in ``K(x) - 1`` where K is near 1."""
        r2 = sum(np.asarray(c, dtype=float) ** 2 for c in coords)
        if self.kind == "unit" or self.alpha == 0.0:
            return np.zeros_like(r2)
        if self.kind == "radial_dip":
            return -self.alpha / (1.0 + r2)
        return self.alpha * (2.0 * np.exp(-r2) - np.exp(-r2 / 4.0))

    def __call__(self, coords) -> np.ndarray:
        return 1.0 + self.excess(coords)

    def on_grid(self, grid) -> np.ndarray:
        return np.broadcast_to(self(grid.coords), grid.shape).copy()


def potential_make(kind: str, alpha: float, q: float) -> Potential:
    """Build K for ``kind`` in {unit, radial_dip, compact_bump}.

    radial_dip: K = 1 - alpha / (1 + |x|^2), below 1 everywhere.
    compact_bump: K = 1 + alpha (2 exp(-|x|^2) - exp(-|x|^2 / 4)), with
    {K >= 1} the ball of radius sqrt((4/3) ln 2).
    """
    if kind not in KINDS:
        raise InputError(f"unknown potential kind {kind!r}; expected one of {KINDS}")
    if not alpha >= 0:
        raise InputError(f"alpha must be non-negative, got {alpha}")
    if not 1.0 < q < 2.0:
        raise InputError(f"q must lie in (1, 2), got {q}")
    if kind == "unit" or alpha == 0.0:
        # K == 1 whatever amplitude was asked for
        return Potential(kind, 0.0, float(q), 1.0, 0.0)
    if kind == "radial_dip":
        return Potential(kind, float(alpha), float(q), 1.0, 0.0)
    return Potential(kind, float(alpha), float(q), 1.0 + 2.0 * alpha, math.sqrt(4.0 / 3.0 * math.log(2.0)))


def alpha_estimate(K: Potential, N: int, R_star: float, L: float, h: float = 0.05, p: float | None = None) -> float:
    """max over lattice centres (stride R*/2 in [-L, L]^N) of ||K - 1||_{L^p(B(c, 1))}.

    ``p`` defaults to N.
    """
    p = float(N) if p is None else float(p)
    off = h * np.arange(-math.ceil(1.0 / h), math.ceil(1.0 / h) + 1)
    mesh = np.meshgrid(*([off] * N), indexing="ij")
    inball = sum(m**2 for m in mesh) < 1.0
    local = [m[inball] for m in mesh]
    ticks = np.arange(-L, L + 1e-12, R_star / 2.0)
    best = 0.0
    for c in np.array(np.meshgrid(*([ticks] * N), indexing="ij")).reshape(N, -1).T:
        vals = np.abs(K.excess([lc + ci for lc, ci in zip(local, c)]))
        best = max(best, float(np.sum(vals**p) * h**N) ** (1.0 / p))
    return best


def potential_checks(K: Potential, N: int, L: float, h: float) -> dict:
    """Sampled versions of the cap, decay and boundedness hypotheses on [-L, L]^N."""
    ax = np.arange(-L, L + 0.5 * h, h)
    mesh = np.meshgrid(*([ax] * N), indexing="ij")
    vals = K(mesh)
    excess = K.excess(mesh)
    r = np.sqrt(sum(m**2 for m in mesh))
    edge = np.zeros(vals.shape, dtype=bool)
    for m in mesh:
        edge |= np.abs(np.abs(m) - L) < 0.5 * h
    return {
        "K_below_a1": bool(np.all(vals <= K.a1 + 1e-14)),
        "K_near_one_at_box_edge": bool(np.all(np.abs(vals[edge] - 1.0) <= 0.05 * K.alpha + 1e-14)),
        # K == 1 is the limit problem, where the bounded-set condition is void
        "K_ge_one_inside_a2": bool(np.all(r[excess >= 0.0] <= K.a2 + h)) if K.alpha > 0 else True,
    }


# ---------------------------------------------------------------------------
# functionals


def sample_bumps(profile: RadialProfile, mask: DomainMask, combine: str = "sum") -> Field:
    """Translates w(. - x_j) sampled on the mask, combined by sum or max."""
    stack = np.stack([eval_w(profile, mask.dists[j]) for j in range(mask.k)])
    vals = stack.sum(axis=0) if combine == "sum" else stack.max(axis=0)
    return Field.from_array(mask, vals)


def _gradient_energy(vals, h):
    return 0.5 * h ** (vals.ndim - 2) * sum(float(np.sum(d * d)) for d in edge_differences(vals))


def _energy(vals, Kvals, q, h):
    vol = h**vals.ndim
    return _gradient_energy(vals, h) - 0.5 * vol * float(np.sum(Kvals * vals * vals)) + vol / q * float(
        np.sum(np.maximum(vals, 0.0) ** q)
    )


def energy_I(u: Field, K: Potential) -> float:
    return _energy(u.values, K.on_grid(u.mask.grid), K.q, u.mask.h)


def energy_Iinf(u: Field, q: float) -> float:
    return _energy(u.values, 1.0, q, u.mask.h)


def _as_values(piece):
    return piece.values if isinstance(piece, Field) else np.asarray(piece, dtype=float)


def J_delta(piece, K: Potential, params, mask: DomainMask | None = None) -> float:
    """1/2 int |grad p|^2 - K p^2 - int K delta p + 1/q int_supp (delta+p)^q - 1/q |supp| delta^q.

    ``piece`` is a Field or a plain array on ``mask.grid``.
    """
    p = _as_values(piece)
    mask = piece.mask if isinstance(piece, Field) else mask
    if mask is None:
        raise InputError("a plain array needs its mask")
    if np.any(p < 0):
        raise InputError("J_delta needs a nonnegative piece")
    h, q, delta = mask.h, K.q, params.delta
    vol = h**p.ndim
    Kv = K.on_grid(mask.grid)
    supp = p > 0
    value = _gradient_energy(p, h) - 0.5 * vol * float(np.sum(Kv * p * p)) - vol * delta * float(np.sum(Kv * p))
    value += vol / q * float(np.sum((delta + p[supp]) ** q)) - vol / q * supp.sum() * delta**q
    return value


def edge_coupling(a: np.ndarray, b: np.ndarray, h: float) -> float:
    """h^N sum_edges (D a)(D b) / h^2, the bilinear form of the gradient term."""
    return h ** (a.ndim - 2) * sum(float(np.sum(da * db)) for da, db in zip(edge_differences(a), edge_differences(b)))


def _grad_values(vals, Kvals, q, mask):
    h = mask.h
    g = laplacian(vals, h) - Kvals * vals + np.where(vals > 0, np.maximum(vals, 0.0) ** (q - 1.0), 0.0)
    return np.where(mask.inside, g * h**vals.ndim, 0.0)


def grad_I(u: Field, K: Potential) -> Field:
    """Functional with pairing sum(g * v) = I'(u) v on the mask."""
    return Field(u.mask, _grad_values(u.values, K.on_grid(u.mask.grid), K.q, u.mask))


def grad_Iinf(u: Field, q: float) -> Field:
    return Field(u.mask, _grad_values(u.values, 1.0, q, u.mask))


# ---------------------------------------------------------------------------
# Nehari scaling


def _nehari_parts(split: EmergingSplit, i: int, Kvals, params):
    p = split.pieces[i]
    h = split.mask.h
    vol = h**p.ndim
    supp = p > 0
    ps = p[supp]
    quad = 2.0 * _gradient_energy(p, h) - vol * float(np.sum(Kvals[supp] * ps * ps))
    lin = edge_coupling(split.sub, p, h) - vol * params.delta * float(np.sum(Kvals[supp] * ps))
    return quad, lin, ps, vol


def nehari_derivative(split: EmergingSplit, i: int, K: Potential, params, t: float, Kvals=None) -> float:
    """d/dt I(u_delta + t u_i^delta + other pieces), the discrete Nehari function."""
    Kvals = K.on_grid(split.mask.grid) if Kvals is None else Kvals
    quad, lin, ps, vol = _nehari_parts(split, i, Kvals, params)
    return t * quad + lin + vol * float(np.sum((params.delta + t * ps) ** (K.q - 1.0) * ps))


def nehari_scale(split: EmergingSplit, i: int, K: Potential, params, Kvals=None, tol: float = 1e-13) -> float:
    """The unique t > 0 at which the Nehari function of piece i vanishes.

    The function is concave in t, positive at 0 and tends to -inf when the
    quadratic part is negative.  Newton steps are used while they stay in the
    current bracket; bisection otherwise.
    """
    Kvals = K.on_grid(split.mask.grid) if Kvals is None else Kvals
    quad, lin, ps, vol = _nehari_parts(split, i, Kvals, params)
    if ps.size == 0:
        raise HypothesisViolated(f"piece {i} is empty")
    if quad >= 0.0:
        raise HypothesisViolated(f"piece {i} has int |grad u|^2 - K u^2 = {quad:.3e} >= 0")
    q, delta = K.q, params.delta

    def f(t):
        return t * quad + lin + vol * float(np.sum((delta + t * ps) ** (q - 1.0) * ps))

    def fp(t):
        return quad + (q - 1.0) * vol * float(np.sum((delta + t * ps) ** (q - 2.0) * ps * ps))

    if not f(0.0) > 0.0:
        raise NoRoot(f"Nehari function of piece {i} is not positive at t = 0")
    lo, hi = 0.0, 1.0
    while f(hi) > 0.0:
        lo, hi = hi, 2.0 * hi
        if hi > 1e6:
            raise NoRoot(f"no sign change of the Nehari function of piece {i} below t = 1e6")
    t = hi
    for _ in range(200):
        ft = f(t)
        if ft == 0.0:
            break
        if ft > 0.0:
            lo = t
        else:
            hi = t
        step = t - ft / fp(t)
        if not lo < step < hi:
            step = 0.5 * (lo + hi)
        done = abs(step - t) <= tol * t
        t = step
        if done:
            break
    return float(t)


# ---------------------------------------------------------------------------
# overlap defect and comparison field


def overlap_exponent(q: float, N: int, r_exp: float) -> float:
    return 2.0 * (q - 1.0) / (2.0 - q) + (N + 1.0) / (2.0 * r_exp)


def overlap_defect(config: Configuration, profile: RadialProfile, r_exp: float, R0: float | None = None, n: int = 400) -> float:
    """max_i || (sum_j w_j)^(q-1) - sum_j w_j^(q-1) ||_{L^r(B(x_i, 2 R0))}.

    The integrand lives on the lenses where two supports overlap; three
    supports never meet when the separation defect is small.  Each lens is
    integrated in coordinates aligned with its axis (axial and perpendicular
    distance) on an ``n x n`` midpoint grid.
    """
    q, N, R = profile.q, profile.N, profile.R_star
    R0 = R if R0 is None else R0
    pts = config.points
    k = config.k
    acc = np.zeros(k)
    for a in range(k):
        for b in range(a + 1, k):
            D = float(np.linalg.norm(pts[b] - pts[a]))
            if D >= 2.0 * R:
                continue
            half = R - 0.5 * D
            t = (np.arange(n) + 0.5) / n * 2.0 * half - half
            if N == 1:
                ra, rb = 0.5 * D + t, 0.5 * D - t
                wa, wb = eval_w(profile, ra), eval_w(profile, rb)
                F = np.abs((wa + wb) ** (q - 1.0) - wa ** (q - 1.0) - wb ** (q - 1.0))
                val = float(np.sum(F**r_exp)) * (2.0 * half / n)
            else:
                pmax = math.sqrt(max(R * R - (R - half) ** 2, 0.0))
                s = (np.arange(n) + 0.5) / n * pmax
                T, S = np.meshgrid(t, s, indexing="ij")
                wa = eval_w(profile, np.hypot(0.5 * D + T, S))
                wb = eval_w(profile, np.hypot(0.5 * D - T, S))
                F = np.abs((wa + wb) ** (q - 1.0) - wa ** (q - 1.0) - wb ** (q - 1.0))
                shell = 2.0 * math.pi ** ((N - 1) / 2.0) / math.gamma((N - 1) / 2.0)
                weight = shell * S ** (N - 2)
                val = float(np.sum(F**r_exp * weight)) * (2.0 * half / n) * (pmax / n)
            mid = 0.5 * (pts[a] + pts[b])
            for i in range(k):
                if np.linalg.norm(mid - pts[i]) < 2.0 * R0:
                    acc[i] += val
    return float(acc.max() ** (1.0 / r_exp)) if k > 1 else 0.0


def min_overlap_energy(config: Configuration, profile: RadialProfile, n: int = 400) -> float:
    """Sum over overlapping pairs of I^inf(w_a ^ w_b), the pointwise minimum.

    This is the energy by which the maximum of two overlapping bumps falls
    short of 2 m0.  Lenses are integrated as in :func:`overlap_defect`.
    """
    q, N, R = profile.q, profile.N, profile.R_star
    pts = config.points
    total = 0.0
    for a in range(config.k):
        for b in range(a + 1, config.k):
            D = float(np.linalg.norm(pts[b] - pts[a]))
            if D >= 2.0 * R:
                continue
            half = R - 0.5 * D
            t = (np.arange(n) + 0.5) / n * 2.0 * half - half
            if N == 1:
                ra, rb = 0.5 * D + t, 0.5 * D - t
                wa, wb = eval_w(profile, ra), eval_w(profile, rb)
                ga, gb = eval_wp(profile, ra), eval_wp(profile, rb)
                weight = np.full_like(t, 2.0 * half / n)
            else:
                pmax = math.sqrt(max(R * R - (R - half) ** 2, 0.0))
                s = (np.arange(n) + 0.5) / n * pmax
                T, S = np.meshgrid(t, s, indexing="ij")
                ra, rb = np.hypot(0.5 * D + T, S), np.hypot(0.5 * D - T, S)
                wa, wb = eval_w(profile, ra), eval_w(profile, rb)
                ga, gb = eval_wp(profile, ra), eval_wp(profile, rb)
                shell = 2.0 * math.pi ** ((N - 1) / 2.0) / math.gamma((N - 1) / 2.0)
                weight = shell * S ** (N - 2) * (2.0 * half / n) * (pmax / n)
            lower = wa <= wb
            wm = np.where(lower, wa, wb)
            gm = np.where(lower, ga, gb)
            dens = 0.5 * gm**2 - 0.5 * wm**2 + wm**q / q
            total += float(np.sum(dens * weight))
    return total


def comparison_field(config: Configuration, kappa: float, profile: RadialProfile, h: float, delta: float | None = None) -> Field:
    """w~ = 1/2 sum_i w(t_kappa (x - x_i)), t_kappa = R* / (R* + kappa^((2-q)/3)).

    The field lives on the union of the inflated balls B(x_i, R* + kappa^((2-q)/3)).
    """
    if not kappa > 0:
        raise InputError("kappa must be positive")
    if delta is not None and kappa > delta:
        raise InputError("kappa must not exceed delta")
    R = profile.R_star
    grow = kappa ** ((2.0 - profile.q) / 3.0)
    t = R / (R + grow)
    mask = DomainMask(config, grow + h, h)
    vals = 0.5 * sum(eval_w(profile, t * mask.dists[j]) for j in range(config.k))
    return Field.from_array(mask, vals)


# ---------------------------------------------------------------------------
# report


@dataclass
class EnergyReport:
    I_value: float
    Iinf_value: float
    Jdelta_per_bump: list
    nehari_residuals: list
    grad_dual_norm: float
    sub_energy: float
    coupling: float
    extras: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"I = {self.I_value:.17g}",
            f"Iinf = {self.Iinf_value:.17g}",
            f"I_sub = {self.sub_energy:.17g}",
            f"coupling = {self.coupling:.17g}",
            f"grad_dual_norm = {self.grad_dual_norm:.17g}",
        ]
        lines += [f"J_delta[{i}] = {v:.17g}" for i, v in enumerate(self.Jdelta_per_bump)]
        lines += [f"nehari_residual[{i}] = {v:.17g}" for i, v in enumerate(self.nehari_residuals)]
        lines += [f"{k} = {v}" for k, v in self.extras.items()]
        return "\n".join(lines) + "\n"


def energy_report(u: Field, split: EmergingSplit, K: Potential, params) -> EnergyReport:
    g = grad_I(u, K)
    h = u.mask.h
    return EnergyReport(
        I_value=energy_I(u, K),
        Iinf_value=energy_Iinf(u, K.q),
        Jdelta_per_bump=[J_delta(p, K, params, mask=u.mask) for p in split.pieces],
        nehari_residuals=[float(np.sum(g.values * p)) for p in split.pieces],
        grad_dual_norm=dual_norm_xd(g),
        sub_energy=energy_I(Field(u.mask, split.sub), K),
        coupling=edge_coupling(split.sub, split.emerging, h),
    )
