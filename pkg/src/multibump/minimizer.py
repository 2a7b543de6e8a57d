"""Constrained minimisation of I over the barycentre/Nehari set S_{x,d}.

A single iteration of :func:`minimize_mu`

1. forms the Sobolev gradient ``G`` solving h^N (L + I) G = I'(u) on the mask,
2. removes from ``G`` its H^1 components along the barycentre constraint
   gradients (x - x_i) u_i^delta,
3. steps ``u - tau G`` and projects: u >= 0, u <= delta outside the
   rho-balls, zero outside the mask,
4. re-splits, restores each barycentre by a Gauss-Newton reweighting of its
   piece and rescales each piece onto its Nehari constraint.

On the constraint set the rescaled functional has gradient I'(u) (the
scaling is stationary), so the projected Sobolev gradient is the right
descent direction.  Steps are accepted by Armijo backtracking on the merit
``I(u) + penalty * sum |beta_i|^2``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.sparse.linalg import spsolve

from .domain import (
    Configuration,
    DomainMask,
    Field,
    barycenter,
    build_domain,
    constraint_functionals,
    edge_differences,
    emerging_split,
    helmholtz_matrix,
    projected_residual,
    sigma_of,
)
from .energy import Potential, _energy, _grad_values, nehari_scale, potential_make, sample_bumps
from .errors import ConstraintError, InputError, MaxIterations, NotEmerging
from .radial import ModelParams, RadialProfile, eval_w

__all__ = [
    "SolverOptions",
    "MinimizeResult",
    "initial_guess",
    "minimize_mu",
    "outer_relaxation",
    "extract_multipliers",
    "mu_k_search",
    "alpha_sweep",
    "grid_m0",
]

log = logging.getLogger(__name__)

_STALL_WINDOW = 50


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of the descent loop.

    ``h`` defaults to R*/32 and ``eps_res`` to 1e-6 m0.  ``grad_tol`` bounds
    the H^1 norm of the projected Sobolev gradient relative to 1 + |I|.
    """

    h: float | None = None
    max_iter: int = 50000
    eps_res: float | None = None
    grad_tol: float = 1e-7
    penalty: float | None = None
    step0: float = 1.0
    armijo: float = 1e-4
    restore_sweeps: int = 3
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        for name in ("max_iter", "grad_tol", "step0", "armijo"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        for name in ("h", "eps_res", "penalty"):
            val = getattr(self, name)
            if val is not None and not val > 0:
                raise InputError(f"{name} must be positive")

    def spacing(self, profile: RadialProfile) -> float:
        return self.h if self.h is not None else profile.R_star / 32.0


@dataclass
class MinimizeResult:
    u: Field
    mu: float
    config: Configuration
    d: float
    barycenters: list
    nehari_residuals: list
    lambdas: list = field(default_factory=list)
    residual_star_u: float = math.nan
    support_radii: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    grad_norm: float = math.nan
    history: list = field(default_factory=list, repr=False)
    params: ModelParams | None = field(default=None, repr=False)

    def to_text(self) -> str:
        lines = [
            f"mu = {self.mu:.17g}",
            f"iterations = {self.iterations}",
            f"converged = {self.converged}",
            f"grad_norm = {self.grad_norm:.17g}",
            f"residual_star_u = {self.residual_star_u:.17g}",
            f"d = {self.d:.17g}",
        ]
        for i, x in enumerate(self.config.points):
            lines.append(f"center[{i}] = " + ", ".join(f"{v:.17g}" for v in x))
        for i, b in enumerate(self.barycenters):
            lines.append(f"barycenter[{i}] = " + ", ".join(f"{v:.17g}" for v in b))
        for i, v in enumerate(self.nehari_residuals):
            lines.append(f"nehari_residual[{i}] = {v:.17g}")
        for i, lam in enumerate(self.lambdas):
            lines.append(f"lambda[{i}] = " + ", ".join(f"{v:.17g}" for v in lam))
        for i, r in enumerate(self.support_radii):
            lines.append(f"support_radius[{i}] = {r:.17g}")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# helpers


def _check_inputs(config: Configuration, d: float, params: ModelParams):
    if config.sigma > params.sigma0:
        raise ConstraintError(f"separation defect {config.sigma:.3e} exceeds sigma0 = {params.sigma0:.3e}")
    if not 0.0 <= d <= params.sigma0:
        raise InputError(f"d must lie in [0, sigma0], got {d}")


def initial_guess(config: Configuration, profile: RadialProfile, mask: DomainMask) -> Field:
    """max_i w(. - x_i) sampled on the mask."""
    return sample_bumps(profile, mask, combine="max")


class _Problem:
    """Arrays shared by one descent run."""

    def __init__(self, config, mask, K, params, opts):
        self.config = config
        self.mask = mask
        self.params = params
        self.q = K.q
        self.K = K
        self.Kvals = K.on_grid(mask.grid)
        self.h = mask.h
        self.vol = mask.grid.cell_volume
        self.penalty = opts.penalty if opts.penalty is not None else 10.0 / self.h
        self.outside_cores = mask.inside & ~mask.union_of_balls(params.rho)
        self.coords = mask.grid.coords

    def energy(self, u):
        return _energy(u, self.Kvals, self.q, self.h)

    def grad(self, u):
        return _grad_values(u, self.Kvals, self.q, self.mask)

    def project(self, u):
        u = np.where(self.mask.inside, np.maximum(u, 0.0), 0.0)
        u[self.outside_cores] = np.minimum(u[self.outside_cores], self.params.delta)
        return u

    def split(self, u):
        return emerging_split(Field(self.mask, u), self.config, self.params)

    def barycenters(self, split):
        return [barycenter(split, i, self.config) for i in range(self.config.k)]

    def merit(self, u, split):
        bary = self.barycenters(split)
        return self.energy(u) + self.penalty * sum(float(b @ b) for b in bary), bary

    def restore(self, split, sweeps):
        """Reweight each piece by (1 - s.(x - x_i)) so its barycentre returns to x_i."""
        pieces = []
        for i, p in enumerate(split.pieces):
            rel = [c - x for c, x in zip(self.coords, self.config.points[i])]
            for _ in range(sweeps):
                p2 = p * p
                n = np.array([np.sum(r * p2) for r in rel])
                M = np.array([[np.sum(a * b * p2) for b in rel] for a in rel])
                s = np.linalg.solve(M, 0.5 * n)
                if not np.all(np.isfinite(s)):
                    break
                p = np.maximum(p * (1.0 - sum(si * r for si, r in zip(s, rel))), 0.0)
            pieces.append(p)
        return pieces

    def rescale(self, u, sweeps):
        """Split, restore barycentres, put every piece on its Nehari constraint."""
        split = self.split(u)
        pieces = self.restore(split, sweeps) if sweeps else split.pieces
        split = replace(split, pieces=pieces)
        ts = [nehari_scale(split, i, self.K, self.params, Kvals=self.Kvals) for i in range(self.config.k)]
        new = split.sub + sum(t * p for t, p in zip(ts, pieces))
        return new, self.split(new), ts

    def free_gradient(self, u, g):
        """Zero the components that push into an active bound."""
        at_cap = self.outside_cores & (u >= self.params.delta) & (g < 0)
        at_zero = self.mask.inside & (u <= 0.0) & (g > 0)
        return np.where(at_cap | at_zero, 0.0, g)

    def tangent_gradient(self, g, split):
        """Sobolev gradient with the constraint directions removed (H^1 projection)."""
        G = self.mask.riesz(g)
        cons = []
        for i in range(self.config.k):
            cons += constraint_functionals(split, i, self.config.points[i])
        reps = [self.mask.riesz(c) for c in cons]
        gram = np.array([[np.sum(a * r) for r in reps] for a in cons])
        coef = np.linalg.lstsq(gram, np.array([np.sum(a * G) for a in cons]), rcond=1e-12)[0]
        for c, r in zip(coef, reps):
            G = G - c * r
        return G


def _support_radii(u, mask, config, rel=1e-12):
    """Per-bump support radius, counting cells above rel * max(u) as nonzero."""
    owner = np.argmin(mask.dists, axis=0)
    radii = []
    floor = rel * float(u.max())
    for i in range(config.k):
        sel = (u > floor) & (owner == i)
        radii.append(float(mask.dists[i][sel].max()) if np.any(sel) else 0.0)
    return radii


# ---------------------------------------------------------------------------
# main loop


def minimize_mu(
    config: Configuration,
    d: float,
    K: Potential,
    opts: SolverOptions,
    profile: RadialProfile,
    params: ModelParams,
    u0: Field | None = None,
    multipliers: bool = True,
) -> MinimizeResult:
    """Approximate mu_d(x) = inf I over S_{x,d} by projected Sobolev descent.

    Parameters
    ----------
    config, d
        Centres and domain margin; the domain is A(x, d) on the lattice of
        spacing ``opts.h``.
    K
        Potential; its exponent must match the profile.
    opts
        Solver options.
    profile, params
        Ground state and the constants derived from it.
    u0
        Optional start; defaults to :func:`initial_guess`.
    multipliers
        Also compute the multipliers and ``||I'(u)||_{*,u}`` at the end.

    Raises
    ------
    NotEmerging
        If the iterate loses a bump.
    HypothesisViolated
        From the Nehari scaling.
    MaxIterations
        If the stopping rule is not met in ``opts.max_iter`` iterations.
    """
    if not math.isclose(K.q, profile.q):
        raise InputError("potential and profile use different exponents")
    _check_inputs(config, d, params)
    h = opts.spacing(profile)
    mask = build_domain(config, d, h, params.R0)
    prob = _Problem(config, mask, K, params, opts)
    eps_res = opts.eps_res if opts.eps_res is not None else 1e-6 * profile.m0
    u = (u0.transfer(mask) if u0 is not None else initial_guess(config, profile, mask)).values.copy()
    u, split, _ = prob.rescale(prob.project(u), opts.restore_sweeps)
    merit, bary = prob.merit(u, split)
    tau = opts.step0
    history = []
    converged = False
    gnorm = math.inf
    it = 0
    for it in range(1, opts.max_iter + 1):
        g = prob.free_gradient(u, prob.grad(u))
        G = prob.tangent_gradient(g, split)
        slope = float(np.sum(g * G))
        gnorm = math.sqrt(max(slope, 0.0))
        energy = merit - prob.penalty * sum(float(b @ b) for b in bary)
        if gnorm <= opts.grad_tol * (1.0 + abs(energy)) and max(np.abs(b).max() for b in bary) <= eps_res:
            converged = True
            break
        accepted = False
        while tau > 1e-12:
            trial = prob.project(u - tau * G)
            try:
                trial, tsplit, _ = prob.rescale(trial, opts.restore_sweeps)
            except NotEmerging:
                tau *= 0.5
                continue
            tmerit, tbary = prob.merit(trial, tsplit)
            if tmerit <= merit - opts.armijo * tau * slope:
                accepted = True
                break
            tau *= 0.5
        if not accepted:
            # no decrease possible at machine scale: stationary for this grid
            converged = gnorm <= math.sqrt(opts.grad_tol) * (1.0 + abs(energy))
            break
        change = merit - tmerit
        u, split, merit, bary = trial, tsplit, tmerit, tbary
        history.append(merit)
        log.debug("it=%d merit=%.15g grad=%.3e tau=%.3e", it, merit, gnorm, tau)
        tau = min(2.0 * tau, 4.0 * opts.step0)
        if change <= 1e-3 * eps_res and gnorm <= 10.0 * opts.grad_tol * (1.0 + abs(merit)):
            converged = True
            break
        # decreases at rounding level can otherwise go on for thousands of steps
        if (
            len(history) > _STALL_WINDOW
            and history[-_STALL_WINDOW - 1] - merit <= 1e-6 * eps_res
            and gnorm <= math.sqrt(opts.grad_tol) * (1.0 + abs(merit))
        ):
            converged = True
            break
    else:
        raise MaxIterations(f"no convergence in {opts.max_iter} iterations (grad norm {gnorm:.3e})")

    field_u = Field(mask, u)
    g = prob.grad(u)
    result = MinimizeResult(
        u=field_u,
        mu=prob.energy(u),
        config=config,
        d=float(d),
        barycenters=prob.barycenters(split),
        nehari_residuals=[float(np.sum(g * p)) for p in split.pieces],
        support_radii=_support_radii(u, mask, config),
        iterations=it,
        converged=converged,
        grad_norm=gnorm,
        history=history,
        params=params,
    )
    if multipliers:
        extract_multipliers(result, config, d, K)
    log.info("minimize_mu: k=%d mu=%.12g iterations=%d grad=%.3e", config.k, result.mu, it, gnorm)
    return result


def extract_multipliers(result: MinimizeResult, config: Configuration, d: float, K: Potential) -> list:
    """lambda_i minimising the patch dual norm of I'(u) - lambda_i . (x - x_i) u_i^delta.

    Also stores ``||I'(u)||_{*,u}`` in ``result.residual_star_u``.
    """
    u = result.u
    mask = u.mask
    params = result.params
    split = emerging_split(u, config, params)
    g = Field(mask, _grad_values(u.values, K.on_grid(mask.grid), K.q, mask))
    norm, lambdas = projected_residual(g, split, config, mask)
    result.lambdas = [np.asarray(l) for l in lambdas]
    result.residual_star_u = norm
    return result.lambdas


def _local_energy(v, base, free, Kvals, q, h):
    """The energy of ``v`` minus that of ``base`` (v with the free cells zeroed).

    With df, d0 the edge differences of v - base and base, each edge adds
    df (df + 2 d0), which avoids the cancellation between two nearly equal
    totals: the shell only carries about h^N delta^q.
    """
    vol = h**v.ndim
    e = 0.0
    for df, d0 in zip(edge_differences(v - base), edge_differences(base)):
        e += 0.5 * h ** (v.ndim - 2) * float(np.sum(df * (df + 2.0 * d0)))
    vf = v[free]
    return e + vol * float(np.sum(-0.5 * Kvals[free] * vf * vf + np.maximum(vf, 0.0) ** q / q))


def outer_relaxation(
    u: Field,
    config: Configuration,
    d: float,
    K: Potential,
    core_radius: float,
    params: ModelParams,
    tol: float = 1e-10,
    max_iter: int = 20000,
) -> Field:
    """Minimise I over fields equal to u on the cores with 0 <= v <= delta elsewhere.

    The outer problem is strictly convex for delta below the caps, so the
    minimiser is unique.  Bound-constrained L-BFGS on the outer cells (scaled
    by delta) gets close; energy comparisons cannot resolve the minimiser
    beyond about sqrt(eps), so a projected Newton polish on the gradient
    finishes the job.  ``tol`` bounds the projected gradient in units where
    the v^q term is O(1).
    """
    if not params.rho - params.sigma0 / 2.0 - 1e-12 <= core_radius < config.R_star:
        raise InputError(f"core radius {core_radius} outside [rho - sigma0/2, R*)")
    mask = u.mask
    cores = mask.union_of_balls(core_radius)
    free = mask.inside & ~cores
    delta, q = params.delta, K.q
    Kvals = K.on_grid(mask.grid)
    base = np.where(cores, u.values, 0.0)
    x0 = np.clip(u.values[free] / delta, 0.0, 1.0)
    if x0.size == 0:
        return Field(mask, base)
    vol = mask.grid.cell_volume
    # the v^q term dominates on the shell; this makes it O(1)
    scale = 1.0 / (vol * delta**q)

    def field_of(y):
        v = base.copy()
        v[free] = delta * y
        return v

    def grad(y):
        return _grad_values(field_of(y), Kvals, q, mask)[free] * (delta * scale)

    def fun(y):
        v = field_of(y)
        return _local_energy(v, base, free, Kvals, q, mask.h) * scale, grad(y)

    res = minimize(
        fun,
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, 1.0)] * x0.size,
        options={"maxiter": max_iter, "ftol": 0.0, "gtol": tol, "maxcor": 20},
    )
    if not res.success and res.nit >= max_iter:
        raise MaxIterations(f"outer relaxation stopped after {res.nit} iterations: {res.message}")
    y = _newton_polish(res.x, grad, helmholtz_matrix(mask.grid, free), Kvals[free], q, delta, vol, scale, tol)
    return Field(mask, field_of(y))


def _projected(y, g):
    return np.where(((y <= 0.0) & (g > 0.0)) | ((y >= 1.0) & (g < 0.0)), 0.0, g)


def _newton_polish(y, grad, helm, Kf, q, delta, vol, scale, tol, max_iter=100):
    """Projected Newton on the outer cells, with a line search on the projected gradient."""
    lap = (helm - vol * sp.identity(helm.shape[0], format="csr")) * (delta * delta * scale)
    g = grad(y)
    pg = np.abs(_projected(y, g)).max()
    for _ in range(max_iter):
        if pg <= tol:
            break
        free = _projected(y, g) != 0.0
        # v^(q-2) is singular at 0; Newton then approaches the root from below
        v = np.maximum(delta * y, 1e-12 * delta)
        curv = delta * delta * scale * vol * ((q - 1.0) * v ** (q - 2.0) - Kf)
        H = (lap + sp.diags(curv, format="csr"))[free][:, free]
        step = np.zeros_like(y)
        step[free] = -spsolve(H.tocsc(), g[free])
        t = 1.0
        while t > 1e-8:
            trial = np.clip(y + t * step, 0.0, 1.0)
            gt = grad(trial)
            pt = np.abs(_projected(trial, gt)).max()
            if pt < pg:
                break
            t *= 0.5
        else:
            break
        y, g, pg = trial, gt, pt
    return y


# ---------------------------------------------------------------------------
# configuration search and sweeps


def grid_m0(profile: RadialProfile, params: ModelParams, opts: SolverOptions, d: float | None = None) -> float:
    """mu_d of a single bump with K = 1 on the same lattice (discrete m0)."""
    d = params.sigma0 / 2.0 if d is None else d
    cfg = Configuration(np.zeros((1, profile.N)), profile.R_star)
    res = minimize_mu(cfg, d, potential_make("unit", 0.0, profile.q), opts, profile, params, multipliers=False)
    return res.mu


def _evaluate(config, d, K, opts, profile, params):
    try:
        return minimize_mu(config, d, K, opts, profile, params, multipliers=False).mu
    except (NotEmerging, ConstraintError):
        return -math.inf


def mu_k_search(
    k: int,
    d: float,
    K: Potential,
    seeds: list,
    opts: SolverOptions,
    profile: RadialProfile,
    params: ModelParams,
    step: float | None = None,
    min_step: float | None = None,
    max_evals: int = 200,
):
    """Derivative-free coordinate ascent of mu_d over k-point configurations.

    Moves are +-step along each coordinate of each centre, snapped to the
    grid lattice; a sweep without improvement halves the step.  Candidates
    with sigma > sigma0 or a centre outside [-L, L]^N, L = 4 R* + a2, are
    rejected.

    Returns
    -------
    best_config : Configuration
    best_mu : float
    evaluations : list of (Configuration, mu)
    """
    if not seeds:
        raise InputError("at least one seed configuration is needed")
    h = opts.spacing(profile)
    L = 4.0 * profile.R_star + K.a2
    step = profile.R_star / 4.0 if step is None else step
    min_step = h if min_step is None else min_step
    evaluations = []
    cache = {}

    def admissible(cfg):
        return sigma_of(cfg) <= params.sigma0 and np.all(np.abs(cfg.points) <= L)

    def key(cfg):
        return tuple(np.rint(cfg.points / h).astype(int).ravel())

    def value(cfgs):
        todo = [c for c in cfgs if key(c) not in cache]
        if todo:
            if opts.threads > 1:
                with ThreadPoolExecutor(opts.threads) as pool:
                    vals = list(pool.map(lambda c: _evaluate(c, d, K, opts, profile, params), todo))
            else:
                vals = [_evaluate(c, d, K, opts, profile, params) for c in todo]
            for c, v in zip(todo, vals):
                cache[key(c)] = v
                evaluations.append((c, v))
        return [cache[key(c)] for c in cfgs]

    def snap(cfg):
        return Configuration(h * np.rint(cfg.points / h), cfg.R_star)

    best_cfg, best_mu = None, -math.inf
    for seed in seeds:
        if seed.k != k:
            raise InputError(f"seed has {seed.k} points, expected {k}")
        s = snap(seed)
        if not admissible(s):
            raise InputError("seed configuration is not admissible")
        mu = value([s])[0]
        if mu > best_mu:
            best_cfg, best_mu = s, mu
    if best_cfg is None or not math.isfinite(best_mu):
        raise InputError("no seed configuration could be evaluated")
    N = best_cfg.N
    cur = max(h * round(step / h), h)
    while cur >= min_step and len(evaluations) < max_evals:
        moves = []
        for i in range(k):
            for ax in range(N):
                for sgn in (1.0, -1.0):
                    pt = best_cfg.points[i].copy()
                    pt[ax] += sgn * cur
                    cand = best_cfg.moved(i, pt)
                    if admissible(cand):
                        moves.append(cand)
        vals = value(moves) if moves else []
        gains = [(v, j) for j, v in enumerate(vals) if v > best_mu]
        if gains:
            v, j = max(gains)
            best_cfg, best_mu = moves[j], v
        else:
            cur = cur / 2.0
            cur = h * round(cur / h) if cur >= h else cur
            if cur < h:
                break
    return best_cfg, best_mu, evaluations


def alpha_sweep(
    kind: str,
    alphas: list,
    config: Configuration,
    d: float,
    opts: SolverOptions,
    profile: RadialProfile,
    params: ModelParams,
) -> list:
    """One minimisation per alpha (given in decreasing order) with deviation diagnostics.

    Each result gains ``deviation`` (max_i ||u - w(. - x_i)||_inf on B(x_i, R0))
    and ``alpha`` attributes.
    """
    if any(b > a for a, b in zip(alphas, alphas[1:])):
        raise InputError("alphas must be given in decreasing order")

    def run(alpha):
        K = potential_make(kind, alpha, profile.q)
        res = minimize_mu(config, d, K, opts, profile, params)
        res.alpha = float(alpha)
        res.deviation = bump_deviation(res, profile, params)
        return res

    if opts.threads > 1:
        with ThreadPoolExecutor(opts.threads) as pool:
            return list(pool.map(run, alphas))
    return [run(a) for a in alphas]


def bump_deviation(result: MinimizeResult, profile: RadialProfile, params: ModelParams) -> float:
    mask = result.u.mask
    worst = 0.0
    for i in range(result.config.k):
        ball = mask.ball(i, params.R0) & mask.inside
        ref = eval_w(profile, mask.dists[i][ball])
        worst = max(worst, float(np.abs(result.u.values[ball] - ref).max()))
    return worst
