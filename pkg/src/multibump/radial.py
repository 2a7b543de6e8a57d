"""Radial ground state of  -Δw - w + w^(q-1) = 0  and the constants derived from it.

The profile is found by shooting on the peak value ``w(0)``.  A trajectory
either crosses zero with negative slope (overshoot) or turns back up while
still positive (undershoot); the ground state is the separatrix, which touches
down with ``w = w' = 0`` at a finite radius ``R*``.

Touchdown is degenerate (``w ~ C_q (R*-r)^{2/(2-q)}``), so locating ``R*`` on
the outward trajectory is ill conditioned: neighbouring trajectories separate
like a negative power of ``R*-r``.  Integrated inward, the same instability
becomes a decay.  The edge is therefore described by ``z = w^((2-q)/2)``,
which vanishes linearly at ``R*``, seeded from its series at a trial ``R*``
and integrated back to a matching radius where the outward trajectory is
still trustworthy.  ``R*`` is the root of the mismatch in ``w`` there; the
mismatch in ``w'`` is kept as an independent consistency check.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson, solve_ivp
from scipy.interpolate import CubicSpline, PchipInterpolator
from scipy.optimize import brentq
from scipy.special import gamma

from .errors import InputError, NoAdmissibleSigma, NonConvergence, WindowTooCoarse

__all__ = [
    "RadialProfile",
    "ModelParams",
    "solve_ground_state",
    "eval_w",
    "eval_wp",
    "boundary_fit",
    "derive_constants",
    "m0_energy",
    "nehari_energy",
    "ode_residual",
    "sphere_area",
    "boundary_constant",
    "write_profile_csv",
    "read_profile_csv",
    "constants_report",
]

def sphere_area(N: int) -> float:
    """Surface measure of the unit sphere S^(N-1); equals 2 for N = 1."""
    return 2.0 * math.pi ** (N / 2.0) / gamma(N / 2.0)


def boundary_constant(q: float) -> float:
    """The prefactor C_q of the touchdown law w ~ C_q (R*-r)^(2/(2-q))."""
    return ((2.0 - q) ** 2 / (2.0 * q)) ** (1.0 / (2.0 - q))


@dataclass(frozen=True)
class RadialProfile:
    """Tabulated ground state.

    Nodes up to ``r_outward`` come from the trajectory shot out of the origin,
    nodes beyond it from the inward integration, and the last ``s_seed`` before
    ``R_star`` from the touchdown series that seeds it.
    """

    q: float
    N: int
    r_grid: np.ndarray
    w_vals: np.ndarray
    wp_vals: np.ndarray
    w0: float
    R_star: float
    m0: float
    r_outward: float
    s_seed: float
    _interp: PchipInterpolator = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("r_grid", "w_vals", "wp_vals"):
            arr = np.array(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        inside = self.r_grid <= self.R_star
        object.__setattr__(
            self, "_interp", PchipInterpolator(self.r_grid[inside], self.w_vals[inside], extrapolate=False)
        )

    def __call__(self, r):
        return eval_w(self, r)


@dataclass(frozen=True)
class ModelParams:
    q: float
    N: int
    sigma0: float
    delta: float
    rho: float
    R0: float
    a1: float
    t_star: float
    k0: int
    R_star: float
    w0: float
    m0: float
    checks: dict = field(default_factory=dict, compare=False)

    @property
    def all_checks_pass(self) -> bool:
        return all(self.checks.values())


# ---------------------------------------------------------------------------
# shooting


# relative width of the final under/overshoot bracket on w0
_W0_RTOL = 4.0 * np.finfo(float).eps


def _series_start(w0, q, N):
    curv = (w0 ** (q - 1.0) - w0) / N
    r0 = 1e-4
    return r0, np.array([w0 + 0.5 * curv * r0 * r0, curv * r0])


def _rhs_w(q, N):
    def f(r, y):
        w, p = y
        return [p, -(N - 1) / r * p - w + max(w, 0.0) ** (q - 1.0)]

    return f


def _shoot(w0, q, N, rtol, r_max, dense=False):
    """Integrate from the origin; returns (miss, solution).

    ``miss`` is the local energy at the terminating event: ``w^q / q`` at the
    turning point of an undershoot, ``-w'^2 / 2`` where an overshoot crosses
    zero.  Both vanish linearly in the distance to the ground-state peak, so
    the miss is close to linear across the root.
    """
    r0, y0 = _series_start(w0, q, N)

    def hit(r, y):
        return y[0]

    hit.terminal, hit.direction = True, -1.0

    def turn(r, y):
        return y[1]

    turn.terminal, turn.direction = True, 1.0

    sol = solve_ivp(
        _rhs_w(q, N),
        (r0, r_max),
        y0,
        method="DOP853",
        rtol=rtol,
        atol=1e-16 * w0,
        events=[hit, turn],
        dense_output=dense,
    )
    if sol.t_events[0].size:
        return -0.5 * float(sol.y_events[0][0][1]) ** 2, sol
    if sol.t_events[1].size:
        return float(sol.y_events[1][0][0]) ** q / q, sol
    raise NonConvergence(f"trajectory from w0={w0!r} neither crossed nor turned before r={r_max}")


def _rhs_z(q, N):
    m = 2.0 / (2.0 - q)

    def f(r, y):
        z, zp = y
        return [zp, (1.0 / m - z * z / m - (m - 1.0) * zp * zp) / z - (N - 1) / r * zp]

    return f


def touchdown_series(q: float, N: int, R_star: float):
    """Coefficients (a, b, c) of z = a s + b s^2 + c s^3, s = R* - r, z = w^((2-q)/2)."""
    m = 2.0 / (2.0 - q)
    g = (N - 1) / R_star
    a = 1.0 / math.sqrt(m * (m - 1.0))
    b = g * a / (4.0 * m - 2.0)
    c = (g * (3.0 * a * b + a * a / R_star) - a * a / m - b * b * (4.0 * m - 2.0)) / (6.0 * a * m)
    return a, b, c


def _inward(q, N, R_star, r_stop, s_seed, dense=False, rtol=1e-13):
    """Integrate z from the touchdown series at R* - s_seed down to r_stop."""
    a, b, c = touchdown_series(q, N, R_star)
    s = s_seed
    z = a * s + b * s * s + c * s**3
    zp = -(a + 2.0 * b * s + 3.0 * c * s * s)
    sol = solve_ivp(
        _rhs_z(q, N),
        (R_star - s_seed, r_stop),
        [z, zp],
        method="DOP853",
        rtol=rtol,
        atol=1e-16,
        dense_output=dense,
    )
    if not sol.success or not np.all(np.isfinite(sol.y)) or np.any(sol.y[0] <= 0.0):
        return None
    return sol


def _bracket(f, w0_guess):
    lo = 1.0 + 1e-6
    if f(lo) <= 0.0:
        raise NonConvergence("peak values just above 1 do not undershoot")
    hi = 2.0 * w0_guess
    for _ in range(60):
        if f(hi) < 0.0:
            return lo, hi
        lo, hi = hi, 2.0 * hi
    raise NonConvergence("could not find an overshooting peak value")


def solve_ground_state(q: float, N: int, tol: float = 1e-8, n_nodes: int = 4097) -> RadialProfile:
    """Shoot for the compactly supported radial ground state.

    The peak ``w0`` is bracketed by bisection between undershooting and
    overshooting trajectories (Brent's method on a miss distance that changes
    sign at the separatrix).  ``R*`` is then fixed by matching the outward
    trajectory to an inward one started from the touchdown series at ``R*``.

    Parameters
    ----------
    q : float
        Exponent in (1, 2).
    N : int
        Space dimension.
    tol : float
        Target accuracy for ``w0`` and ``R*``.  Also the bound on the
        derivative mismatch at the matching radius.
    n_nodes : int
        Nodes in the uniform part of the tabulation.
    """
    if not 1.0 < q < 2.0:
        raise InputError(f"q must lie in (1, 2), got {q}")
    if int(N) != N or N < 1:
        raise InputError(f"N must be a positive integer, got {N}")
    if not tol > 0:
        raise InputError("tol must be positive")
    N = int(N)
    m = 2.0 / (2.0 - q)
    rtol = max(min(1e-2 * tol, 1e-8), 1e-13)
    w0_1d = (2.0 / q) ** (1.0 / (2.0 - q))
    r_max = 50.0 * math.pi / (2.0 - q) * max(1.0, math.sqrt(N))

    def miss(w0):
        return _shoot(w0, q, N, rtol, r_max)[0]

    lo, hi = _bracket(miss, w0_1d * (1.0 + 0.5 * (N - 1)))
    root = brentq(miss, lo, hi, xtol=1e-300, rtol=_W0_RTOL, maxiter=400)

    # neighbouring under- and overshooting peaks, a few ulps apart
    step = 0.5 * _W0_RTOL * root
    w_under = w_over = None
    for j in range(40):
        cand = root - step * 2**j
        if miss(cand) > 0.0:
            w_under = cand
            break
    for j in range(40):
        cand = root + step * 2**j
        if miss(cand) < 0.0:
            w_over = cand
            break
    if w_under is None or w_over is None:
        raise NonConvergence("bracket collapsed without separating the two regimes")
    if (w_over - w_under) > max(tol, 1e-12) * root:
        raise NonConvergence(f"peak bracket width {(w_over - w_under) / root:.3e} exceeds tol")

    fine = 1e-13
    _, sol_u = _shoot(w_under, q, N, fine, r_max, dense=True)
    _, sol_o = _shoot(w_over, q, N, fine, r_max, dense=True)

    # outward trajectory is trusted while both neighbours agree
    r_end = min(sol_u.t[-1], sol_o.t[-1])
    rr = np.linspace(sol_u.t[0], r_end, 40001)
    wu = sol_u.sol(rr)[0]
    wo = sol_o.sol(rr)[0]
    bad = np.nonzero(~((np.abs(wu - wo) <= 1e-8 * np.abs(wu)) & (wu > 0)))[0]
    n_ok = bad[0] if bad.size else rr.size
    r_out = float(rr[n_ok - 1])
    below = np.nonzero(wu[:n_ok] < 1e-3 * w_under)[0]
    r_match = float(rr[below[0]]) if below.size else r_out
    w_m, wp_m = sol_u.sol(r_match)

    s_seed = 1e-4 * r_end

    @functools.lru_cache(maxsize=None)
    def mismatch(R):
        sol = _inward(q, N, R, r_match, s_seed, rtol=rtol)
        if sol is None:
            return math.inf
        return sol.y[0, -1] ** m - w_m

    # local power law w ~ C (R* - r)^m gives a close first estimate
    R_min = r_match + 2.0 * s_seed
    R_guess = max(r_match - m * w_m / wp_m, R_min)
    width = 1e-2 * R_guess
    R_lo, R_hi = max(R_guess - width, R_min), R_guess + width
    for _ in range(60):
        if mismatch(R_lo) < 0.0:
            break
        if R_lo <= R_min:
            raise NonConvergence("inward solution from the smallest admissible R* is already too large")
        R_hi = R_lo
        width *= 4.0
        R_lo = max(R_guess - width, R_min)
    for _ in range(60):
        if mismatch(R_hi) > 0.0:
            break
        R_lo, R_hi = R_hi, R_hi + width
        width *= 4.0
    else:
        raise NonConvergence("could not bracket R*")
    R_star = float(brentq(mismatch, R_lo, R_hi, xtol=max(1e-3 * tol, 1e-14) * R_hi, maxiter=200))

    inner = _inward(q, N, R_star, r_match, s_seed, dense=True)
    if inner is None:
        raise NonConvergence("inward integration failed at the matched R*")
    z_m, zp_m = inner.y[:, -1]
    wp_in = m * z_m ** (m - 1.0) * zp_m
    if abs(wp_in - wp_m) > max(tol, 1e-10) * max(abs(wp_m), 1e-300) * 1e2:
        raise NonConvergence(f"derivative mismatch {abs(wp_in - wp_m):.3e} at r={r_match:.6g}")

    # tabulation: outward core up to r_out, inward tail, series seed, zeros beyond
    r0, _ = _series_start(w_under, q, N)
    r_core = np.linspace(0.0, r_out, n_nodes)
    w_core = np.empty_like(r_core)
    wp_core = np.empty_like(r_core)
    near = r_core < r0
    curv = (w_under ** (q - 1.0) - w_under) / N
    w_core[near] = w_under + 0.5 * curv * r_core[near] ** 2
    wp_core[near] = curv * r_core[near]
    w_core[~near], wp_core[~near] = sol_u.sol(r_core[~near])

    r_seed = R_star - s_seed
    if r_out < r_seed:
        # graded towards R* so the touchdown region is well resolved
        u = np.linspace(0.0, 1.0, max(n_nodes // 4, 256))[1:]
        r_t = r_seed - (r_seed - r_out) * (1.0 - u) ** 2
        zt, zpt = inner.sol(r_t)
        w_t = zt**m
        wp_t = m * zt ** (m - 1.0) * zpt
    else:
        r_t = w_t = wp_t = np.empty(0)
    a, b, c = touchdown_series(q, N, R_star)
    s_ser = np.linspace(s_seed, 0.0, 17)[1:]
    z_ser = a * s_ser + b * s_ser**2 + c * s_ser**3
    r_ser = R_star - s_ser
    w_ser = z_ser**m
    w_ser[-1] = 0.0
    wp_ser = -m * z_ser ** (m - 1.0) * (a + 2.0 * b * s_ser + 3.0 * c * s_ser**2)

    r_zero = np.linspace(R_star, 1.1 * R_star, 33)[1:]
    r_grid = np.concatenate([r_core, r_t, r_ser, r_zero])
    w_vals = np.concatenate([w_core, w_t, w_ser, np.zeros_like(r_zero)])
    wp_vals = np.concatenate([wp_core, wp_t, wp_ser, np.zeros_like(r_zero)])
    keep = np.concatenate([[True], np.diff(r_grid) > 0])
    r_grid, w_vals, wp_vals = r_grid[keep], w_vals[keep], wp_vals[keep]
    m0 = _energy_direct(r_grid, w_vals, wp_vals, q, N, R_star)
    return RadialProfile(q, N, r_grid, w_vals, wp_vals, float(w_under), R_star, m0, r_out, s_seed)


# ---------------------------------------------------------------------------
# evaluation and diagnostics


def eval_w(profile: RadialProfile, r):
    """Monotone (PCHIP) interpolation of the profile; zero for r >= R*."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < profile.R_star
    if np.any(inside):
        out[inside] = profile._interp(r[inside])
    out = np.maximum(out, 0.0)
    return out if out.ndim else float(out)


def eval_wp(profile: RadialProfile, r):
    """Derivative of the interpolated profile; zero for r >= R*."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < profile.R_star
    if np.any(inside):
        out[inside] = profile._interp.derivative()(r[inside])
    return out if out.ndim else float(out)


def boundary_fit(profile: RadialProfile, sigma_fit: float | None = None, outward_only: bool = False):
    """Least-squares fit of log w against log(R*-r) near the edge.

    Nodes inside the series seed never enter the fit.  With ``outward_only``
    only nodes from the trajectory shot out of the origin are used, so the
    touchdown series cannot feed back into the fitted power at all.

    Returns
    -------
    exponent, constant : float
        Fitted power and prefactor of w ~ constant * (R*-r)^exponent.
    """
    if sigma_fit is None:
        sigma_fit = 0.05 * profile.R_star
    r = profile.r_grid
    s = profile.R_star - r
    limit = profile.r_outward if outward_only else profile.R_star - profile.s_seed
    sel = (s < sigma_fit) & (r <= limit) & (profile.w_vals > 0) & (s > 0)
    if sel.sum() < 8:
        raise WindowTooCoarse(f"only {int(sel.sum())} nodes in the fit window of width {sigma_fit}")
    slope, intercept = np.polyfit(np.log(s[sel]), np.log(profile.w_vals[sel]), 1)
    return float(slope), float(math.exp(intercept))


def _energy_direct(r, w, wp, q, N, R_star):
    inside = r <= R_star
    r, w, wp = r[inside], w[inside], wp[inside]
    jac = sphere_area(N) * r ** (N - 1)
    dens = 0.5 * wp**2 - 0.5 * w**2 + np.maximum(w, 0.0) ** q / q
    return float(simpson(dens * jac, x=r))


def m0_energy(profile: RadialProfile) -> float:
    """I^inf(w) by radial Simpson quadrature over the tabulated nodes."""
    return _energy_direct(profile.r_grid, profile.w_vals, profile.wp_vals, profile.q, profile.N, profile.R_star)


def nehari_energy(profile: RadialProfile) -> float:
    """(1/q - 1/2) * ||w||_q^q, equal to I^inf(w) on the Nehari manifold."""
    r, w, q = profile.r_grid, profile.w_vals, profile.q
    inside = r <= profile.R_star
    jac = sphere_area(profile.N) * r[inside] ** (profile.N - 1)
    lq = simpson(np.maximum(w[inside], 0.0) ** q * jac, x=r[inside])
    return float((1.0 / q - 0.5) * lq)


def ode_residual(profile: RadialProfile) -> np.ndarray:
    """Pointwise |w'' + (N-1)/r w' + w - w^(q-1)| on interior core nodes.

    w'' is the derivative of a cubic spline through the tabulated w', so the
    residual measures tabulation consistency rather than the integrator's own
    right-hand side.  Core nodes are those of the outward trajectory with
    w >= 1e-3 w0; closer to R* the second derivative is only Holder continuous
    when q < 4/3 and is represented through the inward solution instead.
    """
    r, w, wp = profile.r_grid, profile.w_vals, profile.wp_vals
    core = (r <= profile.r_outward) & (w >= 1e-3 * profile.w0)
    r, w, wp = r[core], w[core], wp[core]
    wpp = CubicSpline(r, wp).derivative()(r)
    res = np.abs(wpp + (profile.N - 1) / np.where(r > 0, r, 1.0) * wp + w - np.maximum(w, 0.0) ** (profile.q - 1.0))
    return res[1:-1]


# ---------------------------------------------------------------------------
# constants


def _kappa_samples(delta):
    return np.logspace(math.log10(delta * 1e-3), math.log10(delta), 32)


def _check_constants(profile, sigma0, a1):
    q, N, R = profile.q, profile.N, profile.R_star
    delta = float(eval_w(profile, R - 4.0 * sigma0))
    rho = R - 3.0 * sigma0
    R0 = R + sigma0 ** ((2.0 - q) / 2.0)
    t_star = (2.0 - q) / 2.0
    checks = {}
    checks["delta_positive"] = delta > 0.0 and rho > 0.0
    checks["delta_below_sigma0_sq"] = delta < sigma0**2
    if delta > 0.0:
        kap = _kappa_samples(delta)
        radii = R**2 / (R + kap ** ((2.0 - q) / 3.0))
        checks["eqsigma"] = bool(np.all(eval_w(profile, radii) > 2.0 * kap))
    else:
        checks["eqsigma"] = False
    checks["R0_below_2rho_over_sqrt3"] = R0 < 2.0 / math.sqrt(3.0) * rho
    caps = (
        (2.0 * R / ((R + 1.0) ** 2 * a1)) ** (3.0 / (2.0 * (2.0 - q))),
        (t_star / a1) ** (1.0 / (2.0 - q)),
        ((q - 1.0) / 2.0) ** (1.0 / (2.0 - q)),
    )
    checks["delta_below_caps"] = delta < min(caps)
    k0 = int(math.floor((4.0 * R0 / rho) ** N)) + 1 if rho > 0 else 0
    checks["k0_below_bound"] = k0 < (8.0 / math.sqrt(3.0)) ** N + 1
    return delta, rho, R0, t_star, k0, checks


def derive_constants(profile: RadialProfile, sigma0_init: float | None = None, a1: float = 1.0) -> ModelParams:
    """Fix the margin sigma0 and the constants that depend on it.

    sigma0 is halved from ``sigma0_init`` (default ``0.05 R*``, capped below 1)
    until every defining inequality holds on the sampled kappa grid.
    """
    if sigma0_init is None:
        sigma0_init = min(0.05 * profile.R_star, 0.5)
    if not 0.0 < sigma0_init < 1.0:
        raise InputError(f"sigma0_init must lie in (0, 1), got {sigma0_init}")
    if a1 < 1.0:
        raise InputError(f"a1 must be >= 1, got {a1}")
    sigma0 = float(sigma0_init)
    while sigma0 >= 1e-6:
        delta, rho, R0, t_star, k0, checks = _check_constants(profile, sigma0, a1)
        if all(checks.values()):
            return ModelParams(
                q=profile.q,
                N=profile.N,
                sigma0=sigma0,
                delta=delta,
                rho=rho,
                R0=R0,
                a1=float(a1),
                t_star=t_star,
                k0=k0,
                R_star=profile.R_star,
                w0=profile.w0,
                m0=profile.m0,
                checks=checks,
            )
        sigma0 *= 0.5
    raise NoAdmissibleSigma(f"no admissible sigma0 above 1e-6 starting from {sigma0_init}")


def verify_constants(profile: RadialProfile, params: ModelParams) -> dict:
    """Re-evaluate every defining inequality for an existing parameter set."""
    return _check_constants(profile, params.sigma0, params.a1)[-1]


# ---------------------------------------------------------------------------
# export


def write_profile_csv(profile: RadialProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["r", "w"])
        for r, w in zip(profile.r_grid, profile.w_vals):
            writer.writerow([f"{r:.17g}", f"{w:.17g}"])


def read_profile_csv(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1]


def constants_report(profile: RadialProfile, params: ModelParams) -> str:
    lines = [
        f"q = {params.q:.17g}",
        f"N = {params.N}",
        f"sigma0 = {params.sigma0:.17g}",
        f"delta = {params.delta:.17g}",
        f"rho = {params.rho:.17g}",
        f"R0 = {params.R0:.17g}",
        f"R_star = {profile.R_star:.17g}",
        f"w0 = {profile.w0:.17g}",
        f"m0 = {profile.m0:.17g}",
        f"k0 = {params.k0}",
        f"a1 = {params.a1:.17g}",
        f"t_star = {params.t_star:.17g}",
    ]
    for name, ok in verify_constants(profile, params).items():
        lines.append(f"check.{name} = {'pass' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
