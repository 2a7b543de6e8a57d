import csv
import math

import numpy as np
import pytest

from multibump.domain import (
    Configuration,
    Field,
    build_domain,
    dual_norm_xd,
    emerging_split,
    projected_residual,
)
from multibump.energy import comparison_field, grad_Iinf, sample_bumps
from multibump.errors import HypothesisFail, PreconditionFail
from multibump.minimizer import MinimizeResult, SolverOptions, minimize_mu
from multibump.verify import (
    CheckEntry,
    VerificationReport,
    annulus_linf_check,
    check_support,
    l2_deviation,
    residual_pde,
    stability_ratio,
    support_comparison_bound,
    support_radius,
)
from multibump.radial import eval_w


def as_result(u, config, params):
    return MinimizeResult(u=u, mu=0.0, config=config, d=params.sigma0 / 2, barycenters=[],
                          nehari_residuals=[], params=params)


def radial_bump(mask, rho):
    r = mask.dists[0]
    return np.where(r < rho / 2, np.cos(np.pi * r / rho) ** 2, 0.0)


# --- support ------------------------------------------------------------------


def test_support_of_single_minimizer(run1, params, single):
    entries = check_support(run1, params, single, params.sigma0 / 2, tol=1e-6)
    assert [e.name for e in entries] == ["support.outside_R0", "support.emerging_outside_core", "support.rim_mass"]
    assert all(e.passed for e in entries)


def test_support_flags_leaking_mass(run1, params, single):
    # the mask lies inside the R0-balls, so leaks show up in the other two fractions
    u = run1.u.values.copy()
    m = run1.u.mask
    ring = m.inside & ~m.union_of_balls(params.rho)
    u[ring] = 1.0
    entries = check_support(as_result(Field(m, u), single, params), params, single, params.sigma0 / 2)
    assert entries[0].passed
    assert not entries[1].passed and not entries[2].passed


def test_emerging_support_radius_of_profile(profile, params, w_field):
    m = w_field.mask
    emerging = np.maximum(w_field.values - params.delta, 0.0)
    radius = support_radius(emerging, m.dists[0], 0.0)
    assert abs(radius - (profile.R_star - 4 * params.sigma0)) <= m.h


def test_comparison_bound_for_zero(profile, params, single, mask1):
    entry = support_comparison_bound(Field.zeros(mask1), single, params, params.delta, profile)
    assert entry.passed and entry.measured == 0.0


def test_comparison_bound_reflexive(profile, params, single):
    kappa = 1e-6
    wt = comparison_field(single, kappa, profile, profile.R_star / 32)
    assert support_comparison_bound(wt, single, params, kappa, profile).passed


def test_comparison_bound_for_minimizer(run1, profile, params, single, unit):
    m = run1.u.mask
    outside = m.inside & ~m.union_of_balls(profile.R_star)
    kappa = float(run1.u.values[outside].max())
    entry = support_comparison_bound(run1.u, single, params, kappa, profile, K=unit)
    assert entry.passed


def test_comparison_bound_precondition(run1, profile, params, single):
    m = run1.u.mask
    outside = m.inside & ~m.union_of_balls(profile.R_star)
    kappa = 0.5 * float(run1.u.values[outside].max())
    with pytest.raises(PreconditionFail):
        support_comparison_bound(run1.u, single, params, kappa, profile)


def test_comparison_bound_catches_far_mass(profile, params, single):
    m = build_domain(single, 0.5, profile.R_star / 32)
    u = np.where(m.inside & (m.dists[0] > profile.R_star), params.delta, 0.0)
    assert not support_comparison_bound(Field(m, u), single, params, params.delta, profile).passed


# --- stability ----------------------------------------------------------------


def test_stability_ratio_degenerate(profile, params, single, w_field):
    assert math.isnan(stability_ratio(w_field, single, params.sigma0 / 2, profile, params))


def test_stability_ratio_stable_across_amplitudes(profile, params, single, w_field):
    bump = radial_bump(w_field.mask, params.rho)
    ratios = [
        stability_ratio(Field.from_array(w_field.mask, w_field.values + eps * bump), single, params.sigma0 / 2,
                        profile, params)
        for eps in (1e-2, 1e-3)
    ]
    assert all(np.isfinite(ratios)) and min(ratios) > 0
    assert max(ratios) / min(ratios) <= 3.0


def test_stability_hypotheses_negative_controls(profile, params, single, w_field):
    m = w_field.mask
    d = params.sigma0 / 2
    neg = w_field.values.copy()
    neg[m.inside & (m.dists[0] > profile.R_star - 0.5)] = -1e-3
    shifted = Field.from_array(m, eval_w(profile, m.grid.dist_to((0.005, 0.0))))
    cases = {
        "nonnegativity": Field(m, neg),
        "barycentre": shifted,
        "L2 deviation": Field(m, 2.0 * w_field.values),
    }
    for name, u in cases.items():
        with pytest.raises(HypothesisFail, match=name):
            stability_ratio(u, single, d, profile, params)
    with pytest.raises(HypothesisFail, match="emergence"):
        stability_ratio(Field.from_array(m, np.full(m.grid.shape, params.delta / 2)), single, d, profile, params)


def test_stability_rejects_overlapping_configuration(profile, params):
    R = profile.R_star
    c = Configuration(np.array([[0.0, 0.0], [2 * R - params.sigma0, 0.0]]), R)
    m = build_domain(c, params.sigma0 / 2, R / 16, params.R0)
    with pytest.raises(HypothesisFail, match="separation"):
        stability_ratio(sample_bumps(profile, m), c, params.sigma0 / 2, profile, params)


# --- annulus and residual -----------------------------------------------------


def test_annulus_vanishes_for_profile(profile, params, single, w_field):
    e = annulus_linf_check(as_result(w_field, single, params), single, params.sigma0 / 2, profile,
                           profile.R_star, params)
    assert e.passed and e.measured == 0.0


def test_annulus_radius_range(profile, params, single, w_field):
    with pytest.raises(ValueError):
        annulus_linf_check(as_result(w_field, single, params), single, params.sigma0 / 2, profile, params.rho, params)


def test_residual_of_profile_and_random_field(run1, profile, params, single, w_field, unit):
    # tolerance from the O(h^2) truncation of the sampled profile at R*/32
    tol = 1e-2
    exact = as_result(w_field, single, params)
    exact.lambdas = [np.zeros(2)]
    assert residual_pde(exact, unit, tol).passed
    noise = np.random.default_rng(0).uniform(0, 1, w_field.mask.grid.shape)
    rnd = as_result(Field.from_array(w_field.mask, noise), single, params)
    entry = residual_pde(rnd, unit, tol)
    assert not entry.passed and entry.measured > 100 * tol
    assert residual_pde(run1, unit, tol).passed


def test_translation_invariance_without_potential(run1, profile, params, unit):
    c = Configuration(np.array([[0.37, -0.11]]), profile.R_star)
    moved = minimize_mu(c, params.sigma0 / 2, unit, SolverOptions(), profile, params, multipliers=False)
    assert moved.mu == pytest.approx(run1.mu, rel=1e-3)


def _multiplier_ratios(profile, params, single, h, n, rng):
    m = build_domain(single, params.sigma0 / 2, h, params.R0)
    W = sample_bumps(profile, m)
    X, Y = m.grid.coords
    out = []
    for _ in range(n):
        a = rng.normal(size=3)
        eps = 10 ** rng.uniform(-3, -1)
        g = a[2] * np.exp(-((X - a[0]) ** 2 + (Y - a[1]) ** 2) / 4)
        u = Field.from_array(m, np.maximum(W.values * (1 + eps * g), 0.0))
        f = np.where(m.inside, rng.normal(size=m.grid.shape) * 10 ** rng.uniform(-6, -3) * m.grid.cell_volume, 0.0)
        split = emerging_split(u, single, params)
        _, lam = projected_residual(Field(m, grad_Iinf(u, profile.q).values + f), split, single, m)
        bracket = l2_deviation(u, profile, 0, params.rho) + dual_norm_xd(Field(m, f))
        out.append(np.abs(lam[0]).max() / bracket)
    return np.array(out)


def test_multiplier_bound_has_one_constant(profile, params, single):
    rng = np.random.default_rng(1)
    h = profile.R_star / 32
    fit = _multiplier_ratios(profile, params, single, h, 16, rng)
    held = _multiplier_ratios(profile, params, single, h, 16, rng)
    fine = _multiplier_ratios(profile, params, single, h / 2, 16, rng)
    C = fit.max()
    assert held.max() <= 3 * C
    assert fine.max() <= 3 * C


# --- report -------------------------------------------------------------------


def test_report_text_and_csv(tmp_path):
    rep = VerificationReport()
    rep.add(CheckEntry("a", 1.0, 2.0, True, 0.1, "first"))
    rep.extend([CheckEntry("b", 3.0, 2.0, False, 0.1, "second", note="why")])
    rep.surrogates["l2_fraction"] = 0.2
    assert not rep.passed
    assert rep["b"].note == "why"
    with pytest.raises(KeyError):
        rep["missing"]
    text = rep.to_text()
    assert "a: pass" in text and "b: FAIL" in text and "property=second" in text
    assert "surrogate.l2_fraction = 0.2" in text
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["name", "measured", "bound", "pass"]
    assert rows[1:] == [["a", "1", "2", "1"], ["b", "3", "2", "0"]]


def test_reports_are_reproducible(run1, params, single):
    a, b = VerificationReport(), VerificationReport()
    a.extend(check_support(run1, params, single, params.sigma0 / 2))
    b.extend(check_support(run1, params, single, params.sigma0 / 2))
    assert a.to_text() == b.to_text()
