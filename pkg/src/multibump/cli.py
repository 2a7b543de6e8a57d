"""Batch front end driven by YAML manifests.

A manifest names a command and the parameters of the run::

    schema: 1
    command: minimize
    q: 1.5
    N: 2
    potential: {kind: unit, alpha: 0.0}
    centers: [[0.0, 0.0]]

Missing keys take the defaults in :data:`DEFAULTS`; unknown keys are an
error.  Every run writes ``manifest.resolved.yaml`` (all defaults filled in)
next to its reports.  Exit codes: 0 success, 1 invalid input, 2 constraint
failure, 3 solver failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from .domain import Configuration, read_field_csv, write_field_csv, write_field_rows
from .energy import potential_make
from .errors import InputError, MultibumpError
from .minimizer import SolverOptions, alpha_sweep, minimize_mu, mu_k_search
from .radial import boundary_fit, constants_report, derive_constants, solve_ground_state, write_profile_csv
from .verify import (
    VerificationReport,
    annulus_linf_check,
    check_support,
    residual_pde,
    stability_ratio,
)

SCHEMA_VERSION = 1
COMMANDS = ("ground-state", "minimize", "search", "sweep", "verify", "export")
THREADS_ENV = "MULTIBUMP_THREADS"

DEFAULTS = {
    "schema": SCHEMA_VERSION,
    "command": None,
    "q": 1.5,
    "N": 2,
    "tol": 1e-8,
    "sigma0_init": None,
    "potential": {"kind": "unit", "alpha": 0.0},
    "d": None,
    "h": None,
    "centers": None,
    "seed": 0,
    "threads": 1,
    "solver": {
        "max_iter": 50000,
        "grad_tol": 1e-7,
        "eps_res": None,
        "penalty": None,
        "step0": 1.0,
    },
    "search": {"k": 1, "seeds": None, "step": None, "min_step": None, "max_evals": 200},
    "sweep": {"alphas": [0.2, 0.1, 0.05, 0.02]},
    "verify": {"annulus_R": None, "residual_tol": 1e-3, "support_tol": 1e-4},
    "export": {"source": None},
}

log = logging.getLogger("multibump")


# ---------------------------------------------------------------------------
# manifest handling


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        name = f"{path}{key}"
        if key not in defaults:
            raise InputError(f"unknown manifest key: {name}")
        if isinstance(defaults[key], dict):
            if not isinstance(val, dict):
                raise InputError(f"manifest key {name} must be a mapping")
            out[key] = _merge(defaults[key], val, name + ".")
        else:
            out[key] = val
    return out


def load_manifest(path, base_dir: Path | None = None) -> dict:
    """Parse, validate and default-fill a manifest file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise InputError(f"manifest not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise InputError(f"manifest is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError("manifest must be a mapping")
    man = _merge(DEFAULTS, raw)
    if man["schema"] != SCHEMA_VERSION:
        raise InputError(f"unsupported schema version {man['schema']!r}; expected {SCHEMA_VERSION}")
    if man["command"] not in COMMANDS:
        raise InputError(f"command must be one of {COMMANDS}, got {man['command']!r}")
    base_dir = base_dir or path.parent
    src = man["export"]["source"]
    if src is not None:
        man["export"]["source"] = str((base_dir / src).resolve())
    return man


def _dump(obj) -> str:
    return yaml.safe_dump(obj, sort_keys=True, default_flow_style=None)


def _write(path: Path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# shared setup


class _Context:
    def __init__(self, man: dict):
        self.man = man
        self.profile = solve_ground_state(man["q"], man["N"], man["tol"])
        pot = man["potential"]
        self.K = potential_make(pot["kind"], float(pot["alpha"]), man["q"])
        self.params = derive_constants(self.profile, man["sigma0_init"], max(self.K.a1, 1.0))
        self.d = self.params.sigma0 / 2.0 if man["d"] is None else float(man["d"])
        s = man["solver"]
        self.opts = SolverOptions(
            h=man["h"],
            max_iter=int(s["max_iter"]),
            grad_tol=float(s["grad_tol"]),
            eps_res=s["eps_res"],
            penalty=s["penalty"],
            step0=float(s["step0"]),
            seed=int(man["seed"]),
            threads=int(man["threads"]),
        )

    def config(self, points=None) -> Configuration:
        pts = self.man["centers"] if points is None else points
        if pts is None:
            pts = [[0.0] * self.profile.N]
        pts = np.asarray(pts, dtype=float).reshape(-1, self.profile.N)
        return Configuration(pts, self.profile.R_star)


def _cmd_ground_state(man, out: Path) -> None:
    profile = solve_ground_state(man["q"], man["N"], man["tol"])
    params = derive_constants(profile, man["sigma0_init"])
    write_profile_csv(profile, out / "profile.csv")
    _write(out / "constants.txt", constants_report(profile, params))
    expo, const = boundary_fit(profile)
    _write(
        out / "report.txt",
        f"w0 = {profile.w0:.17g}\nR_star = {profile.R_star:.17g}\nm0 = {profile.m0:.17g}\n"
        f"boundary_exponent = {expo:.17g}\nboundary_constant = {const:.17g}\n",
    )


def _cmd_minimize(man, out: Path) -> None:
    ctx = _Context(man)
    res = minimize_mu(ctx.config(), ctx.d, ctx.K, ctx.opts, ctx.profile, ctx.params)
    _write(out / "result.txt", f"m0 = {ctx.profile.m0:.17g}\n" + res.to_text())
    write_field_csv(res.u, out / "field.csv")


def _cmd_search(man, out: Path) -> None:
    ctx = _Context(man)
    s = man["search"]
    k = int(s["k"])
    seeds_raw = s["seeds"] or [man["centers"] or [[0.0] * ctx.profile.N] * k]
    seeds = [ctx.config(pts) for pts in seeds_raw]
    best, mu, evals = mu_k_search(
        k, ctx.d, ctx.K, seeds, ctx.opts, ctx.profile, ctx.params,
        step=s["step"], min_step=s["min_step"], max_evals=int(s["max_evals"]),
    )
    lines = [f"best_mu = {mu:.17g}"] + [
        f"center[{i}] = " + ", ".join(f"{v:.17g}" for v in x) for i, x in enumerate(best.points)
    ]
    _write(out / "search.txt", "\n".join(lines) + "\n")
    with open(out / "evaluations.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["index", "centers", "mu"])
        for i, (cfg, val) in enumerate(evals):
            writer.writerow([i, " ".join(f"{v:.17g}" for v in cfg.points.ravel()), f"{val:.17g}"])


def _cmd_sweep(man, out: Path) -> None:
    ctx = _Context(man)
    results = alpha_sweep(
        man["potential"]["kind"], [float(a) for a in man["sweep"]["alphas"]], ctx.config(), ctx.d,
        ctx.opts, ctx.profile, ctx.params,
    )
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["alpha", "mu", "deviation", "max_lambda", "max_support_radius", "iterations"])
        for r in results:
            lam = max(float(np.abs(l).max()) for l in r.lambdas)
            writer.writerow([f"{r.alpha:.17g}", f"{r.mu:.17g}", f"{r.deviation:.17g}", f"{lam:.17g}",
                             f"{max(r.support_radii):.17g}", r.iterations])


def _cmd_verify(man, out: Path) -> None:
    ctx = _Context(man)
    cfg = ctx.config()
    res = minimize_mu(cfg, ctx.d, ctx.K, ctx.opts, ctx.profile, ctx.params)
    v = man["verify"]
    report = VerificationReport()
    report.surrogates = {"l2_fraction": 0.2, "sigma_gate": "sigma0/2", "barycentre_tol": 1e-6}
    report.extend(check_support(res, ctx.params, cfg, ctx.d, tol=float(v["support_tol"])))
    R = v["annulus_R"] if v["annulus_R"] is not None else 0.5 * (ctx.params.rho + ctx.profile.R_star)
    report.add(annulus_linf_check(res, cfg, ctx.d, ctx.profile, float(R), ctx.params, alpha=ctx.K.alpha))
    report.add(residual_pde(res, ctx.K, float(v["residual_tol"])))
    try:
        ratio = stability_ratio(res.u, cfg, ctx.d, ctx.profile, ctx.params)
        report.surrogates["stability_ratio"] = f"{ratio:.17g}"
    except MultibumpError as exc:
        report.surrogates["stability_ratio"] = f"skipped ({exc})"
    _write(out / "result.txt", res.to_text())
    _write(out / "verification.txt", report.to_text())
    report.write_csv(out / "verification.csv")


def _cmd_export(man, out: Path) -> None:
    src = man["export"]["source"]
    if src is None or not Path(src).is_file():
        raise InputError(f"export source missing: {src}")
    coords, values = read_field_csv(src)
    write_field_rows(coords, values, out / "field.csv")


HANDLERS = {
    "ground-state": _cmd_ground_state,
    "minimize": _cmd_minimize,
    "search": _cmd_search,
    "sweep": _cmd_sweep,
    "verify": _cmd_verify,
    "export": _cmd_export,
}


# ---------------------------------------------------------------------------
# entry point


def run(man: dict, out: Path) -> int:
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "manifest.resolved.yaml", _dump(man))
    HANDLERS[man["command"]](man, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="multibump", description=__doc__.splitlines()[0])
    ap.add_argument("--manifest", required=True, help="YAML run manifest")
    ap.add_argument("--out", default=None, help="output directory (default: manifest directory / out)")
    ap.add_argument("--threads", type=int, default=None, help=f"worker threads (env {THREADS_ENV})")
    ap.add_argument("--seed", type=int, default=None, help="override the manifest seed")
    ap.add_argument("--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        man = load_manifest(args.manifest)
        if args.seed is not None:
            man["seed"] = args.seed
        threads = args.threads if args.threads is not None else os.environ.get(THREADS_ENV)
        if threads is not None:
            man["threads"] = int(threads)
        if int(man["threads"]) < 1:
            raise InputError("threads must be at least 1")
        out = Path(args.out) if args.out else Path(args.manifest).parent / "out"
        return run(man, out.resolve())
    except MultibumpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
