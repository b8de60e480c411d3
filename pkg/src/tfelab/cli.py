"""tfelab command line: profile | spectrum | linear | nonlinear | verify.

Exit codes: 0 ok, 2 input or accuracy error, 3 check failure, 4 dynamics
failure (monotonicity margin lost during a nonlinear run).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import load_config, parse_field, parse_source
from .errors import PreconditionError, StateError, TfelabError

EXIT_OK, EXIT_INPUT, EXIT_CHECK, EXIT_DYNAMICS = 0, 2, 3, 4


class Output:
    def __init__(self, cfg, override=None):
        self.dir = Path(override or cfg["output"]["directory"])
        self.formats = set(cfg["output"]["formats"])

    def write(self, name, text, kind):
        if kind not in self.formats:
            return None
        self.dir.mkdir(parents=True, exist_ok=True)
        path = self.dir / name
        path.write_text(text)
        return path

    def json(self, name, obj):
        return self.write(name, json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n", "json")


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def _profile(cfg):
    from .profile import ProfileParams, load_profile, solve_profile, verify_profile

    pc = cfg["profile"]
    if pc["file"]:
        p = load_profile(pc["file"])
        rep = verify_profile(p)
        if not rep.invariants_ok:
            raise TfelabError(f"profile file {pc['file']} fails verification: {rep.failures}")
        return p, rep
    params = ProfileParams(
        U0=float(pc["U0"]), ode_tol=pc["ode_tol"], fit_degree=pc["fit_degree"], residual_tol=pc["residual_tol"]
    )
    p = solve_profile(params)
    return p, verify_profile(p)


def _forms(cfg, p):
    from .operator import assemble_forms
    from .spaces import build_quadrature, default_quadrature_size

    dc = cfg["discretization"]
    n = dc["quad_n"] or default_quadrature_size(p.degree, dc["basis_dim"])
    rule = build_quadrature(p, n)
    return assemble_forms(p, rule, dc["basis_dim"], k_max=dc["k_max"], strict=dc["quad_n"] == 0)


def cmd_profile(cfg, args, out):
    from .profile import dumps_profile

    p, rep = _profile(cfg)
    out.write("profile.toml", dumps_profile(p), "csv")
    summary = {"ell": p.ell, "U0": p.U0, "U0pp": p.U0pp, "degree": p.degree, **rep.as_dict()}
    out.json("profile_report.json", summary)
    print(f"ell = {p.ell:.17g}  U''(0) = {p.U0pp:.17g}  max ODE residual = {rep.max_ode_residual:.3e}")
    if not rep.invariants_ok:
        print("profile invariants failed: " + "; ".join(rep.failures), file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_spectrum(cfg, args, out):
    from .operator import compute_spectrum, dump_matrix
    from .spaces import Field

    p, _ = _profile(cfg)
    f = _forms(cfg, p)
    sc = cfg["spectrum"]
    spectrum = compute_spectrum(f, min(sc["m"], f.basis_dim))
    out.write("spectrum.csv", spectrum.to_csv(), "csv")
    if sc["dump_matrices"]:
        out.dir.mkdir(parents=True, exist_ok=True)
        dump_matrix(out.dir / "M.txt", f.M)
        dump_matrix(out.dir / "A.txt", f.A)
    x = Field.from_power_series(f.basis, [0.0, 1.0]).coeffs
    Ax = f.A @ x
    x_res = float(np.linalg.norm(Ax - f.M @ x) / np.linalg.norm(Ax))
    lam1 = float(spectrum.eigenvalues[0])
    j = spectrum.find(1.0) if spectrum.eigenvalues.size > 1 else None
    ok = abs(lam1 - 0.2) <= sc["tol"] and x_res < sc["tol"]
    out.json(
        "spectrum.json",
        {
            "eigenvalues": spectrum.eigenvalues,
            "residuals": spectrum.residuals,
            "lambda_1": lam1,
            "x_residual": x_res,
            "x_ordinal": j,
            "cond_M": spectrum.cond_M,
            "rebased": spectrum.rebased,
            "pass": ok,
        },
    )
    print(f"lambda_1 = {lam1:.17g}  |Ax - Mx|/|Ax| = {x_res:.3e}  eigenvalue 1 at index {j}")
    return EXIT_OK if ok else EXIT_CHECK


def _window(sec):
    return tuple(sec["window"]) if sec["window"] else None


def _rate_summary(traj, sec, mode):
    from .linear import fit_decay_rate

    fit = fit_decay_rate(traj, _window(sec))
    rel = abs(fit.rate / sec["rate_target"] - 1)
    return {
        "mode": mode,
        "rate": fit.rate,
        "r2": fit.r2,
        "window": list(fit.window),
        "samples": fit.n_samples,
        "h": sec["h"],
        "S": sec["S"],
        "rate_target": sec["rate_target"],
        "rate_tol": sec["rate_tol"],
        "rate_rel_error": rel,
        "pass": rel <= sec["rate_tol"],
    }


def cmd_linear(cfg, args, out):
    from .linear import evolve_linear

    p, _ = _profile(cfg)
    f = _forms(cfg, p)
    lc = cfg["linear"]
    V0 = parse_field(lc["V0"], f)
    F = parse_source(lc["F"], f)
    tr = evolve_linear(f, V0, F, h=lc["h"], S=lc["S"], ks=tuple(lc["ks"]), cell_average=lc["cell_average"])
    cols = ["s", "norm_U", *[f"norm_{k}" for k in lc["ks"]], "rate"]
    out.write("trajectory.csv", tr.to_csv(cols), "csv")
    out.write("apriori.csv", tr.to_csv(["s", *[c for c in tr.diagnostics if c.startswith("apriori")]]), "csv")
    summary = _rate_summary(tr, lc, "linear")
    out.json("summary.json", summary)
    print(f"fitted rate = {summary['rate']:.17g} (r2 = {summary['r2']:.6f})")
    if args.check and not summary["pass"]:
        return EXIT_CHECK
    return EXIT_OK


def cmd_nonlinear(cfg, args, out):
    from .nonlinear import (
        LagrangianState,
        NONLINEAR_CSV_COLUMNS,
        evolve_nonlinear,
        fronts_csv,
        late_front_speed,
        reconstruct_physical,
        snapshot_csv,
    )
    from .spaces import Field

    p, _ = _profile(cfg)
    f = _forms(cfg, p)
    nc = cfg["nonlinear"]
    V0 = parse_field(nc["V0"], f)
    try:
        tr = evolve_nonlinear(f, V0, h=nc["h"], S=nc["S"], margin=nc["margin"], gate=nc["gate"], ks=tuple(nc["ks"]))
    except StateError as exc:
        print(f"dynamics failure: {exc}", file=sys.stderr)
        return EXIT_DYNAMICS
    cols = [c for c in NONLINEAR_CSV_COLUMNS if c == "s" or c in tr.diagnostics]
    out.write("trajectory.csv", tr.to_csv(cols), "csv")
    out.write("fronts.csv", fronts_csv(tr), "csv")
    idx = np.unique(np.linspace(0, len(tr) - 1, nc["snapshots"]).astype(int))
    snaps = [
        reconstruct_physical(p, LagrangianState(Field(tr.coeffs[i], f.basis), tr.times[i]), nc["samples"], f.rule)
        for i in idx
    ]
    out.write("snapshots.csv", snapshot_csv(snaps), "csv")
    summary = {"truncated": tr.error is not None, "error": tr.error, "steps": len(tr) - 1}
    if tr.error is None:
        summary.update(_rate_summary(tr, nc, "nonlinear"))
        vm, vp = late_front_speed(tr)
        summary.update(scaled_front_speed=[vm, vp], front_speed_target=p.ell / 5)
    summary["mass"] = [sn.mass for sn in snaps]
    summary["energy_monotone"] = bool(np.all(np.diff(tr.diagnostics["energy_excess"]) <= 0))
    out.json("summary.json", summary)
    if tr.error is not None:
        print(f"dynamics failure: {tr.error}", file=sys.stderr)
        return EXIT_DYNAMICS
    print(f"fitted rate = {summary['rate']:.17g} (r2 = {summary['r2']:.6f})")
    if args.check and not summary["pass"]:
        return EXIT_CHECK
    return EXIT_OK


def cmd_verify(cfg, args, out):
    from .acceptance import run_all

    selected = [int(c) for c in args.only.split(",")] if args.only else None
    results = run_all(selected, jobs=args.jobs)
    for c in results:
        print(c.line())
    out.json("verify.json", [c.as_dict() for c in results])
    ok = all(c.passed for c in results)
    print(f"{sum(c.passed for c in results)}/{len(results)} criteria passed")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "profile": cmd_profile,
    "spectrum": cmd_spectrum,
    "linear": cmd_linear,
    "nonlinear": cmd_nonlinear,
    "verify": cmd_verify,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="tfelab", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="TOML config file")
    common.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config key"
    )
    common.add_argument("-o", "--out", help="output directory (overrides output.directory)")
    common.add_argument("--profile-file", help="load the profile instead of solving (profile.file)")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("profile", parents=[common], help="solve and verify the self-similar profile")
    sub.add_parser("spectrum", parents=[common], help="eigenpairs of the Hessian")
    for mode in ("linear", "nonlinear"):
        sp = sub.add_parser(mode, parents=[common], help=f"{mode} evolution and decay-rate fit")
        sp.add_argument("--check", action="store_true", help="exit 3 if the fitted rate misses its tolerance")
    vp = sub.add_parser("verify", parents=[common], help="run the acceptance criteria")
    vp.add_argument("--jobs", type=int, default=1, help="worker processes")
    vp.add_argument("--only", help="comma-separated criterion numbers")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        overrides = list(args.set)
        if args.profile_file:
            overrides.append(f'profile.file="{args.profile_file}"')
        cfg = load_config(args.config, overrides)
        out = Output(cfg, args.out)
        return COMMANDS[args.command](cfg, args, out)
    except PreconditionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StateError as exc:
        print(f"dynamics failure: {exc}", file=sys.stderr)
        return EXIT_DYNAMICS
    except (TfelabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
