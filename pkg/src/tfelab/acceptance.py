"""Exit criteria of the build, one function per criterion.

Each function returns a Criterion with the measured quantities.  The
tolerances below are part of the contract and must not be loosened.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .linear import constant_mode_rate, evolve_linear, fit_decay_rate, richardson
from .nonlinear import (
    LagrangianState,
    context,
    directional_fd,
    eval_nonlinearity,
    evolve_nonlinear,
    gradient_norm,
    gradient_pairing,
    late_front_speed,
    nonlinearity_alternate_nodes,
    reconstruct_physical,
    scaled_random_field,
)
from .operator import apply_L_pointwise, assemble_forms, compute_spectrum, rayleigh_quotients
from .profile import ProfileParams, solve_profile, verify_profile
from .spaces import (
    Basis,
    Field,
    build_norm_table,
    build_quadrature,
    c0_constant,
    default_quadrature_size,
    hardy_constant,
    interp_constant,
    norm_U,
    random_coeffs,
)

# brute-force shooting reference for U0 = 1 (third-order ODE, LSODA, bisection)
ORACLE_ELL = 3.6327660253356746
ORACLE_U0PP = -0.2306746944708262

SEED = 20240601


@dataclass
class Criterion:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        keys = ", ".join(f"{k}={_short(v)}" for k, v in self.details.items() if not isinstance(v, (list, dict)))
        return f"[{status}] criterion {self.number:2d} {self.name} ({self.seconds:.2f} s): {keys}"

    def as_dict(self):
        return {
            "number": self.number,
            "name": self.name,
            "passed": bool(self.passed),
            "seconds": self.seconds,
            "details": {k: _plain(v) for k, v in self.details.items()},
        }


def _short(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.4g}"
    return str(v)


def _plain(v):
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


@lru_cache(maxsize=None)
def reference_profile():
    return solve_profile(ProfileParams())


@lru_cache(maxsize=None)
def reference_forms(basis_dim=64):
    p = reference_profile()
    rule = build_quadrature(p, default_quadrature_size(p.degree, basis_dim))
    return assemble_forms(p, rule, basis_dim)


def _timed(fn):
    def run(*a, **kw):
        t0 = time.perf_counter()
        c = fn(*a, **kw)
        c.seconds += time.perf_counter() - t0  # a preset value counts work done elsewhere
        return c

    run.__name__ = fn.__name__
    run.__doc__ = fn.__doc__
    return run


@_timed
def criterion_1():
    t0 = time.perf_counter()
    p = solve_profile(ProfileParams())
    elapsed = time.perf_counter() - t0
    rep = verify_profile(p)
    x = np.linspace(-p.ell, p.ell, 4001)
    U, U1, U2, U3 = p.derivatives(x, 3)[:4]
    ode = float(np.max(np.abs(U3 - U**2 * U1 - x / 5)))
    phi_id = float(np.max(np.abs(p.phi(x, 1) + 0.8 * x * U)))
    up_end = float(max(abs(p(p.ell, 1)), abs(p(-p.ell, 1))))
    d = {
        "ode_residual": ode,
        "Up_at_ell": up_end,
        "phi_identity": phi_id,
        "solve_seconds": elapsed,
        "ell": p.ell,
        "U0pp": p.U0pp,
        "ell_vs_oracle": abs(p.ell - ORACLE_ELL),
        "U0pp_vs_oracle": abs(p.U0pp - ORACLE_U0PP),
        "invariants_ok": rep.invariants_ok,
    }
    ok = (
        ode < 1e-8
        and up_end < 1e-10
        and phi_id < 1e-8
        and elapsed < 5.0
        and d["ell_vs_oracle"] < 1e-9
        and d["U0pp_vs_oracle"] < 1e-9
        and rep.invariants_ok
    )
    return Criterion(1, "profile correctness", ok, d)


@_timed
def criterion_2(n_draws=10_000):
    f = reference_forms(64)
    spectrum = compute_spectrum(f, 8)
    B = f.basis
    one = Field.constant(B).coeffs
    one_n = one / math.sqrt(one @ f.M @ one)
    v0 = spectrum.vectors[:, 0] * np.sign(spectrum.vectors[0, 0])
    e_const = float(math.sqrt(max((v0 - one_n) @ f.M @ (v0 - one_n), 0.0)))
    j = spectrum.find(1.0)
    x = Field.from_power_series(B, [0.0, 1.0]).coeffs
    Ax, Mx = f.A @ x, f.M @ x
    x_res = float(np.linalg.norm(Ax - Mx) / np.linalg.norm(Ax))
    vj = spectrum.vectors[:, j]
    x_n = x / math.sqrt(x @ Mx)
    vj = vj * np.sign(vj @ f.M @ x_n)
    e_x = float(math.sqrt(max((vj - x_n) @ f.M @ (vj - x_n), 0.0)))
    # constant plus noise of log-uniform size, so that draws approach the minimizer
    rng = np.random.default_rng(SEED)
    sizes = 10.0 ** rng.uniform(-6, 1, n_draws)
    C = one[:, None] + sizes * random_coeffs(B, rng, n_draws)
    rq = rayleigh_quotients(f, C)
    d = {
        "lambda_1": spectrum.eigenvalues[0],
        "lambda_1_error": abs(spectrum.eigenvalues[0] - 0.2),
        "const_eigenfield_error": e_const,
        "x_eigenvalue": spectrum.eigenvalues[j],
        "x_ordinal": j,
        "x_residual": x_res,
        "x_eigenfield_error": e_x,
        "min_rayleigh": float(rq.min()),
        "noise_at_min": float(sizes[np.argmin(rq)]),
        "cond_M": f.cond_M,
        "spectrum": spectrum.eigenvalues[:5],
    }
    ok = (
        d["lambda_1_error"] < 1e-8
        and e_const < 1e-6
        and abs(spectrum.eigenvalues[j] - 1.0) < 1e-8
        and x_res < 1e-6
        and e_x < 1e-6
        and d["min_rayleigh"] >= 0.2 - 1e-9
    )
    return Criterion(2, "spectral gap", ok, d)


@_timed
def criterion_3(n_draws=100):
    f = reference_forms(64)
    B = f.basis
    rule = f.rule
    Bq = f.table.B[0]
    wU = rule.weights * f.table.U
    rng = np.random.default_rng(SEED + 3)
    C = random_coeffs(B, rng, n_draws, B.dim - 5)
    worst = 0.0
    for c in C.T:
        V = Field(c, B)
        lhs = f.A @ c
        rhs = Bq.T @ (wU * apply_L_pointwise(f.profile, V, rule.nodes))
        worst = max(worst, float(np.max(np.abs(lhs - rhs)) / np.max(np.abs(lhs))))
    return Criterion(3, "Galerkin and strong form agree", worst < 1e-9, {"max_rel_error": worst, "draws": n_draws})


@_timed
def criterion_4():
    f = reference_forms(64)
    B = f.basis
    one = Field.constant(B)
    hs = (0.04, 0.02, 0.01)
    rates, errs = [], []
    for h in hs:
        r = fit_decay_rate(evolve_linear(f, one, h=h, S=5.0)).rate
        rates.append(r)
        errs.append(abs(r - constant_mode_rate(h)))
    r0 = richardson(hs, rates)
    mixed = fit_decay_rate(evolve_linear(f, Field.from_power_series(B, [1.0, 1.0]), h=0.01, S=40.0)).rate
    d = {
        "rates": rates,
        "max_rate_error": max(errs),
        "richardson": r0,
        "richardson_error": abs(r0 - 0.2),
        "mixed_rate": mixed,
        "mixed_rel_error": abs(mixed / 0.2 - 1),
    }
    ok = max(errs) < 1e-12 and abs(r0 - 0.2) < 1e-4 and d["mixed_rel_error"] < 0.01
    return Criterion(4, "linear decay", ok, d)


@_timed
def criterion_5():
    f = reference_forms(64)
    B = f.basis
    zero = Field.zero(B)
    n0 = float(norm_U(f.table, eval_nonlinearity(f, zero)))
    alt = nonlinearity_alternate_nodes(f, zero.coeffs)
    n0_alt = float(math.sqrt(context(f).wU @ alt**2))
    V0 = Field.constant(B, 0.01)
    h = 0.01
    tr = evolve_nonlinear(f, V0, h=h, S=10.0)
    ex = (1 + h / 5) ** -np.arange(len(tr))
    dev = float(np.max(np.abs(tr.coeffs - np.outer(ex, V0.coeffs))) / np.max(np.abs(V0.coeffs)))
    lin = evolve_linear(f, V0, h=h, S=10.0)
    dev_lin = float(np.max(np.abs(tr.coeffs - lin.coeffs)) / np.max(np.abs(V0.coeffs)))
    d = {
        "N0_norm_U": n0,
        "N0_alternate_norm_U": n0_alt,
        "grad_E_x": gradient_norm(f, zero),
        "max_dev_geometric": dev,
        "max_dev_linear": dev_lin,
        "steps": len(tr) - 1,
    }
    ok = n0 < 1e-7 and n0_alt < 1e-7 and dev < 1e-9 and dev_lin < 1e-9 and tr.error is None
    return Criterion(5, "stationarity and translation mode", ok, d)


def nonlinear_reference_run(seed=SEED + 6, norm6=0.01, h=0.01, S=30.0):
    """(forms, trajectory, seconds) for the random run shared by criteria 6 and 8."""
    t0 = time.perf_counter()
    f = reference_forms(64)
    V0 = scaled_random_field(f, seed, norm6)
    tr = evolve_nonlinear(f, V0, h=h, S=S)
    return f, tr, time.perf_counter() - t0


@_timed
def criterion_6(run=None):
    f, tr, elapsed = run or nonlinear_reference_run()
    fit = fit_decay_rate(tr)
    dE = np.diff(tr.diagnostics["energy_excess"])
    d = {
        "rate": fit.rate,
        "rate_rel_error": abs(fit.rate / 0.2 - 1),
        "max_energy_increment": float(dE.max()),
        "min_margin": float(tr.diagnostics["margin"].min()),
        "truncated": tr.error is not None,
        "run_seconds": elapsed,
    }
    ok = (
        d["rate_rel_error"] < 0.02
        and dE.max() <= 0.0
        and tr.error is None
        and d["min_margin"] >= 0.1
        and elapsed < 120.0
    )
    # a shared run was timed by its caller; charge it here
    return Criterion(6, "nonlinear decay", ok, d, seconds=elapsed if run is not None else 0.0)


@_timed
def criterion_7(seeds=(1, 2, 3, 4, 5)):
    f = reference_forms(64)
    spreads = []
    for seed in seeds:
        ratios = []
        for n6 in (1e-2, 1e-3, 1e-4):
            V = scaled_random_field(f, seed, n6)
            ratios.append(float(norm_U(f.table, eval_nonlinearity(f, V))) / n6**2)
        spreads.append(max(ratios) / min(ratios) - 1)
    return Criterion(7, "quadratic smallness of N", max(spreads) < 0.2, {"max_spread": max(spreads), "seeds": len(seeds)})


@_timed
def criterion_8(run=None, n_snapshots=7):
    f, tr, _ = run or nonlinear_reference_run()
    p = f.profile
    vm, vp = late_front_speed(tr)
    target = p.ell / 5
    mass0 = float(f.rule.weights @ f.table.U)
    idx = np.linspace(0, len(tr) - 1, n_snapshots).astype(int)
    other = build_quadrature(p, 300)
    drift = 0.0
    for i in idx:
        sn = reconstruct_physical(p, LagrangianState(Field(tr.coeffs[i], f.basis), tr.times[i]), rule=other)
        drift = max(drift, abs(sn.mass / mass0 - 1))
    d = {
        "scaled_v_minus": vm,
        "scaled_v_plus": vp,
        "target": target,
        "rel_error_minus": abs(vm / -target - 1),
        "rel_error_plus": abs(vp / target - 1),
        "mass": mass0,
        "max_mass_drift": drift,
    }
    ok = d["rel_error_minus"] < 0.05 and d["rel_error_plus"] < 0.05 and drift < 1e-10
    return Criterion(8, "physical asymptotics", ok, d)


@_timed
def criterion_9(n_pairs=20, eps=(1e-3, 1e-4, 1e-5)):
    f = reference_forms(64)
    B = f.basis
    G1 = f.table.grid_matrix(1)
    rng = np.random.default_rng(SEED + 9)
    slopes = []
    for _ in range(n_pairs):
        v, w = random_coeffs(B, rng, 2, 9).T
        # |V'| <= 0.5 and |W'| <= 50: the O(eps^2) term dominates rounding down to eps = 1e-5
        V = Field(0.5 * v / np.abs(G1 @ v).max(), B)
        W = Field(50.0 * w / np.abs(G1 @ w).max(), B)
        g = gradient_pairing(f, V, W)
        err = [abs(directional_fd(f, V, W, e) - g) for e in eps]
        slopes.append(float(np.polyfit(np.log(eps), np.log(err), 1)[0]))
    d = {"min_slope": min(slopes), "max_slope": max(slopes), "pairs": n_pairs}
    ok = all(abs(s - 2.0) <= 0.1 for s in slopes)
    return Criterion(9, "gradient consistency", ok, d)


PROBE_SET = {
    "hardy": [0.0, 0.5, 1.0, 2.0],
    "interp": [(2, 1, 1), (3, 1, 2), (4, 2, 2)],
    "c0": [(2, 0), (1, 1), (2, 2), (3, 3)],
}


def probe_constants(basis_dim, quad_n, n_draws=1000, degree=10, seed=SEED + 10):
    p = reference_profile()
    basis = Basis(p.ell, basis_dim)
    rule = build_quadrature(p, quad_n)
    t = build_norm_table(basis, rule, k_max=12)
    C = random_coeffs(basis, np.random.default_rng(seed), n_draws, degree)
    out = {}
    for beta in PROBE_SET["hardy"]:
        out[f"hardy_beta={beta:g}"] = hardy_constant(t, rule, beta, C)
    for k, m, n in PROBE_SET["interp"]:
        out[f"interp_k={k},m={m},n={n}"] = interp_constant(t, C, k, m, n)
    for n, dd in PROBE_SET["c0"]:
        out[f"c0_n={n},d={dd}"] = c0_constant(t, C, n, dd)
    return out


@_timed
def criterion_10():
    a = probe_constants(64, 160)
    b = probe_constants(128, 320)
    change = {k: abs(b[k] / a[k] - 1) for k in a}
    finite = all(np.isfinite(v) and v > 0 for v in list(a.values()) + list(b.values()))
    d = {"max_change": max(change.values()), "finite": finite, "constants": a}
    return Criterion(10, "inequality probes", finite and max(change.values()) < 0.05, d)


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
    10: criterion_10,
}


def _run_group(numbers):
    if 6 in numbers or 8 in numbers:
        run = nonlinear_reference_run()
        return [CRITERIA[n](run) if n in (6, 8) else CRITERIA[n]() for n in numbers]
    return [CRITERIA[n]() for n in numbers]


def run_all(numbers=None, jobs=1):
    """Run the selected criteria; 6 and 8 share one nonlinear run."""
    numbers = sorted(numbers or CRITERIA)
    shared = [n for n in numbers if n in (6, 8)]
    groups = [[n] for n in numbers if n not in (6, 8)]
    if shared:
        groups.append(shared)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = [c for g in ex.map(_run_group, groups) for c in g]
    else:
        results = [c for g in groups for c in _run_group(g)]
    return sorted(results, key=lambda c: c.number)
