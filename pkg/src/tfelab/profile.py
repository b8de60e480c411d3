"""Source-type profile of the thin-film equation with gravity.

The profile U is the even, compactly supported solution of

    U''' - U^2 U' - x/5 = 0   on (-ell, ell),   U = U' = 0 at x = +-ell,

parameterized here by its center height U0.  One integration gives the
second-order form used for shooting,

    U'' = q + x^2/10 - (U0^3 - U^3)/3,   U(0) = U0, U'(0) = 0, U''(0) = q.

The shooting parameter q (= U0'') is fixed by requiring that U touch down
with zero slope.  The double-precision shot is then polished by Chebyshev
collocation in w = (x/ell)^2 carried out in extended precision, and stored as

    U(x) = U0 + w H(w),   H a Chebyshev series on w in [0, 1],

which makes U(0) = U0, evenness, and U'(0) = U'''(0) = 0 hold exactly.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import mpmath
import numpy as np
import tomli
from numpy.polynomial import chebyshev as cheb
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import AccuracyError, BracketError, ConfigurationError, DomainError, ShootingError

PROFILE_FORMAT = "tfelab-profile-1"

TOUCHED_DOWN = "touched_down"
TURNED_UP = "turned_up"
STAYED_POSITIVE = "stayed_positive"


@dataclass(frozen=True)
class ProfileParams:
    U0: float = 1.0
    q_bracket: tuple[float, float] | None = None
    ode_tol: float = 1e-12
    fit_degree: int = 64
    residual_tol: float = 1e-8
    x_max: float = 100.0

    def validate(self):
        if not self.U0 > 0:
            raise DomainError("U0 must be positive")
        if not self.ode_tol > 0:
            raise DomainError("ode_tol must be positive")
        if not self.residual_tol > 0:
            raise DomainError("residual_tol must be positive")
        if self.fit_degree < 16:
            raise AccuracyError(f"fit_degree={self.fit_degree} is below the minimum of 16")
        if self.q_bracket is not None:
            lo, hi = self.q_bracket
            if not lo < hi:
                raise BracketError("q_bracket must be an increasing pair")


@dataclass(frozen=True, eq=False)
class ShotResult:
    q: float
    outcome: str
    ell_candidate: float | None
    Uprime_at_touchdown: float | None
    u_min: float | None
    x_min: float | None
    x: np.ndarray
    U: np.ndarray
    Up: np.ndarray
    sol: object = field(repr=False, default=None)

    def residual(self):
        """Signed minimum height of the trajectory.

        Negative after a touchdown, positive when U turns up while still
        positive.  Unlike U' at touchdown this is smooth in q across the
        zero-contact-angle shot.
        """
        if self.u_min is not None:
            return self.u_min
        # crash below -U0, or still positive at x_max
        return float(self.U[-1])


def _profile_rhs(x, y, q, U0cube):
    U, Up = y
    return (Up, q + x * x / 10.0 - (U0cube - U**3) / 3.0)


def shoot(U0, q, ode_tol=1e-12, x_max=100.0, dense=False):
    """Integrate the second-order profile ODE from x = 0 for a trial U''(0) = q.

    Integration continues through a touchdown (U = 0) until the first
    minimum (U' = 0 from below), so ``u_min`` is defined on both sides of
    the critical q.
    """
    if not U0 > 0:
        raise DomainError("U0 must be positive")

    def touchdown(x, y, q, c):
        return y[0]

    touchdown.direction = -1

    def turning(x, y, q, c):
        return y[1]

    turning.direction = 1
    turning.terminal = True

    def crash(x, y, q, c):
        return y[0] + U0

    crash.direction = -1
    crash.terminal = True

    sol = solve_ivp(
        _profile_rhs,
        (0.0, x_max),
        [U0, 0.0],
        args=(q, U0**3),
        method="DOP853",
        rtol=ode_tol,
        atol=ode_tol * 1e-3 * U0,
        events=(touchdown, turning, crash),
        dense_output=True,
    )
    if sol.status == -1:
        raise ShootingError(
            f"integrator failed at x={sol.t[-1]:.6g}: {sol.message}", x=sol.t[-1], state=sol.y[:, -1]
        )
    td_x, turn_x, _ = sol.t_events
    td_y, turn_y, _ = sol.y_events

    ell_candidate = uprime = u_min = x_min = None
    if td_x.size:
        outcome = TOUCHED_DOWN
        ell_candidate = float(td_x[0])
        uprime = float(td_y[0][1])
    elif turn_x.size:
        outcome = TURNED_UP
    else:
        outcome = STAYED_POSITIVE
    if turn_x.size:
        x_min = float(turn_x[0])
        u_min = float(turn_y[0][0])

    return ShotResult(
        q=float(q),
        outcome=outcome,
        ell_candidate=ell_candidate,
        Uprime_at_touchdown=uprime,
        u_min=u_min,
        x_min=x_min,
        x=sol.t,
        U=sol.y[0],
        Up=sol.y[1],
        sol=sol.sol if dense else None,
    )


def _shot_residual(q, U0, ode_tol, x_max):
    return shoot(U0, q, ode_tol, x_max).residual()


def bracket_scan(U0, qs, ode_tol=1e-12, x_max=100.0, jobs=1):
    """Shooting residuals for a list of q values (independent shots)."""
    qs = [float(q) for q in qs]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_shot_residual, qs, [U0] * len(qs), [ode_tol] * len(qs), [x_max] * len(qs)))
    return [_shot_residual(q, U0, ode_tol, x_max) for q in qs]


def find_bracket(U0, ode_tol=1e-12, x_max=100.0, max_doublings=40):
    """Walk q downward from 0 until the shot touches down."""
    q_hi = 0.0
    q = -0.05 * U0**3
    for _ in range(max_doublings):
        if _shot_residual(q, U0, ode_tol, x_max) < 0:
            return q, q_hi
        q_hi = q
        q *= 2.0
    raise BracketError(f"no touchdown found for U0={U0} down to q={q}")


# ---------------------------------------------------------------------------
# extended-precision collocation in w = (x/ell)^2


def _mp_chebyshev_D(N):
    t = [mpmath.cos(mpmath.pi * j / N) for j in range(N + 1)]
    c = [mpmath.mpf(2) if j in (0, N) else mpmath.mpf(1) for j in range(N + 1)]
    D = mpmath.matrix(N + 1, N + 1)
    for i in range(N + 1):
        for j in range(N + 1):
            if i != j:
                D[i, j] = (c[i] / c[j]) * (-1) ** (i + j) / (t[i] - t[j])
    for i in range(N + 1):
        D[i, i] = -mpmath.fsum(D[i, j] for j in range(N + 1) if j != i)
    return t, D


def _collocate(U0, q0, ell0, g0, N, dps=34, maxiter=12):
    """Newton solve of the second-order profile ODE in w on N+1 Chebyshev points.

    Unknowns: nodal values g_j = U(ell sqrt(w_j)), q and ell.  The ODE is
    collocated at every node except w = 1, which carries U = U' = 0; w = 0
    carries U = U0.  Returns the coefficients of H = (g - U0)/w.
    """
    with mpmath.workdps(dps):
        t, Dt = _mp_chebyshev_D(N)
        D1 = 2 * Dt
        D2 = D1 * D1
        w = [(tj + 1) / 2 for tj in t]
        i1, i0 = 0, N  # t = 1 -> w = 1 ; t = -1 -> w = 0
        g = mpmath.matrix([mpmath.mpf(float(v)) for v in g0])
        q = mpmath.mpf(q0)
        L = mpmath.mpf(ell0)
        U0m = mpmath.mpf(U0)
        tol = mpmath.mpf(10) ** (-(dps - 4))
        converged = False
        for it in range(maxiter):
            g1 = D1 * g
            g2 = D2 * g
            F = mpmath.matrix(N + 3, 1)
            J = mpmath.matrix(N + 3, N + 3)
            r = 0
            for i in range(N + 1):
                if i == i1:
                    continue
                Lg = 4 * w[i] * g2[i] + 2 * g1[i]
                F[r] = Lg / L**2 - q - L**2 * w[i] / 10 + (U0m**3 - g[i] ** 3) / 3
                for j in range(N + 1):
                    J[r, j] = (4 * w[i] * D2[i, j] + 2 * D1[i, j]) / L**2
                J[r, i] -= g[i] ** 2
                J[r, N + 1] = -1
                J[r, N + 2] = -2 * Lg / L**3 - L * w[i] / 5
                r += 1
            F[N] = g[i0] - U0m
            J[N, i0] = 1
            F[N + 1] = g[i1]
            J[N + 1, i1] = 1
            F[N + 2] = g1[i1]
            for j in range(N + 1):
                J[N + 2, j] = D1[i1, j]
            try:
                d = mpmath.lu_solve(J, -F)
            except ZeroDivisionError as exc:
                raise AccuracyError(f"collocation Jacobian singular at N={N}") from exc
            for j in range(N + 1):
                g[j] += d[j]
            q += d[N + 1]
            L += d[N + 2]
            if max(abs(v) for v in d) < tol:
                converged = True
                break
        if not converged:
            raise AccuracyError(f"collocation Newton did not converge at N={N}")

        gp0 = (D1 * g)[i0]
        H = [(g[j] - U0m) / w[j] if j != i0 else gp0 for j in range(N + 1)]
        coef = []
        for k in range(N + 1):
            s = mpmath.fsum(
                H[j] * mpmath.cos(mpmath.pi * j * k / N) / (2 if j in (0, N) else 1) for j in range(N + 1)
            )
            s = s * 2 / N
            if k in (0, N):
                s /= 2
            coef.append(s)
        # H has degree N - 1 in exact arithmetic
        return np.array([float(c) for c in coef[:N]]), float(q), float(L), it + 1


# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Profile:
    """Even source-type profile on [-ell, ell] as U0 + w H(w), w = (x/ell)^2."""

    ell: float
    U0: float
    U0pp: float
    cheb_U: np.ndarray
    quad_hint: int
    ode_tol: float = 1e-12
    fit_degree: int = 64
    residual_tol: float = 1e-8

    @property
    def degree(self):
        """Polynomial degree of U in x."""
        return 2 * len(self.cheb_U)

    def __call__(self, x, d=0):
        return eval_profile(self, x, d)

    def derivatives(self, x, order=4):
        """Array (order+1, len(x)) of U, U', ..., U^(order) at x."""
        return _eval_all(self, np.atleast_1d(np.asarray(x, dtype=float)), order)

    def phi(self, x, d=0):
        return phi(self, x, d)


def _w_derivs(p, w, order):
    # g(w) = U0 + w H(w)  =>  g^(k) = k H^(k-1) + w H^(k)
    t = 2.0 * w - 1.0
    Hd = [cheb.chebval(t, p.cheb_U)]
    c = p.cheb_U
    for k in range(1, order + 1):
        c = cheb.chebder(c) * 2.0
        Hd.append(cheb.chebval(t, c) if c.size else np.zeros_like(w))
    g = [p.U0 + w * Hd[0]]
    for k in range(1, order + 1):
        g.append(k * Hd[k - 1] + w * Hd[k])
    return g


def _eval_all(p, x, order):
    if order > 4:
        raise DomainError("derivative order must be at most 4")
    if np.any(np.abs(x) > p.ell):
        raise DomainError(f"|x| exceeds ell={p.ell!r}")
    ell2 = p.ell * p.ell
    w = x * x / ell2
    g = _w_derivs(p, w, order)
    w1 = 2.0 * x / ell2
    w2 = 2.0 / ell2
    out = [g[0]]
    if order >= 1:
        out.append(g[1] * w1)
    if order >= 2:
        out.append(g[2] * w1**2 + g[1] * w2)
    if order >= 3:
        out.append(g[3] * w1**3 + 3.0 * g[2] * w1 * w2)
    if order >= 4:
        out.append(g[4] * w1**4 + 6.0 * g[3] * w1**2 * w2 + 3.0 * g[2] * w2**2)
    return np.array(out)


def eval_profile(p, x, d=0):
    """d-th derivative of U at x (scalar or array), 0 <= d <= 4."""
    if not 0 <= d <= 4:
        raise DomainError("derivative order must be in 0..4")
    xa = np.asarray(x, dtype=float)
    val = _eval_all(p, np.atleast_1d(xa), d)[d]
    return float(val[0]) if xa.ndim == 0 else val


def phi(p, x, d=0):
    """Phi = 2 U'^2 - 4 U U'' + U^4 and its first two derivatives."""
    xa = np.asarray(x, dtype=float)
    U, U1, U2, U3, U4 = _eval_all(p, np.atleast_1d(xa), 4)
    if d == 0:
        val = 2 * U1**2 - 4 * U * U2 + U**4
    elif d == 1:
        val = -4 * U * U3 + 4 * U**3 * U1
    elif d == 2:
        val = -4 * U1 * U3 - 4 * U * U4 + 12 * U**2 * U1**2 + 4 * U**3 * U2
    else:
        raise DomainError("Phi derivatives available for d in 0..2")
    return float(val[0]) if xa.ndim == 0 else val


def solve_profile(params=None):
    params = params or ProfileParams()
    params.validate()
    U0, tol = params.U0, params.ode_tol
    lo, hi = params.q_bracket if params.q_bracket is not None else find_bracket(U0, tol, params.x_max)
    r_lo = _shot_residual(lo, U0, tol, params.x_max)
    r_hi = _shot_residual(hi, U0, tol, params.x_max)
    if not (r_lo < 0 < r_hi):
        raise BracketError(f"no sign change of the shooting residual on [{lo}, {hi}] ({r_lo:.3g}, {r_hi:.3g})")
    q_shot = brentq(_shot_residual, lo, hi, args=(U0, tol, params.x_max), xtol=1e-16, rtol=1e-15, maxiter=200)
    shot = shoot(U0, q_shot, tol, params.x_max, dense=True)
    if shot.x_min is None:
        raise AccuracyError("refined shot has no turning point")

    N = params.fit_degree // 2
    nodes = (np.cos(np.pi * np.arange(N + 1) / N) + 1.0) / 2.0
    g0 = shot.sol(shot.x_min * np.sqrt(nodes))[0]
    H, q, ell, _ = _collocate(U0, q_shot, shot.x_min, g0, N)

    p = Profile(
        ell=ell,
        U0=float(U0),
        U0pp=q,
        cheb_U=H,
        quad_hint=2 * N + 32,
        ode_tol=tol,
        fit_degree=params.fit_degree,
        residual_tol=params.residual_tol,
    )
    report = verify_profile(p)
    if report.max_ode_residual > params.residual_tol:
        raise AccuracyError(
            f"ODE residual {report.max_ode_residual:.3g} exceeds {params.residual_tol:.3g} "
            f"at fit_degree={params.fit_degree}"
        )
    if not report.invariants_ok:
        raise AccuracyError(f"profile invariants violated: {report.failures}")
    return p


# ---------------------------------------------------------------------------


@dataclass
class VerificationReport:
    max_ode_residual: float
    max_phi_identity_residual: float
    contact_U: float
    contact_Up: float
    Upp_at_ell: float
    bound_constants: dict
    failures: list

    @property
    def invariants_ok(self):
        return not self.failures

    def as_dict(self):
        return {
            "max_ode_residual": self.max_ode_residual,
            "max_phi_identity_residual": self.max_phi_identity_residual,
            "contact_U": self.contact_U,
            "contact_Up": self.contact_Up,
            "Upp_at_ell": self.Upp_at_ell,
            "bound_constants": self.bound_constants,
            "failures": list(self.failures),
            "ok": self.invariants_ok,
        }


def boundary_limits(p):
    """Limits at x -> ell of the ratios in the boundary bounds, from U''(ell)."""
    c2 = eval_profile(p, p.ell, 2)
    ell = p.ell
    return {
        "U": c2 / (8 * ell**2),
        "Up": c2 / (2 * ell),
        "Phi": c2 / (60 * ell**2),
        "Phip": c2 / (10 * ell),
        "Phipp": 2 * c2 / 5,
    }


def verify_profile(p, grid_size=2049, layer=1e-3, near_boundary=0.75):
    """Residuals and empirical constants of the boundary bounds on a dense grid.

    Ratios U/(ell^2-x^2)^2, |U'|/(ell^2-x^2), Phi/(ell^2-x^2)^3,
    |Phi'|/(ell^2-x^2)^2, |Phi''|/(ell^2-x^2) are sampled off a boundary
    layer of width ``layer*ell`` and completed by their limits at +-ell.
    U', Phi', Phi'' vanish in the interior (evenness, and the maximum of xU),
    so their lower constants are taken over |x| >= near_boundary*ell.
    """
    if grid_size < 64:
        raise ConfigurationError("grid_size must be at least 64")
    ell = p.ell
    x = np.linspace(-ell, ell, grid_size)
    U, U1, U2, U3, U4 = _eval_all(p, x, 4)
    ode_res = U3 - U**2 * U1 - x / 5
    phi1 = -4 * U * U3 + 4 * U**3 * U1
    phi_res = phi1 + 0.8 * x * U

    interior = np.abs(x) < ell * (1 - layer)
    xi = x[interior]
    dist = ell**2 - xi**2
    Ui, U1i, U2i = U[interior], U1[interior], U2[interior]
    Phi = 2 * U1i**2 - 4 * Ui * U2i + Ui**4
    Phip = -0.8 * xi * Ui
    Phipp = -0.8 * (Ui + xi * U1i)
    limits = boundary_limits(p)
    near = np.abs(xi) >= near_boundary * ell
    ratios = {
        "U": (Ui / dist**2, None),
        "Up": (np.abs(U1i) / dist, near),
        "Phi": (Phi / dist**3, None),
        "Phip": (np.abs(Phip) / dist**2, near),
        "Phipp": (np.abs(Phipp) / dist, near),
    }
    bounds = {}
    for name, (r, mask) in ratios.items():
        lower_pool = r if mask is None else r[mask]
        lim = limits[name]
        bounds[name] = {
            "c": float(min(lower_pool.min(), lim)),
            "C": float(max(r.max(), lim)),
            "limit": float(lim),
            "lower_region": "all" if mask is None else f"|x|>={near_boundary}*ell",
        }

    failures = []
    if not np.all(Ui > 0):
        failures.append("U not positive in the interior")
    Upp_ell = float(eval_profile(p, ell, 2))
    if not Upp_ell > 0:
        failures.append("U''(ell) not positive")
    if not np.all(Phi > 0):
        failures.append("Phi not positive in the interior")
    cU = abs(float(eval_profile(p, ell, 0)))
    cUp = abs(float(eval_profile(p, ell, 1)))
    contact_tol = max(p.ode_tol, 1e-12)
    if cU > contact_tol or cUp > contact_tol:
        failures.append(f"contact conditions U={cU:.3g}, U'={cUp:.3g}")
    for name, b in bounds.items():
        if not (b["c"] > 0 and math.isfinite(b["C"])):
            failures.append(f"bound constants for {name} degenerate")

    return VerificationReport(
        max_ode_residual=float(np.abs(ode_res).max()),
        max_phi_identity_residual=float(np.abs(phi_res).max()),
        contact_U=cU,
        contact_Up=cUp,
        Upp_at_ell=Upp_ell,
        bound_constants=bounds,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# serialization: TOML subset, floats written with 17 significant digits


def _fmt(v):
    return format(float(v), ".17e")


def dumps_profile(p):
    coeffs = ",\n    ".join(_fmt(c) for c in p.cheb_U)
    return (
        f'format = "{PROFILE_FORMAT}"\n'
        f"U0 = {_fmt(p.U0)}\n"
        f"ell = {_fmt(p.ell)}\n"
        f"U0pp = {_fmt(p.U0pp)}\n"
        f"ode_tol = {_fmt(p.ode_tol)}\n"
        f"residual_tol = {_fmt(p.residual_tol)}\n"
        f"fit_degree = {int(p.fit_degree)}\n"
        f"quad_hint = {int(p.quad_hint)}\n"
        f"cheb = [\n    {coeffs},\n]\n"
    )


def loads_profile(text):
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigurationError(f"profile file is not valid: {exc}") from exc
    expected = {"format", "U0", "ell", "U0pp", "ode_tol", "residual_tol", "fit_degree", "quad_hint", "cheb"}
    if set(data) != expected or data.get("format") != PROFILE_FORMAT:
        raise ConfigurationError(f"profile file has keys {sorted(data)}, expected {sorted(expected)}")
    try:
        coeffs = np.array([float(c) for c in data["cheb"]], dtype=float)
        p = Profile(
            ell=float(data["ell"]),
            U0=float(data["U0"]),
            U0pp=float(data["U0pp"]),
            cheb_U=coeffs,
            quad_hint=int(data["quad_hint"]),
            ode_tol=float(data["ode_tol"]),
            fit_degree=int(data["fit_degree"]),
            residual_tol=float(data["residual_tol"]),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"profile file has malformed values: {exc}") from exc
    if not (p.ell > 0 and p.U0 > 0 and coeffs.size and np.all(np.isfinite(coeffs))):
        raise ConfigurationError("profile file values out of range")
    return p


def save_profile(p, path):
    Path(path).write_text(dumps_profile(p))


def load_profile(path):
    return loads_profile(Path(path).read_text())
