"""Implicit Euler for dV/ds + LV = F, resolvent solves, and decay-rate fits."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import legendre
from scipy import linalg

from .errors import ConfigurationError, NumericalError
from .spaces import Field

RESOLVENT_RTOL = 1e-11
APRIORI_TIERS = (2, 3, 4)


def _solve_checked(K, chol, rhs):
    """Cholesky solve with one step of iterative refinement."""
    v = linalg.cho_solve(chol, rhs)
    v += linalg.cho_solve(chol, rhs - K @ v)
    scale = np.linalg.norm(rhs)
    res = np.linalg.norm(K @ v - rhs)
    if scale > 0 and res > RESOLVENT_RTOL * scale:
        raise NumericalError(f"resolvent residual {res / scale:.3e} exceeds {RESOLVENT_RTOL:g}")
    return v


def _factor(K):
    try:
        return linalg.cho_factor(K)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"resolvent matrix is singular or indefinite: {exc}") from exc


def resolvent_solve(f, lam, V0, F=None):
    """V with lam V + LV = lam V0 + F in the trial space."""
    if not lam > 0:
        raise ConfigurationError("lambda must be positive")
    K = lam * f.M + f.A
    rhs = lam * (f.M @ V0.coeffs)
    if F is not None:
        rhs = rhs + f.M @ F.coeffs
    return Field(_solve_checked(K, _factor(K), rhs), f.basis)


@dataclass(eq=False)
class LinearStepper:
    """Holds the Cholesky factor of M/h + A; build a new stepper to change h."""

    forms: object
    h: float
    K: np.ndarray = field(init=False, repr=False)
    chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if not 0 < self.h <= 1:
            raise ConfigurationError("time step h must lie in (0, 1]")
        self.K = self.forms.M / self.h + self.forms.A
        self.chol = _factor(self.K)

    def solve(self, rhs):
        return _solve_checked(self.K, self.chol, rhs)

    def step_coeffs(self, v_prev, f_prev=None):
        rhs = self.forms.M @ (v_prev / self.h if f_prev is None else v_prev / self.h + f_prev)
        return self.solve(rhs)

    def step(self, V_prev, F_prev=None):
        out = self.step_coeffs(V_prev.coeffs, None if F_prev is None else F_prev.coeffs)
        return Field(out, V_prev.basis)


def step(st, V_prev, F_prev=None):
    return st.step(V_prev, F_prev)


@dataclass(eq=False)
class Trajectory:
    """Uniformly sampled states s_j = s0 + j h and their diagnostics."""

    times: np.ndarray
    coeffs: np.ndarray  # (n_states, basis_dim)
    basis: object
    h: float
    diagnostics: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def states(self):
        return [Field(c, self.basis) for c in self.coeffs]

    @property
    def final(self):
        return Field(self.coeffs[-1], self.basis)

    def __len__(self):
        return len(self.times)

    def columns(self):
        return ["s", *self.diagnostics]

    def to_csv(self, columns=None):
        cols = columns or self.columns()
        data = np.column_stack([self.times if c == "s" else self.diagnostics[c] for c in cols])
        buf = io.StringIO()
        buf.write(",".join(cols) + "\n")
        np.savetxt(buf, data, fmt="%.17g", delimiter=",")
        return buf.getvalue()


def norms_over(table, C, k):
    """|V|_k for every column of C."""
    return np.sqrt(np.maximum(np.einsum("ij,ik,kj->j", C, table.N[k], C), 0.0))


def linear_diagnostics(f, C, Fc, h, ks=(2, 4, 6), tiers=APRIORI_TIERS):
    """Norm histories and the discrete a-priori tiers for states C[:, j].

    Tier k: lhs_j = (jh)^(k-2)|V_j|^2_{2k+2} + sum_{j'<=j} h (j'h)^(k-2)|V_j'|^2_{2k+4},
    rhs_j = sum_{j'<j} h (jh)^(k-2)|F_j'|^2_{2k} + (k-2) sum_{j'<=j} h ((j'+1)h)^(k-3)|V_j'|^2_{2k+2}.
    """
    t = f.table
    d = {}
    d["norm_U"] = np.sqrt(np.einsum("ij,ik,kj->j", C, f.M, C))
    d["norm_U2"] = np.sqrt(np.einsum("ij,ik,kj->j", C, f.A, C))
    for k in ks:
        d[f"norm_{k}"] = norms_over(t, C, k)
    with np.errstate(divide="ignore", invalid="ignore"):
        lr = np.log(d["norm_U"])
        rate = np.full(C.shape[1], np.nan)
        rate[1:] = -(lr[1:] - lr[:-1]) / h
    d["rate"] = rate
    n = C.shape[1]
    jh = h * np.arange(n)
    for k in tiers:
        if 2 * k + 4 > t.k_max:
            continue
        a = norms_over(t, C, 2 * k + 2) ** 2
        b = norms_over(t, C, 2 * k + 4) ** 2
        w = jh ** (k - 2)
        tail = np.concatenate([[0.0], np.cumsum(h * w[1:] * b[1:])])
        d[f"apriori_lhs_{k}"] = w * a + tail
        fsum = np.zeros(n)
        if Fc is not None:
            fn = norms_over(t, Fc, 2 * k) ** 2
            fsum[1:] = np.cumsum(h * fn[: n - 1])
        lag = np.concatenate([[0.0], np.cumsum(h * ((jh[1:] + h) ** (k - 3)) * a[1:])])
        d[f"apriori_rhs_{k}"] = w * fsum + (k - 2) * lag
    return d


def _gauss_cell(F, s0, h, order=4):
    t, w = legendre.leggauss(order)
    return sum(wi / 2 * F(s0 + h * (ti + 1) / 2).coeffs for ti, wi in zip(t, w))


def evolve_linear(f, V0, F=None, h=0.01, S=1.0, ks=(2, 4, 6), cell_average=False, s0=0.0):
    """ceil(S/h) implicit Euler steps.

    F is None or a callable s -> Field.  Step j (s_{j-1} -> s_j) uses F(s_{j-1}),
    or the mean of F over [s_{j-1}, s_j] when ``cell_average`` is set.
    """
    if not 0 < h <= 1:
        raise ConfigurationError("time step h must lie in (0, 1]")
    if S < h:
        raise ConfigurationError("horizon S must be at least h")
    f.basis.check(V0.basis)
    n = math.ceil(S / h - 1e-9)
    st = LinearStepper(f, h)
    C = np.empty((f.basis_dim, n + 1))
    C[:, 0] = V0.coeffs
    Fc = None if F is None else np.zeros((f.basis_dim, n + 1))
    for j in range(1, n + 1):
        s_prev = s0 + (j - 1) * h
        fj = None
        if F is not None:
            fj = _gauss_cell(F, s_prev, h) if cell_average else F(s_prev).coeffs
            Fc[:, j - 1] = fj
        C[:, j] = st.step_coeffs(C[:, j - 1], fj)
    times = s0 + h * np.arange(n + 1)
    diag = linear_diagnostics(f, C, Fc, h, ks)
    return Trajectory(times=times, coeffs=C.T.copy(), basis=f.basis, h=h, diagnostics=diag)


@dataclass(frozen=True)
class RateFit:
    rate: float
    r2: float
    window: tuple
    n_samples: int


def fit_decay_rate(traj, window=None, key="norm_U"):
    """Least-squares slope of -log|V|_U against s; default window is the last 40%."""
    s = traj.times
    if window is None:
        window = (s[0] + 0.6 * (s[-1] - s[0]), s[-1])
    lo, hi = float(window[0]), float(window[1])
    y = np.asarray(traj.diagnostics[key])
    sel = (s >= lo - 1e-12) & (s <= hi + 1e-12)
    if sel.sum() < 10:
        raise ConfigurationError(f"window ({lo:g}, {hi:g}) holds {int(sel.sum())} samples, need at least 10")
    if np.any(y[sel] <= 1e-14):
        raise ConfigurationError(f"norms underflow in window ({lo:g}, {hi:g})")
    x, ly = s[sel], np.log(y[sel])
    x0 = x.mean()
    slope, icpt = np.polyfit(x - x0, ly, 1)
    pred = icpt + slope * (x - x0)
    ss_res = float(np.sum((ly - pred) ** 2))
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(rate=float(-slope), r2=r2, window=(float(lo), float(hi)), n_samples=int(sel.sum()))


def richardson(hs, rates):
    """Extrapolate rate(h) to h = 0 with a polynomial in h through all samples."""
    hs = np.asarray(hs, dtype=float)
    rates = np.asarray(rates, dtype=float)
    if hs.size < 2:
        raise ConfigurationError("need at least two step sizes")
    V = np.vander(hs, hs.size, increasing=True)
    return float(np.linalg.solve(V, rates)[0])


def constant_mode_rate(h):
    """Exact fitted rate of implicit Euler on the eigenvalue 1/5."""
    return math.log1p(h / 5) / h
