"""Controlled limiting equation, variational cost and Dawson-Gaertner rate.

Everything is Galerkin-discretised in a test dictionary ``phi_j`` and
evaluated along a limit-law path (a large averaged ensemble).  At report
time ``s`` with law ``nu`` the limiting generator acts as

    Lbar phi(x) = gamma_bar(x, nu) phi'(x) + D_bar(x, nu) phi''(x)
                  + E_nu[ dgamma_bar/dm(X, nu)[x] phi'(X) + dD_bar/dm(X, nu)[x] phi''(X) ]

and the pairings ``z_j = <Z, phi_j>`` solve ``z' = M z + f`` with
``Lbar phi_j ~ sum_k M[j, k] phi_k`` and ``f_j = E[hbar(X) phi_j'(X)]``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.interpolate import CubicSpline, RegularGridInterpolator

from .averaging import frozen_fields
from .equilibrium import DEFAULT_GRID
from .errors import (ConfigError, DegeneracyFault, DictionaryTooSmallFault, NumericalFault,
                     RankFault, StepInstabilityFault, UnsupportedFault)
from .fluctuation import FluctuationField
from .measures import MeasureHandle
from .simulate import ControlField

GALERKIN_TOL = 1e-3
CLOSURE_BAND = 2
TABLE_NODES = 121
TABLE_HALF_WIDTH = 12.0
QUAD_NODES = 2401
PINV_RCOND = 1e-10
REPRODUCTION_TOL = 1e-2
DEGENERACY_FLOOR = 1e-8
SKIP_FLOOR = 1e-10


@dataclass(eq=False)
class _Slice:
    t: float
    samples: np.ndarray
    nu: MeasureHandle
    xs: np.ndarray
    fields: object

    def spline(self, table):
        """Cubic spline in x of tabulated values (last axis = table nodes)."""
        return CubicSpline(self.xs, np.asarray(table, dtype=float), axis=-1)

    def expect(self, table, weights=None):
        """``mean_m g(X_m) w(X_m)`` where ``g`` is tabulated; ``weights`` is (..., M)."""
        g = self.spline(table)(self.samples)
        if weights is None:
            return np.mean(g, axis=-1)
        return weights @ g / self.samples.size


class LimitContext:
    """Per-slice equilibrium/corrector tables along a limit-law path."""

    def __init__(self, model, limit, grid=DEFAULT_GRID, table_nodes=TABLE_NODES,
                 half_width=TABLE_HALF_WIDTH):
        if limit.X.ndim != 2:
            raise ConfigError("limit path must hold an ensemble")
        self.model = model
        self.limit = limit
        self.grid = grid
        self.t = np.asarray(limit.t, dtype=float)
        self.table_nodes = table_nodes
        self.half_width = half_width
        self._slices = {}

    @property
    def n_slices(self):
        return self.t.size

    def slice(self, k):
        s = self._slices.get(k)
        if s is None:
            X = np.ascontiguousarray(self.limit.X[:, k])
            lo = min(-self.half_width, float(X.min()) - 1.0)
            hi = max(self.half_width, float(X.max()) + 1.0)
            xs = np.linspace(lo, hi, self.table_nodes)
            nu = MeasureHandle.empirical(X)
            s = _Slice(t=float(self.t[k]), samples=X, nu=nu, xs=xs,
                       fields=frozen_fields(self.model, xs, nu, self.grid))
            self._slices[k] = s
        return s


@dataclass(eq=False)
class GeneratorMatrix:
    t: np.ndarray
    M: np.ndarray
    residual: np.ndarray
    retained: np.ndarray
    tol: float
    lfd_source: str
    limit_kind: str

    @property
    def J(self):
        return self.M.shape[1]

    def max_retained_residual(self):
        return float(np.max(self.residual[:, self.retained])) if self.retained.any() else 0.0


def _nonlocal_terms(model, sl, xq, d1, d2):
    """``E_nu[dgamma/dm(X)[x] phi'(X) + dD/dm(X)[x] phi''(X)]`` on ``xq``, shape (J, Q)."""
    lg, lD = model.lfd_gamma_bar, model.lfd_D_bar
    if lg is None or lD is None:
        raise UnsupportedFault(
            f"model {model.name} has no analytic linear functional derivatives; "
            "the generator needs them on the whole quadrature grid")
    X = sl.samples
    out = np.zeros((d1.shape[0], xq.size))
    skip_g, skip_D = getattr(lg, "is_zero", False), getattr(lD, "is_zero", False)
    if skip_g and skip_D:
        return out
    chunk = max(1, 2_000_000 // xq.size)
    for start in range(0, X.size, chunk):
        xm = X[start:start + chunk]
        if not skip_g:
            A = np.asarray(lg(xm[:, None], sl.nu, xq[None, :]), dtype=float)
            out += d1[:, start:start + chunk] @ np.broadcast_to(A, (xm.size, xq.size))
        if not skip_D:
            B = np.asarray(lD(xm[:, None], sl.nu, xq[None, :]), dtype=float)
            out += d2[:, start:start + chunk] @ np.broadcast_to(B, (xm.size, xq.size))
    return out / X.size


def assemble_limit_generator(ctx, dictionary, tol=GALERKIN_TOL, band=CLOSURE_BAND,
                             quad_nodes=QUAD_NODES):
    """Least-squares expansion of ``Lbar phi_j`` in the dictionary, per report slice.

    Rows ``j >= J - band`` are closed by truncation and excluded from the
    residual check; the rest must meet ``tol`` (relative L2).
    """
    J = dictionary.J
    S = ctx.n_slices
    L = ctx.half_width
    xq = np.linspace(-L, L, quad_nodes)
    w = np.full(xq.size, xq[1] - xq[0])
    w[[0, -1]] *= 0.5
    P = dictionary.values(xq, 0)
    P1 = dictionary.values(xq, 1)
    P2 = dictionary.values(xq, 2)
    gram = (P * w) @ P.T
    gram_inv = np.linalg.pinv(gram, rcond=PINV_RCOND, hermitian=True)
    M = np.empty((S, J, J))
    res = np.zeros((S, J))
    retained = np.arange(J) < J - band
    for k in range(S):
        sl = ctx.slice(k)
        fl = sl.fields
        gam = sl.spline(fl.gamma_bar)(xq)
        Dq = sl.spline(fl.D_bar)(xq)
        Lphi = gam * P1 + Dq * P2
        Lphi = Lphi + _nonlocal_terms(ctx.model, sl, xq, dictionary.values(sl.samples, 1),
                                      dictionary.values(sl.samples, 2))
        Mk = ((Lphi * w) @ P.T) @ gram_inv
        fit = Mk @ P
        num = np.sqrt(((Lphi - fit) ** 2) @ w)
        den = np.sqrt((Lphi ** 2) @ w)
        res[k] = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
        M[k] = Mk
    if not np.all(np.isfinite(M)):
        raise NumericalFault("non-finite generator matrix")
    bad = res[:, retained]
    if bad.size and bad.max() > tol:
        k, j = np.unravel_index(int(np.argmax(bad)), bad.shape)
        worst = np.argsort(-bad.max(axis=0))[:3]
        raise DictionaryTooSmallFault(
            f"Galerkin residual {bad[k, j]:.2e} > {tol:.0e} at slice {k} (t={ctx.t[k]:.4g}); "
            f"worst rows j={list(map(int, worst))}; enlarge the dictionary")
    return GeneratorMatrix(t=ctx.t.copy(), M=M, residual=res, retained=retained, tol=tol,
                           lfd_source="analytic", limit_kind=ctx.limit.kind)


def solve_limit_ode(gen, forcing, dt=None):
    """Classical RK4 for ``z' = M(t) z + f(t)``, ``z(0) = 0``.

    ``M`` and ``f`` are piecewise linear in time between report slices; the
    step must divide the report interval.
    """
    forcing = np.asarray(forcing, dtype=float)
    t = gen.t
    S, J = forcing.shape
    if S != t.size or J != gen.J:
        raise ConfigError("forcing must have shape (n_slices, J)")
    if not np.all(np.isfinite(forcing)):
        raise NumericalFault("non-finite forcing")
    gaps = np.diff(t)
    base = gaps.min() if gaps.size else 1.0
    dt = base / 4 if dt is None else float(dt)
    rad = max(float(np.max(np.abs(np.linalg.eigvals(Mk)))) for Mk in gen.M)
    if rad * dt > 2.5:
        raise StepInstabilityFault(
            f"dt={dt:.3g} times spectral radius {rad:.3g} exceeds the RK4 stability limit; "
            f"use dt <= {2.5 / rad:.3g}")
    fine_t = [0.0]
    fine_z = [np.zeros(J)]
    z = np.zeros(J)
    for k in range(S - 1):
        n = max(1, int(round(gaps[k] / dt)))
        h = gaps[k] / n
        M0, M1 = gen.M[k], gen.M[k + 1]
        f0, f1 = forcing[k], forcing[k + 1]

        def rhs(theta, zz):
            return ((1 - theta) * M0 + theta * M1) @ zz + (1 - theta) * f0 + theta * f1

        for i in range(n):
            a = i / n
            b = (i + 0.5) / n
            c = (i + 1) / n
            k1 = rhs(a, z)
            k2 = rhs(b, z + 0.5 * h * k1)
            k3 = rhs(b, z + 0.5 * h * k2)
            k4 = rhs(c, z + h * k3)
            z = z + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            fine_t.append(t[k] + (i + 1) * h)
            fine_z.append(z)
        fine_t[-1] = t[k + 1]
    if not np.all(np.isfinite(z)):
        raise StepInstabilityFault("limit equation diverged; reduce dt")
    fine_t = np.array(fine_t)
    fine_z = np.array(fine_z).T
    idx = np.searchsorted(fine_t, t - 1e-12)
    return FluctuationField(t=t.copy(), z=fine_z[:, idx].copy(), scale=float("nan"),
                            provenance={"source": "limit_ode", "dt": dt},
                            fine_t=fine_t, fine_z=fine_z)


def _control_on_table(h, sl):
    fl = sl.fields
    h1, h2 = h(sl.t, sl.xs[:, None], fl.y[None, :])
    shape = (sl.xs.size, fl.y.size)
    return np.broadcast_to(h1, shape), np.broadcast_to(h2, shape)


def averaged_control(ctx, h, k):
    """``hbar(x) = int (sigma + tau1 Phi_y) h1 + tau2 Phi_y h2 dpi`` on the slice table."""
    sl = ctx.slice(k)
    fl = sl.fields
    h1, h2 = _control_on_table(h, sl)
    return fl.integrate((fl.sigma + fl.tau1 * fl.phi_y) * h1 + fl.tau2 * fl.phi_y * h2)


def control_forcing(ctx, h, dictionary):
    """``f_j(s) = E[hbar(s, X_s) phi_j'(X_s)]``, shape (n_slices, J)."""
    out = np.zeros((ctx.n_slices, dictionary.J))
    if getattr(h, "is_zero", False):
        return out
    for k in range(ctx.n_slices):
        sl = ctx.slice(k)
        out[k] = sl.expect(averaged_control(ctx, h, k), dictionary.values(sl.samples, 1))
    return out


def _trapezoid(values, t):
    return float(np.trapezoid(values, t)) if t.size > 1 else 0.0


def variational_cost(ctx, h):
    """``1/2 int_0^T E[int |h(s, X_s, y)|^2 pi(dy)] ds``."""
    if getattr(h, "is_zero", False):
        return 0.0
    per = np.empty(ctx.n_slices)
    for k in range(ctx.n_slices):
        sl = ctx.slice(k)
        h1, h2 = _control_on_table(h, sl)
        per[k] = sl.expect(sl.fields.integrate(h1 * h1 + h2 * h2))
    return 0.5 * _trapezoid(per, ctx.t)


def quadratic_sup(numerator, denominator):
    """``sup_c (c F - c^2 D) = F^2 / (4 D)``."""
    return numerator * numerator / (4.0 * denominator)


@dataclass(eq=False)
class DGProfile:
    t: np.ndarray
    span_value: np.ndarray
    member_value: np.ndarray
    sup_index: np.ndarray
    skipped: np.ndarray
    numerator: np.ndarray


def _defect(Z, gen):
    """``<Zdot - Lbar* Z, phi_j>`` per slice, shape (S, J)."""
    zdot = Z.time_derivative()
    return zdot.T - np.einsum("sjk,ks->sj", gen.M, Z.z)


def dg_profile(Z, gen, ctx, dictionary):
    """Per-slice Dawson-Gaertner integrand.

    ``member_value`` is the sup over single dictionary members (closed-form
    c-optimisation); ``span_value = 1/4 F^T G^+ F`` is the sup over their
    linear span.  Both are lower bounds for the sup over all test functions.
    """
    F = _defect(Z, gen)
    S, J = F.shape
    span = np.zeros(S)
    member = np.zeros(S)
    idx = np.full(S, -1)
    skipped = np.zeros(S, dtype=bool)
    for k in range(S):
        sl = ctx.slice(k)
        d1 = dictionary.values(sl.samples, 1)
        Dm = sl.spline(sl.fields.D_bar)(sl.samples)
        G = (d1 * Dm) @ d1.T / sl.samples.size
        diag = np.diag(G)
        ok = diag > SKIP_FLOOR
        if not ok.any():
            skipped[k] = True
            warnings.warn(f"all dictionary denominators vanish at slice {k}; slice skipped")
            continue
        vals = np.where(ok, quadratic_sup(F[k], np.where(ok, diag, 1.0)), 0.0)
        idx[k] = int(np.argmax(vals))
        member[k] = vals[idx[k]]
        span[k] = 0.25 * float(F[k] @ np.linalg.pinv(G, rcond=PINV_RCOND, hermitian=True) @ F[k])
    return DGProfile(t=Z.t.copy(), span_value=np.maximum(span, 0.0), member_value=member,
                     sup_index=idx, skipped=skipped, numerator=F)


def dg_rate(Z, gen, ctx, dictionary, over="span"):
    """Time integral of the Dawson-Gaertner integrand (``over`` = "span" or "members")."""
    prof = dg_profile(Z, gen, ctx, dictionary)
    vals = prof.span_value if over == "span" else prof.member_value
    return _trapezoid(vals, prof.t)


@dataclass(frozen=True, eq=False)
class FeedbackControl(ControlField):
    """Optimal feedback ``h~`` reconstructed on the slice tables."""

    slices: tuple = ()
    times: Optional[np.ndarray] = None
    hbar_tables: tuple = ()

    def __call__(self, t, x, y):
        return self._eval(float(t), np.asarray(x, dtype=float), np.asarray(y, dtype=float))

    def _at_slice(self, k, x, y):
        xs, ys, L1, L2, hbar = self.slices[k]
        shape = np.broadcast(x, y).shape
        xb = np.broadcast_to(x, shape)
        yb = np.broadcast_to(y, shape)
        pts = np.stack([xb.ravel(), np.clip(yb, ys[0], ys[-1]).ravel()], axis=-1)
        hb = hbar(xb.ravel())
        if ys.size == 1:
            l1 = np.interp(xb.ravel(), xs, L1[:, 0])
            l2 = np.interp(xb.ravel(), xs, L2[:, 0])
        else:
            l1 = RegularGridInterpolator((xs, ys), L1, bounds_error=False, fill_value=None)(pts)
            l2 = RegularGridInterpolator((xs, ys), L2, bounds_error=False, fill_value=None)(pts)
        return (l1 * hb).reshape(shape), (l2 * hb).reshape(shape)

    def _eval(self, t, x, y):
        times = self.times
        k = int(np.clip(np.searchsorted(times, t), 0, times.size - 1))
        if abs(times[k] - t) <= 1e-12 or k == 0:
            return self._at_slice(k, x, y)
        k0 = k - 1
        th = (t - times[k0]) / (times[k] - times[k0])
        a1, a2 = self._at_slice(k0, x, y)
        b1, b2 = self._at_slice(k, x, y)
        return (1 - th) * a1 + th * b1, (1 - th) * a2 + th * b2


def optimal_control_from_target(ctx, Z, gen, dictionary, return_diagnostics=False):
    """Reconstruct ``h~`` from a target path.

    Per slice, ``hbar = sum_k c_k phi_k'`` with ``E[phi' phi'^T] c = F`` and
    ``F_j = <Zdot - Lbar* Z, phi_j>``; then
    ``h~1 = (sigma + tau1 Phi_y) hbar / (2 D_bar)``, ``h~2 = tau2 Phi_y hbar / (2 D_bar)``.
    """
    F = _defect(Z, gen)
    slices, hbars = [], []
    worst = 0.0
    coeffs = np.zeros_like(F)
    for k in range(ctx.n_slices):
        sl = ctx.slice(k)
        fl = sl.fields
        Dbar = fl.D_bar
        if np.any(Dbar < DEGENERACY_FLOOR):
            raise DegeneracyFault(f"D_bar = {Dbar.min():.3g} below {DEGENERACY_FLOOR} at slice {k}")
        d1 = dictionary.values(sl.samples, 1)
        G0 = d1 @ d1.T / sl.samples.size
        c, *_ = np.linalg.lstsq(G0, F[k], rcond=PINV_RCOND)
        scale = np.linalg.norm(F[k])
        if scale > 0:
            rel = np.linalg.norm(G0 @ c - F[k]) / scale
            worst = max(worst, rel)
            if rel > REPRODUCTION_TOL:
                raise RankFault(
                    f"least-squares representer fails at slice {k} (relative residual {rel:.2e}, "
                    f"condition number {np.linalg.cond(G0):.3e})")
        coeffs[k] = c
        hbar_tab = c @ dictionary.values(sl.xs, 1)
        L1 = (fl.sigma + fl.tau1 * fl.phi_y) / (2 * Dbar[:, None])
        L2 = fl.tau2 * fl.phi_y / (2 * Dbar[:, None])
        spline = CubicSpline(sl.xs, hbar_tab)
        slices.append((sl.xs, fl.y, np.asarray(L1), np.asarray(L2), spline))
        hbars.append(hbar_tab)
    zero = not np.any(coeffs)
    ctrl = FeedbackControl(fn=None, bound=math.inf, is_zero=zero, name="optimal_feedback",
                           slices=tuple(slices), times=ctx.t.copy(), hbar_tables=tuple(hbars))
    if return_diagnostics:
        return ctrl, {"reproduction_residual": worst, "coefficients": coeffs}
    return ctrl


def quarter_inverse_diffusion_cost(ctx, hbar_tables):
    """``1/4 int E[hbar^2 / D_bar] ds`` from tabulated ``hbar``."""
    per = np.empty(ctx.n_slices)
    for k in range(ctx.n_slices):
        sl = ctx.slice(k)
        per[k] = sl.expect(hbar_tables[k] ** 2 / sl.fields.D_bar)
    return 0.25 * _trapezoid(per, ctx.t)


@dataclass
class RateReport:
    variational_cost: float
    dg_rate: float
    dg_rate_members: float
    sup_index: list
    galerkin_residual: float
    reproduction_residual: Optional[float] = None
    round_trip_cost: Optional[float] = None
    round_trip_dg: Optional[float] = None
    control: Optional[str] = None
    skipped_slices: int = 0

    def __post_init__(self):
        for name in ("variational_cost", "dg_rate", "dg_rate_members"):
            if getattr(self, name) < 0:
                raise NumericalFault(f"{name} is negative")

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def rate_study(ctx, h, dictionary, dt=None, gen=None):
    """Forcing, limit path, both rates and the optimal-control round trip for ``h``."""
    gen = assemble_limit_generator(ctx, dictionary) if gen is None else gen
    Zh = solve_limit_ode(gen, control_forcing(ctx, h, dictionary), dt)
    prof = dg_profile(Zh, gen, ctx, dictionary)
    cost = variational_cost(ctx, h)
    h_opt, diag = optimal_control_from_target(ctx, Zh, gen, dictionary, return_diagnostics=True)
    Zt = solve_limit_ode(gen, control_forcing(ctx, h_opt, dictionary), dt)
    return RateReport(
        variational_cost=cost,
        dg_rate=_trapezoid(prof.span_value, prof.t),
        dg_rate_members=_trapezoid(prof.member_value, prof.t),
        sup_index=[int(i) for i in prof.sup_index],
        galerkin_residual=gen.max_retained_residual(),
        reproduction_residual=float(diag["reproduction_residual"]),
        round_trip_cost=variational_cost(ctx, h_opt),
        round_trip_dg=dg_rate(Zt, gen, ctx, dictionary),
        control=getattr(h, "name", "custom"),
        skipped_slices=int(prof.skipped.sum()),
    )
