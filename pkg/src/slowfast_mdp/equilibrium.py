"""Frozen invariant density of the fast process.

For fixed ``(x, mu)`` the fast generator is ``L phi = f phi' + a phi''`` and
its invariant density is explicit in one dimension,

    pi(y) = Z / a(y) * exp(U(y)),   U(y) = int_0^y f/a.

``U`` is accumulated with Simpson's rule using midpoint evaluations, so the
density is accurate to O(dy^4) node-wise; normalisation is done in log-space.
"""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import EllipticityFault, GridTooSmallFault, NonFiniteFault
from .measures import MeasureHandle

TAIL_TOL = 1e-8
N_MOMENTS = 8


@dataclass(frozen=True)
class GridSpec:
    """Uniform fast-variable grid; ``half_width=None`` picks a model default."""

    n: int = 2049
    half_width: float | None = None

    def nodes(self, model):
        hw = self.half_width if self.half_width is not None else default_half_width(model)
        return np.linspace(-hw, hw, self.n)


DEFAULT_GRID = GridSpec()
_HW_CACHE = weakref.WeakKeyDictionary()


def default_half_width(model):
    """``10 sqrt(a_max/kappa)`` plus the largest centre shift ``|eta|/kappa``."""
    try:
        return _HW_CACHE[model]
    except KeyError:
        pass
    if model.degenerate:
        _HW_CACHE[model] = 0.0
        return 0.0
    y = np.linspace(-8, 8, 161)[None, :]
    x = np.linspace(-4, 4, 9)[:, None]
    a_max, shift = 0.0, 0.0
    for mu in (MeasureHandle.dirac(0.0), MeasureHandle.empirical(np.linspace(-2, 2, 17))):
        a_max = max(a_max, float(np.max(model.a(x, y, mu))))
        shift = max(shift, float(np.max(np.abs(model.eta_fn(x, y, mu)))))
    hw = 10.0 * math.sqrt(a_max / model.kappa) + shift / model.kappa
    _HW_CACHE[model] = hw
    return hw


def trapezoid_weights(y):
    if y.size == 1:
        return np.ones(1)
    dy = y[1] - y[0]
    w = np.full(y.size, dy)
    w[0] = w[-1] = dy / 2
    return w


def _eval_rows(model, fn, xs, y, mu):
    """Evaluate ``fn(x, y, mu)`` on the (len(xs), len(y)) tensor grid."""
    if model.fast_x_free:
        row = fn(xs[:1, None], y[None, :], mu)
        return np.broadcast_to(row, (xs.size, y.size))
    return fn(xs[:, None], y[None, :], mu)


class EquilibriumBatch:
    """Invariant densities for several slow states sharing one measure."""

    def __init__(self, model, xs, mu, grid=DEFAULT_GRID):
        xs = np.atleast_1d(np.asarray(xs, dtype=float))
        self.model, self.xs, self.mu, self.grid = model, xs, mu, grid
        if model.degenerate:
            self._init_degenerate()
            return
        y = grid.nodes(model)
        dy = y[1] - y[0]
        ymid = y[:-1] + dy / 2
        f = _eval_rows(model, model.f, xs, y, mu)
        a = _eval_rows(model, model.a, xs, y, mu)
        fm = _eval_rows(model, model.f, xs, ymid, mu)
        am = _eval_rows(model, model.a, xs, ymid, mu)
        for arr in (f, a, fm, am):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteFault("non-finite fast coefficient on the y-grid")
        if np.min(a) <= 0 or np.min(am) <= 0:
            raise EllipticityFault(f"a(x,y,mu) reaches {min(a.min(), am.min()):.3e} <= 0")
        a_max = max(float(a.max()), float(am.max()))
        if y[-1] < 6 * math.sqrt(a_max / model.kappa) - 1e-12:
            raise GridTooSmallFault(
                f"grid half-width {y[-1]:.3g} < 6 sqrt(a_max/kappa) = "
                f"{6 * math.sqrt(a_max / model.kappa):.3g}")
        r, rm = f / a, fm / am
        dU = dy / 6 * (r[:, :-1] + 4 * rm + r[:, 1:])
        centre = y.size // 2
        U = np.zeros_like(r)
        U[:, centre + 1:] = np.cumsum(dU[:, centre:], axis=1)
        U[:, :centre] = -np.cumsum(dU[:, :centre][:, ::-1], axis=1)[:, ::-1]
        U -= U[:, [centre]] if y[centre] == 0 else np.interp(0.0, y, U[0])
        Um = U[:, :-1] + dy * (5 * r[:, :-1] + 8 * rm - r[:, 1:]) / 24

        w = trapezoid_weights(y)
        ell = U - np.log(a)
        lse = logsumexp(ell + np.log(w)[None, :], axis=1)
        density = np.exp(ell - lse[:, None])

        tail_left = np.where(f[:, 0] > 0, density[:, 0] * a[:, 0] / np.maximum(f[:, 0], 1e-300), np.inf)
        tail_right = np.where(f[:, -1] < 0, density[:, -1] * a[:, -1] / np.maximum(-f[:, -1], 1e-300), np.inf)
        tail = tail_left + tail_right
        if np.any(tail > TAIL_TOL):
            k = int(np.argmax(tail))
            raise GridTooSmallFault(
                f"estimated tail mass {tail[k]:.3e} outside grid at x={xs[k]:.4g}")

        self.y, self.dy, self.ymid, self.w = y, dy, ymid, w
        self.f, self.a, self.fm, self.am = f, a, fm, am
        self.U, self.Um = U, Um
        self.density = density
        self.log_norm = -lse
        self.tail_mass = tail

    def _init_degenerate(self):
        # Point mass at the origin: every pi-average is an evaluation at y = 0.
        B = self.xs.size
        y = np.zeros(1)
        self.y, self.dy, self.ymid, self.w = y, 0.0, np.zeros(0), np.ones(1)
        zeros = np.zeros((B, 1))
        self.f = self.a = zeros
        self.fm = self.am = np.zeros((B, 0))
        self.U, self.Um = zeros, np.zeros((B, 0))
        self.density = np.ones((B, 1))
        self.log_norm = np.zeros(B)
        self.tail_mass = np.zeros(B)

    def integrate(self, values):
        """Trapezoid quadrature of ``values`` (shape (B, n) or (n,)) against pi."""
        values = np.asarray(values, dtype=float)
        return (values * self.density) @ self.w

    def __len__(self):
        return self.xs.size

    def __getitem__(self, k):
        return FrozenEquilibrium._from_batch(self, k)


def equilibrium_batch(model, xs, mu, grid=DEFAULT_GRID):
    return EquilibriumBatch(model, xs, mu, grid)


@dataclass(frozen=True, eq=False)
class FrozenEquilibrium:
    """Grid representation of ``pi(.; x, mu)``.

    ``density`` integrates to one under the trapezoid rule with weights
    ``w``; ``moments[k-1]`` holds ``int y^k dpi`` for ``k = 1..8``.
    """

    x: float
    mu: MeasureHandle
    y: np.ndarray
    dy: float
    w: np.ndarray
    density: np.ndarray
    log_norm: float
    tail_mass: float
    moments: np.ndarray
    f: np.ndarray
    a: np.ndarray
    fm: np.ndarray
    am: np.ndarray
    U: np.ndarray
    Um: np.ndarray
    degenerate: bool = False

    @classmethod
    def _from_batch(cls, batch, k):
        dens = batch.density[k]
        moments = np.array([(batch.y ** p * dens) @ batch.w for p in range(1, N_MOMENTS + 1)])
        return cls(
            x=float(batch.xs[k]), mu=batch.mu, y=batch.y, dy=batch.dy, w=batch.w,
            density=dens, log_norm=float(batch.log_norm[k]),
            tail_mass=float(batch.tail_mass[k]), moments=moments,
            f=np.asarray(batch.f[k]), a=np.asarray(batch.a[k]),
            fm=np.asarray(batch.fm[k]), am=np.asarray(batch.am[k]),
            U=batch.U[k], Um=batch.Um[k], degenerate=batch.model.degenerate,
        )

    @property
    def normalization(self):
        return float(self.density @ self.w)

    def integrate(self, values):
        return float(np.asarray(values, dtype=float) @ (self.density * self.w))

    def with_density(self, density):
        """Copy with a replacement density, renormalised (used for falsification)."""
        density = np.asarray(density, dtype=float)
        density = density / (density @ self.w)
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw["density"] = density
        return FrozenEquilibrium(**kw)


def invariant_density(model, x, mu, grid=DEFAULT_GRID):
    """Return the frozen invariant density at slow state ``x`` and measure ``mu``."""
    return EquilibriumBatch(model, [x], mu, grid)[0]


def _checked_values(fn, y):
    vals = np.broadcast_to(np.asarray(fn(y), dtype=float), y.shape)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise NonFiniteFault(f"non-finite integrand at node {int(bad[0])} (y={y[bad[0]]:.6g})")
    return vals


def equilibrium_average(fn, eq):
    """Trapezoid quadrature of ``fn(y)`` against ``eq``."""
    return eq.integrate(_checked_values(fn, eq.y))


def invariance_residual(model, eq, testfn):
    """Weak-form residual ``|int (f phi' + a phi'') dpi|``.

    ``testfn`` is a triple ``(phi, dphi, ddphi)`` of vectorised callables.
    """
    _, d1, d2 = testfn
    y = eq.y
    vals = eq.f * _checked_values(d1, y) + eq.a * _checked_values(d2, y)
    return abs(eq.integrate(vals))
