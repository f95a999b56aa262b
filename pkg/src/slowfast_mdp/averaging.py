"""Corrected local coefficients and their pi-averages.

    gamma1 = b Phi_x + g Phi_y + sigma tau1 Phi_xy,   gamma = gamma1 + c
    D1     = b Phi + sigma tau1 Phi_y,                D     = D1 + sigma^2/2
    gamma_bar = int gamma dpi,  D_bar = int D dpi
    D_bar_alt = 1/2 int ((tau2 Phi_y)^2 + (sigma + tau1 Phi_y)^2) dpi

Everything is evaluated for a batch of slow states sharing one measure,
which is how the simulation and rate modules consume it.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from threading import Lock
from typing import Callable

import numpy as np

from .equilibrium import DEFAULT_GRID, EquilibriumBatch, _eval_rows
from .errors import ConfigError, UnsupportedFault
from .measures import MeasureHandle
from .poisson import cell_rows, hermite_interp, x_step


@dataclass(frozen=True, eq=False)
class FrozenFields:
    """Equilibrium, corrector and coefficient arrays on an (x, y) tensor grid."""

    xs: np.ndarray
    mu: MeasureHandle
    y: np.ndarray
    eq: EquilibriumBatch
    phi: np.ndarray
    phi_y: np.ndarray
    phi_x: np.ndarray
    phi_xy: np.ndarray
    b: np.ndarray
    c: np.ndarray
    g: np.ndarray
    sigma: np.ndarray
    tau1: np.ndarray
    tau2: np.ndarray
    gamma_bar: np.ndarray
    D_bar: np.ndarray
    D_bar_alt: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    alpha_tilde: np.ndarray
    alpha: np.ndarray

    def integrate(self, values):
        return self.eq.integrate(values)

    @property
    def gamma1(self):
        return self.b * self.phi_x + self.g * self.phi_y + self.sigma * self.tau1 * self.phi_xy

    @property
    def D1(self):
        return self.b * self.phi + self.sigma * self.tau1 * self.phi_y

    @property
    def noise_loadings(self):
        """``(s1, s2, s3)`` with ``s1^2 + s2^2 + s3^2 = 2 D_bar``.

        ``s1 = int (sigma + tau1 Phi_y) dpi`` and ``s2 = int tau2 Phi_y dpi``
        are the loadings of W and B in the averaged noise; ``s3`` carries the
        remaining variance (nonnegative by Jensen) on an independent stream.
        """
        s3 = np.sqrt(np.maximum(2 * self.D_bar - self.s1 ** 2 - self.s2 ** 2, 0.0))
        s3 = np.where(s3 < 1e-7 * np.sqrt(np.maximum(2 * self.D_bar, 1e-300)), 0.0, s3)
        return self.s1, self.s2, s3


_CACHE: OrderedDict = OrderedDict()
_CACHE_SIZE = 32
_LOCK = Lock()


def frozen_fields(model, xs, mu, grid=DEFAULT_GRID):
    """Memoised :class:`FrozenFields` for slow states ``xs`` and measure ``mu``."""
    xs = np.atleast_1d(np.asarray(xs, dtype=float))
    key = (model, grid, xs.tobytes(), mu.fingerprint)
    with _LOCK:
        hit = _CACHE.get(key)
        if hit is not None:
            _CACHE.move_to_end(key)
            return hit
    out = _compute_fields(model, xs, mu, grid)
    with _LOCK:
        _CACHE[key] = out
        if len(_CACHE) > _CACHE_SIZE:
            _CACHE.popitem(last=False)
    return out


def _compute_fields(model, xs, mu, grid):
    B = xs.size
    if model.fast_x_free or model.degenerate:
        eq = EquilibriumBatch(model, xs[:1], mu, grid)
        phi, phi_y, _, _, _ = cell_rows(model, eq)
        eq = _broadcast_batch(eq, xs)
        phi = np.broadcast_to(phi, (B, phi.shape[1]))
        phi_y = np.broadcast_to(phi_y, (B, phi_y.shape[1]))
        zeros = np.zeros(phi.shape)
        phi_x, phi_xy = zeros, zeros
    else:
        eq = EquilibriumBatch(model, xs, mu, grid)
        phi, phi_y, _, _, _ = cell_rows(model, eq)
        h = np.array([x_step(x) for x in xs])
        d = model.derivatives
        if "phi_x" in d and "phi_xy" in d:
            phi_x = d["phi_x"](xs[:, None], eq.y[None, :], mu)
            phi_xy = d["phi_xy"](xs[:, None], eq.y[None, :], mu)
        else:
            shifted = EquilibriumBatch(model, np.concatenate([xs + h, xs - h]), mu, grid)
            u, u_y, _, _, _ = cell_rows(model, shifted, check_centering=False)
            phi_x = (u[:B] - u[B:]) / (2 * h[:, None])
            phi_xy = (u_y[:B] - u_y[B:]) / (2 * h[:, None])
    y = eq.y
    shape = (B, y.size)

    def ev(fn):
        return np.broadcast_to(np.asarray(fn(xs[:, None], y[None, :], mu), dtype=float), shape)

    b, c, g = ev(model.b), ev(model.c), ev(model.g)
    sigma, tau1, tau2 = ev(model.sigma), ev(model.tau1), ev(model.tau2)
    gamma = c + b * phi_x + g * phi_y + sigma * tau1 * phi_xy
    D = b * phi + sigma * tau1 * phi_y + 0.5 * sigma * sigma
    lead = sigma + tau1 * phi_y
    other = tau2 * phi_y
    return FrozenFields(
        xs=xs, mu=mu, y=y, eq=eq, phi=phi, phi_y=phi_y, phi_x=phi_x, phi_xy=phi_xy,
        b=b, c=c, g=g, sigma=sigma, tau1=tau1, tau2=tau2,
        gamma_bar=eq.integrate(gamma), D_bar=eq.integrate(D),
        D_bar_alt=0.5 * eq.integrate(other * other + lead * lead),
        s1=eq.integrate(lead), s2=eq.integrate(other),
        alpha_tilde=eq.integrate(phi_y), alpha=eq.integrate(phi_y * phi_y),
    )


class _BroadcastBatch:
    """View of a one-row equilibrium batch repeated for several slow states."""

    def __init__(self, eq, xs):
        self.model, self.xs, self.mu, self.grid = eq.model, xs, eq.mu, eq.grid
        self.y, self.dy, self.ymid, self.w = eq.y, eq.dy, eq.ymid, eq.w
        B = xs.size
        for name in ("f", "a", "fm", "am", "U", "Um", "density"):
            arr = getattr(eq, name)
            setattr(self, name, np.broadcast_to(arr[:1], (B,) + arr.shape[1:]))
        self.log_norm = np.broadcast_to(eq.log_norm[:1], (B,))
        self.tail_mass = np.broadcast_to(eq.tail_mass[:1], (B,))
        self._row_integral = eq.integrate

    def integrate(self, values):
        values = np.asarray(values, dtype=float)
        return (values * self.density) @ self.w

    def __len__(self):
        return self.xs.size


def _broadcast_batch(eq, xs):
    return _BroadcastBatch(eq, xs)


# ---------------------------------------------------------------------------
# public operations

def local_coefficients(model, cell, x, y, mu):
    """Return ``(gamma, gamma1, D, D1)`` at fast state(s) ``y``.

    ``cell`` must be the corrector solved at ``(x, mu)``.  Coefficients are
    evaluated exactly at ``y``; corrector values are Hermite-interpolated.
    """
    if cell.mu.fingerprint != mu.fingerprint or cell.x != float(x):
        raise ConfigError("cell was solved at a different (x, mu)")
    y = np.asarray(y, dtype=float)
    phi, phi_y = cell(y), cell.derivative(y)
    if model.fast_x_free or model.degenerate:
        phi_x = phi_xy = np.zeros_like(phi)
    else:
        fl = frozen_fields(model, [x], mu, _grid_for(cell))
        # phi_xy is the y-derivative of phi_x, so Hermite applies
        phi_x = hermite_interp(fl.y, fl.phi_x[0], fl.phi_xy[0], y)
        phi_xy = np.interp(y, fl.y, fl.phi_xy[0])

    def ev(fn):
        return np.broadcast_to(np.asarray(fn(x, y, mu), dtype=float), y.shape)

    b, c, g = ev(model.b), ev(model.c), ev(model.g)
    sigma, tau1 = ev(model.sigma), ev(model.tau1)
    gamma1 = b * phi_x + g * phi_y + sigma * tau1 * phi_xy
    D1 = b * phi + sigma * tau1 * phi_y
    return c + gamma1, gamma1, D1 + 0.5 * sigma * sigma, D1


def _grid_for(cell):
    from .equilibrium import GridSpec
    if cell.y.size == 1:
        return DEFAULT_GRID
    return GridSpec(n=cell.y.size, half_width=float(cell.y[-1]))


def averaged_coefficients(model, x, mu, grid=DEFAULT_GRID):
    """Homogenised drift and diffusion ``(gamma_bar, D_bar)`` at ``(x, mu)``."""
    fl = frozen_fields(model, [x], mu, grid)
    return float(fl.gamma_bar[0]), float(fl.D_bar[0])


def averaged_diffusion_alt(model, x, mu, grid=DEFAULT_GRID):
    """Integration-by-parts form of ``D_bar``."""
    return float(frozen_fields(model, [x], mu, grid).D_bar_alt[0])


def example_constants(model, grid=DEFAULT_GRID):
    """``alpha_tilde = int Phi' dpi`` and ``alpha = int Phi'^2 dpi`` at x = 0."""
    fl = frozen_fields(model, [0.0], MeasureHandle.dirac(0.0), grid)
    return {"alpha_tilde": float(fl.alpha_tilde[0]), "alpha": float(fl.alpha[0])}


MIXTURE_STEP = 1e-3


def lfd_averaged(model, x, mu, z, numeric=False, grid=DEFAULT_GRID):
    """Linear functional derivatives ``(d gamma_bar/dm, d D_bar/dm)`` at ``z``.

    The analytic callbacks of the model are returned as given.  The numeric
    path differentiates along the mixture ``(1-s) mu + s delta_z`` with a
    Richardson-extrapolated one-sided difference, which yields the
    derivative normalised so that ``<mu, dF/dm> = 0``.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if not numeric and model.lfd_gamma_bar is not None and model.lfd_D_bar is not None:
        return (np.asarray(model.lfd_gamma_bar(x, mu, z), dtype=float),
                np.asarray(model.lfd_D_bar(x, mu, z), dtype=float))
    if mu.kind != "empirical":
        raise UnsupportedFault("numeric linear functional derivatives need an empirical measure")
    base = frozen_fields(model, [x], mu, grid)
    g0, d0 = base.gamma_bar[0], base.D_bar[0]
    dg = np.empty(z.size)
    dd = np.empty(z.size)
    s = MIXTURE_STEP
    for k, zk in enumerate(z):
        vals = []
        for step in (s, s / 2):
            fl = _compute_fields(model, np.array([float(x)]), mu.mixture(zk, step), grid)
            vals.append(((fl.gamma_bar[0] - g0) / step, (fl.D_bar[0] - d0) / step))
        dg[k] = 2 * vals[1][0] - vals[0][0]
        dd[k] = 2 * vals[1][1] - vals[0][1]
    return dg, dd


@dataclass(frozen=True)
class AveragedCoefficients:
    """Callable bundle of the homogenised coefficients of a model."""

    gamma_bar: Callable
    D_bar: Callable
    D_bar_alt: Callable
    gamma: Callable
    D: Callable
    gamma1: Callable
    D1: Callable
    alpha_tilde: float | None
    alpha: float | None
    provenance: str


def averaged_bundle(model, grid=DEFAULT_GRID):
    from .poisson import solve_cell_problem

    def local(k):
        def fn(x, y, mu):
            cell = solve_cell_problem(model, x, mu, grid=grid)
            return local_coefficients(model, cell, x, y, mu)[k]
        return fn

    consts = {"alpha_tilde": None, "alpha": None}
    if model.fast_x_free and not model.degenerate:
        consts = example_constants(model, grid)
    return AveragedCoefficients(
        gamma_bar=lambda x, mu: averaged_coefficients(model, x, mu, grid)[0],
        D_bar=lambda x, mu: averaged_coefficients(model, x, mu, grid)[1],
        D_bar_alt=lambda x, mu: averaged_diffusion_alt(model, x, mu, grid),
        gamma=local(0), gamma1=local(1), D=local(2), D1=local(3),
        provenance=f"{model.name}: quadrature cell solves on {grid}",
        **consts,
    )
