"""Centred one-dimensional Poisson (cell) problems and the doubled corrector.

The cell problem ``L u = -S`` with ``int u dpi = 0`` has the explicit
solution

    u'(y) = -1/(a pi)(y) * int_{-inf}^y S pi
          = -exp(-U(y)) * int_{-inf}^y (S/a) exp(U),

which is evaluated with Simpson's rule on the equilibrium grid (midpoint
values are available there).  The integral is accumulated from the left
up to the mode of ``exp(U)`` and from the right beyond it, which keeps the
tails free of cancellation.  ``u`` itself follows from ``u'`` by an
end-corrected trapezoid rule using the algebraic ``u''``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .equilibrium import DEFAULT_GRID, EquilibriumBatch, GridSpec, _eval_rows
from .errors import (CenteringFault, CFLFault, ConfigError, ExtrapolationFault,
                     HorizonTooShortFault, NonFiniteFault, PerturbationFault)
from .measures import MeasureHandle

CENTERING_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class CellSolution:
    """Centred solution ``u`` of ``f u' + a u'' + S = 0`` on the y-grid."""

    x: float
    mu: MeasureHandle
    y: np.ndarray
    u: np.ndarray
    u_y: np.ndarray
    u_yy: np.ndarray
    source: np.ndarray
    tag: str
    residual: float
    eq: object

    def __call__(self, y):
        return self._interp(self.u, self.u_y, y)

    def derivative(self, y):
        return self._interp(self.u_y, self.u_yy, y)

    def _interp(self, arr, darr, y):
        y = np.asarray(y, dtype=float)
        if self.y.size == 1:
            return np.full(y.shape, arr[0])
        if np.any(y < self.y[0] - 1e-12) or np.any(y > self.y[-1] + 1e-12):
            raise ExtrapolationFault("evaluation point outside the cell grid")
        return hermite_interp(self.y, arr, darr, y)


def hermite_interp(grid, values, slopes, y):
    """Piecewise cubic Hermite interpolation on a uniform grid."""
    h = grid[1] - grid[0]
    t = np.clip((y - grid[0]) / h, 0.0, grid.size - 1 - 1e-12)
    k = np.minimum(t.astype(int), grid.size - 2)
    s = t - k
    h00 = (1 + 2 * s) * (1 - s) ** 2
    h10 = s * (1 - s) ** 2
    h01 = s * s * (3 - 2 * s)
    h11 = s * s * (s - 1)
    return (h00 * values[k] + h10 * h * slopes[k]
            + h01 * values[k + 1] + h11 * h * slopes[k + 1])


def _solve_rows(eqb, S, Sm):
    """Vectorised cell solve for every row of an equilibrium batch."""
    B = len(eqb)
    if eqb.model.degenerate:
        z = np.zeros((B, 1))
        return z, z.copy(), z.copy(), np.zeros(B)
    y, dy = eqb.y, eqb.dy
    a, am, f = np.asarray(eqb.a), np.asarray(eqb.am), np.asarray(eqb.f)
    q, qm = S / a, Sm / am
    U, Um = eqb.U, eqb.Um
    top = U.max(axis=1, keepdims=True)
    e, em = np.exp(U - top), np.exp(Um - top)
    piece = dy / 6 * (q[:, :-1] * e[:, :-1] + 4 * qm * em + q[:, 1:] * e[:, 1:])
    tail_left, tail_right = _tail_integrals(q, qm, f, a, np.asarray(eqb.fm), am, e, dy)
    left = np.empty_like(q)
    left[:, 0] = tail_left
    left[:, 1:] = tail_left[:, None] + np.cumsum(piece, axis=1)
    right = np.empty_like(q)
    right[:, -1] = tail_right
    right[:, :-1] = tail_right[:, None] + np.cumsum(piece[:, ::-1], axis=1)[:, ::-1]
    peak = np.argmax(U, axis=1)
    use_left = np.arange(y.size)[None, :] <= peak[:, None]
    inv = np.exp(top - U)
    u_y = np.where(use_left, -left, right) * inv
    u_yy = (-S - f * u_y) / a
    trap = dy / 2 * (u_y[:, :-1] + u_y[:, 1:])
    u = np.zeros_like(u_y)
    u[:, 1:] = np.cumsum(trap, axis=1)
    u -= dy * dy / 12 * (u_yy - u_yy[:, :1])
    u -= eqb.integrate(u)[:, None]
    residual = _fd_residual(eqb, u, S)
    return u, u_y, u_yy, residual


def _tail_integrals(q, qm, f, a, fm, am, e, dy):
    """Two-term integration-by-parts asymptotics of the tails beyond the grid.

    With ``r = f/a`` one has ``int_{-inf}^{y0} q e^U ~ e^{U0} (q/r - (q/r)'/r)``
    at the left end when ``r > 0`` there, and the mirror image on the right.
    """
    r = f / a
    rm = fm / am
    out = []
    for end, mid, sign in ((0, 0, 1.0), (-1, -1, -1.0)):
        r0 = r[:, end]
        ok = sign * r0 > 0
        safe = np.where(ok, r0, 1.0)
        h0 = q[:, end] / safe
        hm = qm[:, mid] / np.where(rm[:, mid] != 0, rm[:, mid], 1.0)
        dh = sign * (hm - h0) / (dy / 2)
        out.append(np.where(ok, sign * (h0 - dh / safe) * e[:, end], 0.0))
    return out[0], out[1]


def _fd_residual(eqb, u, S):
    """Max interior |f D1 u + a D2 u + S| on nodes carrying non-negligible mass."""
    dy = eqb.dy
    d1 = (u[:, 2:] - u[:, :-2]) / (2 * dy)
    d2 = (u[:, 2:] - 2 * u[:, 1:-1] + u[:, :-2]) / (dy * dy)
    res = np.asarray(eqb.f)[:, 1:-1] * d1 + np.asarray(eqb.a)[:, 1:-1] * d2 + S[:, 1:-1]
    dens = eqb.density[:, 1:-1]
    bulk = dens > 1e-12 * dens.max(axis=1, keepdims=True)
    return np.max(np.where(bulk, np.abs(res), 0.0), axis=1)


def _source_rows(model, fn, eqb):
    xs, mu = eqb.xs, eqb.mu
    if model.degenerate:
        return np.asarray(fn(xs[:, None], eqb.y[None, :], mu), dtype=float), np.zeros((len(xs), 0))
    S = np.asarray(_eval_rows(model, fn, xs, eqb.y, mu), dtype=float)
    Sm = np.asarray(_eval_rows(model, fn, xs, eqb.ymid, mu), dtype=float)
    if not (np.all(np.isfinite(S)) and np.all(np.isfinite(Sm))):
        raise NonFiniteFault("non-finite inhomogeneity on the y-grid")
    return S, Sm


def cell_rows(model, eqb, check_centering=True):
    """Solve ``L Phi = -b`` for every row of ``eqb``; returns (u, u_y, u_yy, res, b)."""
    S, Sm = _source_rows(model, model.b, eqb)
    if model.degenerate:
        z = np.zeros_like(S)
        return z, z.copy(), z.copy(), np.zeros(len(eqb)), S
    if check_centering:
        defect = np.abs(eqb.integrate(S))
        if np.any(defect > CENTERING_TOL):
            raise CenteringFault(float(defect.max()))
    u, u_y, u_yy, res = _solve_rows(eqb, S, Sm)
    return u, u_y, u_yy, res, S


def solve_cell_problem(model, x, mu, eq=None, grid=DEFAULT_GRID):
    """Centred corrector ``Phi`` solving ``L_{x,mu} Phi = -b``."""
    eqb = EquilibriumBatch(model, [x], mu, grid if eq is None else _grid_of(eq, grid))
    u, u_y, u_yy, res, S = cell_rows(model, eqb)
    return CellSolution(x=float(x), mu=mu, y=eqb.y, u=u[0], u_y=u_y[0], u_yy=u_yy[0],
                        source=S[0], tag="Phi", residual=float(res[0]), eq=eqb[0])


def solve_centered_poisson(F, model, x, mu, eq=None, grid=DEFAULT_GRID):
    """Corrector ``Xi`` solving ``L Xi = -(F - int F dpi)`` with ``int Xi dpi = 0``."""
    eqb = EquilibriumBatch(model, [x], mu, grid if eq is None else _grid_of(eq, grid))
    S, Sm = _source_rows(model, F, eqb)
    mean = eqb.integrate(S)
    S, Sm = S - mean[:, None], Sm - mean[:, None]
    if model.degenerate:
        z = np.zeros_like(S)
        return CellSolution(float(x), mu, eqb.y, z[0], z[0], z[0], S[0], "Xi", 0.0, eqb[0])
    u, u_y, u_yy, res = _solve_rows(eqb, S, Sm)
    return CellSolution(x=float(x), mu=mu, y=eqb.y, u=u[0], u_y=u_y[0], u_yy=u_yy[0],
                        source=S[0], tag="Xi", residual=float(res[0]), eq=eqb[0])


def _grid_of(eq, default):
    if eq.y.size == 1:
        return default
    return GridSpec(n=eq.y.size, half_width=float(eq.y[-1]))


def x_step(x):
    return 1e-4 * (1.0 + abs(float(x)))


def cell_x_derivatives(model, x, mu, grid=DEFAULT_GRID):
    """Return ``(Phi_x, Phi_xy)`` on the grid by central differences in x.

    Analytic callbacks ``derivatives["phi_x"]`` / ``["phi_xy"]`` take
    precedence; models whose fast block ignores ``x`` give exact zeros.
    """
    y = grid.nodes(model) if not model.degenerate else np.zeros(1)
    d = model.derivatives
    if "phi_x" in d and "phi_xy" in d:
        return (np.asarray(d["phi_x"](x, y, mu), dtype=float),
                np.asarray(d["phi_xy"](x, y, mu), dtype=float))
    if model.fast_x_free or model.degenerate:
        return np.zeros(y.size), np.zeros(y.size)
    h = x_step(x)
    eqb = EquilibriumBatch(model, [x + h, x - h], mu, grid)
    u, u_y, _, _, _ = cell_rows(model, eqb)
    return (u[0] - u[1]) / (2 * h), (u_y[0] - u_y[1]) / (2 * h)


class GridFunction:
    """Function of y known on a uniform grid (linear interpolation)."""

    def __init__(self, y, values):
        self.y = y
        self.values = values

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        if self.y.size == 1:
            return np.full(y.shape, self.values[0])
        return np.interp(y, self.y, self.values)


def measure_derivative_values(model, x, atoms, j, grid, delta=None):
    """``N (Phi(mu_j^+) - Phi(mu_j^-)) / (2 delta)`` on the grid."""
    if atoms.kind != "empirical":
        raise ConfigError("measure derivatives need an empirical measure")
    xj = float(atoms.nodes[j])
    delta = x_step(xj) if delta is None else float(delta)
    plus, minus = atoms.with_atom(j, xj + delta), atoms.with_atom(j, xj - delta)
    N = atoms.size
    vals = []
    for mu in (plus, minus):
        eqb = EquilibriumBatch(model, [x], mu, grid)
        vals.append(cell_rows(model, eqb, check_centering=False)[0][0])
    out = N * (vals[0] - vals[1]) / (2 * delta)
    if not np.all(np.isfinite(out)):
        raise PerturbationFault(f"non-finite measure difference at atom {j}")
    return out


def cell_measure_derivative(model, cell, atoms, j, delta=None, grid=None):
    """Lions derivative ``d_mu Phi(x, ., mu)[x_j]`` via the empirical projection.

    ``atoms`` must be the empirical measure at which ``cell`` was solved;
    ``j`` indexes its (sorted) atoms.
    """
    if cell.mu.fingerprint != atoms.fingerprint:
        raise ConfigError("cell was not solved at the supplied empirical measure")
    if grid is None:
        grid = DEFAULT_GRID if cell.y.size == 1 else GridSpec(cell.y.size, float(cell.y[-1]))
    return GridFunction(cell.y, measure_derivative_values(model, cell.x, atoms, j, grid, delta))


# ---------------------------------------------------------------------------
# doubled corrector

@dataclass(frozen=True, eq=False)
class TensorCellSolution:
    """``chi`` on the tensor grid ``y x ybar`` with its diagnostics."""

    x: float
    xbar: float
    mu: MeasureHandle
    y: np.ndarray
    ybar: np.ndarray
    chi: np.ndarray
    T_max: float
    dt: float
    tail: float
    residual: float
    variant: str


def _apply_generator(v, f, a, dy):
    """``f v' + a v''`` with linear extrapolation (v'' = 0) at both ends."""
    d1 = np.empty_like(v)
    d2 = np.zeros_like(v)
    d1[1:-1] = (v[2:] - v[:-2]) / (2 * dy)
    d1[0] = (v[1] - v[0]) / dy
    d1[-1] = (v[-1] - v[-2]) / dy
    d2[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / (dy * dy)
    return f * d1 + a * d2


def _semigroup_quadrature(v1, f1, a1, v2, f2, a2, dy, T, dt, block=1024):
    """Trapezoid-in-time integral of ``P_t v1 (x) P_t v2`` with explicit Euler.

    Iterates are buffered in blocks so the time sum becomes a matrix product
    with a fixed summation order.
    """
    n = int(round(T / dt))
    acc = np.zeros((v1.size, v2.size))
    p1, p2 = v1.copy(), v2.copy()
    scale = max(np.abs(v1).max(), np.abs(v2).max(), 1.0)
    buf1 = np.empty((block, v1.size))
    buf2 = np.empty((block, v2.size))
    wts = np.empty(block)
    fill = 0
    for k in range(n + 1):
        if k > 0:
            p1 = p1 + dt * _apply_generator(p1, f1, a1, dy)
            p2 = p2 + dt * _apply_generator(p2, f2, a2, dy)
            if k % 256 == 0 and not (np.abs(p1).max() < 1e6 * scale
                                     and np.abs(p2).max() < 1e6 * scale):
                raise CFLFault(f"semigroup propagation unstable at step {k} (dt={dt:.3e})")
        buf1[fill], buf2[fill] = p1, p2
        wts[fill] = 0.5 if k in (0, n) else 1.0
        fill += 1
        if fill == block or k == n:
            acc += (buf1[:fill] * wts[:fill, None]).T @ buf2[:fill]
            fill = 0
    return dt * acc, p1, p2


def tensor_corrector(eq1, b_vals, eq2, g_vals, T_max, dt=None, richardson=True):
    """Core doubled-corrector quadrature on two frozen equilibria.

    Returns ``(chi, dt, tail, residual)`` where ``chi`` is doubly centred.
    """
    dy = eq1.dy
    if eq2.dy != dy or eq1.y.size != eq2.y.size:
        raise ConfigError("both copies must share the grid")
    a_max = max(eq1.a.max(), eq2.a.max())
    dt_max = 0.4 * dy * dy / a_max
    if dt is None:
        dt = dt_max
    if dt > dt_max * (1 + 1e-12):
        raise CFLFault(f"dt={dt:.3e} exceeds the stability bound {dt_max:.3e}")
    n = int(np.ceil(T_max / dt))
    dt = T_max / n
    chi, p1, p2 = _semigroup_quadrature(b_vals, eq1.f, eq1.a, g_vals, eq2.f, eq2.a, dy, T_max, dt)
    if richardson:
        half, _, _ = _semigroup_quadrature(b_vals, eq1.f, eq1.a, g_vals, eq2.f, eq2.a,
                                           dy, T_max, dt / 2)
        chi = 2 * half - chi
    w1 = eq1.density * eq1.w
    w2 = eq2.density * eq2.w
    mass1 = w1 > 1e-14 * w1.max()
    mass2 = w2 > 1e-14 * w2.max()
    decay = 2 * max(min(eq1.f[0] / -eq1.y[0], eq1.f[-1] / -eq1.y[-1]), 1e-12)
    tail = float(np.abs(p1[mass1]).max() * np.abs(p2[mass2]).max() / decay)
    if tail > 1e-4:
        raise HorizonTooShortFault(f"semigroup tail estimate {tail:.3e} > 1e-4; raise T_max")
    chi -= w1 @ chi @ w2
    residual = tensor_residual(chi, eq1, b_vals, eq2, g_vals)
    return chi, dt, tail, residual


def tensor_residual(chi, eq1, b_vals, eq2, g_vals, inner=0.5):
    """Max |L2 chi + b (x) G| over interior nodes of the central region.

    ``inner`` is the fraction of the half-width retained on each axis.
    """
    dy = eq1.dy
    d1y = (chi[2:, 1:-1] - chi[:-2, 1:-1]) / (2 * dy)
    d2y = (chi[2:, 1:-1] - 2 * chi[1:-1, 1:-1] + chi[:-2, 1:-1]) / dy ** 2
    d1z = (chi[1:-1, 2:] - chi[1:-1, :-2]) / (2 * dy)
    d2z = (chi[1:-1, 2:] - 2 * chi[1:-1, 1:-1] + chi[1:-1, :-2]) / dy ** 2
    L2 = (eq1.f[1:-1, None] * d1y + eq1.a[1:-1, None] * d2y
          + eq2.f[None, 1:-1] * d1z + eq2.a[None, 1:-1] * d2z)
    res = np.abs(L2 + np.outer(b_vals[1:-1], g_vals[1:-1]))
    m1 = np.abs(eq1.y[1:-1]) <= inner * eq1.y[-1]
    m2 = np.abs(eq2.y[1:-1]) <= inner * eq2.y[-1]
    return float(res[np.ix_(m1, m2)].max())


TENSOR_GRID = GridSpec(n=401)


def solve_doubled_corrector(model, x, xbar, mu, variant="chi_tilde", T_max=None, dt=None,
                            grid=TENSOR_GRID, G=None):
    """Doubled corrector ``chi`` (``variant="chi"``) or ``chi~`` (``"chi_tilde"``).

    ``chi(y, ybar) = int_0^T (P_t b(x,.,mu))(y) (P_t G(xbar,.,mu))(ybar) dt``
    with ``G = d_mu Phi(xbar,.,mu)[x]`` for ``chi`` and ``G = Phi(xbar,.,mu)``
    for ``chi_tilde``.  A callable ``G`` overrides the inhomogeneity.
    """
    if model.degenerate:
        raise ConfigError("the doubled corrector needs a fast process")
    if T_max is None:
        T_max = 20.0 / model.kappa
    eqb1 = EquilibriumBatch(model, [x], mu, grid)
    eqb2 = EquilibriumBatch(model, [xbar], mu, grid)
    eq1, eq2 = eqb1[0], eqb2[0]
    b_vals = np.asarray(model.b(x, eq1.y, mu), dtype=float)
    if abs(eq1.integrate(b_vals)) > CENTERING_TOL:
        raise CenteringFault(abs(eq1.integrate(b_vals)))
    if G is not None:
        g_vals = np.asarray(G(eq2.y), dtype=float)
    elif variant == "chi_tilde":
        g_vals = cell_rows(model, eqb2)[0][0]
    elif variant == "chi":
        if mu.kind != "empirical":
            raise ConfigError("variant 'chi' needs an empirical measure")
        hits = np.flatnonzero(np.abs(mu.nodes - x) <= 1e-12 * (1 + abs(x)))
        if hits.size == 0:
            raise ConfigError("variant 'chi' needs x to be an atom of mu")
        g_vals = measure_derivative_values(model, xbar, mu, int(hits[0]), grid)
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    chi, dt, tail, residual = tensor_corrector(eq1, b_vals, eq2, g_vals, T_max, dt)
    return TensorCellSolution(x=float(x), xbar=float(xbar), mu=mu, y=eq1.y, ybar=eq2.y,
                              chi=chi, T_max=float(T_max), dt=dt, tail=tail,
                              residual=residual, variant=variant if G is None else "synthetic")
