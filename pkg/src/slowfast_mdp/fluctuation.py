"""Test-function dictionaries, weighted Sobolev norms and fluctuation pairings.

The norms are

    ||phi||_n^2 = sum_{k<=n} int (1 + x^2)^(2n) (phi^(k))^2 dx
    |phi|_n     = sum_{k<=n} sup |phi^(k)|

and the fluctuation process is paired with a finite dictionary,
``z_j(t) = a_N sqrt(N) (<mu^N_t, phi_j> - <L(X_t), phi_j>)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from numpy.polynomial import hermite as _phys_hermite
from numpy.polynomial import polynomial as _poly
from scipy.optimize import minimize_scalar

from .errors import ConfigError, DivergenceFault, NumericalFault, ShapeMismatchFault

MAX_ORDER = 8
FD_STEP = 1e-4
FD_TOL = 1e-5


@dataclass(frozen=True, eq=False)
class TestFunction:
    """``deriv(x, k)`` returns the k-th derivative; ``decay`` is "schwartz" or "bounded"."""

    name: str
    deriv: Callable
    max_order: int = MAX_ORDER
    decay: str = "schwartz"

    __test__ = False  # not a pytest class

    def __call__(self, x):
        return self.deriv(np.asarray(x, dtype=float), 0)


def linear_combination(alpha, f1, beta, f2):
    order = min(f1.max_order, f2.max_order)
    decay = "schwartz" if f1.decay == f2.decay == "schwartz" else "bounded"
    return TestFunction(
        name=f"{alpha}*{f1.name}+{beta}*{f2.name}",
        deriv=lambda x, k: alpha * f1.deriv(x, k) + beta * f2.deriv(x, k),
        max_order=order, decay=decay)


def gaussian():
    """``exp(-x^2)``; derivatives via physicists' Hermite polynomials."""
    def deriv(x, k):
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        return (-1) ** k * _phys_hermite.hermval(x, coef) * np.exp(-x * x)
    return TestFunction("gaussian", deriv)


def _tanh_polys(n):
    polys = [np.array([0.0, 1.0])]
    one_minus_t2 = np.array([1.0, 0.0, -1.0])
    for _ in range(n):
        polys.append(_poly.polymul(_poly.polyder(polys[-1]), one_minus_t2))
    return polys


_TANH = _tanh_polys(MAX_ORDER)


def tanh_function():
    def deriv(x, k):
        return _poly.polyval(np.tanh(x), _TANH[k])
    return TestFunction("tanh", deriv, decay="bounded")


def sine():
    return TestFunction("sin", lambda x, k: np.sin(x + k * math.pi / 2), decay="bounded")


def zero_function():
    return TestFunction("zero", lambda x, k: np.zeros_like(np.asarray(x, dtype=float)))


def hermite_functions(x, n_max):
    """Orthonormal Hermite functions ``psi_0..psi_n_max`` at ``x``, shape (n_max+1, ...)."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = math.pi ** -0.25 * np.exp(-0.5 * x * x)
    if n_max >= 1:
        out[1] = math.sqrt(2.0) * x * out[0]
    for n in range(1, n_max):
        out[n + 1] = math.sqrt(2.0 / (n + 1)) * x * out[n] - math.sqrt(n / (n + 1)) * out[n - 1]
    return out


def hermite_derivative_matrix(size):
    """``D`` with ``psi_n' = sum_m D[n, m] psi_m`` (exact for n < size-1)."""
    D = np.zeros((size, size))
    for n in range(size):
        if n >= 1:
            D[n, n - 1] = math.sqrt(n / 2.0)
        if n + 1 < size:
            D[n, n + 1] = -math.sqrt((n + 1) / 2.0)
    return D


class TestDictionary:
    """Ordered test functions with a build-time derivative cross-check."""

    __test__ = False

    def __init__(self, members, check=True, check_points=None):
        if not members:
            raise ConfigError("dictionary must have at least one member")
        self.members = list(members)
        self.fd_error = {}
        if check:
            pts = np.linspace(-4.0, 4.0, 41) if check_points is None else np.asarray(check_points)
            for m in self.members:
                err = derivative_check(m, pts)
                self.fd_error[m.name] = err
                if err > FD_TOL:
                    raise NumericalFault(
                        f"derivative callbacks of {m.name} disagree with finite differences ({err:.2e})")

    @property
    def J(self):
        return len(self.members)

    def __len__(self):
        return len(self.members)

    def __getitem__(self, j):
        return self.members[j]

    def values(self, x, k=0):
        """Matrix ``phi_j^(k)(x)``, shape (J, len(x))."""
        x = np.asarray(x, dtype=float)
        return np.stack([np.broadcast_to(m.deriv(x, k), x.shape) for m in self.members])


class HermiteDictionary(TestDictionary):
    """The first ``J`` Hermite functions with exact derivative recurrences."""

    def __init__(self, J=16, check=True):
        if J < 1:
            raise ConfigError("J must be positive")
        self._size = J + MAX_ORDER + 1
        D = hermite_derivative_matrix(self._size)
        self._powers = [np.eye(self._size)]
        for _ in range(MAX_ORDER):
            self._powers.append(self._powers[-1] @ D)
        members = [TestFunction(f"hermite_{j}", self._member_deriv(j)) for j in range(J)]
        super().__init__(members, check=check)

    def _member_deriv(self, j):
        def deriv(x, k):
            x = np.asarray(x, dtype=float)
            return np.tensordot(self._powers[k][j], hermite_functions(x, self._size - 1), axes=1)
        return deriv

    def values(self, x, k=0):
        x = np.asarray(x, dtype=float)
        psi = hermite_functions(x, self._size - 1)
        return np.tensordot(self._powers[k][: self.J], psi, axes=1)

    def derivative_coefficients(self, k):
        """Rows: expansion of ``psi_j^(k)`` in ``psi_0..psi_{J+MAX_ORDER}``."""
        return self._powers[k][: self.J].copy()


def derivative_check(member, points, max_order=None):
    """Max over orders of the relative gap between ``deriv(k)`` and a central FD of ``deriv(k-1)``."""
    order = member.max_order if max_order is None else max_order
    worst = 0.0
    for k in range(1, order + 1):
        exact = member.deriv(points, k)
        fd = (member.deriv(points + FD_STEP, k - 1) - member.deriv(points - FD_STEP, k - 1)) / (2 * FD_STEP)
        scale = max(float(np.max(np.abs(exact))), 1e-300)
        worst = max(worst, float(np.max(np.abs(fd - exact))) / scale)
    return worst


DEFAULT_NORM_GRID = np.linspace(-40.0, 40.0, 16001)
TAIL_RTOL = 1e-8


def sobolev_norm(phi, n, grid=None, return_tail=False):
    """Trapezoid value of ``||phi||_n``; raises if the integrand does not decay."""
    if n < 0 or n > phi.max_order:
        raise ConfigError(f"norm order {n} outside 0..{phi.max_order}")
    x = DEFAULT_NORM_GRID if grid is None else np.asarray(grid, dtype=float)
    weight = (1.0 + x * x) ** (2 * n)
    integrand = sum(weight * phi.deriv(x, k) ** 2 for k in range(n + 1))
    peak = float(np.max(integrand))
    edge = float(max(integrand[0], integrand[-1]))
    if peak > 0 and edge > TAIL_RTOL * peak:
        raise DivergenceFault(
            f"integrand of ||{phi.name}||_{n} has not decayed at the grid edge "
            f"(edge/peak={edge / peak:.2e})")
    value = math.sqrt(float(np.trapezoid(integrand, x)))
    # tail beyond the grid bounded by edge value times one grid length
    tail = edge * (x[-1] - x[0])
    return (value, tail) if return_tail else value


def sup_seminorm(phi, n, grid=None):
    """``sum_{k<=n} sup |phi^(k)|``, grid maximum refined by a local search."""
    x = DEFAULT_NORM_GRID if grid is None else np.asarray(grid, dtype=float)
    total = 0.0
    for k in range(n + 1):
        vals = np.abs(phi.deriv(x, k))
        i = int(np.argmax(vals))
        best = float(vals[i])
        lo, hi = x[max(i - 1, 0)], x[min(i + 1, x.size - 1)]
        if hi > lo:
            res = minimize_scalar(lambda s: -abs(float(phi.deriv(np.array(s), k))),
                                  bounds=(lo, hi), method="bounded",
                                  options={"xatol": 1e-10})
            best = max(best, -float(res.fun))
        total += best
    return total


def embedding_constant(phi, n, grid=None):
    """Measured ratio ``|phi|_n / ||phi||_{n+1}``."""
    denom = sobolev_norm(phi, n + 1, grid)
    return sup_seminorm(phi, n, grid) / denom if denom > 0 else 0.0


@dataclass(eq=False)
class FluctuationField:
    """Pairings ``z[j, t]`` of a fluctuation path with a dictionary."""

    t: np.ndarray
    z: np.ndarray
    scale: float
    provenance: dict = field(default_factory=dict)
    fine_t: Optional[np.ndarray] = None
    fine_z: Optional[np.ndarray] = None

    def __post_init__(self):
        if not np.all(np.isfinite(self.z)):
            raise NumericalFault("non-finite fluctuation pairing")

    def time_derivative(self):
        """``dz/dt`` at the report times.

        With fine-grid data the derivative at ``t_k`` is a second-order
        one-sided difference inside ``[t_k, t_{k+1}]`` (backward inside the
        last interval at ``T``), fourth order when the interval holds at
        least five fine points; this avoids differencing across the
        report times, where piecewise-linear forcing leaves kinks in the
        second derivative.  Otherwise central differences on the report grid.
        """
        if self.fine_t is None:
            return np.gradient(self.z, self.t, axis=1, edge_order=2)
        idx = np.searchsorted(self.fine_t, self.t - 1e-12)
        out = np.empty_like(self.z)
        for k in range(self.t.size):
            if k + 1 < self.t.size:
                lo, hi, pos = idx[k], idx[k + 1], 0
            else:
                lo, hi, pos = idx[k - 1], idx[k], -1
            seg_t = self.fine_t[lo:hi + 1]
            seg_z = self.fine_z[:, lo:hi + 1]
            if seg_t.size >= 5:
                h = (seg_t[-1] - seg_t[0]) / (seg_t.size - 1)
                pts = seg_z[:, :5] if pos == 0 else seg_z[:, ::-1][:, :5]
                out[:, k] = (pts @ _FORWARD5) / (h if pos == 0 else -h)
            else:
                order = 2 if seg_t.size >= 3 else 1
                out[:, k] = np.gradient(seg_z, seg_t, axis=1, edge_order=order)[:, pos]
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "j", "z"])
            for k, tk in enumerate(self.t):
                for j in range(self.z.shape[0]):
                    w.writerow(["%.17g" % tk, j, "%.17g" % self.z[j, k]])


_FORWARD5 = np.array([-25.0 / 12, 4.0, -3.0, 4.0 / 3, -0.25])
LIMIT_OVERSAMPLING = 10


def fluctuation_pairings(emp, limit, a_N, dictionary):
    """``a_N sqrt(N) (mean_i phi_j(X_i(t)) - mean_limit phi_j(X(t)))``."""
    if emp.t.shape != limit.t.shape or not np.allclose(emp.t, limit.t, rtol=0, atol=1e-12):
        raise ShapeMismatchFault("empirical and limit paths have different time grids")
    members = dictionary.members if isinstance(dictionary, TestDictionary) else list(dictionary)
    N = emp.X.shape[0]
    scale = float(a_N) * math.sqrt(N)
    if limit is emp:
        z = np.zeros((len(members), emp.t.size))
    else:
        if limit.X.shape[0] < LIMIT_OVERSAMPLING * N:
            raise ConfigError(f"limit ensemble must hold at least {LIMIT_OVERSAMPLING}*N particles")
        z = np.empty((len(members), emp.t.size))
        for j, m in enumerate(members):
            z[j] = scale * (np.mean(m.deriv(emp.X, 0), axis=0) - np.mean(m.deriv(limit.X, 0), axis=0))
    return FluctuationField(t=emp.t.copy(), z=z, scale=scale,
                            provenance={"empirical": emp.kind, "empirical_seed": emp.seed,
                                        "limit": limit.kind, "limit_seed": limit.seed,
                                        "N": N, "a_N": float(a_N)})


def dual_norm_surrogate(field_, dictionary, n, grid=None):
    """Dictionary lower bound ``max_j |z_j(t)| / ||phi_j||_n`` of the dual norm."""
    norms = np.array([sobolev_norm(m, n, grid) for m in dictionary.members])
    return np.max(np.abs(field_.z) / norms[:, None], axis=0)
