"""Euler-Maruyama integration of the particle systems.

Three systems share one engine or one noise convention:

* the interacting slow-fast system, optionally tilted by a feedback
  control scaled by ``1/(a_N sqrt(N))``;
* the IID slow-fast McKean-Vlasov system, whose law is realised by a larger
  self-interacting auxiliary ensemble;
* the averaged McKean-Vlasov limit.

Every particle ``i`` owns counter-based normal streams keyed by
``(seed, i, kind)`` with kind W, B or V.  Runs with the same seed and the
same micro step therefore consume identical increments, which is what the
coupling studies rely on.  The averaged system is driven by
``s1 dW + s2 dB + s3 dV`` where ``s1, s2`` are the pi-averaged loadings of
the slow noise on W and B and ``s3`` makes up the rest of ``2 D_bar``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .averaging import frozen_fields
from .equilibrium import DEFAULT_GRID
from .errors import ConfigError, NumericalFault, ShapeMismatchFault, StiffnessFault
from .measures import MeasureHandle

STREAM_KINDS = {"W": 0, "B": 1, "V": 2}
BLOWUP = 1e6
_CHUNK_ENTRIES = 4_000_000


@dataclass(frozen=True)
class StepPolicy:
    """Micro step ``<= eps^2/K`` aligned to the reporting interval."""

    K: int = 20
    report_dt: float = 1e-2

    def __post_init__(self):
        if self.K < 1 or not self.report_dt > 0:
            raise ConfigError("step policy needs K >= 1 and report_dt > 0")

    def substeps(self, eps):
        return max(1, math.ceil(self.report_dt * self.K / (eps * eps) - 1e-9))

    def n_macro(self, T):
        n = round(T / self.report_dt)
        if n < 1 or abs(n * self.report_dt - T) > 1e-9 * max(1.0, T):
            raise ConfigError(f"T={T} is not a multiple of report_dt={self.report_dt}")
        return n


@dataclass(frozen=True, eq=False)
class ControlField:
    """Feedback control ``h(t, x, y) -> (h1, h2)``."""

    fn: Callable
    bound: float = math.inf
    is_zero: bool = False
    name: str = "custom"

    def __call__(self, t, x, y):
        if self.is_zero:
            z = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
            return z, z.copy()
        h1, h2 = self.fn(t, x, y)
        shape = np.broadcast(np.asarray(x), np.asarray(y)).shape
        return (np.broadcast_to(np.asarray(h1, dtype=float), shape),
                np.broadcast_to(np.asarray(h2, dtype=float), shape))

    @classmethod
    def zero(cls):
        return cls(fn=None, bound=0.0, is_zero=True, name="zero")

    @classmethod
    def constant(cls, h1, h2=0.0):
        h1, h2 = float(h1), float(h2)
        return cls(fn=lambda t, x, y: (h1, h2), bound=math.hypot(h1, h2),
                   is_zero=(h1 == 0.0 and h2 == 0.0), name=f"constant({h1},{h2})")


@dataclass(eq=False)
class EnsemblePath:
    t: np.ndarray
    X: np.ndarray
    Y: Optional[np.ndarray]
    U: Optional[np.ndarray]
    seed: int
    eps: Optional[float]
    N: int
    kind: str
    stream_ids: np.ndarray
    a_N: Optional[float] = None
    flags: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def measure(self, k):
        return MeasureHandle.empirical(self.X[:, k])

    def write_csv(self, path):
        """Rows ``t, i, X, Y, u1, u2`` in time-major order, floats as %.17g."""
        fmt = "%.17g"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "i", "X", "Y", "u1", "u2"])
            for k, tk in enumerate(self.t):
                for i in range(self.N):
                    y = fmt % self.Y[i, k] if self.Y is not None else ""
                    u1 = fmt % self.U[i, k, 0] if self.U is not None else ""
                    u2 = fmt % self.U[i, k, 1] if self.U is not None else ""
                    w.writerow([fmt % tk, int(self.stream_ids[i]), fmt % self.X[i, k], y, u1, u2])


class NoiseStreams:
    """Independent standard normal streams per (seed, particle, kind)."""

    def __init__(self, seed, n_particles, kinds=("W", "B")):
        seed = int(seed)
        if not 0 <= seed < 2 ** 64:
            raise ConfigError("seed must be in [0, 2**64)")
        self.seed = seed
        self.kinds = tuple(kinds)
        self._gens = {
            k: [np.random.Generator(np.random.Philox(
                key=np.array([4 * i + STREAM_KINDS[k], seed], dtype=np.uint64)))
                for i in range(n_particles)]
            for k in self.kinds
        }

    def draw(self, kind, n):
        """Next ``n`` normals of every particle, shape (n, P)."""
        gens = self._gens[kind]
        out = np.empty((len(gens), n))
        for i, g in enumerate(gens):
            out[i] = g.standard_normal(n)
        return np.ascontiguousarray(out.T)


class _ChunkedNoise:
    def __init__(self, streams, total, n_particles):
        self.streams = streams
        self.total = total
        self.chunk = max(1, min(total, _CHUNK_ENTRIES // max(n_particles, 1)))
        self.pos = 0
        self.buf = {}
        self.start = 0

    def step(self):
        """Increments for the next micro step: dict kind -> (P,) normals."""
        if self.pos == 0 or self.pos - self.start >= self.chunk:
            self.start = self.pos
            n = min(self.chunk, self.total - self.pos)
            self.buf = {k: self.streams.draw(k, n) for k in self.streams.kinds}
        row = self.pos - self.start
        self.pos += 1
        return {k: v[row] for k, v in self.buf.items()}


def _broadcast(value, n):
    return np.broadcast_to(np.asarray(value, dtype=float), (n,))


def _run_slowfast(model, P, eps, T, policy, seed, control, scale):
    if not 0 < eps <= 1:
        raise ConfigError("eps must lie in (0, 1]")
    n_macro = policy.n_macro(T)
    n_sub = policy.substeps(eps)
    h = policy.report_dt / n_sub
    sqh = math.sqrt(h)
    X = np.full(P, model.init[0])
    Y = np.full(P, model.init[1])
    Xs = np.empty((P, n_macro + 1))
    Ys = np.empty((P, n_macro + 1))
    Us = np.zeros((P, n_macro + 1, 2)) if control is not None else None
    Xs[:, 0], Ys[:, 0] = X, Y
    noise = _ChunkedNoise(NoiseStreams(seed, P), n_macro * n_sub, P)
    active = control is not None and not control.is_zero
    inv_eps = 1.0 / eps
    for k in range(n_macro):
        mu = MeasureHandle.empirical(X)
        t0 = k * policy.report_dt
        if control is not None:
            u1, u2 = control(t0, X, Y)
            Us[:, k, 0], Us[:, k, 1] = u1, u2
        for s in range(n_sub):
            inc = noise.step()
            dW = sqh * inc["W"]
            dB = sqh * inc["B"]
            b = _broadcast(model.b(X, Y, mu), P)
            c = _broadcast(model.c(X, Y, mu), P)
            sig = _broadcast(model.sigma(X, Y, mu), P)
            f = _broadcast(model.f(X, Y, mu), P)
            g = _broadcast(model.g(X, Y, mu), P)
            t1 = _broadcast(model.tau1(X, Y, mu), P)
            t2 = _broadcast(model.tau2(X, Y, mu), P)
            driftx = b * inv_eps + c
            drifty = inv_eps * (f * inv_eps + g)
            if active:
                u1, u2 = control(t0 + s * h, X, Y)
                driftx = driftx + sig * u1 * scale
                drifty = drifty + inv_eps * (t1 * u1 + t2 * u2) * scale
            X = X + driftx * h + sig * dW
            Y = Y + drifty * h + inv_eps * (t1 * dW + t2 * dB)
            if not (np.all(np.isfinite(X)) and np.all(np.abs(Y) <= BLOWUP)):
                raise StiffnessFault(
                    f"blow-up at macro step {k}, micro step {s} (t={t0 + s * h:.6g}); "
                    f"reduce the micro step")
        Xs[:, k + 1], Ys[:, k + 1] = X, Y
    if control is not None:
        u1, u2 = control(T, X, Y)
        Us[:, -1, 0], Us[:, -1, 1] = u1, u2
    t = np.arange(n_macro + 1) * policy.report_dt
    t[-1] = T
    return t, Xs, Ys, Us, {"substeps": n_sub, "micro_dt": h}


def simulate_multiscale(model, N, eps, T, policy=StepPolicy(), seed=0, control=None, a_N=1.0):
    """Interacting slow-fast system; with ``control`` the tilted version."""
    if N < 2:
        raise ConfigError("N must be at least 2")
    if not a_N > 0:
        raise ConfigError("a_N must be positive")
    scale = 1.0 / (a_N * math.sqrt(N))
    t, X, Y, U, meta = _run_slowfast(model, N, eps, T, policy, seed, control, scale)
    return EnsemblePath(t=t, X=X, Y=Y, U=U, seed=seed, eps=eps, N=N,
                        kind="controlled" if control is not None else "multiscale",
                        stream_ids=np.arange(N), a_N=a_N, meta=meta)


def simulate_iid_mv(model, N, M_aux=None, eps=0.1, T=1.0, policy=StepPolicy(), seed=0):
    """IID slow-fast McKean-Vlasov particles.

    The law is approximated by ``M_aux`` (default ``8 N``) self-interacting
    particles; the first ``N`` share noise streams with a multiscale run of
    the same seed and are returned.
    """
    if N < 2:
        raise ConfigError("N must be at least 2")
    M_aux = 8 * N if M_aux is None else int(M_aux)
    if M_aux < N:
        raise ConfigError("M_aux must be at least N")
    t, X, Y, _, meta = _run_slowfast(model, M_aux, eps, T, policy, seed, None, 0.0)
    flags = {"law_is_interacting_system": M_aux == N}
    meta = dict(meta, M_aux=M_aux, law_bias_scale=1.0 / math.sqrt(M_aux))
    return EnsemblePath(t=t, X=X[:N], Y=Y[:N], U=None, seed=seed, eps=eps, N=N,
                        kind="iid_mv", stream_ids=np.arange(N), flags=flags, meta=meta)


AVERAGED_TABLE_NODES = 65
AVERAGED_TABLE_MARGIN = 1.5


def _averaged_table(model, X, mu, grid):
    lo, hi = float(X.min()) - AVERAGED_TABLE_MARGIN, float(X.max()) + AVERAGED_TABLE_MARGIN
    xs = np.linspace(lo, hi, AVERAGED_TABLE_NODES)
    fl = frozen_fields(model, xs, mu, grid)
    s1, s2, s3 = fl.noise_loadings
    if np.any(fl.D_bar < -1e-12):
        j = int(np.argmin(fl.D_bar))
        raise NumericalFault(f"negative averaged diffusion {fl.D_bar[j]:.3g} at x={xs[j]:.6g}")
    tab = np.stack([fl.gamma_bar, s1, s2, s3], axis=1)
    return _UniformSpline(xs, CubicSpline(xs, tab, axis=0))


class _UniformSpline:
    """Fast evaluation of a cubic spline on uniformly spaced knots, clamped."""

    def __init__(self, xs, spline):
        self.lo, self.hi = xs[0], xs[-1]
        self.h = xs[1] - xs[0]
        self.n = xs.size - 1
        self.coef = np.ascontiguousarray(np.moveaxis(spline.c, 0, -1))  # (n, rows, 4)

    def __call__(self, x):
        x = np.clip(x, self.lo, self.hi)
        k = np.minimum(((x - self.lo) / self.h).astype(np.intp), self.n - 1)
        s = (x - (self.lo + k * self.h))[:, None]
        c = self.coef[k]
        return (((c[..., 0] * s + c[..., 1]) * s + c[..., 2]) * s + c[..., 3]).T


def simulate_averaged(model, M, T, step=1e-2, seed=0, substeps=1, n_track=None,
                      grid=DEFAULT_GRID):
    """Self-interacting Euler-Maruyama for the averaged McKean-Vlasov SDE.

    Coefficients are frozen in the measure over each reporting step of
    length ``step`` and evaluated at the particles through a cubic spline
    table in x.  With ``substeps`` equal to the multiscale substep count
    the run consumes the same W and B increments as a multiscale run.
    """
    if M < 1:
        raise ConfigError("M must be positive")
    policy = StepPolicy(K=1, report_dt=step)
    n_macro = policy.n_macro(T)
    n_track = M if n_track is None else int(n_track)
    dt = step / substeps
    sqh = math.sqrt(dt)
    X = np.full(M, model.init[0])
    Xs = np.empty((n_track, n_macro + 1))
    Xs[:, 0] = X[:n_track]
    noise = _ChunkedNoise(NoiseStreams(seed, M, kinds=("W", "B", "V")), n_macro * substeps, M)
    for k in range(n_macro):
        mu = MeasureHandle.empirical(X)
        spline = _averaged_table(model, X, mu, grid)
        for s in range(substeps):
            inc = noise.step()
            gamma, s1, s2, s3 = spline(X)
            X = X + gamma * dt + sqh * (s1 * inc["W"] + s2 * inc["B"] + s3 * inc["V"])
            if not np.all(np.isfinite(X)):
                raise StiffnessFault(f"non-finite averaged state at macro step {k}, micro step {s}")
        Xs[:, k + 1] = X[:n_track]
    t = np.arange(n_macro + 1) * step
    t[-1] = T
    return EnsemblePath(t=t, X=Xs, Y=None, U=None, seed=seed, eps=None, N=n_track,
                        kind="averaged", stream_ids=np.arange(n_track),
                        meta={"M": M, "substeps": substeps, "micro_dt": dt})


def coupling_error(a, b):
    """Sup over reporting times of the per-particle mean-square slow gap."""
    if a.X.shape != b.X.shape or not np.allclose(a.t, b.t, rtol=0, atol=1e-12):
        raise ShapeMismatchFault(f"paths differ in shape {a.X.shape} vs {b.X.shape} or time grid")
    if not np.array_equal(a.stream_ids, b.stream_ids):
        raise ShapeMismatchFault("paths are driven by different noise streams")
    return float(np.max(np.mean((a.X - b.X) ** 2, axis=0)))


def w2_empirical(mu1, mu2):
    """Exact 1-D Wasserstein-2 distance between equal-size atom sets."""
    a = np.sort(np.asarray(getattr(mu1, "nodes", mu1), dtype=float))
    b = np.sort(np.asarray(getattr(mu2, "nodes", mu2), dtype=float))
    if a.shape != b.shape:
        raise ShapeMismatchFault(f"atom counts differ: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def occupation_cost(run, dt=None):
    """``1/2 mean_i sum_k |u_ik|^2 dt_k`` over left endpoints."""
    if run.U is None:
        raise ConfigError("run carries no control samples")
    steps = np.diff(run.t) if dt is None else np.full(run.t.size - 1, float(dt))
    sq = np.mean(np.sum(run.U[:, :-1, :] ** 2, axis=2), axis=0)
    return float(0.5 * np.sum(sq * steps))
