"""Probability measures on the real line passed to coefficient callbacks."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import ConfigError


class MeasureHandle:
    """Either an empirical measure (atoms and weights) or a grid density.

    Coefficient callbacks only talk to a measure through :meth:`mean` and
    :meth:`convolve`, so both representations are interchangeable.  The
    handle is immutable; ``mean`` results are memoised per callable since a
    measure is typically frozen over many Euler steps.
    """

    __slots__ = ("kind", "nodes", "weights", "_cache", "_fp")

    def __init__(self, kind, nodes, weights):
        nodes = np.asarray(nodes, dtype=float)
        weights = np.asarray(weights, dtype=float)
        if nodes.ndim != 1 or nodes.shape != weights.shape or nodes.size == 0:
            raise ConfigError("measure nodes and weights must be equal-length 1-D arrays")
        if not (np.all(np.isfinite(nodes)) and np.all(np.isfinite(weights))):
            raise ConfigError("measure data must be finite")
        if kind == "empirical":
            total = weights.sum()
            if abs(total - 1.0) > 1e-12:
                weights = weights / total
        elif kind == "grid":
            if np.any(weights < 0):
                raise ConfigError("grid density must be nonnegative")
            if nodes.size < 2 or np.any(np.diff(nodes) <= 0):
                raise ConfigError("grid nodes must be strictly increasing")
            total = np.trapezoid(weights, nodes)
            weights = weights / total
        else:
            raise ConfigError(f"unknown measure kind {kind!r}")
        nodes.setflags(write=False)
        weights.setflags(write=False)
        self.kind = kind
        self.nodes = nodes
        self.weights = weights
        self._cache = {}
        self._fp = None

    # construction helpers -------------------------------------------------
    @classmethod
    def empirical(cls, atoms, weights=None):
        atoms = np.asarray(atoms, dtype=float).ravel()
        if weights is None:
            order = np.argsort(atoms, kind="stable")
            atoms = atoms[order]
            weights = np.full(atoms.size, 1.0 / atoms.size)
        else:
            weights = np.asarray(weights, dtype=float).ravel()
            order = np.argsort(atoms, kind="stable")
            atoms, weights = atoms[order], weights[order]
        return cls("empirical", atoms, weights)

    @classmethod
    def dirac(cls, x=0.0):
        return cls.empirical([x])

    @classmethod
    def grid(cls, nodes, density):
        return cls("grid", nodes, density)

    # integration interface ------------------------------------------------
    def _quadrature_weights(self):
        if self.kind == "empirical":
            return self.weights
        w = np.empty_like(self.nodes)
        dx = np.diff(self.nodes)
        w[0] = dx[0] / 2
        w[-1] = dx[-1] / 2
        w[1:-1] = (dx[:-1] + dx[1:]) / 2
        return w * self.weights

    def mean(self, fn):
        """Return <mu, fn> for a vectorised scalar function ``fn``."""
        try:
            return self._cache[fn]
        except (KeyError, TypeError):
            pass
        value = float(np.dot(self._quadrature_weights(), fn(self.nodes)))
        try:
            self._cache[fn] = value
        except TypeError:
            pass
        return value

    def convolve(self, kernel, x):
        """Return <mu, kernel(x - .)> evaluated at every entry of ``x``."""
        x = np.asarray(x, dtype=float)
        w = self._quadrature_weights()
        flat = x.ravel()
        out = np.empty(flat.size)
        chunk = max(1, 4_000_000 // self.nodes.size)
        for s in range(0, flat.size, chunk):
            block = flat[s:s + chunk]
            out[s:s + chunk] = kernel(block[:, None] - self.nodes[None, :]) @ w
        return out.reshape(x.shape)

    # derived quantities ---------------------------------------------------
    @property
    def second_moment(self):
        return float(np.dot(self._quadrature_weights(), self.nodes ** 2))

    @property
    def size(self):
        return self.nodes.size

    @property
    def is_uniform_empirical(self):
        return self.kind == "empirical" and np.all(self.weights == self.weights[0])

    @property
    def fingerprint(self):
        if self._fp is None:
            h = hashlib.blake2b(digest_size=16)
            h.update(self.kind.encode())
            h.update(self.nodes.tobytes())
            h.update(self.weights.tobytes())
            self._fp = h.hexdigest()
        return self._fp

    def with_atom(self, j, value):
        """Empirical measure with atom ``j`` moved to ``value`` (unsorted index)."""
        if self.kind != "empirical":
            raise ConfigError("atom replacement needs an empirical measure")
        atoms = self.nodes.copy()
        atoms[j] = value
        return MeasureHandle.empirical(atoms, self.weights.copy())

    def mixture(self, z, s):
        """Return (1 - s) mu + s delta_z as an empirical measure."""
        if self.kind != "empirical":
            raise ConfigError("mixtures are formed from empirical measures")
        atoms = np.append(self.nodes, float(z))
        weights = np.append((1.0 - s) * self.weights, s)
        return MeasureHandle("empirical", *_sorted(atoms, weights))

    def __repr__(self):
        return f"MeasureHandle({self.kind}, n={self.nodes.size})"


def _sorted(atoms, weights):
    order = np.argsort(atoms, kind="stable")
    return atoms[order], weights[order]
