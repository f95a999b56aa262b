"""Slow-fast McKean-Vlasov model definitions and assumption checks.

A model is the collection of seven coefficient callbacks
``b, c, sigma, f, g, tau1, tau2`` of the particle system

    dX = [b/eps + c] dt + sigma dW
    dY = (1/eps) [f/eps + g] dt + (1/eps) [tau1 dW + tau2 dB]

each a vectorised function ``fn(x, y, mu)`` of numpy arrays that broadcast
against each other and a :class:`~slowfast_mdp.measures.MeasureHandle`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import qmc

from .errors import ConfigError, SlowFastError
from .measures import MeasureHandle

Coefficient = Callable[[np.ndarray, np.ndarray, MeasureHandle], np.ndarray]
COEFFICIENT_NAMES = ("b", "c", "sigma", "f", "g", "tau1", "tau2")


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Immutable description of a slow-fast interacting particle model.

    Attributes
    ----------
    b, c, sigma, f, g, tau1, tau2 : Coefficient
        Coefficient callbacks ``fn(x, y, mu)``.
    kappa : float
        Mean-reversion rate of the fast drift, ``f = -kappa*y + eta_fn``.
    eta_fn : Coefficient
        Bounded perturbation ``f + kappa*y``.
    init : tuple of float
        Common deterministic initial condition ``(eta_x, eta_y)``.
    fast_x_free, fast_mu_free : bool
        Declare that ``b, f, tau1, tau2`` (hence pi and Phi) do not depend
        on ``x`` or on ``mu``.  Used only to skip redundant solves.
    lfd_gamma_bar, lfd_D_bar : callable, optional
        Analytic linear functional derivatives ``fn(x, mu, z)`` of the
        averaged coefficients.
    derivatives : dict
        Optional analytic derivative callbacks, keyed e.g. ``"phi_x"``.
    degenerate : bool
        True for the model without multiscale structure; the fast
        invariant measure is then taken to be a point mass.
    """

    name: str
    b: Coefficient
    c: Coefficient
    sigma: Coefficient
    f: Coefficient
    g: Coefficient
    tau1: Coefficient
    tau2: Coefficient
    kappa: float
    eta_fn: Coefficient
    init: tuple = (0.0, 0.0)
    fast_x_free: bool = False
    fast_mu_free: bool = False
    lfd_gamma_bar: Optional[Callable] = None
    lfd_D_bar: Optional[Callable] = None
    derivatives: dict = field(default_factory=dict)
    degenerate: bool = False
    params: dict = field(default_factory=dict)

    def a(self, x, y, mu):
        """Fast diffusion a = (tau1^2 + tau2^2) / 2."""
        t1 = self.tau1(x, y, mu)
        t2 = self.tau2(x, y, mu)
        return 0.5 * (t1 * t1 + t2 * t2)

    def coefficient(self, name):
        return getattr(self, name)

    def with_init(self, x0, y0):
        return _replace(self, init=(float(x0), float(y0)))


def _replace(model, **changes):
    kw = {k: getattr(model, k) for k in model.__dataclass_fields__}
    kw.update(changes)
    return ModelSpec(**kw)


def _shape(x, y):
    return np.broadcast(np.asarray(x), np.asarray(y)).shape


def constant(value):
    value = float(value)

    def fn(x, y, mu):
        return np.full(_shape(x, y), value)

    fn.constant = value
    return fn


ZERO = constant(0.0)


def zero_lfd(x, mu, z):
    """Vanishing linear functional derivative."""
    return np.zeros(_shape(x, z))


zero_lfd.is_zero = True


def _gauss_dipole(u):
    return u * np.exp(-0.5 * u * u)


# ---------------------------------------------------------------------------
# built-in examples

def ou_linear(kappa=1.0, sigma=1.0, init=(0.0, 0.0)):
    """Linear Ornstein-Uhlenbeck fast block with b(y) = y, a = 1."""
    kappa = float(kappa)
    tau2 = math.sqrt(2.0)

    def b(x, y, mu):
        return np.broadcast_to(np.asarray(y, dtype=float), _shape(x, y)).copy()

    def f(x, y, mu):
        return np.broadcast_to(-kappa * np.asarray(y, dtype=float), _shape(x, y)).copy()

    return ModelSpec(
        name="ou_linear", b=b, c=ZERO, sigma=constant(sigma), f=f, g=ZERO,
        tau1=ZERO, tau2=constant(tau2), kappa=kappa, eta_fn=ZERO,
        init=tuple(map(float, init)), fast_x_free=True, fast_mu_free=True,
        lfd_gamma_bar=zero_lfd, lfd_D_bar=zero_lfd,
        params={"kappa": kappa, "sigma": float(sigma)},
    )


def mean_field_ou(kappa=1.0, theta_f=1.0, theta_c=2.0, sigma=1.0, init=(0.0, 0.0)):
    """Fast OU whose centre is shifted by the empirical measure.

    ``f = -kappa*y + <mu, phi_f>`` with ``phi_f(z) = theta_f exp(-z^2/2)``,
    ``b = y - <mu, phi_f>/kappa`` (centred), ``c = -x + <mu, phi_c>`` with
    ``phi_c(z) = theta_c z exp(-z^2/2)``, ``g = 0``, ``tau = (0, sqrt 2)``.
    Then ``Phi = (y - <mu,phi_f>/kappa)/kappa``, ``gamma_bar = c`` and
    ``D_bar = 1/kappa^2 + sigma^2/2``.
    """
    kappa, theta_f, theta_c = float(kappa), float(theta_f), float(theta_c)

    def phi_f(z):
        return theta_f * np.exp(-0.5 * z * z)

    def phi_c(z):
        return theta_c * _gauss_dipole(z)

    def shift(mu):
        return mu.mean(phi_f)

    def f(x, y, mu):
        return np.broadcast_to(-kappa * np.asarray(y, dtype=float) + shift(mu), _shape(x, y)).copy()

    def eta(x, y, mu):
        return np.full(_shape(x, y), shift(mu))

    def b(x, y, mu):
        return np.broadcast_to(np.asarray(y, dtype=float) - shift(mu) / kappa, _shape(x, y)).copy()

    def c(x, y, mu):
        return np.broadcast_to(-np.asarray(x, dtype=float) + mu.mean(phi_c), _shape(x, y)).copy()

    def lfd_gamma(x, mu, z):
        return np.broadcast_to(phi_c(np.asarray(z, dtype=float)), _shape(x, z)).copy()

    return ModelSpec(
        name="mean_field_ou", b=b, c=c, sigma=constant(sigma), f=f, g=ZERO,
        tau1=ZERO, tau2=constant(math.sqrt(2.0)), kappa=kappa, eta_fn=eta,
        init=tuple(map(float, init)), fast_x_free=True, fast_mu_free=False,
        lfd_gamma_bar=lfd_gamma, lfd_D_bar=zero_lfd,
        params={"kappa": kappa, "theta_f": theta_f, "theta_c": theta_c,
                "sigma": float(sigma), "phi_f": phi_f, "phi_c": phi_c},
    )


def two_scale_langevin(kappa=1.0, sigma=1.0, tau1=0.5, tau2=1.0, theta1=0.5,
                       theta2=0.5, ripple=0.25, init=(0.0, 0.0)):
    """Interacting particles in a two-scale potential.

    Potentials: ``V1 = x^2/2``, ``V2 = -cos y`` (so ``b = -sin y``),
    ``V3 = log cosh(x)/2``, ``V4 = kappa y^2/2 + ripple cos y`` and
    interaction forces ``W_k'(u) = theta_k u exp(-u^2/2)``.
    """
    kappa, ripple = float(kappa), float(ripple)
    if abs(ripple) >= kappa:
        raise ConfigError("ripple must be smaller than kappa in absolute value")

    def w1p(u):
        return theta1 * _gauss_dipole(u)

    def w2p(u):
        return theta2 * _gauss_dipole(u)

    def v1p(x):
        return x

    def v3p(x):
        return 0.5 * np.tanh(x)

    def b(x, y, mu):
        return np.broadcast_to(-np.sin(y), _shape(x, y)).copy()

    def f(x, y, mu):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(-kappa * y + ripple * np.sin(y), _shape(x, y)).copy()

    def eta(x, y, mu):
        return np.broadcast_to(ripple * np.sin(y), _shape(x, y)).copy()

    def c(x, y, mu):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-v1p(x) - mu.convolve(w1p, x), _shape(x, y)).copy()

    def g(x, y, mu):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-v3p(x) - mu.convolve(w2p, x), _shape(x, y)).copy()

    state = {}

    def alpha_tilde():
        if "alpha_tilde" not in state:
            from .averaging import example_constants
            state.update(example_constants(model))
        return state["alpha_tilde"]

    def lfd_gamma(x, mu, z):
        u = np.asarray(x, dtype=float) - np.asarray(z, dtype=float)
        return -(alpha_tilde() * w2p(u) + w1p(u))

    model = ModelSpec(
        name="two_scale_langevin", b=b, c=c, sigma=constant(sigma), f=f, g=g,
        tau1=constant(tau1), tau2=constant(tau2), kappa=kappa, eta_fn=eta,
        init=tuple(map(float, init)), fast_x_free=True, fast_mu_free=True,
        lfd_gamma_bar=lfd_gamma, lfd_D_bar=zero_lfd,
        params={"kappa": kappa, "sigma": float(sigma), "tau1": float(tau1),
                "tau2": float(tau2), "theta1": float(theta1),
                "theta2": float(theta2), "ripple": ripple,
                "V1p": v1p, "V3p": v3p, "W1p": w1p, "W2p": w2p},
    )
    return model


def no_multiscale(sigma=1.0, theta=0.5, init=(0.0, 0.0)):
    """Plain McKean-Vlasov particles: ``b = f = g = tau1 = tau2 = 0``.

    ``c = -x - <mu, W'(x - .)>`` with ``W'(u) = theta u exp(-u^2/2)``.
    """

    def wp(u):
        return theta * _gauss_dipole(u)

    def c(x, y, mu):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(-x - mu.convolve(wp, x), _shape(x, y)).copy()

    def lfd_gamma(x, mu, z):
        return -wp(np.asarray(x, dtype=float) - np.asarray(z, dtype=float))

    return ModelSpec(
        name="no_multiscale", b=ZERO, c=c, sigma=constant(sigma), f=ZERO, g=ZERO,
        tau1=ZERO, tau2=ZERO, kappa=1.0, eta_fn=ZERO, init=tuple(map(float, init)),
        fast_x_free=True, fast_mu_free=True, lfd_gamma_bar=lfd_gamma,
        lfd_D_bar=zero_lfd, degenerate=True,
        params={"sigma": float(sigma), "theta": float(theta), "Wp": wp},
    )


BUILTINS = {
    "ou_linear": ou_linear,
    "mean_field_ou": mean_field_ou,
    "two_scale_langevin": two_scale_langevin,
    "no_multiscale": no_multiscale,
}


# ---------------------------------------------------------------------------
# user-supplied expressions

_EXPR_NAMESPACE = {
    name: getattr(np, name)
    for name in ("sin", "cos", "tan", "exp", "log", "sqrt", "tanh", "sinh",
                 "cosh", "arctan", "abs", "pi", "where", "minimum", "maximum")
}


def _identity(z):
    return z


def _square(z):
    return z * z


def _compile_expression(name, text):
    if isinstance(text, (int, float)):
        return constant(text)
    if not isinstance(text, str):
        raise ConfigError(f"coefficient {name!r} must be a string or number")
    try:
        code = compile(text, f"<{name}>", "eval")
    except SyntaxError as exc:
        raise ConfigError(f"coefficient {name!r}: {exc}") from None
    allowed = set(_EXPR_NAMESPACE) | {"x", "y", "m1", "m2"}
    unknown = set(code.co_names) - allowed
    if unknown:
        raise ConfigError(f"coefficient {name!r} uses unknown names {sorted(unknown)}")

    def fn(x, y, mu):
        env = dict(_EXPR_NAMESPACE)
        env.update(x=np.asarray(x, dtype=float), y=np.asarray(y, dtype=float),
                   m1=mu.mean(_identity), m2=mu.mean(_square))
        out = eval(code, {"__builtins__": {}}, env)
        return np.broadcast_to(np.asarray(out, dtype=float), _shape(x, y)).copy()

    fn.expression = text
    return fn


def build_model(config):
    """Build a :class:`ModelSpec` from a JSON-like description.

    Accepted forms are ``{"example": name, **params}`` and
    ``{"coefficients": {...}, "kappa": k, "init": [x0, y0]}``.  Expressions
    may use ``x``, ``y``, the first two moments ``m1``, ``m2`` of the
    measure and common numpy functions.
    """
    if not isinstance(config, dict):
        raise ConfigError("model config must be a mapping")
    if "example" in config:
        name = config["example"]
        if name not in BUILTINS:
            raise ConfigError(f"unknown example {name!r}; choose from {sorted(BUILTINS)}")
        params = {k: v for k, v in config.items() if k not in ("example",)}
        if "init" in params:
            params["init"] = tuple(float(v) for v in params["init"])
        if "kappa" in params and float(params["kappa"]) <= 0:
            raise ConfigError("kappa must be positive")
        try:
            return BUILTINS[name](**params)
        except TypeError as exc:
            raise ConfigError(f"bad parameters for {name!r}: {exc}") from None
    coeffs = config.get("coefficients")
    if not isinstance(coeffs, dict):
        raise ConfigError("config needs 'example' or 'coefficients'")
    missing = [n for n in COEFFICIENT_NAMES if n not in coeffs]
    if missing:
        raise ConfigError(f"missing coefficients: {missing}")
    if "kappa" not in config:
        raise ConfigError("custom models need 'kappa'")
    kappa = float(config["kappa"])
    if not kappa > 0:
        raise ConfigError("kappa must be positive")
    fns = {n: _compile_expression(n, coeffs[n]) for n in COEFFICIENT_NAMES}
    f = fns["f"]

    def eta(x, y, mu):
        return f(x, y, mu) + kappa * np.asarray(y, dtype=float)

    init = tuple(float(v) for v in config.get("init", (0.0, 0.0)))
    if len(init) != 2:
        raise ConfigError("init must be [x0, y0]")
    return ModelSpec(name=config.get("name", "custom"), kappa=kappa, eta_fn=eta,
                     init=init, **fns)


# ---------------------------------------------------------------------------
# assumption validation

@dataclass(frozen=True)
class AssumptionCheck:
    passed: bool
    margin: float
    witness: Optional[dict]


@dataclass(frozen=True)
class AssumptionReport:
    """Per-assumption outcome of :func:`validate_assumptions`."""

    checks: dict
    beta: float

    @property
    def passed(self):
        return all(c.passed for c in self.checks.values())

    def __getitem__(self, key):
        return self.checks[key]


@dataclass(frozen=True)
class Budget:
    n_probes: int = 10_000
    box: float = 8.0
    n_measures: int = 16
    n_centering: int = 32
    lambda_minus: float = 1e-3
    lambda_plus: float = 1e6
    beta: Optional[float] = None
    centering_tol: float = 1e-6
    bound_cap: float = 1e6
    growth_cap: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_probes <= 0 or self.n_measures <= 0 or self.n_centering <= 0:
            raise ConfigError("budget counts must be positive")
        if not (np.isfinite(self.box) and self.box > 0):
            raise ConfigError("box bound must be finite and positive")


_NORMAL_QUANTILES = None


def _probe_measures(budget):
    """Small family of Gaussian-shaped empirical measures."""
    global _NORMAL_QUANTILES
    if _NORMAL_QUANTILES is None:
        from scipy.special import ndtri
        _NORMAL_QUANTILES = ndtri((np.arange(32) + 0.5) / 32)
    rng = np.random.default_rng(budget.seed)
    out = []
    for _ in range(budget.n_measures):
        centre = rng.uniform(-budget.box / 4, budget.box / 4)
        spread = rng.uniform(0.1, 2.0)
        out.append(MeasureHandle.empirical(centre + spread * _NORMAL_QUANTILES))
    return out


def _witness(x, y1, y2, mu):
    return {"x": float(x), "y1": float(y1), "y2": float(y2),
            "mu_mean": float(mu.mean(_identity)), "mu_m2": mu.second_moment}


def validate_assumptions(model, budget=Budget()):
    """Sample-based check of ellipticity, dissipativity, growth and centering.

    Failures are recorded in the report rather than raised.
    """
    L = budget.box
    sampler = qmc.Sobol(d=3, scramble=True, seed=budget.seed)
    m = int(2 ** math.ceil(math.log2(budget.n_probes)))
    pts = (sampler.random(m)[: budget.n_probes] * 2 - 1) * L
    measures = _probe_measures(budget)
    groups = np.array_split(np.arange(budget.n_probes), len(measures))

    lam_margin, lam_w = np.inf, None
    dis_ratio = []
    lip_eta = 0.0
    sup_g = sup_sigma = 0.0
    growth_b = growth_c = 0.0
    sup_eta = 0.0
    finite = True
    for mu, idx in zip(measures, groups):
        x, y1, y2 = pts[idx, 0], pts[idx, 1], pts[idx, 2]
        t1a, t2a = model.tau1(x, y1, mu), model.tau2(x, y1, mu)
        t1b, t2b = model.tau1(x, y2, mu), model.tau2(x, y2, mu)
        lam = t1a ** 2 + t2a ** 2
        margins = np.minimum(lam - budget.lambda_minus, budget.lambda_plus - lam)
        k = int(np.argmin(margins))
        if margins[k] < lam_margin:
            lam_margin, lam_w = float(margins[k]), _witness(x[k], y1[k], y2[k], mu)
        f1, f2 = model.f(x, y1, mu), model.f(x, y2, mu)
        dy = y1 - y2
        lhs = 2 * (f1 - f2) * dy + 3 * (t1a - t1b) ** 2 + 3 * (t2a - t2b) ** 2
        ok = np.abs(dy) > 1e-8
        dis_ratio.append((lhs[ok] / dy[ok] ** 2, x[ok], y1[ok], y2[ok], mu))
        e1, e2 = model.eta_fn(x, y1, mu), model.eta_fn(x, y2, mu)
        lip_eta = max(lip_eta, float(np.max(np.abs(e1 - e2)[ok] / np.abs(dy[ok]))))
        sup_eta = max(sup_eta, float(np.max(np.abs(e1))))
        gv, sv = model.g(x, y1, mu), model.sigma(x, y1, mu)
        bv, cv = model.b(x, y1, mu), model.c(x, y1, mu)
        finite &= all(np.all(np.isfinite(v)) for v in (gv, sv, bv, cv, f1, lam))
        sup_g = max(sup_g, float(np.max(np.abs(gv))))
        sup_sigma = max(sup_sigma, float(np.max(np.abs(sv))))
        inner = np.abs(y1) <= L / 2
        for arr, name in ((bv, "b"), (cv, "c")):
            scaled = np.abs(arr) / (1 + np.abs(y1))
            lo = np.max(scaled[inner]) if inner.any() else 0.0
            hi = np.max(scaled[~inner]) if (~inner).any() else 0.0
            ratio = hi / lo if lo > 0 else (0.0 if hi == 0 else np.inf)
            if name == "b":
                growth_b = max(growth_b, ratio)
            else:
                growth_c = max(growth_c, ratio)

    checks = {}
    checks["A1"] = AssumptionCheck(lam_margin >= 0, lam_margin,
                                   None if lam_margin >= 0 else lam_w)

    beta = budget.beta
    if beta is None:
        beta = 0.9 * (2 * model.kappa - 2 * lip_eta)
    worst, w = np.inf, None
    for ratio, x, y1, y2, mu in dis_ratio:
        if ratio.size == 0:
            continue
        margin = -beta - ratio
        k = int(np.argmin(margin))
        if margin[k] < worst:
            worst, w = float(margin[k]), _witness(x[k], y1[k], y2[k], mu)
    bounded = np.isfinite(sup_eta) and lip_eta < model.kappa
    a2_margin = min(worst, model.kappa - lip_eta) if not model.degenerate else -beta
    a2_pass = bool(beta > 0 and worst >= 0 and bounded)
    checks["A2"] = AssumptionCheck(a2_pass, a2_margin, None if a2_pass else w)

    growth = max(growth_b, growth_c)
    a5_margin = min(budget.bound_cap - max(sup_g, sup_sigma), budget.growth_cap - growth)
    a5_pass = bool(finite and a5_margin >= 0)
    checks["A5"] = AssumptionCheck(a5_pass, float(a5_margin), None if a5_pass else {
        "sup_g": sup_g, "sup_sigma": sup_sigma, "growth_b": growth_b, "growth_c": growth_c})

    checks["A3"] = _check_centering(model, budget, measures)
    return AssumptionReport(checks=checks, beta=float(beta))


def _check_centering(model, budget, measures):
    if model.degenerate:
        return AssumptionCheck(True, budget.centering_tol, None)
    from .equilibrium import equilibrium_batch
    rng = np.random.default_rng(budget.seed + 1)
    worst, w = np.inf, None
    per = max(1, budget.n_centering // len(measures))
    try:
        for mu in measures:
            xs = rng.uniform(-budget.box, budget.box, per)
            eq = equilibrium_batch(model, xs, mu)
            bv = model.b(xs[:, None], eq.y[None, :], mu)
            defect = np.abs(eq.integrate(bv))
            margin = budget.centering_tol - defect
            k = int(np.argmin(margin))
            if margin[k] < worst:
                worst, w = float(margin[k]), _witness(xs[k], 0.0, 0.0, mu)
    except SlowFastError as exc:
        return AssumptionCheck(False, -np.inf, {"error": str(exc)})
    return AssumptionCheck(worst >= 0, worst, None if worst >= 0 else w)
