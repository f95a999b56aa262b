import json
from pathlib import Path

import numpy as np
import pytest

from slowfast_mdp.fluctuation import HermiteDictionary
from slowfast_mdp.measures import MeasureHandle
from slowfast_mdp.model import build_model, ou_linear
from slowfast_mdp.simulate import simulate_averaged

FROZEN = json.loads((Path(__file__).parent / "oracles" / "frozen.json").read_text())

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


@pytest.fixture(scope="session")
def frozen():
    return FROZEN


@pytest.fixture
def dirac0():
    return MeasureHandle.dirac(0.0)


@pytest.fixture(scope="session")
def probe_measure():
    return MeasureHandle.empirical(np.array([-1.3, -0.2, 0.4, 0.9, 2.1]))


def custom_model(**overrides):
    """Expression model; defaults reproduce ou_linear."""
    coeffs = {"b": "y", "c": 0, "sigma": 1, "f": "-y", "g": 0, "tau1": 0, "tau2": "sqrt(2)"}
    coeffs.update(overrides.pop("coefficients", {}))
    cfg = {"coefficients": coeffs, "kappa": overrides.pop("kappa", 1.0)}
    cfg.update(overrides)
    return build_model(cfg)


@pytest.fixture(scope="session")
def ou_limit():
    model = ou_linear()
    return model, simulate_averaged(model, 2000, 1.0, 1e-2, seed=7)


@pytest.fixture(scope="session")
def ou_rate_setup(ou_limit):
    from slowfast_mdp.mdp_rate import LimitContext, assemble_limit_generator
    model, lim = ou_limit
    ctx = LimitContext(model, lim)
    dic = HermiteDictionary(16)
    gen = assemble_limit_generator(ctx, dic)
    return ctx, dic, gen


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
