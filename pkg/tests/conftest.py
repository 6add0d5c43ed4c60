import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fbsde_relax import CoefficientSet, SmoothFunction
from fbsde_relax.builtins import get_builtin

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def oracles():
    return json.loads((DATA / "oracles.json").read_text())


@pytest.fixture(scope="session")
def lq():
    """(coefficients, space, control factory, oracle) of the linear BSDE builtin."""
    return get_builtin("lq-decoupled").make()


@pytest.fixture(scope="session")
def chattering():
    return get_builtin("chattering").make()


def const_coefficients(b=0.0, s=0.0, phi=None, **kw):
    """Constant-coefficient scalar system; phi defaults to the identity."""
    return CoefficientSet(
        b=lambda t, x, y, u: np.full((x.shape[0], 1), b),
        sigma=lambda t, x, y, u: np.full((x.shape[0], 1, 1), s),
        h=lambda t, x, y, u: np.zeros((x.shape[0], 1)),
        phi=phi or (lambda x: x[:, :1].copy()),
        sigma_controlled=False,
        **kw,
    )


def drift_u(sigma=1.0, **kw):
    """b = u (first coordinate), constant sigma, h = 0, phi = x; keywords override."""
    args = dict(
        b=lambda t, x, y, u: u[:, :1].copy(),
        sigma=lambda t, x, y, u: np.full((x.shape[0], 1, 1), sigma),
        h=lambda t, x, y, u: np.zeros((x.shape[0], 1)),
        phi=lambda x: x[:, :1].copy(),
        sigma_controlled=False,
    )
    return CoefficientSet(**{**args, **kw})


def poly(power):
    """x**power as a SmoothFunction on d = 1."""
    if power == 0:
        return SmoothFunction(lambda x: np.ones(x.shape[0]), lambda x: np.zeros_like(x),
                              lambda x: np.zeros((x.shape[0], 1, 1)), "1")
    return SmoothFunction(
        lambda x: x[:, 0] ** power,
        lambda x: power * x ** (power - 1),
        lambda x: np.full((x.shape[0], 1, 1), 0.0) if power == 1
        else (power * (power - 1) * x ** (power - 2))[:, :, None],
        f"x^{power}",
    )


def exp_capped(cap=3.0):
    """exp(cap * tanh(x / cap)): exp(x) near 0, bounded by e^cap."""

    def parts(x):
        s = np.tanh(x / cap)
        f = np.exp(cap * s)
        sech2 = 1.0 - s * s
        return f, f * sech2, f * (sech2 ** 2 - (2.0 / cap) * s * sech2)

    return SmoothFunction(lambda x: parts(x[:, 0])[0], lambda x: parts(x)[1],
                          lambda x: parts(x)[2][:, :, None], "exp_capped")


# -- acceptance report ------------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def report_ac():
    """record(n, ok, detail): one PASS/FAIL line per criterion, repeated in the terminal summary."""

    def record(n, ok, detail):
        line = f"AC{n} {'PASS' if ok else 'FAIL'}: {detail}"
        _ACCEPTANCE[n] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[n])
