"""Built-in problems with known answers.

Each builtin bundles a coefficient set, an action space, default run
settings and an oracle that checks a solved run against closed-form values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .controls import ActionSpace, RelaxedControl, TimeGrid, chattering_approximation
from .errors import ScenarioError
from .fbsde import COUPLED, CoefficientSet


def _zeros_k(x):
    return np.zeros((x.shape[0], 1))


def _ones_sigma(t, x, y, u):
    return np.ones((x.shape[0], 1, 1))


def _zero_sigma(t, x, y, u):
    return np.zeros((x.shape[0], 1, 1))


def _zero_driver(t, x, y, u):
    return np.zeros((x.shape[0], 1))


def _identity_terminal(x):
    return x[:, :1].copy()


@dataclass(frozen=True)
class Builtin:
    name: str
    description: str
    params: dict
    build: Callable
    defaults: dict = field(default_factory=dict)

    def make(self, params=None):
        """Return ``(coefficients, action_space, default_control_factory, oracle)``."""
        merged = dict(self.params)
        for k, v in (params or {}).items():
            if k not in merged:
                raise ScenarioError(f"unknown parameter {k!r} for builtin {self.name!r}", field=f"params.{k}")
            merged[k] = v
        return self.build(**merged)


# -- chattering --------------------------------------------------------------

def chattering_cost(T, n):
    """J of the n-switch chattering control: the triangle wave of height T/n squared, integrated."""
    return T * (T / n) ** 2 / 3.0


def _chattering(T=1.0, n=10):
    c = CoefficientSet(
        b=lambda t, x, y, u: u[:, :1].copy(),
        sigma=_zero_sigma,
        h=_zero_driver,
        phi=_zeros_k,
        l=lambda t, x, y, u: x[:, 0] ** 2,
        bound=max(1.0, float(T) ** 2),
        sigma_controlled=False,
        name="chattering",
    )
    space = ActionSpace([1.0, -1.0])

    def control(grid):
        half = RelaxedControl(space, TimeGrid.uniform(grid.T, 1), [[0.5, 0.5]])
        return chattering_approximation(half, int(n))

    def oracle(res):
        T_, n_ = float(T), int(n)
        max_x = float(np.max(np.abs(res["ens"].X)))
        J = res["cost"].estimate
        return {
            "max_abs_X": {"value": max_x, "bound": T_ / n_, "ok": max_x <= T_ / n_ + 1e-12},
            "J_bound": {"value": J, "bound": T_ / n_ ** 2, "ok": J <= T_ / n_ ** 2 + 1e-12},
            "J_exact": {"value": J, "oracle": chattering_cost(T_, n_),
                        "ok": abs(J - chattering_cost(T_, n_)) <= 1e-9},
        }

    return c, space, control, oracle


# -- linear BSDE -------------------------------------------------------------

def lq_oracle(alpha, ustar, x0, T):
    return math.exp(alpha * T) * (x0 + ustar * T)


def _lq(alpha=0.5, ustar=1.0, x0=0.0, T=1.0):
    a = float(alpha)
    c = CoefficientSet(
        b=lambda t, x, y, u: u[:, :1].copy(),
        sigma=_ones_sigma,
        h=lambda t, x, y, u: a * y,
        phi=_identity_terminal,
        psi=lambda x: x[:, 0] ** 2,
        lipschitz=abs(a),
        sigma_controlled=False,
        name="lq-decoupled",
    )
    space = ActionSpace([float(ustar)])

    def control(grid):
        return RelaxedControl.uniform(space, grid)

    def oracle(res):
        y0 = float(res["ens"].Y[:, 0, 0].mean())
        ref = lq_oracle(a, float(ustar), float(x0), float(T))
        rel = abs(y0 - ref) / abs(ref)
        J = res["cost"].estimate
        j_ref = (float(x0) + float(ustar) * float(T)) ** 2 + float(T)
        return {
            "Y0": {"value": y0, "oracle": ref, "rel_error": rel, "ok": rel <= 0.02},
            "J": {"value": J, "oracle": j_ref, "se": res["cost"].std_error,
                  "ok": abs(J - j_ref) <= 3 * res["cost"].std_error + 1e-12},
        }

    return c, space, control, oracle


# -- coupled linear ----------------------------------------------------------

def coupled_slope(t, T):
    """a(t) with a' = 1 + a^2, a(T) = 1, so that Y_t = a(t) X_t."""
    return math.tan(t - T + math.pi / 4.0)


def _coupled(x0=1.0, T=1.0):
    c = CoefficientSet(
        b=lambda t, x, y, u: -y[:, :1],
        sigma=_ones_sigma,
        h=lambda t, x, y, u: -x[:, :1],
        phi=_identity_terminal,
        psi=lambda x: x[:, 0] ** 2,
        coupling=COUPLED,
        lipschitz=1.0,
        name="coupled-linear",
    )
    space = ActionSpace([0.0])

    def control(grid):
        return RelaxedControl.uniform(space, grid)

    def oracle(res):
        y0 = float(res["ens"].Y[:, 0, 0].mean())
        ref = coupled_slope(0.0, float(T)) * float(x0)
        rel = abs(y0 - ref) / abs(ref)
        return {"Y0": {"value": y0, "oracle": ref, "rel_error": rel, "ok": rel <= 0.02}}

    return c, space, control, oracle


# -- strictification pair ---------------------------------------------------

def _nonconvex(T=1.0):
    c = CoefficientSet(
        b=lambda t, x, y, u: u[:, :1].copy(),
        sigma=_ones_sigma,
        h=_zero_driver,
        phi=_zeros_k,
        l=lambda t, x, y, u: x[:, 0] ** 2 - u[:, 0] ** 2,
        sigma_controlled=False,
        name="nonconvex-range",
    )
    space = ActionSpace([-1.0, 1.0])

    def control(grid):
        return RelaxedControl.uniform(space, grid)

    def oracle(res):
        st = res.get("strict")
        if st is None:
            return {}
        return {"realization_gap": {"value": st.realization_gap, "bound": 0.5, "ok": st.realization_gap >= 0.5}}

    return c, space, control, oracle


def _convex(T=1.0, atoms=21):
    c = CoefficientSet(
        b=lambda t, x, y, u: u[:, :1].copy(),
        sigma=_ones_sigma,
        h=lambda t, x, y, u: 0.5 * y + 0.1 * u[:, :1],
        phi=_identity_terminal,
        l=lambda t, x, y, u: x[:, 0] ** 2 + 0.25 * u[:, 0],
        lipschitz=0.5,
        sigma_controlled=False,
        name="convex-range",
    )
    space = ActionSpace.equispaced(-1.0, 1.0, int(atoms))
    spacing = 2.0 / (int(atoms) - 1)

    def control(grid):
        row = np.zeros(space.m)
        row[0] = row[-1] = 0.5
        return RelaxedControl.constant(space, grid, row)

    def oracle(res):
        st = res.get("strict")
        if st is None:
            return {}
        return {
            "realization_gap": {"value": st.realization_gap, "bound": spacing, "ok": st.realization_gap <= spacing},
            "cost_gap": {"value": st.cost_gap, "bound": 3 * st.combined_se, "ok": st.cost_gap <= 3 * st.combined_se},
        }

    return c, space, control, oracle


# -- martingale representation ----------------------------------------------

def _brownian(T=1.0):
    c = CoefficientSet(
        b=lambda t, x, y, u: np.zeros((x.shape[0], 1)),
        sigma=_ones_sigma,
        h=_zero_driver,
        phi=_identity_terminal,
        sigma_controlled=False,
        name="brownian-representation",
    )
    space = ActionSpace([0.0])

    def control(grid):
        return RelaxedControl.uniform(space, grid)

    def oracle(res):
        from .diagnostics import moment_row

        row = moment_row(res["ens"])
        v, se = row["E_int_Z2"], row["E_int_Z2_se"]
        return {"E_int_Z2": {"value": v, "oracle": float(T), "se": se, "ok": abs(v - float(T)) <= 3 * se}}

    return c, space, control, oracle


BUILTINS = {
    b.name: b
    for b in [
        Builtin("chattering", "deterministic fast switching: b=u, sigma=0, l=x^2, K={+1,-1}; "
                "the n-switch control keeps |X| <= T/n and J = T^3/(3 n^2)",
                {"T": 1.0, "n": 10}, _chattering,
                {"T": 1.0, "N": 10, "x0": 0.0, "n_paths": 1, "quadrature": "simpson", "strictify": True,
                 "optimizer_defaults": {"start_cells": 1, "n_paths": 1, "max_sweeps": 50, "quadrature": "simpson"}}),
        Builtin("lq-decoupled", "linear BSDE h=alpha*y, phi=x, b=u*, sigma=1; Y_0 = e^(alpha T)(x0 + u* T)",
                {"alpha": 0.5, "ustar": 1.0, "x0": 0.0, "T": 1.0}, _lq,
                {"T": 1.0, "N": 64, "x0": 0.0, "n_paths": 100000, "strictify": False}),
        Builtin("coupled-linear", "coupled affine system b=-y, sigma=1, h=-x, phi=x; Y_t = tan(t - T + pi/4) X_t",
                {"x0": 1.0, "T": 1.0}, _coupled,
                {"T": 1.0, "N": 64, "x0": 1.0, "n_paths": 100000, "strictify": False,
                 "picard": {"max_iters": 50, "tol": 1e-3, "damping": 1.0}}),
        Builtin("nonconvex-range", "b=u, sigma=1, l=x^2-u^2 on K={-1,+1}: the averaged tuple is not attained, "
                "so strictification leaves a gap of 1", {"T": 1.0}, _nonconvex,
                {"T": 1.0, "N": 16, "x0": 0.0, "n_paths": 10000, "strictify": True}),
        Builtin("convex-range", "b=u, sigma=1, h=y/2+u/10, l=x^2+u/4 on 21 atoms in [-1,1]: linear in u, "
                "so the averaged tuple is attained by an atom", {"T": 1.0, "atoms": 21}, _convex,
                {"T": 1.0, "N": 16, "x0": 0.0, "n_paths": 10000, "strictify": True}),
        Builtin("brownian-representation", "h=0, phi=x, b=0, sigma=1: Y = X = W and Z = 1",
                {"T": 1.0}, _brownian,
                {"T": 1.0, "N": 64, "x0": 0.0, "n_paths": 100000, "strictify": False}),
    ]
}


def get_builtin(name) -> Builtin:
    try:
        return BUILTINS[name]
    except KeyError:
        raise ScenarioError(f"unknown builtin {name!r}; available: {', '.join(sorted(BUILTINS))}",
                            field="builtin") from None
