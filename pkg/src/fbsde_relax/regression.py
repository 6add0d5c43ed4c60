"""Least-squares conditional expectations for the backward sweep.

Two bases: global polynomials of total degree <= ``degree`` on standardised
state coordinates (ridge on the non-constant columns), and equal-mass bins
per coordinate. Coordinates with zero spread are dropped, so a deterministic
state collapses the fit to a sample mean.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ParameterError, RegressionError

_FLAT = 1e-12


@dataclass(frozen=True)
class RegressionSpec:
    basis: str = "polynomial"
    degree: int = 2
    bins: int = 16
    ridge: float = 0.0

    def __post_init__(self):
        if self.basis not in ("polynomial", "bins"):
            raise ParameterError(f"unknown regression basis {self.basis!r}")
        if self.basis == "polynomial" and int(self.degree) < 0:
            raise ParameterError("polynomial degree must be >= 0")
        if self.basis == "bins" and int(self.bins) < 1:
            raise ParameterError("bin count must be >= 1")
        if not self.ridge >= 0:
            raise ParameterError("ridge must be >= 0")

    @classmethod
    def polynomial(cls, degree=2, ridge=0.0):
        return cls("polynomial", degree=int(degree), ridge=float(ridge))

    @classmethod
    def binned(cls, count=16, ridge=0.0):
        return cls("bins", bins=int(count), ridge=float(ridge))

    def to_dict(self):
        if self.basis == "polynomial":
            return {"basis": "polynomial", "degree": int(self.degree), "ridge": float(self.ridge)}
        return {"basis": "bins", "bins": int(self.bins), "ridge": float(self.ridge)}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        basis = d.pop("basis", "polynomial")
        if basis == "polynomial":
            return cls.polynomial(d.get("degree", 2), d.get("ridge", 0.0))
        return cls.binned(d.get("bins", 16), d.get("ridge", 0.0))


def _col_mean(a):
    # column by column, so a column's result does not depend on its neighbours
    w = np.full(a.shape[0], 1.0 / a.shape[0])
    return np.array([w @ np.ascontiguousarray(a[:, j]) for j in range(a.shape[1])])


def _matvec_cols(M, B):
    """``M @ B`` one column of ``B`` at a time (same reason as above)."""
    out = np.empty((M.shape[0], B.shape[1]))
    for j in range(B.shape[1]):
        out[:, j] = M @ np.ascontiguousarray(B[:, j])
    return out


def _products(z, exps):
    cols = np.empty((z.shape[0], len(exps)))
    for j, e in enumerate(exps):
        col = z[:, e[0]].copy()
        for v in e[1:]:
            col *= z[:, v]
        cols[:, j] = col
    return cols


def _active_columns(x):
    mu = _col_mean(x)
    dev = x - mu
    sd = np.sqrt(_col_mean(dev * dev))
    active = sd > _FLAT * (1.0 + np.abs(mu))
    return mu, np.where(active, sd, 1.0), active


class PolynomialFit:
    """Fitted regression surface x -> E[target | x] on a polynomial basis."""

    def __init__(self, mu, sd, active, exponents, col_mean, coef, intercept):
        self.mu = mu
        self.sd = sd
        self.active = active
        self.exponents = exponents
        self.col_mean = col_mean
        self.coef = coef
        self.intercept = intercept

    @property
    def n_params(self):
        return 1 + len(self.exponents)

    def _features(self, x):
        z = (x[:, self.active] - self.mu[self.active]) / self.sd[self.active]
        return _products(z, self.exponents) - self.col_mean

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 1 and x.shape[1] != self.mu.size:
            x = x.T
        out = np.broadcast_to(self.intercept, (x.shape[0], self.intercept.size)).copy()
        if self.exponents:
            out += _matvec_cols(self._features(x), self.coef)
        return out


class BinFit:
    """Piecewise-constant surface on equal-mass bins."""

    def __init__(self, edges, active, means, fallback, n_nonempty):
        self.edges = edges
        self.active = active
        self.means = means
        self.fallback = fallback
        self._n_nonempty = n_nonempty

    @property
    def n_params(self):
        return self._n_nonempty

    def _index(self, x):
        idx = np.zeros(x.shape[0], dtype=np.int64)
        stride = 1
        for dim, e in zip(np.flatnonzero(self.active), self.edges):
            idx += stride * np.searchsorted(e, x[:, dim], side="right")
            stride *= e.size + 1
        return idx

    def predict(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[0] == 1 and x.shape[1] != self.active.size:
            x = x.T
        return self.means[self._index(x)]


def _monomials(n_vars, degree):
    exps = [()]
    for deg in range(1, degree + 1):
        exps.extend(itertools.combinations_with_replacement(range(n_vars), deg))
    return exps


def fit(x, targets, spec: RegressionSpec, step=None):
    """Regress ``targets`` (n, r) on state ``x`` (n, d).

    Returns ``(surface, fitted_values)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(targets, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    n = x.shape[0]
    if spec.basis == "bins":
        return _fit_bins(x, y, spec)

    mu, sd, active = _active_columns(x)
    exps = [e for e in _monomials(int(active.sum()), int(spec.degree)) if e]
    ybar = _col_mean(y)
    ybar = np.where(np.all(y == y[:1], axis=0), y[0], ybar)
    if not exps:
        surf = PolynomialFit(mu, sd, active, [], np.zeros(0), np.zeros((0, y.shape[1])), ybar)
        return surf, np.broadcast_to(ybar, y.shape).copy()

    z = (x[:, active] - mu[active]) / sd[active]
    raw = _products(z, exps)
    col_mean = _col_mean(raw)
    A = raw - col_mean
    # normal equations on the centred design; the intercept is ybar
    gram = A.T @ A
    rhs = _matvec_cols(A.T, y - ybar)
    if spec.ridge > 0:
        gram = gram + spec.ridge * n * np.eye(A.shape[1])
    else:
        ev = np.linalg.eigvalsh(gram)
        if ev[0] <= 1e-12 * max(ev[-1], _FLAT):
            rank = int(np.count_nonzero(ev > 1e-12 * max(ev[-1], _FLAT)))
            where = "" if step is None else f" at step {step}"
            raise RegressionError(
                f"singular regression design{where} (rank {rank} of {A.shape[1]}); add a ridge term",
                step=step,
            )
    coef = np.empty_like(rhs)
    for j in range(rhs.shape[1]):
        coef[:, j] = np.linalg.solve(gram, rhs[:, j])
    # constant targets are reproduced exactly
    flat = np.all(y == y[:1], axis=0)
    if np.any(flat):
        ybar = np.where(flat, y[0], ybar)
        coef[:, flat] = 0.0
    surf = PolynomialFit(mu, sd, active, exps, col_mean, coef, ybar)
    return surf, ybar + _matvec_cols(A, coef)


def _fit_bins(x, y, spec):
    mu, sd, active = _active_columns(x)
    edges = []
    for dim in np.flatnonzero(active):
        qs = np.quantile(x[:, dim], np.arange(1, spec.bins) / spec.bins)
        edges.append(np.unique(qs))
    surf = BinFit(edges, active, None, None, 0)
    idx = surf._index(x)
    n_cells = 1
    for e in edges:
        n_cells *= e.size + 1
    sums, counts = _kernels.bin_sums(idx, y, n_cells)
    ybar = _col_mean(y)
    lam = spec.ridge
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (sums + lam * ybar) / (counts[:, None] + lam)
    means[counts == 0] = ybar
    surf.means = means
    surf.fallback = ybar
    surf._n_nonempty = int(np.count_nonzero(counts))
    return surf, means[idx]


def fit_variance(surf, x, targets, fitted, spec: RegressionSpec):
    """Mean sampling variance of the fitted values, ``mean_j h_j r_j^2`` per column.

    ``h_j`` is the leverage of row ``j`` and ``r_j`` its residual, so the
    estimate stays honest when the noise is heteroscedastic.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    r = np.asarray(targets, dtype=np.float64) - np.asarray(fitted, dtype=np.float64)
    if r.ndim == 1:
        r = r[:, None]
    n = x.shape[0]
    if isinstance(surf, BinFit):
        idx = surf._index(x)
        counts = np.bincount(idx, minlength=surf.means.shape[0]).astype(np.float64)
        h = 1.0 / (counts[idx] + spec.ridge)
    else:
        h = np.full(n, 1.0 / n)
        if surf.exponents:
            A = surf._features(x)
            gram = A.T @ A
            if spec.ridge > 0:
                gram = gram + spec.ridge * n * np.eye(A.shape[1])
            h = h + np.sum((A @ np.linalg.inv(gram)) * A, axis=1)
    return _col_mean(h[:, None] * r * r)


def residual_variance(targets, fitted):
    r = np.asarray(targets) - np.asarray(fitted)
    if r.ndim == 1:
        r = r[:, None]
    r = r - _col_mean(r)
    return _col_mean(r * r)
