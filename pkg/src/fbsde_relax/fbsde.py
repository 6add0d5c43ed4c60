"""Controlled forward-backward SDEs: Euler forward pass, regression backward pass.

Coefficient callbacks are vectorised over paths::

    b(t, x, y, u)     -> (n, d)        sigma(t, x, y, u) -> (n, d, m)
    h(t, x, y, u)     -> (n, k)        phi(x)            -> (n, k)
    l(t, x, y, u)     -> (n,)          psi(x)            -> (n,)
    g(y)              -> (n,)

with ``x`` of shape (n, d), ``y`` of shape (n, k) and ``u`` of shape (n, p).
In a decoupled system the forward coefficients receive ``y=None``.
"""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import _kernels
from .controls import RelaxedControl, StrictControl, TimeGrid, as_relaxed
from .errors import (
    ConfigurationError,
    ConvergenceError,
    DimensionError,
    EvaluationError,
    NumericalOverflowError,
    ParameterError,
    StateError,
)
from .regression import RegressionSpec, fit, fit_variance, residual_variance

__version__ = "0.1.0"

DECOUPLED = "decoupled"
COUPLED = "coupled"


class CoefficientBoundWarning(RuntimeWarning):
    """A coefficient exceeded its declared bound at an evaluated point."""


def _zero_scalar_x(x):
    return np.zeros(np.shape(x)[0])


def _zero_scalar_y(y):
    return np.zeros(np.shape(y)[0])


def _zero_running(t, x, y, u):
    return np.zeros(np.shape(x)[0])


@dataclass(frozen=True)
class CoefficientSet:
    b: Callable
    sigma: Callable
    h: Callable
    phi: Callable
    l: Callable = _zero_running
    psi: Callable = _zero_scalar_x
    g: Callable = _zero_scalar_y
    d: int = 1
    m: int = 1
    k: int = 1
    coupling: str = DECOUPLED
    bound: float = np.inf
    lipschitz: float = 0.0
    sigma_controlled: bool = True
    name: str = "custom"

    def __post_init__(self):
        if self.coupling not in (DECOUPLED, COUPLED):
            raise ParameterError(f"coupling must be {DECOUPLED!r} or {COUPLED!r}")
        if min(self.d, self.m, self.k) < 1:
            raise ParameterError("dimensions d, m, k must be >= 1")
        if self.coupling == COUPLED and self.sigma_controlled:
            object.__setattr__(self, "sigma_controlled", False)
        if not self.bound > 0:
            raise ParameterError("declared bound must be positive")
        if not self.lipschitz >= 0:
            raise ParameterError("Lipschitz constant must be >= 0")

    @property
    def g_is_trivial(self):
        return self.g is _zero_scalar_y

    def with_(self, **changes):
        return replace(self, **changes)


def _check_bound(c, name, val):
    if np.isfinite(c.bound) and val.size and np.max(np.abs(val)) > c.bound:
        warnings.warn(
            f"{name} exceeded declared bound {c.bound!r} (max |{name}| = {np.max(np.abs(val))!r})",
            CoefficientBoundWarning,
            stacklevel=3,
        )


def _call(c, name, fn, shape, *args):
    try:
        val = fn(*args)
        val = np.asarray(val, dtype=np.float64)
        if val.shape != shape:
            val = val.reshape(shape) if val.size == int(np.prod(shape)) else np.broadcast_to(val, shape)
    except Exception as exc:
        raise EvaluationError(f"coefficient {name} failed: {exc}") from exc
    _check_bound(c, name, val)
    return val


def eval_b(c, t, x, y, u):
    return _call(c, "b", c.b, (x.shape[0], c.d), t, x, y, u)


def eval_sigma(c, t, x, y, u):
    return _call(c, "sigma", c.sigma, (x.shape[0], c.d, c.m), t, x, y, u)


def eval_h(c, t, x, y, u):
    return _call(c, "h", c.h, (x.shape[0], c.k), t, x, y, u)


def eval_phi(c, x):
    return _call(c, "phi", c.phi, (x.shape[0], c.k), x)


def eval_l(c, t, x, y, u):
    return _call(c, "l", c.l, (x.shape[0],), t, x, y, u)


def eval_psi(c, x):
    return _call(c, "psi", c.psi, (x.shape[0],), x)


def eval_g(c, y):
    return _call(c, "g", c.g, (y.shape[0],), y)


def control_average(control, cell, evaluate, n):
    """Average ``evaluate(u)`` over the control in ``cell``; ``u`` is broadcast to (n, p).

    A strict control evaluates at its atom; a relaxed one sums weight *
    value over the charged atoms only, so a Dirac row reproduces the strict
    value bit for bit.
    """
    space = control.space
    if isinstance(control, StrictControl):
        j = int(control.cell_atom[cell])
        return evaluate(np.broadcast_to(space.atoms[j], (n, space.p)))
    nz, w = control.support(cell)
    acc = None
    for j, wj in zip(nz, w):
        val = wj * evaluate(np.broadcast_to(space.atoms[j], (n, space.p)))
        acc = val if acc is None else acc + val
    return acc


@dataclass
class PathEnsemble:
    """Seeded Monte Carlo bundle of forward and backward paths."""

    grid: TimeGrid
    x0: np.ndarray
    seed: int
    X: np.ndarray
    dW: np.ndarray
    U_sample: np.ndarray
    Y: Optional[np.ndarray] = None
    Z: Optional[np.ndarray] = None
    cell_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self):
        return self.X.shape[0]

    @property
    def N(self):
        return self.grid.N

    @property
    def d(self):
        return self.X.shape[2]

    @property
    def m(self):
        return self.dW.shape[2]

    @property
    def k(self):
        return None if self.Y is None else self.Y.shape[2]

    def take(self, rows):
        """Sub-ensemble (or resample) on the given path rows."""
        rows = np.asarray(rows)
        return replace(
            self,
            X=self.X[rows],
            dW=self.dW[rows],
            U_sample=self.U_sample[rows],
            Y=None if self.Y is None else self.Y[rows],
            Z=None if self.Z is None else self.Z[rows],
            meta=dict(self.meta),
        )

    # -- export ---------------------------------------------------------
    def to_columnar(self, fh=None):
        """Write ``path, step, t, X.., Y.., Z..`` rows; Z is ``nan`` at the terminal step."""
        own = fh is None
        fh = io.StringIO() if own else fh
        d, N = self.d, self.N
        k = self.k or 0
        km = 0 if self.Z is None else self.Z.shape[2]
        header = ["path", "step", "t"] + [f"X{i}" for i in range(d)]
        header += [f"Y{i}" for i in range(k)] + [f"Z{i}" for i in range(km)]
        fh.write(",".join(header) + "\n")
        t = self.grid.boundaries
        for p in range(self.n_paths):
            for s in range(N + 1):
                row = [str(p), str(s), repr(float(t[s]))]
                row += [repr(float(v)) for v in self.X[p, s]]
                if k:
                    row += [repr(float(v)) for v in self.Y[p, s]]
                if km:
                    row += [repr(float(v)) for v in self.Z[p, s]] if s < N else ["nan"] * km
                fh.write(",".join(row) + "\n")
        return fh.getvalue() if own else None

    def to_bytes(self):
        """Compact binary dump: b'FBSE', version byte, little-endian uint64 header, float64 arrays row-major."""
        flags = (1 if self.Y is not None else 0) | (2 if self.Z is not None else 0)
        k = self.k or 0
        head = b"FBSE" + struct.pack("<B", BINARY_VERSION)
        head += struct.pack("<7Q", self.n_paths, self.N, self.d, k, self.m, self.seed & (2 ** 64 - 1), flags)
        parts = [np.asarray(self.x0, "<f8"), self.grid.boundaries.astype("<f8"), self.X.astype("<f8")]
        if self.Y is not None:
            parts.append(self.Y.astype("<f8"))
        if self.Z is not None:
            parts.append(self.Z.astype("<f8"))
        parts.append(self.dW.astype("<f8"))
        body = b"".join(np.ascontiguousarray(p).tobytes() for p in parts)
        return head + body + np.ascontiguousarray(self.U_sample.astype("<i8")).tobytes()

    @classmethod
    def from_bytes(cls, data):
        if data[:4] != b"FBSE":
            raise ParameterError("not an FBSE ensemble dump (bad magic)")
        (version,) = struct.unpack_from("<B", data, 4)
        if version != BINARY_VERSION:
            raise ParameterError(f"unsupported FBSE version {version}")
        n, N, d, k, m, seed, flags = struct.unpack_from("<7Q", data, 5)
        off = 5 + 8 * 7

        def take(shape, dtype="<f8"):
            nonlocal off
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape).astype(dtype[1:] if dtype.startswith("<") else dtype)
            off += 8 * count
            return arr.copy()

        x0 = take((d,))
        grid = TimeGrid(take((N + 1,)))
        X = take((n, N + 1, d))
        Y = take((n, N + 1, k)) if flags & 1 else None
        Z = take((n, N, k * m)) if flags & 2 else None
        dW = take((n, N, m))
        U = take((n, N), "<i8")
        return cls(grid=grid, x0=x0, seed=int(seed), X=X, dW=dW, U_sample=U, Y=Y, Z=Z)


BINARY_VERSION = 1


def _resolve_relaxation(c, control, relaxation):
    if relaxation not in ("auto", "sample", "average"):
        raise ParameterError(f"unknown relaxation mode {relaxation!r}")
    if isinstance(control, StrictControl):
        return "strict"
    if relaxation == "auto":
        return "sample" if c.sigma_controlled else "average"
    if relaxation == "average" and c.sigma_controlled:
        raise ConfigurationError("drift averaging needs an uncontrolled diffusion; use relaxation='sample'")
    return relaxation


def _path_major(a):
    return np.ascontiguousarray(np.swapaxes(a, 0, 1))


def _time_major(a):
    return np.ascontiguousarray(np.swapaxes(a, 0, 1))


def _draw_atoms(row, uniforms):
    cum = np.cumsum(row)
    idx = np.searchsorted(cum, uniforms, side="right")
    last = np.flatnonzero(row > 0)[-1]
    return np.minimum(idx, last)


def _feedback(y_feedback, step, t, x):
    if hasattr(y_feedback, "at_step"):
        return y_feedback.at_step(step, x)
    return np.asarray(y_feedback(t, x), dtype=np.float64).reshape(x.shape[0], -1)


def simulate_forward(
    c: CoefficientSet,
    control,
    grid: Optional[TimeGrid] = None,
    x0=0.0,
    n_paths: int = 1000,
    seed: int = 0,
    y_feedback=None,
    relaxation: str = "auto",
    antithetic: bool = False,
) -> PathEnsemble:
    """Euler-Maruyama pass of the controlled forward equation.

    ``relaxation`` picks how a relaxed control enters the dynamics:
    ``"sample"`` draws one atom per (path, step) from the cell's weights,
    ``"average"`` integrates the drift against the weights (only valid when
    sigma ignores the control), ``"auto"`` chooses ``average`` for an
    uncontrolled diffusion and ``sample`` otherwise. Randomness comes from a
    counter-based stream keyed by (seed, path, step), so results do not
    depend on batch layout.
    """
    if c.coupling == COUPLED and y_feedback is None:
        raise ConfigurationError("coupled systems need y_feedback (the current Y surface)")
    if c.coupling == DECOUPLED and y_feedback is not None:
        raise ConfigurationError("y_feedback is only meaningful for coupled systems")
    if int(n_paths) < 1:
        raise ParameterError("n_paths must be >= 1")
    grid = control.grid if grid is None else grid
    cmap = control.grid.cell_map(grid)
    mode = _resolve_relaxation(c, control, relaxation)
    n, N, d, m = int(n_paths), grid.N, c.d, c.m
    x0 = np.broadcast_to(np.asarray(x0, dtype=np.float64).reshape(-1), (d,)).copy()
    space = control.space

    X = np.empty((N + 1, n, d))
    X[0] = x0
    dW = np.empty((N, n, m))
    U = np.empty((N, n), dtype=np.int64)
    Yf = np.empty((N + 1, n, c.k)) if c.coupling == COUPLED else None
    keys = np.arange(n, dtype=np.uint64)
    sign = np.ones((n, 1))
    if antithetic:
        keys = keys - (keys % np.uint64(2))
        sign[1::2] = -1.0
    dts = grid.dt
    times = grid.left

    for i in range(N):
        t, dt, cell = float(times[i]), float(dts[i]), int(cmap[i])
        u = _kernels.counter_uniforms(seed, keys, i, 2 * m + 1)
        z = np.sqrt(-2.0 * np.log(1.0 - u[:, 1::2])) * np.cos(2.0 * np.pi * u[:, 2::2])
        dW[i] = np.sqrt(dt) * (sign * z)
        if mode == "strict":
            U[i] = control.cell_atom[cell]
        else:
            U[i] = _draw_atoms(control.weights[cell], u[:, 0])
        xi = X[i]
        yi = None
        if Yf is not None:
            yi = _feedback(y_feedback, i, t, xi)
            Yf[i] = yi
        u_path = space.atoms[U[i]]
        if mode == "average":
            drift = control_average(control, cell, lambda uu: eval_b(c, t, xi, yi, uu), n)
        else:
            drift = eval_b(c, t, xi, yi, u_path)
        sig = eval_sigma(c, t, xi, yi, u_path)
        if m == 1:
            noise = sig[:, :, 0] * dW[i]
        else:
            noise = np.einsum("ndm,nm->nd", sig, dW[i])
        X[i + 1] = xi + drift * dt + noise
        if not np.all(np.isfinite(X[i + 1])):
            bad = int(np.flatnonzero(~np.all(np.isfinite(X[i + 1]), axis=1))[0])
            raise NumericalOverflowError(f"non-finite forward state on path {bad} at step {i + 1}", path=bad, step=i + 1)
    if Yf is not None:
        Yf[N] = _feedback(y_feedback, N, grid.T, X[N])
        Yf = _path_major(Yf)
    X, dW, U = _path_major(X), _path_major(dW), np.ascontiguousarray(U.T)
    meta = {"relaxation": mode, "antithetic": bool(antithetic), "coupling": c.coupling}
    return PathEnsemble(grid=grid, x0=x0, seed=int(seed), X=X, dW=dW, U_sample=U, Y=Yf, cell_map=cmap, meta=meta)


def _backward(c, ens, control, reg, keep_surfaces=False):
    if ens.cell_map is None:
        ens.cell_map = control.grid.cell_map(ens.grid)
    cmap = ens.cell_map
    n, N, k, m = ens.n_paths, ens.N, c.k, ens.m
    Xt, dWt = _time_major(ens.X), _time_major(ens.dW)
    Y = np.empty((N + 1, n, k))
    Z = np.empty((N, n, k * m))
    Y[N] = eval_phi(c, Xt[N])
    dts, times = ens.grid.dt, ens.grid.left
    surfaces = [None] * N
    resid = np.empty((N, k + k * m))
    fvar = np.empty((N, k + k * m))
    n_params = np.empty(N, dtype=np.int64)
    for i in range(N - 1, -1, -1):
        t, dt, cell = float(times[i]), float(dts[i]), int(cmap[i])
        xi = Xt[i]
        y_next = Y[i + 1]
        surf, pred = fit(xi, y_next, reg, step=i)
        # Z from the innovation Y_{i+1} - E[Y_{i+1} | X_i]; same mean as Y_{i+1} dW, less noise
        zt = ((y_next - pred)[:, :, None] * dWt[i][:, None, :]).reshape(n, k * m)
        zsurf, zfit = fit(xi, zt, reg, step=i)
        resid[i, :k] = residual_variance(y_next, pred)
        resid[i, k:] = residual_variance(zt, zfit)
        fvar[i, :k] = fit_variance(surf, xi, y_next, pred, reg)
        fvar[i, k:] = fit_variance(zsurf, xi, zt, zfit, reg)
        n_params[i] = surf.n_params
        Z[i] = zfit / dt
        hbar = control_average(control, cell, lambda uu: eval_h(c, t, xi, pred, uu), n)
        yi = pred + hbar * dt
        if c.lipschitz * dt >= 0.5:
            hbar = control_average(control, cell, lambda uu: eval_h(c, t, xi, yi, uu), n)
            yi = pred + hbar * dt
        if not np.all(np.isfinite(yi)):
            bad = int(np.flatnonzero(~np.all(np.isfinite(yi), axis=1))[0])
            raise NumericalOverflowError(f"non-finite backward value on path {bad} at step {i}", path=bad, step=i)
        Y[i] = yi
        if keep_surfaces:
            surfaces[i] = surf
    Y, Z = _path_major(Y), _path_major(Z)
    out = replace(ens, Y=Y, Z=Z, meta=dict(ens.meta))
    out.meta["regression"] = reg.to_dict()
    out.meta["resid_var"] = resid
    out.meta["n_params"] = n_params
    out.meta["fit_var"] = fvar
    if keep_surfaces:
        out.meta["surfaces"] = surfaces
    return out


def solve_backward_decoupled(c: CoefficientSet, ens: PathEnsemble, control, reg: RegressionSpec) -> PathEnsemble:
    """Backward induction by least-squares regression on the forward state.

    ``Y_N = phi(X_N)``; for ``i = N-1..0`` the conditional expectation of
    ``Y_{i+1}`` given ``X_i`` is regressed, the driver (averaged over the
    control) is added explicitly, and ``Z_i`` is the regression of
    ``(Y_{i+1} - E[Y_{i+1} | X_i]) dW_i^T`` divided by the step. Subtracting
    the conditional mean leaves the expectation unchanged and removes its
    noise from the Z fit.
    """
    if c.coupling != DECOUPLED:
        raise ConfigurationError("solve_backward_decoupled needs a decoupled coefficient set; use solve_coupled")
    if ens.X is None or ens.dW is None:
        raise StateError("ensemble lacks forward paths")
    return _backward(c, ens, control, reg)


class YSurface:
    """Per-step regression surfaces x -> Y used as forward feedback."""

    def __init__(self, fits):
        self.fits = fits

    def at_step(self, step, x):
        return self.fits[step].predict(x)


class _ZeroSurface:
    def __init__(self, k):
        self.k = k

    def at_step(self, step, x):
        return np.zeros((x.shape[0], self.k))


@dataclass(frozen=True)
class PicardConfig:
    max_iters: int = 50
    tol: float = 1e-3
    damping: float = 1.0

    def __post_init__(self):
        if int(self.max_iters) < 1:
            raise ParameterError("max_iters must be >= 1")
        if not self.tol > 0:
            raise ParameterError("tol must be > 0")
        if not 0 < self.damping <= 1:
            raise ParameterError("damping must lie in (0, 1]")

    def to_dict(self):
        return {"max_iters": int(self.max_iters), "tol": float(self.tol), "damping": float(self.damping)}


_PROBE_LEVELS = np.linspace(0.1, 0.9, 9)


def _probe_points(x):
    return np.quantile(x, _PROBE_LEVELS, axis=0)


def solve_coupled(
    c: CoefficientSet,
    control,
    grid: Optional[TimeGrid] = None,
    x0=0.0,
    n_paths: int = 1000,
    seed: int = 0,
    reg: RegressionSpec = RegressionSpec(),
    pc: PicardConfig = PicardConfig(),
    relaxation: str = "auto",
    antithetic: bool = False,
) -> PathEnsemble:
    """Picard iteration on the Y surface fed back into the forward drift.

    Each sweep simulates the forward equation with the current surface,
    solves the backward equation on that ensemble, and re-fits a damped
    surface. The returned ensemble carries ``meta['picard_trace']`` (sup-norm
    surface changes at decile probe points, one entry per sweep) and
    ``meta['converged_at']`` (the sweep after which the surface stopped moving).
    """
    if c.coupling != COUPLED:
        raise ConfigurationError("solve_coupled needs a coupled coefficient set")
    grid = control.grid if grid is None else grid
    surface = _ZeroSurface(c.k)
    trace = []
    ens = None
    for it in range(1, int(pc.max_iters) + 1):
        ens = simulate_forward(c, control, grid, x0, n_paths, seed, y_feedback=surface,
                               relaxation=relaxation, antithetic=antithetic)
        ens = _backward(c, ens, control, reg)
        fits = []
        change = 0.0
        for i in range(grid.N + 1):
            xi = ens.X[:, i]
            old = surface.at_step(i, xi)
            target = pc.damping * ens.Y[:, i] + (1.0 - pc.damping) * old
            new_fit, _ = fit(xi, target, reg, step=i)
            probes = _probe_points(xi)
            diff = np.max(np.abs(new_fit.predict(probes) - surface.at_step(i, probes)))
            change = max(change, float(diff))
            fits.append(new_fit)
        trace.append(change)
        surface = YSurface(fits)
        if change < pc.tol:
            ens.meta["picard_trace"] = trace
            ens.meta["converged_at"] = max(1, it - 1)
            ens.meta["surface"] = surface
            return ens
    raise ConvergenceError(
        f"Picard iteration did not reach tol={pc.tol!r} in {pc.max_iters} sweeps (last change {trace[-1]!r})",
        trace=trace,
        ensemble=ens,
    )


def solve(c, control, grid=None, x0=0.0, n_paths=1000, seed=0, reg=RegressionSpec(), pc=PicardConfig(),
          relaxation="auto", antithetic=False):
    """Forward + backward for either coupling type."""
    if c.coupling == COUPLED:
        return solve_coupled(c, control, grid, x0, n_paths, seed, reg, pc, relaxation, antithetic)
    ens = simulate_forward(c, control, grid, x0, n_paths, seed, relaxation=relaxation, antithetic=antithetic)
    return solve_backward_decoupled(c, ens, control, reg)


# ---------------------------------------------------------------------------
# generator and martingale-problem residuals
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothFunction:
    """f with gradient and Hessian callbacks, all vectorised over rows of x (n, d)."""

    value: Callable
    grad: Callable
    hess: Callable
    name: str = "f"


def apply_generator(c: CoefficientSet, f: SmoothFunction, t, x, y, u):
    """(1/2) sum a_ij f_ij + sum b_i f_i with a = sigma sigma^T, evaluated row-wise.

    Accepts a single point (x of shape (d,)) or a batch (n, d); returns a
    float or an (n,) array accordingly.
    """
    single = np.ndim(x) <= 1
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if single and x.shape[1] != c.d:
        x = x.reshape(1, -1)
    n = x.shape[0]
    if x.shape[1] != c.d:
        raise DimensionError(f"state has dimension {x.shape[1]}, coefficients expect d={c.d}")
    u = np.asarray(u, dtype=np.float64)
    if u.ndim < 2:
        u = np.broadcast_to(u.reshape(1, -1), (n, max(u.size, 1)))
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        if y.ndim < 2:
            y = np.broadcast_to(y.reshape(1, -1), (n, c.k))
    grad = np.asarray(f.grad(x), dtype=np.float64)
    hess = np.asarray(f.hess(x), dtype=np.float64)
    if grad.shape != (n, c.d) or hess.shape != (n, c.d, c.d):
        raise DimensionError(f"gradient/Hessian shapes {grad.shape}/{hess.shape} do not match d={c.d}")
    bv = eval_b(c, t, x, y, u)
    sv = eval_sigma(c, t, x, y, u)
    a = np.einsum("ndm,nem->nde", sv, sv)
    out = 0.5 * np.einsum("nde,nde->n", a, hess) + np.einsum("nd,nd->n", bv, grad)
    return float(out[0]) if single else out


def _generator_sum(c, ens, control, f, upto):
    """sum_{i<upto} (control-averaged Lf)(t_i, X_i) dt_i for every path."""
    cmap = ens.cell_map if ens.cell_map is not None else control.grid.cell_map(ens.grid)
    n = ens.n_paths
    acc = np.zeros(n)
    for i in range(upto):
        t, dt = float(ens.grid.left[i]), float(ens.grid.dt[i])
        xi = ens.X[:, i]
        yi = ens.Y[:, i] if (c.coupling == COUPLED and ens.Y is not None) else None
        lf = control_average(control, int(cmap[i]), lambda uu: apply_generator(c, f, t, xi, yi, uu), n)
        acc = acc + lf * dt
    return acc


def compensated(c, ens, control, f, step):
    """C_t f = f(X_t) - f(x0) - sum_{i<t} Lf dt for every path, at grid index ``step``."""
    fx = np.asarray(f.value(ens.X[:, step]), dtype=np.float64).reshape(-1)
    f0 = np.asarray(f.value(ens.x0.reshape(1, -1)), dtype=np.float64).reshape(-1)[0]
    return fx - f0 - _generator_sum(c, ens, control, f, step)


def martingale_residual(c, ens, control, f: SmoothFunction, s: int, t: int, Phi=None):
    """Monte Carlo estimate of E[Phi_s (C_t f - C_s f)] and its standard error.

    ``Phi`` maps the forward path up to ``s`` (array (n, s+1, d)) to an (n,)
    array; ``None`` means Phi = 1.
    """
    if not 0 <= s < t <= ens.N:
        raise ParameterError(f"need 0 <= s < t <= N, got s={s}, t={t}")
    diff = compensated(c, ens, control, f, t) - compensated(c, ens, control, f, s)
    weight = np.ones(ens.n_paths) if Phi is None else np.asarray(Phi(ens.X[:, : s + 1]), dtype=np.float64).reshape(-1)
    vals = weight * diff
    n = vals.size
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(vals.mean()), se
