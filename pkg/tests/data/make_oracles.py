"""Regenerate tests/data/oracles.json.

Every value here is computed without importing fbsde_relax: brute-force
quadrature, closed forms, and scipy ODE / quadrature solves. Run once and
commit the JSON; the tests only read it.

    python tests/data/make_oracles.py
"""
import json
import math
from pathlib import Path

import numpy as np
from scipy import integrate

OUT = Path(__file__).with_name("oracles.json")


def chattering_bruteforce(T=1.0, n=10, nodes=10**6):
    """J = int_0^T X^2 dt for the triangle wave X' = +1, -1, ... switching every T/n."""
    t = np.linspace(0.0, T, nodes + 1)
    k = np.minimum((t // (T / n)).astype(np.int64), n - 1)
    tau = t - k * (T / n)
    x = np.where(k % 2 == 0, tau, T / n - tau)
    y = x * x
    # composite trapezoid on a grid containing every switch point (nodes divisible by n)
    J = float(np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(t)))
    return {"J": J, "J_closed_form": T * (T / n) ** 2 / 3.0, "max_abs_X": float(np.max(np.abs(x))),
            "nodes": nodes}


def lq_values(alpha=0.5, ustar=1.0, x0=0.0, T=1.0, levels=(16, 32, 64)):
    """Linear BSDE dY = -alpha Y dt + Z dW, Y_T = X_T with X_t = x0 + u* t + W_t."""
    mean_xT = x0 + ustar * T
    y0 = math.exp(alpha * T) * mean_xT
    # the explicit scheme multiplies by (1 + alpha dt) per step; with antithetic
    # pairs the sample mean of X_T is exact, so the discrete Y0 is this product
    discrete = {str(N): (1.0 + alpha * T / N) ** N * mean_xT for N in levels}
    return {
        "alpha": alpha, "ustar": ustar, "x0": x0, "T": T,
        "Y0": y0,
        "J": mean_xT ** 2 + T,  # E X_T^2 with psi = x^2
        "Y0_discrete_antithetic": discrete,
    }


def coupled_values(x0=1.0, T=1.0):
    """Affine ansatz Y = a(t) X + c(t) for b=-y, sigma=1, h=-x, phi=x.

    a' = 1 + a^2, a(T) = 1 and c' = a c, c(T) = 0 (so c = 0); E X solves
    m' = -(a m + c). Solved backward/forward with solve_ivp.
    """
    back = integrate.solve_ivp(lambda t, z: [1.0 + z[0] ** 2, z[0] * z[1]], (T, 0.0), [1.0, 0.0],
                               rtol=1e-12, atol=1e-14, dense_output=True)
    a0, c0 = back.y[0, -1], back.y[1, -1]
    fwd = integrate.solve_ivp(lambda t, m: [-(back.sol(t)[0] * m[0] + back.sol(t)[1])], (0.0, T), [x0],
                              rtol=1e-12, atol=1e-14)
    return {"x0": x0, "T": T, "a0": float(a0), "c0": float(c0), "Y0": float(a0 * x0 + c0),
            "E_XT": float(fwd.y[0, -1]), "Y0_closed_form": math.tan(math.pi / 4 - T) * x0}


def _gauss_mean(fn, mean, var, deg=80):
    """E fn(N(mean, var)) by Gauss-Hermite quadrature."""
    z, w = np.polynomial.hermite_e.hermegauss(deg)
    return float(np.sum(w * fn(mean + math.sqrt(var) * z)) / math.sqrt(2 * math.pi))


def _exp_capped(x, cap=3.0):
    s = np.tanh(x / cap)
    f = np.exp(cap * s)
    sech2 = 1.0 - s * s
    f1 = f * sech2
    f2 = f * (sech2 ** 2 - (2.0 / cap) * s * sech2)
    return f, f1, f2


def residual_bias(N=64, T=1.0, ustar=1.0, x0=0.0, pairs=((0, 16), (16, 48), (32, 64))):
    """Euler bias of E[C_t f - C_s f] on X = x0 + u* t + W for the residual battery.

    bias = sum_i int_{t_i}^{t_{i+1}} (g(t_i) - g(s)) ds with g(s) = E[Lf(X_s)],
    Lf = u* f' + f''/2. Returns |bias| / dt per (f, pair) and the frozen C.
    """
    dt = T / N
    lf = {
        "x": lambda x: ustar * np.ones_like(x),
        "x2": lambda x: 2.0 * ustar * x + 1.0,
        "exp_capped": lambda x: ustar * _exp_capped(x)[1] + 0.5 * _exp_capped(x)[2],
    }
    out = {}
    worst = 0.0
    for name, L in lf.items():
        def g(s, L=L):
            return _gauss_mean(L, x0 + ustar * s, s) if s > 0 else float(L(np.array([x0]))[0])

        per = {}
        for s_idx, t_idx in pairs:
            total = 0.0
            for i in range(s_idx, t_idx):
                ti = i * dt
                gi = g(ti)
                val, _ = integrate.quad(lambda s: gi - g(s), ti, ti + dt, epsabs=1e-13)
                total += val
            per[f"{s_idx}-{t_idx}"] = abs(total) / dt
            worst = max(worst, abs(total) / dt)
        out[name] = per
    # frozen constant: twice the worst analytic coefficient, rounded up
    return {"N": N, "coef_over_dt": out, "C": math.ceil(2.0 * worst * 10) / 10, "pairs": [list(p) for p in pairs]}


def brownian_values(T=1.0):
    return {"E_int_Z2": T, "Var_XT": T}


def main():
    data = {
        "chattering": chattering_bruteforce(),
        "lq": lq_values(),
        "coupled": coupled_values(),
        "martingale_residual": residual_bias(),
        "brownian": brownian_values(),
        "nonconvex_gap": 1.0,  # |l_bar - l(u)| with l = x^2 - u^2 on {-1, +1}
        "generator": "tests/data/make_oracles.py",
        "scipy": __import__("scipy").__version__,
    }
    OUT.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(json.dumps(data, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
