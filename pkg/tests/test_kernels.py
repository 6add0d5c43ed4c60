import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fbsde_relax import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@needs_numba
@pytest.mark.parametrize("seed,step,lanes", [(0, 0, 1), (7, 3, 5), (2 ** 63 + 11, 1000, 3)])
def test_counter_uniforms_backends_agree(seed, step, lanes):
    paths = np.arange(257)
    a = K.counter_uniforms_numpy(seed, paths, step, lanes)
    b = K.counter_uniforms_numba(seed, paths, step, lanes)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() < 1.0


def test_counter_uniforms_depend_only_on_key():
    full = K.counter_uniforms(3, np.arange(100), 5, 3)
    part = K.counter_uniforms(3, np.array([17, 42]), 5, 3)
    assert np.array_equal(full[[17, 42]], part)
    assert not np.array_equal(full, K.counter_uniforms(4, np.arange(100), 5, 3))


def test_counter_normals_moments():
    z = K.counter_normals(1, np.arange(200_000), 0, 1)[:, 0]
    assert abs(z.mean()) < 3 * 1 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 3 * np.sqrt(2.0 / z.size)


@needs_numba
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 40)),
                  elements=st.floats(-3, 3)),
       st.floats(-2, 1), st.floats(0.01, 2))
def test_upcross_backends_agree(paths, a, width):
    b = a + width
    assert np.array_equal(K.upcross_counts_numpy(paths, a, b), K.upcross_counts_numba(paths, a, b))


@needs_numba
def test_bin_sums_backends_agree():
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 13, size=1000)
    vals = rng.standard_normal((1000, 2))
    s1, c1 = K.bin_sums_numpy(idx, vals, 13)
    s2, c2 = K.bin_sums_numba(idx, vals, 13)
    assert np.array_equal(c1, c2) and np.allclose(s1, s2, rtol=0, atol=1e-12)
    assert c1.sum() == 1000


_PROBE = """
import numpy as np
from fbsde_relax import _kernels, solve, TimeGrid
from fbsde_relax.builtins import get_builtin
c, sp, ctl, _ = get_builtin("lq-decoupled").make()
g = TimeGrid.uniform(1.0, 8)
ens = solve(c, ctl(g), g, 0.0, 200, 5)
print(_kernels.BACKEND, ens.X.tobytes().hex()[:64], repr(float(ens.X.sum())))
"""


@needs_numba
def test_environment_switch_selects_backend_with_identical_paths():
    outs = {}
    for flag in ("0", "1"):
        env = dict(os.environ, FBSDE_RELAX_NUMBA=flag)
        r = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True, text=True, check=True)
        outs[flag] = r.stdout.split()
    assert outs["0"][0] == "numpy" and outs["1"][0] == "numba"
    assert outs["0"][1:] == outs["1"][1:]
