"""Hot inner loops, compiled with numba when available.

Every kernel has a pure-numpy twin. Set ``FBSDE_RELAX_NUMBA=0`` in the
environment (before import) to force the numpy path; both paths return
bit-identical results, which the test-suite checks.
"""
import os

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SEED_SALT = np.uint64(0xD1B54A32D192ED03)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def _env_wants_numba():
    flag = os.environ.get("FBSDE_RELAX_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "no", "off")


try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _env_wants_numba()
BACKEND = "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy implementations
# --------------------------------------------------------------------------

def _splitmix_np(z):
    z = z + _GOLDEN
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


def counter_uniforms_numpy(seed, paths, step, n_lanes):
    """Uniforms in [0, 1) keyed by (seed, path, step, lane); shape (len(paths), n_lanes)."""
    paths = np.asarray(paths, dtype=np.uint64).reshape(-1, 1)
    lanes = np.arange(n_lanes, dtype=np.uint64).reshape(1, -1)
    key = _splitmix_np(np.full((1, 1), np.uint64(seed) ^ _SEED_SALT, dtype=np.uint64))
    z = _splitmix_np(key ^ paths)
    z = _splitmix_np(z ^ np.full((1, 1), np.uint64(step), dtype=np.uint64))
    z = _splitmix_np(z ^ lanes)
    return (z >> _S11).astype(np.float64) * _INV53


def upcross_counts_numpy(paths, a, b):
    """Completed passages from strictly below ``a`` to strictly above ``b``, per row."""
    paths = np.atleast_2d(np.asarray(paths, dtype=np.float64))
    n, length = paths.shape
    counts = np.zeros(n, dtype=np.int64)
    below = np.zeros(n, dtype=bool)
    for j in range(length):
        v = paths[:, j]
        hit = below & (v > b)
        counts += hit
        below = np.where(hit, False, below | (v < a))
    return counts


def bin_sums_numpy(idx, values, n_bins):
    """Per-bin sums of ``values`` (n, r) and counts, accumulated in path order."""
    idx = np.asarray(idx, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    sums = np.zeros((n_bins, values.shape[1]), dtype=np.float64)
    for col in range(values.shape[1]):
        sums[:, col] = np.bincount(idx, weights=values[:, col], minlength=n_bins)
    counts = np.bincount(idx, minlength=n_bins).astype(np.int64)
    return sums, counts


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, inline="always")
    def _splitmix_nb(z):
        z = z + _GOLDEN
        z = (z ^ (z >> _S30)) * _MIX1
        z = (z ^ (z >> _S27)) * _MIX2
        return z ^ (z >> _S31)

    @numba.njit(cache=True)
    def _counter_uniforms_nb(seed, paths, step, n_lanes):
        n = paths.shape[0]
        out = np.empty((n, n_lanes), dtype=np.float64)
        key = _splitmix_nb(seed ^ _SEED_SALT)
        for i in range(n):
            z_path = _splitmix_nb(key ^ paths[i])
            z_step = _splitmix_nb(z_path ^ step)
            for lane in range(n_lanes):
                z = _splitmix_nb(z_step ^ np.uint64(lane))
                out[i, lane] = np.float64(z >> _S11) * _INV53
        return out

    @numba.njit(cache=True)
    def _upcross_counts_nb(paths, a, b):
        n, length = paths.shape
        counts = np.zeros(n, dtype=np.int64)
        for i in range(n):
            below = False
            c = 0
            for j in range(length):
                v = paths[i, j]
                if below:
                    if v > b:
                        c += 1
                        below = False
                elif v < a:
                    below = True
            counts[i] = c
        return counts

    @numba.njit(cache=True)
    def _bin_sums_nb(idx, values, n_bins):
        n, r = values.shape
        sums = np.zeros((n_bins, r), dtype=np.float64)
        counts = np.zeros(n_bins, dtype=np.int64)
        for i in range(n):
            j = idx[i]
            counts[j] += 1
            for col in range(r):
                sums[j, col] += values[i, col]
        return sums, counts

    def counter_uniforms_numba(seed, paths, step, n_lanes):
        paths = np.ascontiguousarray(np.asarray(paths, dtype=np.uint64).reshape(-1))
        return _counter_uniforms_nb(np.uint64(seed), paths, np.uint64(step), int(n_lanes))

    def upcross_counts_numba(paths, a, b):
        paths = np.ascontiguousarray(np.atleast_2d(np.asarray(paths, dtype=np.float64)))
        return _upcross_counts_nb(paths, float(a), float(b))

    def bin_sums_numba(idx, values, n_bins):
        idx = np.ascontiguousarray(np.asarray(idx, dtype=np.int64))
        values = np.ascontiguousarray(np.asarray(values, dtype=np.float64))
        return _bin_sums_nb(idx, values, int(n_bins))


if USE_NUMBA:
    counter_uniforms = counter_uniforms_numba
    upcross_counts = upcross_counts_numba
    bin_sums = bin_sums_numba
else:
    counter_uniforms = counter_uniforms_numpy
    upcross_counts = upcross_counts_numpy
    bin_sums = bin_sums_numpy


def counter_normals(seed, paths, step, dim):
    """Standard normals (len(paths), dim) from the counter stream.

    Lane 0 is reserved for the control draw; normal ``j`` is a Box-Muller
    cosine branch on lanes ``2j+1`` and ``2j+2``. The transcendental part stays
    in numpy so both backends agree bit for bit.
    """
    u = counter_uniforms(seed, paths, step, 2 * dim + 1)
    u1 = 1.0 - u[:, 1::2]
    u2 = u[:, 2::2]
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def control_uniforms(seed, paths, step):
    return counter_uniforms(seed, paths, step, 1)[:, 0]
