"""The numba kernels and their numpy fallbacks compute the same thing."""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvattn import _kernels as k

needs_numba = pytest.mark.skipif(not k.HAVE_NUMBA, reason="numba unavailable or disabled")
dims = st.integers(2, 9)


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), dims, dims, st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_correlate2d(B, H, W, R, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(B, H, W))
    ker = r.normal(size=(2 * R + 1, 2 * R + 1))
    assert np.allclose(k.correlate2d_same_numba(x, ker), k.correlate2d_same_numpy(x, ker), atol=1e-12)


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.booleans(), st.integers(0, 2**31 - 1))
def test_maxpool_forward_backward(B, h, w, ties, seed):
    r = np.random.default_rng(seed)
    x = r.integers(0, 3, size=(B, 2 * h, 2 * w)).astype(np.float64) if ties else r.normal(size=(B, 2 * h, 2 * w))
    o1, a1 = k.maxpool2x2_numba(x)
    o2, a2 = k.maxpool2x2_numpy(x)
    assert np.array_equal(o1, o2) and np.array_equal(a1, a2)
    g = r.normal(size=o1.shape)
    assert np.array_equal(k.maxpool2x2_backward_numba(g, a1), k.maxpool2x2_backward_numpy(g, a2))


@needs_numba
@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 2), st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3]), st.integers(1, 2))
def test_col2im(C, N, Ho, Wo, kk, stride):
    r = np.random.default_rng(C * 100 + N * 10 + Ho)
    cols = r.normal(size=(C, kk, kk, N, Ho, Wo))
    Hp = stride * (Ho - 1) + kk
    Wp = stride * (Wo - 1) + kk
    assert np.allclose(k.col2im_numba(cols, Hp, Wp, stride), k.col2im_numpy(cols, Hp, Wp, stride), atol=1e-12)


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), dims, dims, st.floats(1e-3, 2.0), st.integers(0, 2**31 - 1))
def test_curvature_fields_and_backward(B, H, W, eta, seed):
    r = np.random.default_rng(seed)
    phi = r.normal(size=(B, H, W))
    f1 = k.curvature_numba(phi, eta)
    f2 = k.curvature_numpy(phi, eta)
    for a, b in zip(f1, f2):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
    g = r.normal(size=phi.shape)
    _, nx, ny, mag = f2
    assert np.allclose(
        k.curvature_backward_numba(g, nx, ny, mag), k.curvature_backward_numpy(g, nx, ny, mag), rtol=1e-10, atol=1e-10
    )


@needs_numba
@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(0, 2**31 - 1))
def test_min_sq_dist_exact(n, m, seed):
    r = np.random.default_rng(seed)
    a = r.integers(0, 20, size=(n, 2)).astype(np.float64)
    b = r.integers(0, 20, size=(m, 2)).astype(np.float64)
    assert np.array_equal(k.min_sq_dist_numba(a, b), k.min_sq_dist_numpy(a, b))


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, CVATTN_DISABLE_NUMBA="1")
    out = subprocess.run(
        [sys.executable, "-c", "from cvattn import _kernels; print(_kernels.backend())"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "numpy"


def test_numpy_backend_end_to_end_gradcheck():
    code = (
        "from cvattn.gradsuite import suite_cv, suite_dt\n"
        "from cvattn import _kernels\n"
        "assert _kernels.backend() == 'numpy'\n"
        "bad = [r for r in suite_cv(0) + suite_dt(0) if not r[1] <= r[2]]\n"
        "print('bad', bad)\n"
        "raise SystemExit(1 if bad else 0)\n"
    )
    env = dict(os.environ, CVATTN_DISABLE_NUMBA="1")
    res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stdout + res.stderr
