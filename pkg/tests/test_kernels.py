import os
import subprocess
import sys

import numpy as np
import pytest

from gpfl import kernels

pytestmark = pytest.mark.skipif(not kernels._HAVE_NUMBA, reason="numba not importable")


def _cases(seed):
    r = np.random.default_rng(seed)
    B, K, U = int(r.integers(1, 6)), int(r.integers(2, 9)), int(r.integers(2, 6))
    x = r.normal(size=(B, K))
    gain, bias = r.normal(size=K), r.normal(size=K)
    _, xhat, inv = kernels.layer_norm_fwd_np(x, gain, bias, 1e-5)
    c = r.normal(size=(U, K))
    _, fh, ch, nf, nc = kernels.cosine_fwd_np(x, c, 1e-12)
    logits = r.normal(size=(B, U)) * 5
    lab = r.integers(0, U, size=B).astype(np.int64)
    _, probs = kernels.softmax_xent_fwd_np(logits, lab)
    y = r.normal(size=(B, K))
    dist, diff = kernels.row_l2_fwd_np(x, y)
    P, o, i = int(r.integers(1, 8)), int(r.integers(1, 7)), int(r.integers(1, 7))
    return {
        "layer_norm_fwd": (x, gain, bias, 1e-5),
        "layer_norm_bwd": (r.normal(size=(B, K)), xhat, inv, gain),
        "cosine_fwd": (x, c, 1e-12),
        "cosine_bwd": (r.normal(size=(B, U)), fh, ch, nf, nc),
        "softmax_xent_fwd": (logits, lab),
        "softmax_xent_bwd": (r.normal(size=B), probs, lab),
        "row_l2_fwd": (x, y),
        "row_l2_bwd": (r.normal(size=B), diff, dist),
        "matched_outer_sqdist": (r.normal(size=(P, o)), r.normal(size=(P, i)), r.normal(size=(o, i))),
    }


@pytest.mark.parametrize("seed", range(20))
def test_numba_and_numpy_paths_agree(seed):
    for name, args in _cases(seed).items():
        a = getattr(kernels, name + "_np")(*args)
        b = getattr(kernels, name + "_nb")(*args)
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        for u, v in zip(a, b):
            np.testing.assert_allclose(u, v, rtol=1e-10, atol=1e-12, err_msg=name)


def test_matched_outer_sqdist_against_explicit_outer():
    r = np.random.default_rng(0)
    d, a, T = r.normal(size=(4, 3)), r.normal(size=(4, 5)), r.normal(size=(3, 5))
    want = [((np.outer(d[p], a[p]) - T) ** 2).sum() for p in range(4)]
    np.testing.assert_allclose(kernels.matched_outer_sqdist_np(d, a, T), want, rtol=1e-12)
    np.testing.assert_allclose(kernels.matched_outer_sqdist_nb(d, a, T), want, rtol=1e-12)


def test_degenerate_inputs_are_finite():
    z = np.zeros((1, 3))
    for suffix in ("_np", "_nb"):
        out, xhat, inv = getattr(kernels, "layer_norm_fwd" + suffix)(z, np.ones(3), np.zeros(3), 0.0)
        assert np.all(out == 0) and np.all(inv == 0)
        sim, *_ = getattr(kernels, "cosine_fwd" + suffix)(z, np.ones((2, 3)), 1e-12)
        assert np.all(sim == 0)
        dist, diff = getattr(kernels, "row_l2_fwd" + suffix)(z, z)
        assert np.all(getattr(kernels, "row_l2_bwd" + suffix)(np.ones(1), diff, dist) == 0)


def test_env_flag_selects_numpy_backend():
    code = "import gpfl.kernels as k; print(k.backend(), k.layer_norm_fwd.__name__)"
    for flag, want in (("1", "numpy"), ("0", "numba")):
        env = dict(os.environ, GPFL_DISABLE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, fn = out.stdout.split()
        assert backend == want
        assert fn.endswith("_np" if want == "numpy" else "_nb")
