"""Fused numeric kernels used by the autodiff primitives and the DLG probe.

Every kernel has two implementations: a numba ``@njit`` loop version and a
vectorised numpy version.  The numba path is used when numba imports and the
environment variable ``GPFL_DISABLE_NUMBA`` is unset (or ``0``).  Both paths
compute the same quantities; they agree to rounding error, not bitwise.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _flag_disabled() -> bool:
    return os.environ.get("GPFL_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")


USE_NUMBA = _HAVE_NUMBA and not _flag_disabled()


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def layer_norm_fwd_np(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=1, keepdims=True)
    denom = var + eps
    inv_std = np.where(denom > 0.0, 1.0 / np.sqrt(np.where(denom > 0.0, denom, 1.0)), 0.0)
    xhat = xc * inv_std
    return xhat * gain + bias, xhat, inv_std[:, 0]


def layer_norm_bwd_np(g, xhat, inv_std, gain):
    dxhat = g * gain
    k = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / k
    m2 = (dxhat * xhat).sum(axis=1, keepdims=True) / k
    dx = inv_std[:, None] * (dxhat - m1 - xhat * m2)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def cosine_fwd_np(f, c, eps):
    nf = np.sqrt((f * f).sum(axis=1))
    nc = np.sqrt((c * c).sum(axis=1))
    nf = np.maximum(nf, eps)
    nc = np.maximum(nc, eps)
    fh = f / nf[:, None]
    ch = c / nc[:, None]
    return fh @ ch.T, fh, ch, nf, nc


def cosine_bwd_np(g, fh, ch, nf, nc):
    dfh = g @ ch
    dch = g.T @ fh
    df = (dfh - (dfh * fh).sum(axis=1, keepdims=True) * fh) / nf[:, None]
    dc = (dch - (dch * ch).sum(axis=1, keepdims=True) * ch) / nc[:, None]
    return df, dc


def softmax_xent_fwd_np(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    probs = ez / s
    rows = np.arange(logits.shape[0])
    losses = np.log(s[:, 0]) - z[rows, labels]
    return losses, probs


def softmax_xent_bwd_np(g_rows, probs, labels):
    d = probs.copy()
    d[np.arange(probs.shape[0]), labels] -= 1.0
    return d * g_rows[:, None]


def row_l2_fwd_np(a, b):
    diff = a - b
    return np.sqrt((diff * diff).sum(axis=1)), diff


def row_l2_bwd_np(g_rows, diff, dist):
    safe = np.where(dist > 0.0, dist, 1.0)
    scale = np.where(dist > 0.0, g_rows / safe, 0.0)
    return diff * scale[:, None]


def matched_outer_sqdist_np(delta, act, target):
    """Rowwise ``||outer(delta_p, act_p) - target||_F^2`` without forming the outer products."""
    dd = (delta * delta).sum(axis=1)
    aa = (act * act).sum(axis=1)
    cross = np.einsum("po,oi,pi->p", delta, target, act)
    return dd * aa - 2.0 * cross + (target * target).sum()


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if _HAVE_NUMBA:

    @njit(cache=True)
    def layer_norm_fwd_nb(x, gain, bias, eps):
        n, k = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        inv_std = np.empty(n)
        for i in range(n):
            m = 0.0
            for j in range(k):
                m += x[i, j]
            m /= k
            v = 0.0
            for j in range(k):
                d = x[i, j] - m
                v += d * d
            v /= k
            denom = v + eps
            s = 1.0 / np.sqrt(denom) if denom > 0.0 else 0.0
            inv_std[i] = s
            for j in range(k):
                h = (x[i, j] - m) * s
                xhat[i, j] = h
                out[i, j] = h * gain[j] + bias[j]
        return out, xhat, inv_std

    @njit(cache=True)
    def layer_norm_bwd_nb(g, xhat, inv_std, gain):
        n, k = g.shape
        dx = np.empty_like(g)
        dgain = np.zeros(k)
        dbias = np.zeros(k)
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(k):
                dh = g[i, j] * gain[j]
                m1 += dh
                m2 += dh * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            m1 /= k
            m2 /= k
            for j in range(k):
                dx[i, j] = inv_std[i] * (g[i, j] * gain[j] - m1 - xhat[i, j] * m2)
        return dx, dgain, dbias

    @njit(cache=True)
    def cosine_fwd_nb(f, c, eps):
        b, k = f.shape
        u = c.shape[0]
        nf = np.empty(b)
        nc = np.empty(u)
        fh = np.empty_like(f)
        ch = np.empty_like(c)
        for i in range(b):
            s = 0.0
            for j in range(k):
                s += f[i, j] * f[i, j]
            s = max(np.sqrt(s), eps)
            nf[i] = s
            for j in range(k):
                fh[i, j] = f[i, j] / s
        for i in range(u):
            s = 0.0
            for j in range(k):
                s += c[i, j] * c[i, j]
            s = max(np.sqrt(s), eps)
            nc[i] = s
            for j in range(k):
                ch[i, j] = c[i, j] / s
        sim = np.empty((b, u))
        for i in range(b):
            for v in range(u):
                acc = 0.0
                for j in range(k):
                    acc += fh[i, j] * ch[v, j]
                sim[i, v] = acc
        return sim, fh, ch, nf, nc

    @njit(cache=True)
    def cosine_bwd_nb(g, fh, ch, nf, nc):
        b, k = fh.shape
        u = ch.shape[0]
        df = np.zeros_like(fh)
        dc = np.zeros_like(ch)
        for i in range(b):
            for v in range(u):
                gv = g[i, v]
                for j in range(k):
                    df[i, j] += gv * ch[v, j]
                    dc[v, j] += gv * fh[i, j]
        for i in range(b):
            dot = 0.0
            for j in range(k):
                dot += df[i, j] * fh[i, j]
            for j in range(k):
                df[i, j] = (df[i, j] - dot * fh[i, j]) / nf[i]
        for v in range(u):
            dot = 0.0
            for j in range(k):
                dot += dc[v, j] * ch[v, j]
            for j in range(k):
                dc[v, j] = (dc[v, j] - dot * ch[v, j]) / nc[v]
        return df, dc

    @njit(cache=True)
    def softmax_xent_fwd_nb(logits, labels):
        b, u = logits.shape
        losses = np.empty(b)
        probs = np.empty_like(logits)
        for i in range(b):
            mx = logits[i, 0]
            for j in range(1, u):
                if logits[i, j] > mx:
                    mx = logits[i, j]
            s = 0.0
            for j in range(u):
                e = np.exp(logits[i, j] - mx)
                probs[i, j] = e
                s += e
            for j in range(u):
                probs[i, j] /= s
            losses[i] = np.log(s) - (logits[i, labels[i]] - mx)
        return losses, probs

    @njit(cache=True)
    def softmax_xent_bwd_nb(g_rows, probs, labels):
        b, u = probs.shape
        d = np.empty_like(probs)
        for i in range(b):
            for j in range(u):
                d[i, j] = probs[i, j] * g_rows[i]
            d[i, labels[i]] -= g_rows[i]
        return d

    @njit(cache=True)
    def row_l2_fwd_nb(a, b):
        n, k = a.shape
        dist = np.empty(n)
        diff = np.empty_like(a)
        for i in range(n):
            s = 0.0
            for j in range(k):
                d = a[i, j] - b[i, j]
                diff[i, j] = d
                s += d * d
            dist[i] = np.sqrt(s)
        return dist, diff

    @njit(cache=True)
    def row_l2_bwd_nb(g_rows, diff, dist):
        n, k = diff.shape
        out = np.zeros_like(diff)
        for i in range(n):
            if dist[i] > 0.0:
                s = g_rows[i] / dist[i]
                for j in range(k):
                    out[i, j] = diff[i, j] * s
        return out

    @njit(cache=True)
    def matched_outer_sqdist_nb(delta, act, target):
        p, o = delta.shape
        n_in = act.shape[1]
        tt = 0.0
        for r in range(o):
            for c in range(n_in):
                tt += target[r, c] * target[r, c]
        out = np.empty(p)
        for q in range(p):
            dd = 0.0
            for r in range(o):
                dd += delta[q, r] * delta[q, r]
            aa = 0.0
            for c in range(n_in):
                aa += act[q, c] * act[q, c]
            cross = 0.0
            for r in range(o):
                if delta[q, r] != 0.0:
                    row = 0.0
                    for c in range(n_in):
                        row += target[r, c] * act[q, c]
                    cross += delta[q, r] * row
            out[q] = dd * aa - 2.0 * cross + tt
        return out


def _pick(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


layer_norm_fwd = _pick("layer_norm_fwd")
layer_norm_bwd = _pick("layer_norm_bwd")
cosine_fwd = _pick("cosine_fwd")
cosine_bwd = _pick("cosine_bwd")
softmax_xent_fwd = _pick("softmax_xent_fwd")
softmax_xent_bwd = _pick("softmax_xent_bwd")
row_l2_fwd = _pick("row_l2_fwd")
row_l2_bwd = _pick("row_l2_bwd")
matched_outer_sqdist = _pick("matched_outer_sqdist")

KERNEL_NAMES = (
    "layer_norm_fwd",
    "layer_norm_bwd",
    "cosine_fwd",
    "cosine_bwd",
    "softmax_xent_fwd",
    "softmax_xent_bwd",
    "row_l2_fwd",
    "row_l2_bwd",
    "matched_outer_sqdist",
)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
