"""Independent reference computations used as test oracles.

Nothing here calls into the code paths being checked beyond reading raw
parameter arrays.
"""
import math

import numpy as np


def straight_line_mlp(layers, x):
    """Evaluate [(W, b, act), ...] with explicit loops, no tape."""
    h = [float(v) for v in x]
    for w, b, act in layers:
        out = []
        for i in range(w.shape[0]):
            s = float(b[i])
            for j in range(w.shape[1]):
                s += float(w[i, j]) * h[j]
            if act == "elu":
                s = s if s > 0 else math.exp(s) - 1.0
            out.append(s)
        h = out
    return np.array(h)


def raw_layers(p):
    return [(l.weight, l.bias, l.activation) for l in p.layers]


def central_diff(f, x, h=1e-5):
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += h
        xm.flat[i] -= h
        g.flat[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def grad_mismatch(analytic, numeric, tiny=1e-12):
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), tiny)
    return float(np.linalg.norm(analytic - numeric) / scale)


def gaussian_nll(x, mean, var):
    """Sum of elementwise -log N(x_i; mean_i, var_i)."""
    total = 0.0
    for xi, mi, vi in zip(np.ravel(x), np.ravel(mean), np.ravel(var)):
        total += 0.5 * (math.log(2 * math.pi) + math.log(vi) + (xi - mi) ** 2 / vi)
    return total


def gauss_solve(m, b):
    """Gaussian elimination with partial pivoting."""
    a = np.array(m, dtype=np.float64)
    b = np.array(b, dtype=np.float64)
    n = len(b)
    for k in range(n):
        p = k + int(np.argmax(np.abs(a[k:, k])))
        a[[k, p]] = a[[p, k]]
        b[[k, p]] = b[[p, k]]
        for i in range(k + 1, n):
            f = a[i, k] / a[k, k]
            a[i, k:] -= f * a[k, k:]
            b[i] -= f * b[k]
    x = np.zeros(n)
    for i in reversed(range(n)):
        x[i] = (b[i] - a[i, i + 1:] @ x[i + 1:]) / a[i, i]
    return x


def grid_argmin(f, lo=-4.0, hi=4.0, step=1e-3):
    best_t, best_v = None, math.inf
    n = int(round((hi - lo) / step))
    for i in range(n + 1):
        t = lo + i * step
        v = f(t)
        if v < best_v:
            best_t, best_v = t, v
    # refine inside the winning bracket so the value is exact, not grid-limited
    a, b = best_t - step, best_t + step
    for _ in range(100):
        m1, m2 = a + (b - a) / 3, b - (b - a) / 3
        if f(m1) < f(m2):
            b = m2
        else:
            a = m1
    t = 0.5 * (a + b)
    v = f(t)
    return (t, v) if v < best_v else (best_t, best_v)


def spectral_norm_bound(w, iters=200, seed=0):
    """Power iteration on W^T W, padded by 1% to stay an upper bound."""
    v = np.random.default_rng(seed).standard_normal(w.shape[1])
    for _ in range(iters):
        v = w.T @ (w @ v)
        v /= np.linalg.norm(v)
    return 1.01 * float(np.linalg.norm(w @ v))
