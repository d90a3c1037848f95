"""Independent reference implementations used only by the tests.

Everything here is written from the defining formulas with plain Python
loops and floats, sharing no code with the package.
"""
from __future__ import annotations

import itertools
import math

import mpmath
import numpy as np


def central_fd(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def naive_conv2d(x, w, stride=1, padding=0):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                yy = i * stride + u - padding
                                xx = j * stride + v - padding
                                if 0 <= yy < h and 0 <= xx < wd:
                                    acc += x[b, c, yy, xx] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


def round_away(v: float) -> float:
    return math.copysign(math.floor(abs(v) + 0.5), v)


def step_grad_element(v: float, n: int, p: int) -> float:
    """d x_hat / d step for one element, with v = x / step (LSQ clip convention)."""
    if v <= n:
        return float(n)
    if v >= p:
        return float(p)
    return round_away(v) - v


def asq_grads(x: np.ndarray, s: float, beta: np.ndarray, n: int, p: int, upstream: np.ndarray,
              grad_scale: bool):
    """Per-sample step gradient ``g_sa``, then ``ds`` and ``dbeta`` by the chain rule.

    Per-sample sums follow numpy's pairwise order (``np.sum`` over a row) so the
    comparison can be bitwise.
    """
    N = x.shape[0]
    g = 1.0 / math.sqrt(x.size * p) if grad_scale else 1.0
    flat = x.reshape(N, -1)
    up = upstream.reshape(N, -1)
    g_sa = np.zeros(N)
    for i in range(N):
        s_a = s * float(beta[i])
        elems = np.array([step_grad_element(float(xv) / s_a, n, p) * float(u)
                          for xv, u in zip(flat[i], up[i])])
        g_sa[i] = g * elems.sum()
    ds = (g_sa * beta).sum()
    return g_sa, ds, g_sa * s


def brute_levels(scheme: str, alpha: float, bits: int) -> list[float]:
    """Level values evaluated at 60 digits, then rounded once to double."""
    with mpmath.workdps(60):
        base = mpmath.mpf(2) if scheme == "pot" else mpmath.sqrt(2)
        mags = [float(mpmath.mpf(alpha) * base ** e) for e in range(-(2 ** (bits - 1)) + 1, 1)]
    return sorted([0.0] + mags + [-m for m in mags])


def brute_nearest(w: np.ndarray, levels: list[float]) -> np.ndarray:
    """Nearest level by exhaustive search; ties go to the larger magnitude."""
    out = np.empty(w.size)
    for k, v in enumerate(w.reshape(-1).tolist()):
        best = None
        for lv in levels:
            d = abs(v - lv)
            if best is None or d < best[0] or (d == best[0] and abs(lv) > abs(best[1])):
                best = (d, lv)
        out[k] = best[1]
    return out.reshape(w.shape)


def post_product(sign: int, e: int, a: int) -> int:
    return int(round_away(sign * a * 2.0 ** (-e / 2.0)))


def brute_layer_counts(rec: dict) -> tuple[int, int]:
    """Parameters and multiply-accumulates of one layer record, by enumeration."""
    if rec["type"] == "conv":
        params = sum(1 for _ in itertools.product(range(rec["C_out"]), range(rec["C_in"]),
                                                  range(rec["K_h"]), range(rec["K_w"])))
        # one MAC per (output pixel, output channel, weight tap)
        ops = sum(params for _ in itertools.product(range(rec["H_out"]), range(rec["W_out"])))
        return params, ops
    if rec["type"] == "linear":
        macs = sum(1 for _ in itertools.product(range(rec["N_out"]), range(rec["N_in"])))
        return macs + rec["N_out"], macs
    return 0, 0
