"""Quantization math: uniform (LSQ), adaptive-step (ASQ), POT and POST level sets.

Every function here works on plain numpy arrays; the ``*_quantize`` helpers at
the bottom wrap them as autograd ops with straight-through gradients.

Rounding is round-half-away-from-zero throughout.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op

STEP_FLOOR = 1e-8
DEQUANT_MODES = ("base", "adaptive")


def round_half_away(v: np.ndarray) -> np.ndarray:
    a = np.abs(v)
    f = np.floor(a)
    return np.copysign(f + (a - f >= 0.5), v)


@dataclass(frozen=True)
class IntRange:
    n: int
    p: int
    bits: int

    @classmethod
    def signed(cls, bits: int) -> "IntRange":
        return cls(-(2 ** (bits - 1)), 2 ** (bits - 1) - 1, bits)

    @classmethod
    def unsigned(cls, bits: int) -> "IntRange":
        return cls(0, 2 ** bits - 1, bits)

    @classmethod
    def for_bits(cls, bits: int, signed: bool) -> "IntRange":
        return cls.signed(bits) if signed else cls.unsigned(bits)

    @property
    def is_signed(self) -> bool:
        return self.n < 0

    @property
    def num_codes(self) -> int:
        return self.p - self.n + 1


def grad_scale_factor(numel: int, p: int) -> float:
    return 1.0 / math.sqrt(numel * p)


def _check_step(s: float) -> None:
    if not s > 0:
        raise ValueError(f"step size must be positive, got {s}")


def _rowsum(t: np.ndarray) -> np.ndarray:
    # Reduce every axis but the first; callers sum the result afterwards so
    # the uniform and adaptive paths share one summation order.
    if t.ndim == 0:
        return t.reshape(1)
    return t.reshape(t.shape[0], -1).sum(axis=1)


def _step_grad_elements(v: np.ndarray, r: IntRange) -> np.ndarray:
    """d x_hat / d step for x_hat = clamp(round(v)) * step, v = x / step (STE)."""
    return np.where(v <= r.n, float(r.n), np.where(v >= r.p, float(r.p), round_half_away(v) - v))


# ---------------------------------------------------------------------------
# uniform quantizer
# ---------------------------------------------------------------------------

def quant_dequant_uniform(x: np.ndarray, s: float, r: IntRange):
    """Return ``(x_int, x_hat)`` with ``x_int = clamp(round(x / s), n, p)``."""
    _check_step(s)
    x = np.asarray(x, dtype=np.float64)
    x_int = np.clip(round_half_away(x / s), r.n, r.p)
    return x_int, x_int * s


def uniform_backward(x: np.ndarray, s: float, r: IntRange, upstream: np.ndarray,
                     grad_scale: bool = True):
    """Return ``(dx, ds)`` for the uniform quantizer."""
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match input {x.shape}")
    v = x / s
    dx = upstream * ((v >= r.n) & (v <= r.p))
    g = grad_scale_factor(x.size, r.p) if grad_scale else 1.0
    per_row = g * _rowsum(_step_grad_elements(v, r) * upstream)
    return dx, per_row.sum()


# ---------------------------------------------------------------------------
# adaptive step size quantizer
# ---------------------------------------------------------------------------

def _adaptive_step(s: float, beta: np.ndarray, ndim: int) -> np.ndarray:
    return (s * beta).reshape((-1,) + (1,) * (ndim - 1))


def _check_beta(beta: np.ndarray, x: np.ndarray) -> None:
    if beta.ndim != 1 or beta.shape[0] != x.shape[0]:
        raise ValueError(f"beta must have one entry per sample, got {beta.shape} for {x.shape}")
    if not np.all(beta > 0):
        raise ValueError("beta must be positive")


def asq_forward(x: np.ndarray, s: float, beta: np.ndarray, r: IntRange,
                dequant_mode: str = "base"):
    """Quantize sample ``i`` with step ``s * beta[i]``.

    ``dequant_mode="base"`` dequantizes with ``s`` (so ``x_hat`` tracks
    ``x / beta``); ``"adaptive"`` dequantizes with ``s * beta[i]``.
    """
    _check_step(s)
    x = np.asarray(x, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    _check_beta(beta, x)
    if dequant_mode not in DEQUANT_MODES:
        raise ValueError(f"unknown dequant mode {dequant_mode!r}")
    s_a = _adaptive_step(s, beta, x.ndim)
    x_int = np.clip(round_half_away(x / s_a), r.n, r.p)
    x_hat = x_int * s if dequant_mode == "base" else x_int * s_a
    return x_int, x_hat


def asq_step_grad(x: np.ndarray, s: float, beta: np.ndarray, r: IntRange,
                  upstream: np.ndarray, grad_scale: bool = True):
    """Per-sample reduced ``dL/ds_a`` plus the STE input gradient."""
    x = np.asarray(x, dtype=np.float64)
    if upstream.shape != x.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match input {x.shape}")
    v = x / _adaptive_step(s, beta, x.ndim)
    dx = upstream * ((v >= r.n) & (v <= r.p))
    g = grad_scale_factor(x.size, r.p) if grad_scale else 1.0
    return g * _rowsum(_step_grad_elements(v, r) * upstream), dx


def asq_backward(x: np.ndarray, s: float, beta: np.ndarray, r: IntRange,
                 upstream: np.ndarray, grad_scale: bool = True):
    """Return ``(dx, ds, dbeta)``; ``ds = sum_i g_sa[i] * beta[i]``, ``dbeta = g_sa * s``."""
    beta = np.asarray(beta, dtype=np.float64)
    g_sa, dx = asq_step_grad(x, s, beta, r, upstream, grad_scale)
    return dx, (g_sa * beta).sum(), g_sa * s


def step_init(sample: np.ndarray, r: IntRange) -> float:
    sample = np.asarray(sample, dtype=np.float64)
    if sample.size == 0:
        raise ValueError("step_init needs a nonempty sample")
    m = np.abs(sample).mean()
    if m == 0:
        return 1.0
    return float(2.0 * m / math.sqrt(r.p))


# ---------------------------------------------------------------------------
# non-uniform level sets
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelSet:
    """Sorted quantization levels.

    ``codes[k]`` identifies ``values[k]``: 0 for the zero level, otherwise
    ``sign * (e + 1)`` where the magnitude is ``alpha * base**(-e)``.
    """

    values: np.ndarray
    codes: np.ndarray
    scheme: str
    bits: int
    alpha: float

    @property
    def base(self) -> float:
        return 2.0 if self.scheme == "pot" else math.sqrt(2.0)

    @property
    def max_exponent(self) -> int:
        return 2 ** (self.bits - 1) - 1

    def codebook(self) -> "LevelSet":
        """The ``2**bits`` levels a b-bit code can hold: drops the smallest negative level."""
        drop = -(self.max_exponent + 1)
        keep = self.codes != drop
        return LevelSet(self.values[keep], self.codes[keep], self.scheme, self.bits, self.alpha)


def _exponential_levels(scheme: str, base: float, alpha: float, bits: int) -> LevelSet:
    if bits < 2:
        raise ValueError(f"bit-width must be >= 2, got {bits}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    e = np.arange(2 ** (bits - 1))
    if base == 2.0:
        mags = alpha * np.ldexp(1.0, -e)
    else:
        # sqrt(2)**-e == 2**-(e//2) * (sqrt(1/2) if e is odd): exact for even e
        mags = alpha * np.ldexp(np.where(e % 2 == 1, math.sqrt(0.5), 1.0), -(e // 2))
    values = np.concatenate([-mags, [0.0], mags[::-1]])
    codes = np.concatenate([-(e + 1), [0], (e + 1)[::-1]]).astype(np.int64)
    return LevelSet(values, codes, scheme, bits, float(alpha))


def pot_levels(alpha: float, bits: int) -> LevelSet:
    return _exponential_levels("pot", 2.0, alpha, bits)


def post_levels(alpha: float, bits: int) -> LevelSet:
    return _exponential_levels("post", math.sqrt(2.0), alpha, bits)


def make_levels(scheme: str, alpha: float, bits: int, full_levels: bool = False) -> LevelSet:
    levels = {"pot": pot_levels, "post": post_levels}[scheme](alpha, bits)
    return levels if full_levels else levels.codebook()


def quantize_to_levels(w: np.ndarray, levels: LevelSet):
    """Project each weight onto the nearest level (ties go to the larger magnitude).

    Returns ``(codes, w_hat)`` with codes in the ``LevelSet.codes`` convention.
    """
    w = np.asarray(w, dtype=np.float64)
    vals = levels.values
    flat = w.reshape(-1)
    hi = np.clip(np.searchsorted(vals, flat, side="left"), 0, len(vals) - 1)
    lo = np.clip(hi - 1, 0, len(vals) - 1)
    d_lo = np.abs(flat - vals[lo])
    d_hi = np.abs(flat - vals[hi])
    # on a tie the level farther from zero wins: hi for positive w, lo for negative
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (flat >= 0))
    idx = np.where(pick_hi, hi, lo)
    return levels.codes[idx].reshape(w.shape), vals[idx].reshape(w.shape)


def alpha_backward(w: np.ndarray, levels: LevelSet, upstream: np.ndarray,
                   grad_scale: bool = True, w_hat: np.ndarray | None = None) -> float:
    """dL/d alpha assuming levels scale linearly with alpha (STE on the level index)."""
    w = np.asarray(w, dtype=np.float64)
    if w_hat is None:
        _, w_hat = quantize_to_levels(w, levels)
    alpha = levels.alpha
    dw_dalpha = np.where(np.abs(w) > alpha, np.sign(w), w_hat / alpha)
    g = grad_scale_factor(w.size, levels.max_exponent) if grad_scale else 1.0
    return (g * _rowsum(dw_dalpha * upstream)).sum()


def init_alpha(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    a = min(float(np.abs(w).max()), 3.0 * float(w.std()))
    return a if a > 0 else 1.0


# ---------------------------------------------------------------------------
# autograd wrappers
# ---------------------------------------------------------------------------

def _with_codes(out: Tensor, x_int: np.ndarray, r: IntRange) -> Tensor:
    if x_int.size and (x_int.min() < r.n or x_int.max() > r.p):
        raise AssertionError(f"integer codes escaped [{r.n}, {r.p}]")
    out.codes = x_int
    return out


def lsq_quantize(x: Tensor, s: Tensor, r: IntRange, grad_scale: bool = True) -> Tensor:
    step = float(s.data)
    x_int, x_hat = quant_dequant_uniform(x.data, step, r)

    def backward(g):
        dx, ds = uniform_backward(x.data, step, r, g, grad_scale)
        return dx, np.asarray(ds).reshape(s.shape)

    return _with_codes(custom_op(x_hat, (x, s), backward, "lsq_quantize"), x_int, r)


def asq_quantize(x: Tensor, s: Tensor, beta: Tensor, r: IntRange, dequant_mode: str = "base",
                 grad_scale: bool = True) -> Tensor:
    step = float(s.data)
    x_int, x_hat = asq_forward(x.data, step, beta.data, r, dequant_mode)

    def backward(g):
        dx, ds, dbeta = asq_backward(x.data, step, beta.data, r, g, grad_scale)
        return dx, np.asarray(ds).reshape(s.shape), dbeta

    return _with_codes(custom_op(x_hat, (x, s, beta), backward, "asq_quantize"), x_int, r)


def level_quantize(w: Tensor, alpha: Tensor, scheme: str, bits: int, full_levels: bool = False,
                   grad_scale: bool = True) -> Tensor:
    a = float(alpha.data)
    levels = make_levels(scheme, a, bits, full_levels)
    _, w_hat = quantize_to_levels(w.data, levels)

    def backward(g):
        dw = g * (np.abs(w.data) <= a)
        da = alpha_backward(w.data, levels, g, grad_scale, w_hat=w_hat)
        return dw, np.asarray(da).reshape(alpha.shape)

    return custom_op(w_hat, (w, alpha), backward, "level_quantize")
