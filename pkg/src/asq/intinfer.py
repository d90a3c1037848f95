"""Integer inference for sqrt(2)-exponent (POST) weights.

A POST weight is ``sign * alpha * sqrt(2)**(-e)``. Multiplying an integer
activation code ``a`` by ``sqrt(2)**(-e)`` is a rounding right shift by
``e/2`` when ``e`` is even and a table lookup when ``e`` is odd.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .layers import (Classifier, ModelConfig, QLayer, QuantPolicy, UnsupportedSchemeError,
                     load_quantized)
from .quantizers import (IntRange, make_levels, quant_dequant_uniform, quantize_to_levels,
                         round_half_away)

INT_MAGIC = b"ASQINT01"
SCHEME_UNIFORM, SCHEME_POST = 0, 1


class AccumulatorOverflowError(OverflowError):
    pass


# ---------------------------------------------------------------------------
# coded weights and the odd-exponent table
# ---------------------------------------------------------------------------

@dataclass
class PostCodedWeights:
    signs: np.ndarray  # int8, +1 / -1
    exps: np.ndarray   # int64, magnitude sqrt(2)**(-e)
    zero: np.ndarray   # bool
    alpha: float
    bits: int

    @property
    def shape(self) -> tuple[int, ...]:
        return self.exps.shape

    @property
    def max_exponent(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def from_codes(cls, codes: np.ndarray, alpha: float, bits: int) -> "PostCodedWeights":
        codes = np.asarray(codes, dtype=np.int64)
        zero = codes == 0
        signs = np.where(codes < 0, -1, 1).astype(np.int8)
        exps = np.where(zero, 0, np.abs(codes) - 1)
        out = cls(signs, exps, zero, float(alpha), bits)
        out.validate()
        return out

    @classmethod
    def from_weights(cls, w: np.ndarray, alpha: float, bits: int) -> "PostCodedWeights":
        codes, _ = quantize_to_levels(w, make_levels("post", alpha, bits))
        return cls.from_codes(codes, alpha, bits)

    def validate(self) -> None:
        emax = self.max_exponent
        live = ~self.zero
        if np.any(self.exps[live] < 0) or np.any(self.exps[live] > emax):
            raise ValueError(f"exponent codes outside [0, {emax}]")
        if np.any((self.signs[live] < 0) & (self.exps[live] == emax)):
            raise ValueError("negative weight uses the level dropped from the b-bit code book")

    def codes(self) -> np.ndarray:
        return np.where(self.zero, 0, self.signs.astype(np.int64) * (self.exps + 1))

    def decode(self) -> np.ndarray:
        levels = make_levels("post", self.alpha, self.bits, full_levels=True)
        table = dict(zip(levels.codes.tolist(), levels.values.tolist()))
        flat = [table[c] for c in self.codes().reshape(-1).tolist()]
        return np.array(flat, dtype=np.float64).reshape(self.shape)


@dataclass
class OddExpLUT:
    odd_exps: np.ndarray
    a_min: int
    table: np.ndarray  # (len(odd_exps), num activation codes), int64
    max_exp: int

    def row(self, e: int) -> np.ndarray:
        return self.table[int(np.searchsorted(self.odd_exps, e))]

    def lookup(self, e: int, a):
        return self.row(e)[np.asarray(a, dtype=np.int64) - self.a_min]


def lut_entry(e: int, a: int) -> int:
    return int(round_half_away(np.array(a * 2.0 ** (-e / 2.0))))


def build_lut(b_w: int, b_a: int, r: IntRange | None = None) -> OddExpLUT:
    """Rounded ``a * 2**(-e/2)`` for every odd exponent ``e`` and activation code ``a``."""
    r = r or IntRange.signed(b_a)
    emax = 2 ** (b_w - 1) - 1
    odd = np.arange(1, emax + 1, 2, dtype=np.int64)
    a = np.arange(r.n, r.p + 1, dtype=np.float64)
    table = round_half_away(a[None, :] * 2.0 ** (-odd[:, None] / 2.0)).astype(np.int64)
    return OddExpLUT(odd, r.n, table, emax)


def rounding_shift(a, k: int, literal_floor: bool = False):
    """``sign(a) * ((|a| + 2**(k-1)) >> k)``; plain ``a >> k`` when ``literal_floor``."""
    a = np.asarray(a, dtype=np.int64)
    if k == 0:
        return a
    if literal_floor:
        return a >> k
    mag = (np.abs(a) + (1 << (k - 1))) >> k
    return np.sign(a) * mag


def post_mul(sign: int, e: int, zero: bool, a, lut: OddExpLUT, literal_floor: bool = False):
    if zero:
        return np.zeros_like(np.asarray(a, dtype=np.int64))
    if e < 0 or e > lut.max_exp:
        raise ValueError(f"exponent {e} outside the code range")
    if e % 2 == 0:
        return sign * rounding_shift(a, e // 2, literal_floor)
    return sign * lut.lookup(e, a)


def _scaled_codes(a: np.ndarray, e: int, lut: OddExpLUT, literal_floor: bool) -> np.ndarray:
    if e % 2 == 0:
        return rounding_shift(a, e // 2, literal_floor)
    return lut.lookup(e, a)


def int_matmul(w: PostCodedWeights, a: np.ndarray, lut: OddExpLUT, acc_bits: int = 64,
               literal_floor: bool = False, stats: dict | None = None) -> np.ndarray:
    """Integer accumulators ``out[i, j] = sum_t post_mul(w[i, t], a[t, j])``.

    The real-valued product is ``out * alpha * s``.
    """
    a = np.asarray(a, dtype=np.int64)
    m, k = w.shape
    if a.shape[0] != k:
        raise T.ShapeError(f"int_matmul: weights {w.shape} vs activations {a.shape}")
    out = np.zeros((m, a.shape[1]), dtype=np.int64)
    live = ~w.zero
    sgn = w.signs.astype(np.int64)
    for e in np.unique(w.exps[live]):
        sel = np.where(live & (w.exps == e), sgn, 0)
        out += sel @ _scaled_codes(a, int(e), lut, literal_floor)
        if stats is not None:
            hits = int(np.count_nonzero(sel)) * a.shape[1]
            stats["lut_hits" if e % 2 else "shift_ops"] = \
                stats.get("lut_hits" if e % 2 else "shift_ops", 0) + hits
    _check_accumulator(out, acc_bits)
    return out


def int_matmul_uniform(w_int: np.ndarray, a: np.ndarray, acc_bits: int = 64) -> np.ndarray:
    out = np.asarray(w_int, dtype=np.int64) @ np.asarray(a, dtype=np.int64)
    _check_accumulator(out, acc_bits)
    return out


def _check_accumulator(out: np.ndarray, acc_bits: int) -> None:
    lim = (1 << (acc_bits - 1)) - 1
    if out.size and (out.max() > lim or out.min() < -lim - 1):
        raise AccumulatorOverflowError(f"accumulator exceeds {acc_bits}-bit range")


# ---------------------------------------------------------------------------
# whole-model export and integer inference
# ---------------------------------------------------------------------------

@dataclass
class IntLayer:
    name: str
    scheme: int
    bits_w: int
    bits_a: int
    scale_w: float  # alpha for POST, step size for uniform
    step_a: float
    shape: tuple[int, ...]
    post: PostCodedWeights | None = None
    w_int: np.ndarray | None = None


@dataclass
class IntModel:
    model_cfg: dict
    policy: dict
    layers: dict[str, IntLayer]
    glue: dict[str, np.ndarray]
    stats: dict = field(default_factory=dict)

    def float_model(self) -> Classifier:
        model = load_quantized(ModelConfig(**self.model_cfg), QuantPolicy(**self.policy),
                               _full_state(self), seed=0)
        return model.eval()


def _full_state(im: IntModel) -> dict:
    state = dict(im.glue)
    for name, il in im.layers.items():
        if il.scheme == SCHEME_POST:
            state[f"{name}.weight"] = il.post.decode()
        else:
            state[f"{name}.weight"] = il.w_int.astype(np.float64) * il.scale_w
    return state


def export_int_model(model: Classifier, model_cfg: ModelConfig, policy: QuantPolicy) -> IntModel:
    """Code every quantized layer's weights; everything else rides along as float glue."""
    layers = {}
    any_post = False
    for name, layer in model.qlayers():
        q = layer.quant
        if q is None:
            raise UnsupportedSchemeError(f"layer {name} is not quantized")
        if q.weight_scheme == "post":
            any_post = True
            if q.full_levels:
                raise UnsupportedSchemeError(f"{name}: full level set does not fit a b-bit code")
            alpha = float(layer.w_alpha.data)
            coded = PostCodedWeights.from_weights(layer.weight.data, alpha, q.bits_w)
            layers[name] = IntLayer(name, SCHEME_POST, q.bits_w, q.bits_a, alpha,
                                    float(layer.a_step.data), layer.weight.shape, post=coded)
        elif q.weight_scheme == "lsq":
            step = float(layer.w_step.data)
            w_int, _ = quant_dequant_uniform(layer.weight.data, step, layer.weight_range)
            layers[name] = IntLayer(name, SCHEME_UNIFORM, q.bits_w, q.bits_a, step,
                                    float(layer.a_step.data), layer.weight.shape,
                                    w_int=w_int.astype(np.int64))
        else:
            raise UnsupportedSchemeError(f"{name}: {q.weight_scheme} weights have no integer kernel")
    if not any_post:
        raise UnsupportedSchemeError("model has no POST-quantized layers (scheme-2 required)")
    glue = {k: v for k, v in model.state_dict().items()
            if not (k.endswith(".weight") and k[: -len(".weight")] in layers)}
    return IntModel(asdict(model_cfg), asdict(policy), layers, glue)


def _activation_codes(layer: QLayer, x: np.ndarray):
    """Integer codes of the layer input and the per-sample dequantization scale."""
    q = layer.quant
    r = layer.act_range
    s = float(layer.a_step.data)
    if q.act_scheme == "asq":
        beta = layer.compute_beta(x).data
    else:
        beta = np.ones(x.shape[0])
    s_a = (s * beta).reshape((-1,) + (1,) * (x.ndim - 1))
    codes = np.clip(round_half_away(x / s_a), r.n, r.p).astype(np.int64)
    out_scale = s * beta if q.dequant_mode == "adaptive" else np.full(x.shape[0], s)
    return codes, out_scale


def int_layer_forward(layer: QLayer, il: IntLayer, x: np.ndarray, lut_cache: dict,
                      stats: dict, literal_floor: bool = False) -> np.ndarray:
    codes, out_scale = _activation_codes(layer, x)
    n = x.shape[0]
    if layer.kind == "conv2d":
        cout, cin, kh, kw = il.shape
        cols = T.im2col(codes, kh, kw, layer.stride, layer.padding)
        ho, wo = cols.shape[1], cols.shape[2]
        a_mat = cols.reshape(n * ho * wo, cin * kh * kw).T
    else:
        a_mat = codes.T
    if il.scheme == SCHEME_POST:
        key = (il.bits_w, il.bits_a, layer.act_range)
        if key not in lut_cache:
            lut_cache[key] = build_lut(il.bits_w, il.bits_a, layer.act_range)
        w2 = PostCodedWeights(il.post.signs.reshape(il.shape[0], -1),
                              il.post.exps.reshape(il.shape[0], -1),
                              il.post.zero.reshape(il.shape[0], -1), il.post.alpha, il.bits_w)
        acc = int_matmul(w2, a_mat, lut_cache[key], literal_floor=literal_floor, stats=stats)
    else:
        acc = int_matmul_uniform(il.w_int.reshape(il.shape[0], -1), a_mat)
    if layer.kind == "conv2d":
        real = acc.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3).astype(np.float64)
        real = real * (il.scale_w * out_scale).reshape(-1, 1, 1, 1)
    else:
        real = acc.T.astype(np.float64) * (il.scale_w * out_scale)[:, None]
    if layer.bias is not None:
        view = (1, -1) + (1,) * (real.ndim - 2)
        real = real + layer.bias.data.reshape(view)
    return real


class _IntExecutor:
    def __init__(self, il: IntLayer, lut_cache: dict, stats: dict, literal_floor: bool):
        self.il, self.lut_cache, self.stats, self.literal_floor = il, lut_cache, stats, literal_floor

    def __call__(self, layer: QLayer, x: T.Tensor) -> T.Tensor:
        return T.Tensor(int_layer_forward(layer, self.il, x.data, self.lut_cache, self.stats,
                                          self.literal_floor))


def int_infer(im: IntModel, images: np.ndarray, batch_size: int = 256,
              literal_floor: bool = False, model: Classifier | None = None) -> np.ndarray:
    """Logits from the integer path. BN, pooling, skip adds and biases run in float."""
    model = (model if model is not None else im.float_model()).eval()
    lut_cache: dict = {}
    im.stats.clear()
    for name, layer in model.qlayers():
        layer.executor = _IntExecutor(im.layers[name], lut_cache, im.stats, literal_floor)
    try:
        out = []
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                out.append(model(T.Tensor(images[start:start + batch_size])).data)
    finally:
        for _, layer in model.qlayers():
            layer.executor = None
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# int-model file
# ---------------------------------------------------------------------------

def _pack_bits(values: np.ndarray, width: int) -> bytes:
    v = np.asarray(values, dtype=np.int64).reshape(-1)
    if width == 0:
        return b""
    bits = ((v[:, None] >> np.arange(width)) & 1).astype(np.uint8).reshape(-1)
    return np.packbits(bits, bitorder="little").tobytes()


def _unpack_bits(blob: bytes, count: int, width: int) -> np.ndarray:
    if width == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")[: count * width]
    return (bits.reshape(count, width).astype(np.int64) << np.arange(width)).sum(axis=1)


def save_int_model(path, im: IntModel) -> None:
    """Write ``ASQINT01``: config JSON, per-layer records, then an embedded float-glue checkpoint.

    Record: u32 name length, name, u8 scheme, u8 b_w, u8 b_a, f64 alpha-or-weight-step,
    f64 activation step, u8 rank, u64 extents, then either (POST) sign bitmap,
    exponents packed at b_w-1 bits and zero bitmap, or (uniform) int8 codes.
    """
    parts = [INT_MAGIC]
    meta = json.dumps({"model": im.model_cfg, "policy": im.policy}, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(im.layers))]
    for name, il in im.layers.items():
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw,
                  struct.pack("<BBBdd", il.scheme, il.bits_w, il.bits_a, il.scale_w, il.step_a),
                  struct.pack("<B", len(il.shape)), struct.pack(f"<{len(il.shape)}Q", *il.shape)]
        if il.scheme == SCHEME_POST:
            p = il.post
            parts += [_pack_bits((p.signs < 0).astype(np.int64), 1),
                      _pack_bits(np.where(p.zero, 0, p.exps), il.bits_w - 1),
                      _pack_bits(p.zero.astype(np.int64), 1)]
        else:
            parts.append(il.w_int.astype("<i1").tobytes())
    glue = checkpoint.dumps(im.glue)
    parts += [struct.pack("<Q", len(glue)), glue]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    """Sequential reader that reports the byte offset of any short read."""

    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise checkpoint.CheckpointError(f"int model truncated at offset {len(self.blob)} "
                                             f"(needed {n} bytes at offset {self.pos})")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_int_model(path) -> IntModel:
    rd = _Reader(Path(path).read_bytes())
    magic = rd.take(8) if len(rd.blob) >= 8 else rd.blob
    if magic != INT_MAGIC:
        raise checkpoint.CheckpointError(f"bad int-model magic {magic!r} at offset 0")
    (mlen,) = rd.unpack("<I")
    at = rd.pos
    raw = rd.take(mlen)
    try:
        meta = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise checkpoint.CheckpointError(f"malformed model header at offset {at}") from None
    (count,) = rd.unpack("<I")
    layers = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<I")
        name = rd.take(nlen).decode()
        at = rd.pos
        scheme, bw, ba, sw, sa = rd.unpack("<BBBdd")
        if scheme not in (SCHEME_UNIFORM, SCHEME_POST) or not 2 <= bw <= 8:
            raise checkpoint.CheckpointError(f"layer {name}: bad record header at offset {at}")
        (rank,) = rd.unpack("<B")
        shape = rd.unpack(f"<{rank}Q")
        n = int(np.prod(shape))
        if scheme == SCHEME_POST:
            nb1 = math.ceil(n / 8)
            neg = _unpack_bits(rd.take(nb1), n, 1)
            exps = _unpack_bits(rd.take(math.ceil(n * (bw - 1) / 8)), n, bw - 1)
            zero = _unpack_bits(rd.take(nb1), n, 1).astype(bool)
            post = PostCodedWeights(np.where(neg == 1, -1, 1).astype(np.int8).reshape(shape),
                                    exps.reshape(shape), zero.reshape(shape), sw, bw)
            layers[name] = IntLayer(name, scheme, bw, ba, sw, sa, tuple(shape), post=post)
        else:
            w_int = np.frombuffer(rd.take(n), dtype="<i1").astype(np.int64)
            layers[name] = IntLayer(name, scheme, bw, ba, sw, sa, tuple(shape),
                                    w_int=w_int.reshape(shape))
    (glen,) = rd.unpack("<Q")
    glue = checkpoint.loads(rd.take(glen))
    return IntModel(meta["model"], meta["policy"], layers, glue)


# ---------------------------------------------------------------------------
# micro-benchmark
# ---------------------------------------------------------------------------

def bench_post_vs_uniform(sizes=(64, 128, 256), bits_w: int = 4, bits_a: int = 8,
                          repeats: int = 5, seed: int = 0) -> list[dict]:
    """Median wall-clock per kernel: shift-only, shift+LUT, and plain integer multiply."""
    rng = np.random.default_rng(seed)
    r = IntRange.unsigned(bits_a)
    lut = build_lut(bits_w, bits_a, r)
    emax = 2 ** (bits_w - 1) - 1
    rows = []
    for size in sizes:
        a = rng.integers(r.n, r.p + 1, size=(size, size))
        signs = rng.choice([-1, 1], size=(size, size)).astype(np.int8)
        zero = np.zeros((size, size), dtype=bool)
        even = PostCodedWeights(signs, 2 * rng.integers(0, emax // 2 + 1, size=(size, size)),
                                zero, 1.0, bits_w)
        mixed = PostCodedWeights(signs, rng.integers(0, emax, size=(size, size)), zero, 1.0, bits_w)
        w_int = rng.integers(-(2 ** (bits_w - 1)), 2 ** (bits_w - 1), size=(size, size))
        kernels = {
            "shift_only_ms": lambda: int_matmul(even, a, lut),
            "lut_mixed_ms": lambda: int_matmul(mixed, a, lut),
            "int_multiply_ms": lambda: int_matmul_uniform(w_int, a),
        }
        row = {"size": size}
        for key, fn in kernels.items():
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append((time.perf_counter() - t0) * 1e3)
            row[key] = float(np.median(times))
        rows.append(row)
    return rows


def bench_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["size", "shift_only_ms", "lut_mixed_ms", "int_multiply_ms"],
                       lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()
