"""Parameter / OPS / storage accounting and quantization diagnostics.

All reports serialize to CSV; nothing here plots.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .adapter import NUM_FEATURES
from .data import Dataset, batches
from .layers import Classifier, ModelConfig, float_model

FP_BITS = 32
STORAGE_BITS = (2, 3, 4, 8, 32)
HIST_BINS = 64


# ---------------------------------------------------------------------------
# architecture description
# ---------------------------------------------------------------------------

_FIELDS = {
    "conv": ("C_in", "C_out", "K_w", "K_h", "H_out", "W_out"),
    "linear": ("N_in", "N_out"),
    "other": (),
}


@dataclass
class ArchSpec:
    layers: list[dict]
    name: str = "model"

    def __post_init__(self):
        for i, rec in enumerate(self.layers):
            kind = rec.get("type")
            if kind not in _FIELDS:
                raise ValueError(f"layer {i}: unknown type {kind!r}")
            for f in _FIELDS[kind]:
                if not isinstance(rec.get(f), int) or rec[f] <= 0:
                    raise ValueError(f"layer {i}: field {f} must be a positive integer")

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "layers": self.layers}, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        obj = json.loads(text)
        return cls(layers=list(obj["layers"]), name=obj.get("name", "model"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ArchSpec":
        return cls.from_json(Path(path).read_text())

    def weight_layers(self) -> list[dict]:
        return [r for r in self.layers if r["type"] != "other"]


def arch_from_model(cfg: ModelConfig) -> ArchSpec:
    """Trace a float model once to recover every layer's extents."""
    model = float_model(cfg).eval()
    for _, layer in model.qlayers():
        layer.record = True
    with T.no_grad():
        model(T.Tensor(np.zeros((1, cfg.in_channels, cfg.image_size, cfg.image_size))))
    recs = []
    for name, layer in model.qlayers():
        shape = layer.weight.shape
        if layer.kind == "conv2d":
            _, _, h, w = layer.last["input"].shape
            cout, cin, kh, kw = shape
            recs.append({"type": "conv", "name": name, "C_in": cin, "C_out": cout, "K_h": kh,
                         "K_w": kw,
                         "H_out": T.conv_output_size(h, kh, layer.stride, layer.padding),
                         "W_out": T.conv_output_size(w, kw, layer.stride, layer.padding)})
        else:
            recs.append({"type": "linear", "name": name, "N_in": shape[1], "N_out": shape[0]})
    return ArchSpec(recs, cfg.name)


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

def _layer_params(rec: dict) -> int:
    if rec["type"] == "conv":
        return rec["C_in"] * rec["C_out"] * rec["K_w"] * rec["K_h"]
    if rec["type"] == "linear":
        return rec["N_in"] * rec["N_out"] + rec["N_out"]
    return 0


def _layer_ops(rec: dict) -> int:
    if rec["type"] == "conv":
        return rec["C_in"] * rec["C_out"] * rec["H_out"] * rec["W_out"] * rec["K_w"] * rec["K_h"]
    if rec["type"] == "linear":
        return rec["N_in"] * rec["N_out"]
    return 0


def param_count(arch: ArchSpec) -> tuple[list[int], int]:
    per = [_layer_params(r) for r in arch.layers]
    return per, sum(per)


def ops_count(arch: ArchSpec) -> tuple[list[int], int]:
    per = [_layer_ops(r) for r in arch.layers]
    return per, sum(per)


def quantized_storage(params: int, bits: int) -> int:
    if bits not in STORAGE_BITS:
        raise ValueError(f"storage bit-width must be one of {STORAGE_BITS}")
    return params * bits


def qops(ops: float, bits: int) -> float:
    """Bit-scaled computational load relative to a 32-bit model."""
    if not 1 <= bits <= FP_BITS:
        raise ValueError(f"unsupported bit-width {bits}")
    return ops * bits / FP_BITS


# ---------------------------------------------------------------------------
# adapter overhead
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdapterSizing:
    """Adapter cost per quantized layer for a ``depth``-layer MLP on ``NUM_FEATURES`` inputs."""

    depth: int = 2
    hidden: int = 16

    def params(self, rec: dict | None = None) -> int:
        f = NUM_FEATURES
        if self.depth == 1:
            return f + 1
        return f * self.hidden + self.hidden + self.hidden + 1

    def ops(self, rec: dict | None = None) -> int:
        f = NUM_FEATURES
        return f if self.depth == 1 else f * self.hidden + self.hidden


@dataclass
class OverheadRow:
    bits: int
    base_params: int
    adapter_params: int
    quantized_storage_bits: int
    adapter_storage_bits: int
    param_overhead_pct: float
    base_ops: int
    adapter_ops: int
    qops: float
    compute_overhead_pct: float
    compute_overhead_raw_pct: float


@dataclass
class OverheadReport:
    arch_name: str
    rows: list[OverheadRow] = field(default_factory=list)

    FOOTER = ("# adapter storage counted at 32 bits per parameter; absolute percentages depend "
              "on the adapter size, only the ratios across bit-widths are comparable")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = list(OverheadRow.__dataclass_fields__)
        w.writerow(cols)
        for row in self.rows:
            w.writerow([getattr(row, c) for c in cols])
        buf.write(self.FOOTER + "\n")
        return buf.getvalue()

    def by_bits(self) -> dict[int, OverheadRow]:
        return {r.bits: r for r in self.rows}


def overhead_report(arch: ArchSpec, sizing: AdapterSizing | Callable | None = None,
                    bits=(8, 4, 3, 2)) -> OverheadReport:
    """Adapter storage/compute overhead relative to the quantized model at each bit-width.

    ``sizing`` is an :class:`AdapterSizing`, ``None`` (no adapters), or a
    callable ``rec -> (params, ops)``.
    """
    weight_layers = arch.weight_layers()
    _, base_params = param_count(arch)
    _, base_ops = ops_count(arch)
    if sizing is None:
        a_params = a_ops = 0
    elif isinstance(sizing, AdapterSizing):
        a_params = sum(sizing.params(r) for r in weight_layers)
        a_ops = sum(sizing.ops(r) for r in weight_layers)
    else:
        costs = [sizing(r) for r in weight_layers]
        a_params = sum(c[0] for c in costs)
        a_ops = sum(c[1] for c in costs)
    report = OverheadReport(arch.name)
    for b in bits:
        q_store = quantized_storage(base_params, b)
        a_store = a_params * FP_BITS
        q = qops(base_ops, b)
        report.rows.append(OverheadRow(
            bits=b, base_params=base_params, adapter_params=a_params,
            quantized_storage_bits=q_store, adapter_storage_bits=a_store,
            param_overhead_pct=100.0 * a_store / q_store if q_store else 0.0,
            base_ops=base_ops, adapter_ops=a_ops, qops=q,
            compute_overhead_pct=100.0 * a_ops / q if q else 0.0,
            compute_overhead_raw_pct=100.0 * a_ops / base_ops if base_ops else 0.0))
    return report


# ---------------------------------------------------------------------------
# activation diagnostics
# ---------------------------------------------------------------------------

def code_utilization(codes: np.ndarray, bits: int) -> tuple[int, float]:
    used = int(np.unique(np.asarray(codes)).size)
    return used, used / 2 ** bits


def _layer(model: Classifier, name: str):
    layers = dict(model.qlayers())
    if name not in layers:
        raise KeyError(f"unknown layer {name!r}; known: {list(layers)}")
    return layers[name]


@dataclass
class HistogramReport:
    layer: str
    bits: int
    edges: np.ndarray
    float_counts: np.ndarray
    dequant_counts: np.ndarray
    betas: np.ndarray
    codes_used: int
    utilization: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "bin_lo", "bin_hi", "float_count", "dequant_count"])
        for i in range(len(self.float_counts)):
            w.writerow([self.layer, repr(float(self.edges[i])), repr(float(self.edges[i + 1])),
                        int(self.float_counts[i]), int(self.dequant_counts[i])])
        buf.write(f"# codes_used={self.codes_used} of {2 ** self.bits}, "
                  f"utilization={self.utilization!r}, "
                  f"mean_beta={float(self.betas.mean()) if self.betas.size else float('nan')!r}\n")
        return buf.getvalue()


def _collect(model: Classifier, data: Dataset, names: list[str], batch_size: int):
    """Yield per-batch records of the named layers' inputs and quantized inputs."""
    layers = [_layer(model, n) for n in names]
    model.eval()
    for layer in layers:
        layer.record = True
    try:
        with T.no_grad():
            for idx in batches(len(data), batch_size):
                model(T.Tensor(data.images[idx]))
                yield [dict(layer.last) for layer in layers]
    finally:
        for layer in layers:
            layer.record = False


def activation_histogram(model: Classifier, data: Dataset, layer: str, bits: int | None = None,
                         batch_size: int = 256, bins: int = HIST_BINS) -> HistogramReport:
    q = _layer(model, layer).quant
    if q is None:
        raise ValueError(f"layer {layer!r} is not quantized")
    if bits is not None and bits != q.bits_a:
        raise ValueError(f"layer {layer!r} quantizes activations to {q.bits_a} bits, not {bits}")
    acts, deq, codes, betas = [], [], [], []
    for (rec,) in _collect(model, data, [layer], batch_size):
        acts.append(rec["input"].reshape(-1))
        deq.append(rec["dequant"].reshape(-1))
        codes.append(np.unique(rec["codes"]))
        if rec["beta"] is not None:
            betas.append(rec["beta"])
    a = np.concatenate(acts)
    d = np.concatenate(deq)
    lo, hi = float(min(a.min(), d.min())), float(max(a.max(), d.max()))
    if lo == hi:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    used, util = code_utilization(np.concatenate(codes), q.bits_a)
    return HistogramReport(layer, q.bits_a, edges, np.histogram(a, edges)[0],
                           np.histogram(d, edges)[0],
                           np.concatenate(betas) if betas else np.zeros(0), used, util)


def block_error_l2(float_model_: Classifier, quant_model: Classifier, data: Dataset,
                   batch_size: int = 256) -> list[float]:
    """Per block, the batch-mean L2 distance between float and quantized block outputs."""
    if len(float_model_.blocks) != len(quant_model.blocks):
        raise ValueError(f"block counts differ: {len(float_model_.blocks)} vs "
                         f"{len(quant_model.blocks)}")
    float_model_.eval()
    quant_model.eval()
    sums = np.zeros(len(float_model_.blocks))
    with T.no_grad():
        for idx in batches(len(data), batch_size):
            x = T.Tensor(data.images[idx])
            _, fo = float_model_(x, return_blocks=True)
            _, qo = quant_model(x, return_blocks=True)
            for b, (f, q) in enumerate(zip(fo, qo)):
                diff = (f.data - q.data).reshape(len(idx), -1)
                sums[b] += np.sqrt((diff * diff).sum(axis=1)).sum()
    return (sums / len(data)).tolist()


def block_error_csv(errors: list[float]) -> str:
    lines = ["block,l2_error"] + [f"{i + 1},{e!r}" for i, e in enumerate(errors)]
    return "\n".join(lines) + "\n"


@dataclass
class LayerErrorReport:
    rows: list[tuple[str, int, float]]

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in dict.fromkeys(r[0] for r in self.rows):
            vals = np.array([r[2] for r in self.rows if r[0] == name])
            out[name] = (float(vals.mean()), float(vals.var()))
        return out

    def to_csv(self) -> str:
        lines = ["layer,batch,l2_error"] + [f"{n},{b},{e!r}" for n, b, e in self.rows]
        return "\n".join(lines) + "\n"


def layer_quant_error(model: Classifier, data: Dataset, layers: list[str] | None = None,
                      batch_size: int = 256) -> LayerErrorReport:
    """``||A - A_hat||_2`` for each selected layer's input, one row per batch."""
    names = layers or [n for n, l in model.qlayers() if l.quant is not None]
    for n in names:
        if _layer(model, n).quant is None:
            raise ValueError(f"layer {n!r} is not quantized")
    rows = []
    for b, recs in enumerate(_collect(model, data, names, batch_size)):
        for n, rec in zip(names, recs):
            rows.append((n, b, float(np.linalg.norm(rec["input"] - rec["dequant"]))))
    return LayerErrorReport(rows)
