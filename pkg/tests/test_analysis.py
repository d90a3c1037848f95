import csv
import io
from fractions import Fraction

import numpy as np
import pytest

from asq import tensor as T
from asq.analysis import (AdapterSizing, ArchSpec, OverheadReport, activation_histogram,
                          arch_from_model, block_error_csv, block_error_l2, code_utilization,
                          layer_quant_error, ops_count, overhead_report, param_count, qops,
                          quantized_storage)
from asq.data import Dataset, SynthSpec, synth_dataset
from asq.layers import ModelConfig, QuantPolicy, build_model
from oracles import brute_layer_counts

TINY = ModelConfig("tinynet", num_classes=4, width=4, image_size=8)
CONV = {"type": "conv", "C_in": 3, "C_out": 16, "K_w": 3, "K_h": 3, "H_out": 32, "W_out": 32}
LIN = {"type": "linear", "N_in": 512, "N_out": 10}


# -- counting --------------------------------------------------------------------

def test_count_examples():
    per, total = param_count(ArchSpec([CONV, LIN, {"type": "other"}]))
    assert per == [432, 5130, 0] and total == 5562
    per, total = ops_count(ArchSpec([CONV, LIN]))
    assert per == [442368, 5120] and total == 447488
    assert param_count(ArchSpec([])) == ([], 0)
    assert ops_count(ArchSpec([dict(CONV, H_out=64)]))[1] == 2 * 442368


def test_counts_match_enumeration_on_random_archs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        recs = []
        for _ in range(rng.integers(1, 5)):
            if rng.random() < 0.6:
                recs.append({"type": "conv", **{k: int(rng.integers(1, 6)) for k in
                                                ("C_in", "C_out", "K_w", "K_h", "H_out", "W_out")}})
            elif rng.random() < 0.8:
                recs.append({"type": "linear", "N_in": int(rng.integers(1, 40)),
                             "N_out": int(rng.integers(1, 12))})
            else:
                recs.append({"type": "other"})
        arch = ArchSpec(recs)
        brute = [brute_layer_counts(r) for r in recs]
        assert param_count(arch) == ([b[0] for b in brute], sum(b[0] for b in brute))
        assert ops_count(arch) == ([b[1] for b in brute], sum(b[1] for b in brute))


def test_arch_validation_and_json_round_trip(tmp_path):
    with pytest.raises(ValueError):
        ArchSpec([dict(CONV, C_in=0)])
    with pytest.raises(ValueError):
        ArchSpec([{"type": "pool"}])
    with pytest.raises(ValueError):
        ArchSpec([dict(LIN, N_in=2.5)])
    arch = ArchSpec([CONV, LIN, {"type": "other"}], "toy")
    arch.save(tmp_path / "a.json")
    back = ArchSpec.load(tmp_path / "a.json")
    assert back == arch


def test_arch_from_model():
    arch = arch_from_model(TINY)
    assert [r["name"] for r in arch.layers] == ["stem.conv", "blocks.0.conv", "blocks.1.conv",
                                                "blocks.2.conv", "fc"]
    stem = arch.layers[0]
    assert (stem["C_in"], stem["C_out"], stem["H_out"]) == (3, 4, 8)
    params = sum(l.weight.size + (l.bias.size if l.bias is not None else 0)
                 for _, l in build_model(TINY).qlayers())
    assert param_count(arch)[1] == params


def test_storage_and_qops():
    assert quantized_storage(1000, 4) == 4000
    assert quantized_storage(1000, 32) == 32000
    assert quantized_storage(1000, 2) * 2 == quantized_storage(1000, 4)
    with pytest.raises(ValueError):
        quantized_storage(10, 5)
    rng = np.random.default_rng(1)
    for ops in rng.integers(1, 10 ** 12, size=50).tolist():
        assert qops(ops, 8) == ops / 4
        assert qops(ops, 4) == ops / 8
        assert qops(ops, 32) == ops
    with pytest.raises(ValueError):
        qops(10, 0)


# -- overhead ----------------------------------------------------------------------

def test_adapter_sizing():
    assert AdapterSizing().params() == 97 and AdapterSizing().ops() == 80
    assert AdapterSizing(1).params() == 5 and AdapterSizing(1).ops() == 4


def test_param_overhead_ratios_exact():
    arch = arch_from_model(ModelConfig("resnet20", 10, 3, 16, 32))
    rows = overhead_report(arch, AdapterSizing()).by_bits()
    p8 = Fraction(rows[8].param_overhead_pct)
    # storage ratio is exactly 8/B, so the floats differ only by final rounding
    for b, ratio in ((4, 2), (3, Fraction(8, 3)), (2, 4)):
        assert float(Fraction(rows[b].param_overhead_pct) / p8) == pytest.approx(float(ratio),
                                                                                rel=1e-15)
    for b, table in ((4, 5.34), (3, 7.11), (2, 10.67)):
        got = rows[b].param_overhead_pct / rows[8].param_overhead_pct
        assert abs(got / (table / 2.67) - 1) < 5e-3
    pcts = [rows[b].param_overhead_pct for b in (8, 4, 3, 2)]
    assert pcts == sorted(pcts) and len(set(pcts)) == 4


def test_zero_adapters_and_homogeneity():
    arch = ArchSpec([CONV, LIN])
    for row in overhead_report(arch, None).rows:
        assert row.param_overhead_pct == 0 and row.compute_overhead_pct == 0
    # grow the layers and the adapter budget by the same parameter factor
    big = ArchSpec([dict(CONV, C_in=6, C_out=32), dict(LIN, N_in=1024, N_out=20)])
    small_rep = overhead_report(arch, lambda r: (100, 100), bits=(8, 4))
    big_params = param_count(big)[1] / param_count(arch)[1]
    big_rep = overhead_report(big, lambda r: (100 * big_params, 100), bits=(8, 4))
    for a, b in zip(small_rep.rows, big_rep.rows):
        assert b.param_overhead_pct == pytest.approx(a.param_overhead_pct, rel=1e-12)


def test_overhead_csv_format():
    rep = overhead_report(ArchSpec([CONV, LIN]), AdapterSizing())
    text = rep.to_csv()
    lines = text.splitlines()
    assert lines[-1] == OverheadReport.FOOTER
    rows = list(csv.DictReader(io.StringIO("\n".join(lines[:-1]))))
    assert [int(r["bits"]) for r in rows] == [8, 4, 3, 2]
    assert "compute_overhead_pct" in rows[0] and "compute_overhead_raw_pct" in rows[0]
    assert all(float(r["param_overhead_pct"]) >= 0 for r in rows)


# -- activation diagnostics ------------------------------------------------------------

def test_code_utilization():
    assert code_utilization(np.array([0, 1, 1, 3]), 2) == (3, 0.75)
    assert code_utilization(np.zeros(5), 4) == (1, 1 / 16)


def _calibrated(policy, seed=0):
    model = build_model(TINY, policy, seed=seed)
    model.train()
    model(T.Tensor(synth_dataset(SynthSpec(n=32, size=8), seed).images))
    return model.eval()


def test_histogram_constant_input():
    model = _calibrated(QuantPolicy(4, "scheme2"))
    data = Dataset(np.full((8, 3, 8, 8), 0.3), np.zeros(8, dtype=np.int64), 4)
    rep = activation_histogram(model, data, "stem.conv")
    assert np.count_nonzero(rep.float_counts) == 1
    assert rep.codes_used == 1 and rep.utilization == 1 / 256
    assert rep.float_counts.sum() == 8 * 3 * 8 * 8 == rep.dequant_counts.sum()
    assert rep.betas.shape == (8,)


def test_histogram_two_bit_layer_and_errors():
    model = _calibrated(QuantPolicy(2, "scheme2"))
    data = synth_dataset(SynthSpec(n=16, size=8), 1)
    rep = activation_histogram(model, data, "blocks.1.conv", bits=2)
    assert rep.utilization <= 1 and rep.utilization * 4 == rep.codes_used
    assert len(rep.edges) == 65
    text = rep.to_csv()
    assert text.startswith("layer,bin_lo,bin_hi,float_count,dequant_count\n")
    assert text.splitlines()[-1].startswith("# codes_used=")
    with pytest.raises(KeyError):
        activation_histogram(model, data, "blocks.9.conv")
    with pytest.raises(ValueError):
        activation_histogram(model, data, "blocks.1.conv", bits=4)
    with pytest.raises(ValueError):
        activation_histogram(build_model(TINY), data, "stem.conv")


def test_block_error_identity_and_mismatch():
    cfg = ModelConfig("resnet20", 4, 3, 4, 8)
    model = build_model(cfg, QuantPolicy(3, "scheme2"))
    model.train()
    data = synth_dataset(SynthSpec(n=16, size=8), 0)
    model(T.Tensor(data.images))
    errs = block_error_l2(model, model, data)
    assert errs == [0.0] * 9
    fl = build_model(cfg, seed=0)
    errs = block_error_l2(fl, model, data, batch_size=5)
    assert len(errs) == 9 and all(e >= 0 for e in errs) and any(e > 0 for e in errs)
    assert block_error_csv(errs).splitlines()[0] == "block,l2_error"
    assert len(block_error_csv(errs).splitlines()) == 10
    with pytest.raises(ValueError):
        block_error_l2(fl, build_model(TINY), data)


def test_layer_quant_error():
    data = synth_dataset(SynthSpec(n=20, size=8), 0)
    model = _calibrated(QuantPolicy(8, "lsq-baseline"))
    rep = layer_quant_error(model, data, batch_size=8)
    assert len(rep.rows) == 5 * 3  # (layer, batch) pairs
    assert rep.to_csv().splitlines()[0] == "layer,batch,l2_error"
    low = _calibrated(QuantPolicy(2, "lsq-baseline"))
    rep2 = layer_quant_error(low, data, ["blocks.1.conv"], batch_size=8)
    mean8 = rep.summary()["blocks.1.conv"][0]
    mean2 = rep2.summary()["blocks.1.conv"][0]
    assert mean8 < 0.1 * mean2
    with pytest.raises(KeyError):
        layer_quant_error(model, data, ["nope"])
