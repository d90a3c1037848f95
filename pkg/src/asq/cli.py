"""Command-line entry point: ``asq {train,eval,export,infer-int,bench,analyze,levels}``.

Configuration precedence, lowest to highest: built-in defaults, ``--config``
file, ``--set key.path=value`` overrides (in order), then the dedicated flags
(``--seed``, ``--bits``, ``--scheme``, ``--dequant-mode``, ``--epochs``).
The effective configuration is written to ``<out>/config.json`` before the
command runs; passing that file back with ``--config`` reproduces the run.

Failures print one line ``error: <category>: <message>`` to stderr and exit
with the category's code (see ``EXIT_CODES``).
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, checkpoint, intinfer
from .data import (Dataset, DatasetFormatError, DatasetMissingError, DatasetSource, SynthSpec,
                   load_source)
from .layers import (SCHEMES, SUPPORTED_BITS, ModelConfig, QuantPolicy, UnsupportedSchemeError,
                     build_model, load_quantized)
from .quantizers import make_levels
from .trainer import TrainConfig, TrainingDivergedError, evaluate, predict_logits, train

log = logging.getLogger("asq")

EXIT_CODES = {
    "config-path": 3,
    "config-schema": 4,
    "dataset-missing": 5,
    "dataset-format": 6,
    "unsupported-scheme": 7,
    "checkpoint": 8,
    "diverged": 9,
    "overflow": 10,
}


class CLIError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULTS: dict = {
    "seed": 0,
    "model": {"name": "tinynet", "num_classes": 4, "in_channels": 3, "width": 8,
              "image_size": 8},
    "data": {"kind": "synthetic", "path": "", "limit_train": 0, "limit_test": 0,
             "synth": {"n": 256, "n_test": 128, "num_classes": 4, "channels": 3, "size": 8,
                       "noise": 0.5}},
    "quant": {"scheme": "float", "default_bits": 4, "first_last_bits": 8,
              "dequant_mode": "base", "grad_scale": True, "full_levels": False,
              "adapter_depth": 2, "adapter_hidden": 16, "adapter_map": "exp"},
    "train": {"epochs": 1, "batch_size": 64, "lr0": 0.05, "momentum": 0.9,
              "weight_decay": 1e-4, "random_crop": False, "horizontal_flip": False,
              "freeze_adapter": False},
    "init": {"float_checkpoint": None},
    "checkpoint": None,
    "int_model": None,
    "infer": {"literal_floor": False, "batch_size": 256},
    "bench": {"sizes": [64, 128, 256], "bits_w": 4, "bits_a": 8, "repeats": 5},
    "analyze": {"bits": [8, 4, 3, 2], "arch": None, "layers": [], "adapter_depth": 2,
                "adapter_hidden": 16},
}


def _merge(base: dict, update: dict, path: str = "") -> dict:
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in base:
            raise CLIError("config-schema", f"unknown key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise CLIError("config-schema", f"{where!r} must be an object")
            _merge(base[key], val, where + ".")
        else:
            base[key] = val
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set_path(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for i, k in enumerate(keys):
        where = ".".join(keys[: i + 1])
        if not isinstance(node, dict) or k not in node:
            raise CLIError("config-schema", f"unknown key {where!r}")
        if i == len(keys) - 1:
            if isinstance(node[k], dict):
                raise CLIError("config-schema", f"{where!r} is a section, not a value")
            node[k] = value
        else:
            node = node[k]


def _check_types(cfg: dict, ref: dict, path: str = "") -> None:
    for key, default in ref.items():
        val = cfg[key]
        where = f"{path}{key}"
        if isinstance(default, dict):
            _check_types(val, default, where + ".")
        elif default is None or val is None:
            continue
        elif isinstance(default, bool):
            if not isinstance(val, bool):
                raise CLIError("config-schema", f"{where!r} must be true or false")
        elif isinstance(default, (int, float)):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise CLIError("config-schema", f"{where!r} must be a number")
            if isinstance(default, int) and not isinstance(val, int):
                raise CLIError("config-schema", f"{where!r} must be an integer")
        elif isinstance(default, (str, list)) and not isinstance(val, type(default)):
            raise CLIError("config-schema", f"{where!r} must be a {type(default).__name__}")


def load_config(path: str | None, overrides: list[str], flags: dict) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise CLIError("config-path", f"config file not found: {p}")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise CLIError("config-schema", f"{p}: invalid JSON at line {exc.lineno}") from None
        if not isinstance(user, dict):
            raise CLIError("config-schema", f"{p}: top level must be an object")
        _merge(cfg, user)
    for item in overrides:
        if "=" not in item:
            raise CLIError("config-schema", f"--set expects key.path=value, got {item!r}")
        key, val = item.split("=", 1)
        _set_path(cfg, key.strip(), _parse_value(val))
    for key, val in flags.items():
        if val is not None:
            _set_path(cfg, key, val)
    _check_types(cfg, DEFAULTS)
    q = cfg["quant"]
    if q["scheme"] not in SCHEMES:
        raise CLIError("config-schema", f"'quant.scheme' must be one of {list(SCHEMES)}")
    for key in ("default_bits", "first_last_bits"):
        if q[key] not in SUPPORTED_BITS:
            raise CLIError("config-schema", f"'quant.{key}' must be one of {list(SUPPORTED_BITS)}")
    return cfg


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def _model_config(cfg: dict) -> ModelConfig:
    try:
        return ModelConfig(**cfg["model"])
    except ValueError as exc:
        raise CLIError("config-schema", f"model: {exc}") from None


def _policy(cfg: dict) -> QuantPolicy | None:
    q = dict(cfg["quant"])
    if q["scheme"] == "float":
        return None
    return QuantPolicy(**q)


def _dataset(cfg: dict, split: str) -> Dataset:
    d = cfg["data"]
    syn = dict(d["synth"])
    n_test = syn.pop("n_test")
    if split == "test":
        syn["n"] = n_test
    src = DatasetSource(d["kind"], d["path"], split)
    try:
        ds = load_source(src, SynthSpec(**syn), cfg["seed"])
    except ValueError as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise CLIError("config-schema", f"data: {exc}") from None
    limit = d["limit_train"] if split == "train" else d["limit_test"]
    if limit and limit < len(ds):
        idx = np.sort(np.random.default_rng([cfg["seed"], 3]).permutation(len(ds))[:limit])
        ds = ds.subset(idx)
    return ds


def _load_state(path) -> dict:
    if not path:
        raise CLIError("config-schema", "'checkpoint' must name a model checkpoint")
    p = Path(path)
    if not p.is_file():
        raise CLIError("config-path", f"checkpoint not found: {p}")
    return checkpoint.load(p)


def _trained_model(cfg: dict):
    mcfg = _model_config(cfg)
    state = _load_state(cfg["checkpoint"])
    try:
        model = load_quantized(mcfg, _policy(cfg), state, seed=cfg["seed"])
    except KeyError as exc:
        raise CLIError("checkpoint", f"checkpoint does not match the configured model: {exc}")
    return model.eval()


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path) -> int:
    mcfg = _model_config(cfg)
    policy = _policy(cfg)
    train_set = _dataset(cfg, "train")
    test_set = _dataset(cfg, "test")
    init = cfg["init"]["float_checkpoint"]
    if init is not None:
        init = _load_state(init)
    model = build_model(mcfg, policy, init, seed=cfg["seed"])
    q = cfg["quant"]
    tc = TrainConfig(seed=cfg["seed"], scheme=q["scheme"], bits=q["default_bits"],
                     dequant_mode=q["dequant_mode"], **cfg["train"])
    history = train(model, train_set, test_set, tc, out)
    last = [h for h in history if h["split"] == "test"][-1]
    print(f"top1={last['top1']!r} loss={last['loss']!r}")
    return 0


def cmd_eval(cfg: dict, out: Path) -> int:
    model = _trained_model(cfg)
    metrics = evaluate(model, _dataset(cfg, "test"), cfg["infer"]["batch_size"])
    line = f"top1={metrics['top1']!r} top5={metrics['top5']!r} loss={metrics['loss']!r}"
    _write(out, "metrics.csv", "top1,top5,loss\n"
           f"{metrics['top1']!r},{metrics['top5']!r},{metrics['loss']!r}\n")
    print(line)
    return 0


def _export(cfg: dict):
    model = _trained_model(cfg)
    policy = _policy(cfg) or QuantPolicy(scheme="float")
    return model, intinfer.export_int_model(model, _model_config(cfg), policy)


def cmd_export(cfg: dict, out: Path) -> int:
    _, im = _export(cfg)
    path = out / "model.int"
    intinfer.save_int_model(path, im)
    print(f"wrote {path} ({len(im.layers)} layers)")
    return 0


def cmd_infer_int(cfg: dict, out: Path) -> int:
    if cfg["int_model"]:
        p = Path(cfg["int_model"])
        if not p.is_file():
            raise CLIError("config-path", f"int model not found: {p}")
        im = intinfer.load_int_model(p)
        model = im.float_model()
    else:
        model, im = _export(cfg)
    data = _dataset(cfg, "test")
    bs = cfg["infer"]["batch_size"]
    ref = predict_logits(model, data.images, bs)
    logits = intinfer.int_infer(im, data.images, bs, cfg["infer"]["literal_floor"], model)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label"] + [f"logit_{k}" for k in range(logits.shape[1])])
    for i, row in enumerate(logits):
        w.writerow([i, int(data.labels[i])] + [repr(float(v)) for v in row])
    _write(out, "logits.csv", buf.getvalue())
    agree = float((logits.argmax(1) == ref.argmax(1)).mean())
    top1 = float((logits.argmax(1) == data.labels).mean())
    diff = float(np.abs(logits - ref).max())
    _write(out, "agreement.csv", "argmax_agreement,int_top1,max_abs_logit_diff,lut_hits,shift_ops\n"
           f"{agree!r},{top1!r},{diff!r},{im.stats.get('lut_hits', 0)},"
           f"{im.stats.get('shift_ops', 0)}\n")
    print(f"argmax_agreement={agree!r} int_top1={top1!r} max_abs_logit_diff={diff!r}")
    return 0


def cmd_bench(cfg: dict, out: Path) -> int:
    b = cfg["bench"]
    rows = intinfer.bench_post_vs_uniform(tuple(b["sizes"]), b["bits_w"], b["bits_a"],
                                          b["repeats"], cfg["seed"])
    text = intinfer.bench_csv(rows)
    _write(out, "bench.csv", text)
    print(text, end="")
    return 0


def cmd_analyze(cfg: dict, out: Path) -> int:
    a = cfg["analyze"]
    if a["arch"]:
        p = Path(a["arch"])
        if not p.is_file():
            raise CLIError("config-path", f"arch file not found: {p}")
        try:
            arch = analysis.ArchSpec.load(p)
        except (ValueError, KeyError) as exc:
            raise CLIError("config-schema", f"{p}: {exc}") from None
    else:
        arch = analysis.arch_from_model(_model_config(cfg))
    _write(out, "arch.json", arch.to_json())
    sizing = analysis.AdapterSizing(a["adapter_depth"], a["adapter_hidden"])
    _write(out, "overhead.csv", analysis.overhead_report(arch, sizing, a["bits"]).to_csv())
    written = ["arch.json", "overhead.csv"]
    if cfg["checkpoint"]:
        model = _trained_model(cfg)
        data = _dataset(cfg, "test")
        bs = cfg["infer"]["batch_size"]
        quantized = [n for n, l in model.qlayers() if l.quant is not None]
        names = a["layers"] or quantized
        try:
            if quantized:
                rep = analysis.layer_quant_error(model, data, names, bs)
                _write(out, "layer_error.csv", rep.to_csv())
                written.append("layer_error.csv")
                for n in names:
                    fname = f"histogram_{n}.csv"
                    _write(out, fname, analysis.activation_histogram(model, data, n, None, bs).to_csv())
                    written.append(fname)
            init = cfg["init"]["float_checkpoint"]
            if init:
                fm = build_model(_model_config(cfg), None, _load_state(init), cfg["seed"])
                errs = analysis.block_error_l2(fm, model, data, bs)
                _write(out, "block_error.csv", analysis.block_error_csv(errs))
                written.append("block_error.csv")
        except KeyError as exc:
            raise CLIError("config-schema", f"analyze.layers: {exc.args[0]}") from None
    print("wrote " + " ".join(written))
    return 0


def cmd_levels(args) -> int:
    levels = make_levels(args.scheme, args.alpha, args.bits, full_levels=not args.codebook)
    for v in levels.values:
        print(repr(float(v)))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "export": cmd_export,
            "infer-int": cmd_infer_int, "bench": cmd_bench, "analyze": cmd_analyze}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asq", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", default="out")
        p.add_argument("--seed", type=int)
        p.add_argument("--bits", type=int, choices=SUPPORTED_BITS)
        p.add_argument("--scheme", choices=SCHEMES)
        p.add_argument("--dequant-mode", choices=("base", "adaptive"))
        p.add_argument("--epochs", type=int)
        p.add_argument("--no-timestamps", action="store_true",
                       help="omit run.json (wall-clock start time and duration)")
    lv = sub.add_parser("levels")
    lv.add_argument("--scheme", choices=("pot", "post"), default="post")
    lv.add_argument("--bits", type=int, default=3)
    lv.add_argument("--alpha", type=float, default=1.0)
    lv.add_argument("--codebook", action="store_true",
                    help="print the 2**bits levels a code can hold instead of the full set")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "levels":
            if args.bits < 2 or args.alpha <= 0:
                raise CLIError("config-schema", "levels needs bits >= 2 and alpha > 0")
            return cmd_levels(args)
        flags = {"seed": args.seed, "quant.default_bits": args.bits, "quant.scheme": args.scheme,
                 "quant.dequant_mode": args.dequant_mode, "train.epochs": args.epochs}
        cfg = load_config(args.config, args.set, flags)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write(out, "config.json", json.dumps(cfg, indent=2, sort_keys=True) + "\n")
        t0 = time.time()
        code = COMMANDS[args.command](cfg, out)
        if not args.no_timestamps:
            _write(out, "run.json", json.dumps({"command": args.command, "started": t0,
                                                "seconds": time.time() - t0}) + "\n")
        return code
    except CLIError as exc:
        err = exc
    except DatasetMissingError as exc:
        err = CLIError("dataset-missing", str(exc))
    except DatasetFormatError as exc:
        err = CLIError("dataset-format", str(exc))
    except UnsupportedSchemeError as exc:
        err = CLIError("unsupported-scheme", str(exc))
    except checkpoint.CheckpointError as exc:
        err = CLIError("checkpoint", str(exc))
    except TrainingDivergedError as exc:
        err = CLIError("diverged", str(exc))
    except intinfer.AccumulatorOverflowError as exc:
        err = CLIError("overflow", str(exc))
    print(f"error: {err.category}: {err}", file=sys.stderr)
    return EXIT_CODES[err.category]


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
