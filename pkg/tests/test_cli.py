import json

import pytest

from asq.cli import EXIT_CODES, load_config, run
from oracles import brute_levels

SMALL = ["--set", "data.synth.n=64", "--set", "data.synth.n_test=32", "--set", "model.width=4",
         "--no-timestamps"]


def _train(out, *extra):
    return run(["train", "--out", str(out), "--epochs", "1"] + SMALL + list(extra))


def test_levels_post_b3(capsys):
    assert run(["levels", "--scheme", "post", "--bits", "3", "--alpha", "1"]) == 0
    vals = [float(v) for v in capsys.readouterr().out.split()]
    assert len(vals) == 9
    assert vals == brute_levels("post", 1.0, 3)


def test_levels_codebook(capsys):
    assert run(["levels", "--scheme", "pot", "--bits", "2", "--codebook"]) == 0
    assert len(capsys.readouterr().out.split()) == 4


def test_train_smoke_and_artifacts(tmp_path, capsys):
    assert _train(tmp_path, "--scheme", "scheme2") == 0
    assert capsys.readouterr().out.startswith("top1=")
    header = (tmp_path / "history.csv").read_text().splitlines()[0]
    assert header.startswith("epoch,split,loss,top1,top5,lr,mean_beta_stem.conv")
    assert (tmp_path / "model.ckpt").is_file()
    assert not (tmp_path / "run.json").exists()
    echoed = json.loads((tmp_path / "config.json").read_text())
    assert echoed["quant"]["scheme"] == "scheme2" and echoed["train"]["epochs"] == 1


def test_timestamps_written_by_default(tmp_path):
    assert run(["bench", "--out", str(tmp_path), "--set", "bench.sizes=[8]",
                "--set", "bench.repeats=1"]) == 0
    assert set(json.loads((tmp_path / "run.json").read_text())) == {"command", "started",
                                                                    "seconds"}


def test_config_echo_reproduces_run(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _train(a, "--scheme", "scheme1", "--seed", "3") == 0
    assert run(["train", "--config", str(a / "config.json"), "--out", str(b),
                "--no-timestamps"]) == 0
    assert (a / "history.csv").read_bytes() == (b / "history.csv").read_bytes()
    assert (a / "config.json").read_bytes() == (b / "config.json").read_bytes()


def test_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"seed": 1, "quant": {"default_bits": 8}}))
    cfg = load_config(str(cfg_file), ["seed=2", "quant.default_bits=3"], {"seed": 5})
    assert cfg["seed"] == 5 and cfg["quant"]["default_bits"] == 3
    assert load_config(str(cfg_file), [], {})["seed"] == 1


def test_eval_export_infer_pipeline(tmp_path, capsys):
    run_dir = tmp_path / "run"
    assert _train(run_dir, "--scheme", "scheme2") == 0
    common = ["--scheme", "scheme2", "--set", f"checkpoint=\"{run_dir / 'model.ckpt'}\""] + SMALL
    assert run(["eval", "--out", str(tmp_path / "ev")] + common) == 0
    assert (tmp_path / "ev" / "metrics.csv").read_text().startswith("top1,top5,loss\n")
    assert run(["export", "--out", str(tmp_path / "ex")] + common) == 0
    int_path = tmp_path / "ex" / "model.int"
    assert int_path.is_file()
    assert run(["infer-int", "--out", str(tmp_path / "inf"), "--set",
                f"int_model=\"{int_path}\""] + common) == 0
    logits = (tmp_path / "inf" / "logits.csv").read_text().splitlines()
    assert logits[0] == "index,label,logit_0,logit_1,logit_2,logit_3" and len(logits) == 33
    agree = (tmp_path / "inf" / "agreement.csv").read_text().splitlines()
    assert agree[0].startswith("argmax_agreement,")


def test_analyze(tmp_path):
    run_dir = tmp_path / "run"
    assert _train(run_dir, "--scheme", "scheme2", "--set", "model.name=\"resnet20\"") == 0
    assert _train(tmp_path / "fl", "--set", "model.name=\"resnet20\"") == 0
    out = tmp_path / "an"
    assert run(["analyze", "--out", str(out), "--scheme", "scheme2",
                "--set", "model.name=\"resnet20\"",
                "--set", f"checkpoint=\"{run_dir / 'model.ckpt'}\"",
                "--set", f"init.float_checkpoint=\"{tmp_path / 'fl' / 'model.ckpt'}\"",
                "--set", "analyze.layers=[\"blocks.3.conv1\"]"] + SMALL) == 0
    names = {p.name for p in out.iterdir()}
    assert {"arch.json", "overhead.csv", "layer_error.csv", "histogram_blocks.3.conv1.csv",
            "block_error.csv"} <= names
    assert len((out / "block_error.csv").read_text().splitlines()) == 10


def _code(capsys, argv):
    code = run(argv)
    err = capsys.readouterr().err.strip()
    return code, err


def test_exit_codes(tmp_path, capsys):
    out = ["--out", str(tmp_path / "o")]
    code, err = _code(capsys, ["train", "--config", str(tmp_path / "missing.json")] + out)
    assert code == EXIT_CODES["config-path"] and err.startswith("error: config-path:")

    code, err = _code(capsys, ["train", "--set", "train.nope=1"] + out)
    assert code == EXIT_CODES["config-schema"] and "train.nope" in err
    code, err = _code(capsys, ["train", "--set", "train.epochs=\"two\""] + out)
    assert code == EXIT_CODES["config-schema"] and "train.epochs" in err

    code, err = _code(capsys, ["train", "--set", "data.kind=\"cifar-binary\"",
                               "--set", f"data.path=\"{tmp_path / 'none'}\""] + out)
    assert code == EXIT_CODES["dataset-missing"] and err.startswith("error: dataset-missing:")

    run_dir = tmp_path / "s1"
    assert _train(run_dir, "--scheme", "scheme1") == 0
    code, err = _code(capsys, ["infer-int", "--scheme", "scheme1", "--set",
                               f"checkpoint=\"{run_dir / 'model.ckpt'}\""] + SMALL + out)
    assert code == EXIT_CODES["unsupported-scheme"]

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage!")
    code, err = _code(capsys, ["eval", "--set", f"checkpoint=\"{bad}\""] + out)
    assert code == EXIT_CODES["checkpoint"] and "offset 0" in err


def test_exit_codes_are_distinct():
    assert len(set(EXIT_CODES.values())) == len(EXIT_CODES)
    assert 0 not in EXIT_CODES.values()


def test_unknown_command_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 2
