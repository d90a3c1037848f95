"""Reduced-scale experiments: code utilization under a range shift, error
accumulation across blocks, and the CIFAR-10 desk QAT comparison."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .adapter import Adapter, featurize
from .analysis import block_error_l2, code_utilization
from .data import Dataset, DatasetMissingError, SynthSpec, load_cifar_dir, synth_dataset
from .layers import Classifier, ModelConfig, QuantPolicy, build_model
from .quantizers import IntRange, asq_quantize, quant_dequant_uniform
from .trainer import SGD, TrainConfig, evaluate, train

log = logging.getLogger(__name__)

CIFAR_ENV = "ASQ_CIFAR10_DIR"


# ---------------------------------------------------------------------------
# code utilization under a distribution shift
# ---------------------------------------------------------------------------

@dataclass
class UtilizationResult:
    bits: int
    lsq_codes_used: int
    asq_codes_used: int
    beta_wide: float
    beta_narrow: float
    lsq_error: float
    asq_error: float
    steps: int


def utilization_experiment(bits: int = 2, step: float = 1.0, samples: int = 32, dim: int = 256,
                           steps: int = 200, lr: float = 0.02, seed: int = 0) -> UtilizationResult:
    """Fixed-step LSQ vs ASQ with an adapter trained alone.

    Half the samples are uniform on ``[0, 2*s*p]`` (the range the step ``s``
    suits), half on the narrow ``[0, 2*s]``. With a fixed step the narrow
    group never reaches the top code. The adapter is trained for ``steps``
    SGD steps on the reconstruction MSE (adaptive dequantization); codes used
    are counted on the narrow group.
    """
    r = IntRange.unsigned(bits)
    rng = np.random.default_rng(seed)
    wide = rng.uniform(0.0, 2 * step * r.p, (samples, dim))
    narrow = rng.uniform(0.0, 2 * step, (samples, dim))
    x = np.concatenate([wide, narrow])

    lsq_codes, lsq_hat = quant_dequant_uniform(narrow, step, r)

    adapter = Adapter(2, 16, "exp", seed)
    opt = SGD(adapter.parameters(), momentum=0.9)
    s = T.Tensor(np.array(step))
    feats = featurize(x, step, r)
    xt = T.Tensor(x)
    for _ in range(steps):
        opt.zero_grad()
        xq = asq_quantize(xt, s, adapter(feats), r, "adaptive", grad_scale=False)
        T.mse(xq, x).backward()
        opt.step(lr)
    with T.no_grad():
        beta = adapter(feats).data
        xq = asq_quantize(xt, s, T.Tensor(beta), r, "adaptive", grad_scale=False)
    asq_codes = xq.codes[samples:]
    return UtilizationResult(
        bits=bits,
        lsq_codes_used=code_utilization(lsq_codes, bits)[0],
        asq_codes_used=code_utilization(asq_codes, bits)[0],
        beta_wide=float(beta[:samples].mean()), beta_narrow=float(beta[samples:].mean()),
        lsq_error=float(np.linalg.norm(narrow - lsq_hat)),
        asq_error=float(np.linalg.norm(narrow - xq.data[samples:])),
        steps=steps)


# ---------------------------------------------------------------------------
# error accumulation
# ---------------------------------------------------------------------------

def calibrate(model: Classifier, images: np.ndarray) -> Classifier:
    """Initialize activation steps from one batch without updating anything else."""
    model.train()
    with T.no_grad():
        model(T.Tensor(images))
    return model.eval()


@dataclass
class BlockErrorResult:
    errors: dict[int, list[float]]
    self_errors: list[float]
    float_top1: float


def block_error_experiment(bits=(3, 8), scheme: str = "scheme2", epochs: int = 4,
                           width: int = 8, seed: int = 0) -> BlockErrorResult:
    """Train a small ResNet20-shaped float model on synthetic data, then quantize it."""
    cfg = ModelConfig("resnet20", num_classes=4, width=width, image_size=8)
    spec = SynthSpec(n=256, num_classes=4, size=8, noise=0.8)
    train_set = synth_dataset(spec, seed, "train")
    test_set = synth_dataset(SynthSpec(n=128, num_classes=4, size=8, noise=0.8), seed, "test")
    fm = build_model(cfg, None, seed=seed)
    train(fm, train_set, None, TrainConfig(epochs=epochs, batch_size=32, lr0=0.05, seed=seed,
                                           scheme="float"))
    state = fm.state_dict()
    errors = {}
    for b in bits:
        qm = build_model(cfg, QuantPolicy(b, scheme), state, seed=seed)
        calibrate(qm, train_set.images[:64])
        errors[b] = block_error_l2(fm, qm, test_set)
    twin = build_model(cfg, None, state, seed=seed)
    return BlockErrorResult(errors, block_error_l2(fm, twin, test_set),
                            evaluate(fm, test_set)["top1"])


# ---------------------------------------------------------------------------
# CIFAR-10 desk QAT
# ---------------------------------------------------------------------------

def cifar_root(path: str | None = None) -> Path:
    """Directory holding the CIFAR-10 ``*.bin`` batches (argument, else ``$ASQ_CIFAR10_DIR``)."""
    root = path or os.environ.get(CIFAR_ENV)
    if not root:
        raise DatasetMissingError(f"CIFAR-10 binary directory not given; set {CIFAR_ENV}")
    root = Path(root)
    if not (root / "test_batch.bin").exists():
        raise DatasetMissingError(f"no CIFAR-10 binary batches under {root}")
    return root


@dataclass
class DeskQATResult:
    float_top1: dict[int, float] = field(default_factory=dict)
    scheme2_top1: dict[int, float] = field(default_factory=dict)
    lsq_top1: dict[int, float] = field(default_factory=dict)

    @staticmethod
    def _mean(d: dict[int, float]) -> float:
        return float(np.mean(list(d.values())))

    @property
    def float_mean(self) -> float:
        return self._mean(self.float_top1)

    @property
    def scheme2_mean(self) -> float:
        return self._mean(self.scheme2_top1)

    @property
    def lsq_mean(self) -> float:
        return self._mean(self.lsq_top1)


def desk_qat_experiment(root: str | None = None, n_train: int = 10_000, epochs: int = 20,
                        seeds=(0, 1, 2), bits: int = 4, width: int = 16, batch_size: int = 128,
                        lr_float: float = 0.1, lr_qat: float = 0.01,
                        out_dir: str | None = None) -> DeskQATResult:
    """Float baseline, then W{bits}A{bits} scheme 2 and the LSQ baseline fine-tuned from it."""
    base = cifar_root(root)
    full = load_cifar_dir(base, "train")
    test_set: Dataset = load_cifar_dir(base, "test")
    cfg = ModelConfig("resnet20", num_classes=10, width=width, image_size=32)
    res = DeskQATResult()
    for seed in seeds:
        idx = np.random.default_rng([seed, 3]).permutation(len(full))[:n_train]
        train_set = full.subset(np.sort(idx))

        def run(policy, lr, init, tag):
            model = build_model(cfg, policy, init, seed=seed)
            tc = TrainConfig(epochs=epochs, batch_size=batch_size, lr0=lr, seed=seed,
                             weight_decay=5e-4 if policy is None else 1e-4,
                             scheme="float" if policy is None else policy.scheme, bits=bits,
                             random_crop=True, horizontal_flip=True)
            sub = None if out_dir is None else Path(out_dir) / f"{tag}_seed{seed}"
            train(model, train_set, None, tc, sub)
            top1 = evaluate(model, test_set, batch_size)["top1"]
            log.info("%s seed %d top1 %.4f", tag, seed, top1)
            return model, top1

        fm, res.float_top1[seed] = run(None, lr_float, None, "float")
        state = fm.state_dict()
        _, res.scheme2_top1[seed] = run(QuantPolicy(bits, "scheme2"), lr_qat, state, "scheme2")
        _, res.lsq_top1[seed] = run(QuantPolicy(bits, "lsq-baseline"), lr_qat, state, "lsq")
    return res
