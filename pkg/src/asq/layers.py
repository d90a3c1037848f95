"""Quantization-aware conv/linear layers, the desk-scale model zoo and ``build_model``."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .adapter import Adapter, featurize
from .nn import Module, parameter
from .quantizers import (IntRange, asq_quantize, init_alpha, level_quantize, lsq_quantize,
                         step_init)

SUPPORTED_BITS = (2, 3, 4, 8)
SCHEMES = ("float", "scheme1", "scheme2", "lsq-baseline", "pot-weights", "post-weights")

# scheme -> (activation quantizer, weight quantizer for the low-bit middle layers)
_SCHEME_TABLE = {
    "scheme1": ("asq", "lsq"),
    "scheme2": ("asq", "post"),
    "lsq-baseline": ("lsq", "lsq"),
    "pot-weights": ("lsq", "pot"),
    "post-weights": ("lsq", "post"),
}


class UnsupportedSchemeError(ValueError):
    pass


@dataclass
class LayerQuant:
    bits_w: int
    bits_a: int
    weight_scheme: str = "lsq"
    act_scheme: str = "lsq"
    dequant_mode: str = "base"
    grad_scale: bool = True
    full_levels: bool = False
    adapter_depth: int = 2
    adapter_hidden: int = 16
    adapter_map: str = "exp"

    def __post_init__(self):
        for b in (self.bits_w, self.bits_a):
            if b not in SUPPORTED_BITS:
                raise ValueError(f"bit-width {b} not in {SUPPORTED_BITS}")
        if self.weight_scheme not in ("lsq", "post", "pot"):
            raise ValueError(f"unknown weight quantizer {self.weight_scheme!r}")
        if self.act_scheme not in ("lsq", "asq"):
            raise ValueError(f"unknown activation quantizer {self.act_scheme!r}")


@dataclass
class QuantPolicy:
    """Bit-width policy: first and last quantized layers always get ``first_last_bits``."""

    default_bits: int = 4
    scheme: str = "scheme2"
    first_last_bits: int = 8
    dequant_mode: str = "base"
    grad_scale: bool = True
    full_levels: bool = False
    adapter_depth: int = 2
    adapter_hidden: int = 16
    adapter_map: str = "exp"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; choose from {SCHEMES}")

    def layer_quant(self, index: int, count: int) -> LayerQuant | None:
        if self.scheme == "float":
            return None
        act, weight = _SCHEME_TABLE[self.scheme]
        edge = index == 0 or index == count - 1
        bits = self.first_last_bits if edge else self.default_bits
        # non-uniform weights are only used on the low-bit layers
        return LayerQuant(
            bits_w=bits, bits_a=bits,
            weight_scheme="lsq" if edge else weight, act_scheme=act,
            dequant_mode=self.dequant_mode, grad_scale=self.grad_scale,
            full_levels=self.full_levels, adapter_depth=self.adapter_depth,
            adapter_hidden=self.adapter_hidden, adapter_map=self.adapter_map)


class QLayer(Module):
    """Convolution or linear layer whose weights and input may be fake-quantized.

    Without a ``LayerQuant`` attached it is a plain float layer.
    """

    def __init__(self, kind: str, weight_shape: tuple[int, ...], *, bias: bool = False,
                 stride: int = 1, padding: int = 0, act_signed: bool = False,
                 rng: np.random.Generator | None = None):
        super().__init__()
        if kind not in ("conv2d", "linear"):
            raise ValueError(kind)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = int(np.prod(weight_shape[1:]))
        self.kind = kind
        self.stride = stride
        self.padding = padding
        self.act_signed = act_signed
        self.weight = parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=weight_shape))
        self.bias = parameter(np.zeros(weight_shape[0]), decay=False) if bias else None
        self.quant: LayerQuant | None = None
        self.record = False
        self.last: dict = {}
        self.nonfinite = False
        self.executor = None

    # -- configuration ----------------------------------------------------
    @property
    def act_range(self) -> IntRange:
        return IntRange.for_bits(self.quant.bits_a, self.act_signed)

    @property
    def weight_range(self) -> IntRange:
        return IntRange.signed(self.quant.bits_w)

    def quantize(self, lq: LayerQuant, seed: int = 0) -> "QLayer":
        """Attach quantizers; weight step/alpha are initialized from the current weights."""
        self.quant = lq
        w = self.weight.data
        if lq.weight_scheme == "lsq":
            self.w_step = parameter(step_init(w, self.weight_range), decay=False)
        else:
            self.w_alpha = parameter(init_alpha(w), decay=False)
        self.a_step = parameter(1.0, decay=False)
        self._buffers["a_step_ready"] = np.array(0.0)
        if lq.act_scheme == "asq":
            self.adapter = Adapter(lq.adapter_depth, lq.adapter_hidden, lq.adapter_map, seed)
        return self

    def quantizer_params(self) -> list[T.Tensor]:
        return [getattr(self, k) for k in ("w_step", "w_alpha", "a_step") if hasattr(self, k)]

    # -- forward ----------------------------------------------------------
    def quantized_weight(self) -> T.Tensor:
        q = self.quant
        if q is None:
            return self.weight
        if q.weight_scheme == "lsq":
            return lsq_quantize(self.weight, self.w_step, self.weight_range, q.grad_scale)
        return level_quantize(self.weight, self.w_alpha, q.weight_scheme, q.bits_w,
                              q.full_levels, q.grad_scale)

    def compute_beta(self, a: np.ndarray) -> T.Tensor:
        feats = featurize(a, float(self.a_step.data), self.act_range)
        return self.adapter(feats)

    def quantized_input(self, x: T.Tensor) -> T.Tensor:
        q = self.quant
        r = self.act_range
        if not self._buffers["a_step_ready"]:
            self.a_step.data = np.array(step_init(x.data, r))
            self._buffers["a_step_ready"] = np.array(1.0)
        if q.act_scheme == "asq":
            beta = self.compute_beta(x.data)
            xq = asq_quantize(x, self.a_step, beta, r, q.dequant_mode, q.grad_scale)
            self.last_beta = beta.data
        else:
            xq = lsq_quantize(x, self.a_step, r, q.grad_scale)
            self.last_beta = None
        if self.record:
            self.last = {"input": x.data.copy(), "dequant": xq.data.copy(), "codes": xq.codes,
                         "beta": None if self.last_beta is None else self.last_beta.copy()}
        return xq

    def linear_op(self, xq: T.Tensor, w: T.Tensor) -> T.Tensor:
        if self.kind == "conv2d":
            return T.conv2d(xq, w, self.stride, self.padding)
        return T.matmul(xq, T.transpose(w))

    def forward(self, x: T.Tensor) -> T.Tensor:
        if self.executor is not None:
            y = self.executor(self, x)
            self.nonfinite = not np.all(np.isfinite(y.data))
            return y
        if self.quant is None:
            xq, w = x, self.weight
            if self.record:
                self.last = {"input": x.data.copy(), "dequant": x.data.copy(), "codes": None,
                             "beta": None}
        else:
            if not self._buffers["a_step_ready"] and not self.training:
                raise RuntimeError("activation step size not initialized; run a training batch first")
            w = self.quantized_weight()
            xq = self.quantized_input(x)
        y = self.linear_op(xq, w)
        if self.bias is not None:
            y = T.bias_add(y, self.bias)
        self.nonfinite = not np.all(np.isfinite(y.data))
        return y


class BatchNorm2d(Module):
    """Batch norm; ``frozen`` forces the running-statistics (inference) form."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = parameter(np.ones(channels))
        self.shift = parameter(np.zeros(channels), decay=False)
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)
        self.momentum = momentum
        self.eps = eps
        self.frozen = False

    def forward(self, x: T.Tensor) -> T.Tensor:
        if self.training and not self.frozen:
            out, mu, var = T.batchnorm_train(x, self.gamma, self.shift, self.eps)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mu
            self._buffers["running_var"] = ((1 - m) * self._buffers["running_var"]
                                            + m * var * n / max(n - 1, 1))
            return out
        return T.batchnorm_inference(x, self._buffers["running_mean"], self._buffers["running_var"],
                                     self.gamma, self.shift, self.eps)


class ConvBNReLU(Module):
    def __init__(self, cin, cout, stride, rng, act_signed=False):
        super().__init__()
        self.conv = QLayer("conv2d", (cout, cin, 3, 3), stride=stride, padding=1,
                           act_signed=act_signed, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class BasicBlock(Module):
    def __init__(self, cin, cout, stride, rng):
        super().__init__()
        self.conv1 = QLayer("conv2d", (cout, cin, 3, 3), stride=stride, padding=1, rng=rng)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = QLayer("conv2d", (cout, cout, 3, 3), padding=1, rng=rng)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.shortcut = QLayer("conv2d", (cout, cin, 1, 1), stride=stride, rng=rng)
            self.shortcut_bn = BatchNorm2d(cout)
        else:
            self.shortcut = None

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = self.shortcut_bn(self.shortcut(x)) if self.shortcut is not None else x
        return T.relu(T.add(out, skip))


@dataclass
class ModelConfig:
    name: str = "tinynet"
    num_classes: int = 10
    in_channels: int = 3
    width: int = 16
    image_size: int = 32

    def __post_init__(self):
        if self.name not in MODEL_ZOO:
            raise ValueError(f"unknown model {self.name!r}; choose from {sorted(MODEL_ZOO)}")


class Classifier(Module):
    """Base for the zoo: ``stem``/``blocks``/``fc`` executed in that order."""

    def forward(self, x: T.Tensor, return_blocks: bool = False):
        h = self.stem(x)
        outs = []
        for blk in self.blocks:
            h = blk(h)
            outs.append(h)
        logits = self.fc(T.global_avg_pool(h))
        return (logits, outs) if return_blocks else logits

    def qlayers(self) -> list[tuple[str, QLayer]]:
        """All conv/linear layers in execution order."""
        return [(n, m) for n, m in self.named_modules() if isinstance(m, QLayer)]

    def batchnorms(self) -> list[BatchNorm2d]:
        return [m for _, m in self.named_modules() if isinstance(m, BatchNorm2d)]


class TinyNet(Classifier):
    """Five weight layers: four 3x3 convs and a classifier."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        w = cfg.width
        self.stem = ConvBNReLU(cfg.in_channels, w, 1, rng, act_signed=True)
        self.blocks = [ConvBNReLU(w, 2 * w, 2, rng), ConvBNReLU(2 * w, 4 * w, 2, rng),
                       ConvBNReLU(4 * w, 4 * w, 1, rng)]
        self.fc = QLayer("linear", (cfg.num_classes, 4 * w), bias=True, rng=rng)


class ResNet20(Classifier):
    """CIFAR-style ResNet with three stages of three basic blocks (1x1 projection shortcuts)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        w = cfg.width
        self.stem = ConvBNReLU(cfg.in_channels, w, 1, rng, act_signed=True)
        blocks = []
        cin = w
        for stage, cout in enumerate((w, 2 * w, 4 * w)):
            for i in range(3):
                stride = 2 if (stage > 0 and i == 0) else 1
                blocks.append(BasicBlock(cin, cout, stride, rng))
                cin = cout
        self.blocks = blocks
        self.fc = QLayer("linear", (cfg.num_classes, 4 * w), bias=True, rng=rng)


MODEL_ZOO = {"tinynet": TinyNet, "resnet20": ResNet20}


def float_model(cfg: ModelConfig, seed: int = 0) -> Classifier:
    return MODEL_ZOO[cfg.name](cfg, np.random.default_rng(seed))


def apply_policy(model: Classifier, policy: QuantPolicy, seed: int = 0) -> Classifier:
    layers = model.qlayers()
    for i, (_, layer) in enumerate(layers):
        lq = policy.layer_quant(i, len(layers))
        if lq is not None:
            layer.quantize(lq, seed=seed + 1000 + i)
    if policy.scheme != "float":
        for bn in model.batchnorms():
            bn.frozen = True
    return model


def build_model(cfg: ModelConfig, policy: QuantPolicy | None = None, float_ckpt=None,
                seed: int = 0) -> Classifier:
    """Construct a model, load float weights, then wrap every layer per ``policy``.

    ``float_ckpt`` is a mapping of tensor names to arrays or a checkpoint path.
    """
    from . import checkpoint

    model = float_model(cfg, seed)
    if float_ckpt is not None:
        state = float_ckpt if isinstance(float_ckpt, dict) else checkpoint.load(float_ckpt)
        model.load_state_dict(state, strict=True)
    if policy is not None:
        apply_policy(model, policy, seed)
    return model


def load_quantized(cfg: ModelConfig, policy: QuantPolicy | None, state: dict,
                   seed: int = 0) -> Classifier:
    """Rebuild a model saved after quantization-aware training."""
    model = float_model(cfg, seed)
    if policy is not None:
        apply_policy(model, policy, seed)
    model.load_state_dict(state, strict=True)
    return model


def policy_dict(policy: QuantPolicy) -> dict:
    return asdict(policy)
