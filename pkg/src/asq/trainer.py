"""SGD + cosine-decay training loop, evaluation and history output."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset, batches, random_crop_flip
from .layers import Classifier, QLayer
from .quantizers import STEP_FLOOR

log = logging.getLogger(__name__)

# per-consumer streams derived from the root seed
SEED_INIT, SEED_ORDER, SEED_AUGMENT = 0, 1, 2


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1
    batch_size: int = 64
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    scheme: str = "scheme2"
    bits: int = 4
    dequant_mode: str = "base"
    random_crop: bool = False
    horizontal_flip: bool = False
    freeze_adapter: bool = False

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ValueError("lr0 must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """Cosine decay without restarts: ``lr0 * (1 + cos(pi * t / total)) / 2``."""
    if t < 0 or t > total:
        raise ValueError(f"step {t} outside [0, {total}]")
    return lr0 * (1.0 + math.cos(math.pi * t / total)) / 2.0


class SGD:
    """Momentum SGD: ``v = m*v + g + wd*w; w -= lr*v``.

    Parameters flagged ``decay=False`` skip weight decay; ``positive`` ones are
    floored at ``STEP_FLOOR`` after every step.
    """

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0, positive=()):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self._positive = {id(p) for p in positive}

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            g = p.grad
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            if self.weight_decay and getattr(p, "decay", True):
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
            if id(p) in self._positive:
                p.data = np.maximum(p.data, STEP_FLOOR)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def sgd_step(params, grads, lr: float, momentum: float, weight_decay: float, velocity=None,
             decay_mask=None):
    """Functional form of one SGD update. Returns ``(new_params, new_velocity)``."""
    velocity = velocity if velocity is not None else [np.zeros_like(p) for p in params]
    decay_mask = decay_mask if decay_mask is not None else [True] * len(params)
    new_p, new_v = [], []
    for p, g, v, d in zip(params, grads, velocity, decay_mask):
        if np.shape(p) != np.shape(g):
            raise ValueError("parameter and gradient shapes differ")
        v = momentum * v + g + (weight_decay * p if d else 0.0)
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


def quantizer_params(model: Classifier):
    out = []
    for _, layer in model.qlayers():
        out.extend(layer.quantizer_params())
    return out


def trainable_params(model: Classifier, freeze_adapter: bool = False):
    if not freeze_adapter:
        return model.parameters()
    frozen = {id(p) for _, l in model.qlayers() if hasattr(l, "adapter")
              for p in l.adapter.parameters()}
    return [p for p in model.parameters() if id(p) not in frozen]


def asq_layers(model: Classifier) -> list[tuple[str, QLayer]]:
    return [(n, l) for n, l in model.qlayers() if l.quant is not None and l.quant.act_scheme == "asq"]


def topk_correct(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    # stable sort on -logits keeps the lowest index first among ties
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return int((order == labels[:, None]).any(axis=1).sum())


def evaluate(model: Classifier, data: Dataset, batch_size: int = 256) -> dict:
    """Top-1 (and top-5 when there are at least five classes) accuracy and mean loss."""
    if len(data) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    model.eval()
    c1 = c5 = 0
    loss_sum = 0.0
    betas = {n: [] for n, _ in asq_layers(model)}
    with T.no_grad():
        for idx in batches(len(data), batch_size):
            logits = model(T.Tensor(data.images[idx])).data
            loss_sum += float(T.cross_entropy(T.Tensor(logits), data.labels[idx]).data) * len(idx)
            c1 += topk_correct(logits, data.labels[idx], 1)
            if logits.shape[1] >= 5:
                c5 += topk_correct(logits, data.labels[idx], 5)
            for n, l in asq_layers(model):
                betas[n].append(l.last_beta)
    n = len(data)
    out = {"loss": loss_sum / n, "top1": c1 / n,
           "top5": (c5 / n) if data.num_classes >= 5 else float("nan")}
    out["mean_beta"] = {k: float(np.concatenate(v).mean()) for k, v in betas.items() if v}
    return out


def predict_logits(model: Classifier, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = []
    with T.no_grad():
        for idx in batches(len(images), batch_size):
            out.append(model(T.Tensor(images[idx])).data)
    return np.concatenate(out) if out else np.zeros((0, 0))


def _first_nonfinite_layer(model: Classifier) -> str:
    for name, layer in model.qlayers():
        if layer.nonfinite:
            return name
    return "loss"


def train(model: Classifier, train_data: Dataset, eval_data: Dataset | None, config: TrainConfig,
          out_dir=None) -> list[dict]:
    """Run ``config.epochs`` epochs; returns one history dict per (epoch, split)."""
    params = trainable_params(model, config.freeze_adapter)
    opt = SGD(params, config.momentum, config.weight_decay, positive=quantizer_params(model))
    order_rng = np.random.default_rng([config.seed, SEED_ORDER])
    aug_rng = np.random.default_rng([config.seed, SEED_AUGMENT])
    steps_per_epoch = math.ceil(len(train_data) / config.batch_size)
    total = config.epochs * steps_per_epoch
    beta_layers = asq_layers(model)
    history = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        model.train()
        lr_epoch = cosine_lr(step, total, config.lr0)
        loss_sum, c1, c5 = 0.0, 0, 0
        beta_acc = {n: [] for n, _ in beta_layers}
        for idx in batches(len(train_data), config.batch_size, order_rng):
            x = train_data.images[idx]
            if config.random_crop or config.horizontal_flip:
                x = random_crop_flip(x, aug_rng, crop=config.random_crop, flip=config.horizontal_flip)
            y = train_data.labels[idx]
            lr = cosine_lr(step, total, config.lr0)
            opt.zero_grad()
            logits = model(T.Tensor(x))
            loss = T.cross_entropy(logits, y)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {step}; first non-finite output "
                    f"in layer {_first_nonfinite_layer(model)}")
            loss.backward()
            opt.step(lr)
            step += 1
            loss_sum += float(loss.data) * len(idx)
            c1 += topk_correct(logits.data, y, 1)
            c5 += topk_correct(logits.data, y, 5) if logits.shape[1] >= 5 else 0
            for n, l in beta_layers:
                beta_acc[n].append(l.last_beta)
        n = len(train_data)
        row = {"epoch": epoch, "split": "train", "loss": loss_sum / n, "top1": c1 / n,
               "top5": c5 / n if train_data.num_classes >= 5 else float("nan"), "lr": lr_epoch,
               "mean_beta": {k: float(np.concatenate(v).mean()) for k, v in beta_acc.items()}}
        history.append(row)
        log.info("epoch %d train loss %.4f top1 %.4f", epoch, row["loss"], row["top1"])
        if eval_data is not None:
            ev = evaluate(model, eval_data, config.batch_size)
            history.append({"epoch": epoch, "split": "test", "lr": lr_epoch, **ev})
            log.info("epoch %d test top1 %.4f", epoch, ev["top1"])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        checkpoint.save(out / "model.ckpt", model.state_dict())
        (out / "history.csv").write_text(history_csv(history, [n for n, _ in beta_layers]))
    return history


def history_csv(history: list[dict], beta_layers: list[str] | None = None) -> str:
    if beta_layers is None:
        beta_layers = sorted({k for row in history for k in row.get("mean_beta", {})})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "loss", "top1", "top5", "lr"]
               + [f"mean_beta_{n}" for n in beta_layers])
    for row in history:
        mb = row.get("mean_beta", {})
        w.writerow([row["epoch"], row["split"], repr(float(row["loss"])), repr(float(row["top1"])),
                    repr(float(row["top5"])), repr(float(row["lr"]))]
                   + [repr(mb[n]) if n in mb else "" for n in beta_layers])
    return buf.getvalue()
