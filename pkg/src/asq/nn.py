"""Small module system over :mod:`asq.tensor`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor


def parameter(data, decay: bool = True) -> Tensor:
    t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
    t.decay = decay
    return t


class Module:
    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Tensor, Module)):
                yield key, val
            elif isinstance(val, (list, tuple)) and val and all(isinstance(m, Module) for m in val):
                for i, m in enumerate(val):
                    yield f"{key}.{i}", m

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}.{key}" if prefix else key)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in self._children():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield name, val
            else:
                yield from val.named_parameters(name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in self._buffers.items():
            yield (f"{prefix}.{key}" if prefix else key), val
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}.{key}" if prefix else key)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: np.array(b, dtype=np.float64) for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> list[str]:
        """Copy matching tensors in. Returns the names of model entries not found in ``state``."""
        missing = []
        for name, p in self.named_parameters():
            if name not in state:
                missing.append(name)
                continue
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise KeyError(f"checkpoint tensor {name!r} has shape {arr.shape}, "
                               f"model expects {p.shape}")
            p.data = arr.copy()
            p.zero_grad()
        for mod_name, mod in self.named_modules():
            for key in list(mod._buffers):
                name = f"{mod_name}.{key}" if mod_name else key
                if name not in state:
                    missing.append(name)
                    continue
                mod._buffers[key] = np.asarray(state[name], dtype=np.float64).reshape(
                    np.shape(mod._buffers[key])).copy()
        if strict and missing:
            raise KeyError(f"checkpoint is missing tensors: {missing}")
        return missing

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()
