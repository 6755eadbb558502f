"""Named parameter storage and small layer helpers used by every model part."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, batch_norm, conv2d, conv_transpose2d
from .errors import ConfigurationError, DimensionError


class ParameterSet:
    """Ordered mapping of unique names to trainable tensors, plus non-trainable buffers.

    Buffers hold batch-norm running statistics; they are saved with checkpoints
    but never receive gradients.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        t = Tensor(np.ascontiguousarray(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> None:
        if name in self.buffers:
            raise ConfigurationError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value, dtype=self.dtype)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def select(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self._params.items() if k.startswith(prefix)}

    def num_parameters(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet(dtype)
        for name, p in self._params.items():
            out.add(name, p.data)
        for name, b in self.buffers.items():
            out.add_buffer(name, b)
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer array, keyed by name."""
        state = {f"param/{k}": v.data.copy() for k, v in self._params.items()}
        state.update({f"buffer/{k}": v.copy() for k, v in self.buffers.items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for kind, store in (("param", self._params), ("buffer", self.buffers)):
            for name in store:
                key = f"{kind}/{name}"
                if key not in state:
                    raise DimensionError(f"{kind} {name!r} missing from state")
                current = store[name].data if kind == "param" else store[name]
                value = state[key]
                if value.shape != current.shape:
                    raise DimensionError(
                        f"{kind} {name!r} has shape {value.shape} in the state but {current.shape} in the model"
                    )
                current[...] = value


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))


def add_conv(ps: ParameterSet, name: str, cin: int, cout: int, k: int, rng, bias: bool = True) -> None:
    ps.add(f"{name}.weight", he_normal(rng, (cout, cin, k, k), cin * k * k))
    if bias:
        ps.add(f"{name}.bias", np.zeros(cout))


def add_conv_transpose(ps: ParameterSet, name: str, cin: int, cout: int, k: int, stride: int, rng) -> None:
    taps = max(1, (k // stride) ** 2)
    ps.add(f"{name}.weight", he_normal(rng, (cin, cout, k, k), cin * taps))
    ps.add(f"{name}.bias", np.zeros(cout))


def add_bn(ps: ParameterSet, name: str, c: int) -> None:
    ps.add(f"{name}.gamma", np.ones(c))
    ps.add(f"{name}.beta", np.zeros(c))
    ps.add_buffer(f"{name}.running_mean", np.zeros(c))
    ps.add_buffer(f"{name}.running_var", np.ones(c))


def conv(ps: ParameterSet, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    bias = ps[f"{name}.bias"] if f"{name}.bias" in ps else None
    return conv2d(x, ps[f"{name}.weight"], bias, stride=stride, padding=padding)


def conv_t(ps: ParameterSet, name: str, x: Tensor, stride: int) -> Tensor:
    return conv_transpose2d(x, ps[f"{name}.weight"], ps[f"{name}.bias"], stride=stride)


def bn(ps: ParameterSet, name: str, x: Tensor, training: bool) -> Tensor:
    return batch_norm(
        x,
        ps[f"{name}.gamma"],
        ps[f"{name}.beta"],
        ps.buffers[f"{name}.running_mean"],
        ps.buffers[f"{name}.running_var"],
        training,
    )
