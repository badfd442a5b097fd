"""Parameter storage and the small layer vocabulary shared by the networks."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from mccl import ops
from mccl.tensor import Tensor


class ParamStore:
    """Name-indexed parameters plus non-trainable buffers (batch-norm statistics).

    Parameter creation is deterministic: every tensor is drawn from one
    generator seeded by the run seed, in creation order.
    """

    def __init__(self, seed: int = 0, dtype=np.float32):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.dtype = np.dtype(dtype)
        self._rng = np.random.default_rng(seed)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(data.astype(self.dtype), requires_grad=True, dtype=self.dtype, name=name)
        self.params[name] = t
        return t

    def uniform(self, name: str, shape, fan_in: int) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        return self._add(name, self._rng.uniform(-bound, bound, size=shape))

    def constant(self, name: str, shape, value: float) -> Tensor:
        return self._add(name, np.full(shape, value))

    def add_conv(self, name: str, cin: int, cout: int, k: int, bias: bool = True) -> None:
        self.uniform(f"{name}/w", (cout, cin, k, k), cin * k * k)
        if bias:
            self.constant(f"{name}/b", (cout,), 0.0)

    def add_bn(self, name: str, c: int) -> None:
        self.constant(f"{name}/gamma", (c,), 1.0)
        self.constant(f"{name}/beta", (c,), 0.0)
        self.buffers[f"{name}/running_mean"] = np.zeros(c, dtype=self.dtype)
        self.buffers[f"{name}/running_var"] = np.ones(c, dtype=self.dtype)

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def state(self) -> "OrderedDict[str, np.ndarray]":
        """Flat name -> array map of parameters and buffers."""
        out = OrderedDict((n, t.data) for n, t in self.params.items())
        out.update(self.buffers)
        return out

    def load_state(self, state: dict, strict: bool = True) -> None:
        for name in list(self.params) + list(self.buffers):
            if name not in state:
                if strict:
                    raise KeyError(name)
                continue
            arr = np.asarray(state[name])
            target = self.params[name].data if name in self.params else self.buffers[name]
            if arr.shape != target.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr

    def astype(self, dtype) -> "ParamStore":
        clone = ParamStore(dtype=dtype)
        for n, t in self.params.items():
            clone._add(n, t.data)
        for n, b in self.buffers.items():
            clone.buffers[n] = b.astype(dtype)
        return clone

    def frozen(self) -> "ParamStore":
        """View with the same data but no gradient tracking."""
        clone = ParamStore(dtype=self.dtype)
        for n, t in self.params.items():
            clone.params[n] = Tensor(t.data, requires_grad=False, dtype=self.dtype, name=n)
        clone.buffers = self.buffers
        return clone

    def n_params(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))


def conv(ps: ParamStore, name: str, x: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    b = ps.params.get(f"{name}/b")
    return ops.conv2d(x, ps[f"{name}/w"], b, stride=stride, pad=pad)


def bn(ps: ParamStore, name: str, x: Tensor, training: bool, update_stats: bool = True) -> Tensor:
    return ops.batch_norm(
        x, ps[f"{name}/gamma"], ps[f"{name}/beta"],
        ps.buffers[f"{name}/running_mean"], ps.buffers[f"{name}/running_var"],
        training=training, update_stats=update_stats,
    )


def add_residual_block(ps: ParamStore, name: str, cin: int, cout: int) -> None:
    ps.add_conv(f"{name}/conv1", cin, cout, 3, bias=False)
    ps.add_bn(f"{name}/bn1", cout)
    ps.add_conv(f"{name}/conv2", cout, cout, 3, bias=False)
    ps.add_bn(f"{name}/bn2", cout)
    if cin != cout:
        ps.add_conv(f"{name}/skip", cin, cout, 1)


def residual_block(ps: ParamStore, name: str, x: Tensor, training: bool) -> Tensor:
    """conv3x3-BN-ReLU-conv3x3-BN plus identity (or 1x1) shortcut, then ReLU."""
    h = ops.relu(bn(ps, f"{name}/bn1", conv(ps, f"{name}/conv1", x, pad=1), training))
    h = bn(ps, f"{name}/bn2", conv(ps, f"{name}/conv2", h, pad=1), training)
    skip = conv(ps, f"{name}/skip", x) if f"{name}/skip/w" in ps.params else x
    return ops.relu(ops.add(h, skip))
