"""Named parameter store with per-tensor trainable flags."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .autodiff import Tensor
from .errors import UsageError


class ParamRegistry:
    """Ordered ``name -> Tensor`` map. A tensor's ``requires_grad`` is its trainable flag."""

    def __init__(self) -> None:
        self._params: OrderedDict[str, Tensor] = OrderedDict()

    def add(self, name: str, tensor: Tensor, trainable: bool = True) -> Tensor:
        if name in self._params:
            raise UsageError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = trainable
        tensor.name = name
        self._params[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._params.items() if t.requires_grad]

    def set_trainable(self, name: str, flag: bool) -> None:
        t = self._params[name]
        t.requires_grad = flag
        if not flag:
            t.grad = None

    def zero_grad(self) -> None:
        """Reset gradients: zeros for trainable tensors, ``None`` for frozen ones."""
        for t in self._params.values():
            t.grad = np.zeros_like(t.data) if t.requires_grad else None

    def num_elements(self, trainable_only: bool = False) -> int:
        return sum(t.size for t in self._params.values() if t.requires_grad or not trainable_only)

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, arr in state.items():
            t = self._params[n]
            t.data = np.array(arr, dtype=t.dtype).reshape(t.shape)
