"""Parameter creation with the fan-in uniform initialization used everywhere."""
from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, parameter


class ParamInit:
    """Creates named parameters into a dict, drawing from one PCG64 stream.

    Creation order fixes the draw order, so a given (seed, config) always
    yields the same weights.
    """

    def __init__(self, rng: np.random.Generator, store: dict[str, Tensor] | None = None, prefix: str = ""):
        self.rng = rng
        self.store = {} if store is None else store
        self.prefix = prefix

    def child(self, prefix: str) -> "ParamInit":
        return ParamInit(self.rng, self.store, f"{self.prefix}{prefix}.")

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        key = self.prefix + name
        if key in self.store:
            raise KeyError(f"duplicate parameter {key}")
        t = parameter(data, name=key)
        self.store[key] = t
        return t

    def weight(self, name: str, d_out: int, d_in: int) -> Tensor:
        bound = 1.0 / math.sqrt(d_in)
        return self._add(name, self.rng.uniform(-bound, bound, size=(d_out, d_in)))

    def vector(self, name: str, n: int, fan_in: int | None = None) -> Tensor:
        bound = 1.0 / math.sqrt(fan_in or n)
        return self._add(name, self.rng.uniform(-bound, bound, size=n))

    def zeros(self, name: str, *shape: int) -> Tensor:
        return self._add(name, np.zeros(shape))

    def ones(self, name: str, *shape: int) -> Tensor:
        return self._add(name, np.ones(shape))


def sub_params(store: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """View of ``store`` entries under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in store.items() if k.startswith(p)}
