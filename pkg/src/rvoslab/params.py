"""Named parameter store with deterministic, name-keyed initialization.

Each parameter's initial value is a pure function of (name, shape, seed):
the per-name RNG stream is derived from the store seed and a stable hash
of the name, so creation order never changes a value and two stores with
the same seed are interchangeable.
"""

from __future__ import annotations

import hashlib
import math
from typing import BinaryIO, Iterator

import numpy as np

from .tensor import Tensor, read_tensor, write_tensor


def _name_key(name: str) -> int:
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class ParamStore:
    """Map from parameter name to trainable Tensor."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._params: dict[str, Tensor] = {}

    def get(self, name: str, shape: tuple[int, ...], fan_in: int | None = None,
            init: str = "uniform") -> Tensor:
        """Fetch a parameter, creating it on first use.

        `uniform` draws from U(-a, a) with a = sqrt(1/fan_in); fan_in
        defaults to the product of all but the last extent. `zeros` is for
        biases. Re-requesting a name with a different shape is an error.
        """
        if name in self._params:
            p = self._params[name]
            if p.shape != tuple(shape):
                raise ValueError(f"parameter {name!r} reused with shape {shape}, have {p.shape}")
            return p
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "uniform":
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else shape[0]
            a = math.sqrt(1.0 / max(1, fan_in))
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence([self.seed, _name_key(name)])))
            data = rng.uniform(-a, a, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        p = Tensor(data, requires_grad=True)
        self._params[name] = p
        return p

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()

    # -- checkpoint payload ---------------------------------------------------

    def write(self, f: BinaryIO) -> None:
        """Write all parameters, sorted by name, each as a length-prefixed
        name followed by a "TNS1" tensor block."""
        for name in sorted(self._params):
            blob = name.encode("utf-8")
            f.write(len(blob).to_bytes(4, "little"))
            f.write(blob)
            write_tensor(f, self._params[name].data)

    @classmethod
    def read(cls, f: BinaryIO, seed: int) -> "ParamStore":
        store = cls(seed)
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise ValueError("truncated parameter name length")
            n = int.from_bytes(head, "little")
            name = f.read(n).decode("utf-8")
            store._params[name] = Tensor(read_tensor(f), requires_grad=True)
        return store
