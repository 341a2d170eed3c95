"""Named parameter collections and initializers."""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .tensor import NumericsError, Tensor


class ParameterSet:
    """Map from dotted path name to learnable Tensor; iteration is lexicographic."""

    def __init__(self, rng_seed: int = 0):
        self.rng_seed = rng_seed
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        tensor.requires_grad = True
        self._params[name] = tensor
        return tensor

    @classmethod
    def from_named(cls, named: Iterable[tuple[str, Tensor]], rng_seed: int = 0) -> "ParameterSet":
        ps = cls(rng_seed)
        for name, t in named:
            ps.add(name, t)
        return ps

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def n_values(self) -> int:
        return sum(t.size for _, t in self.items())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        """Overwrite parameter data in place; names and shapes must match exactly."""
        missing = set(self._params) - set(values)
        extra = set(values) - set(self._params)
        if missing or extra:
            raise ValueError(f"parameter name mismatch (missing={sorted(missing)}, extra={sorted(extra)})")
        for name, t in self.items():
            arr = values[name]
            if tuple(arr.shape) != t.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(t.data.dtype, copy=True)

    def to_dtype(self, dtype) -> None:
        for t in self._params.values():
            t.data = t.data.astype(dtype)


def gradients(loss: Tensor, params: ParameterSet) -> dict[str, np.ndarray]:
    """Reverse-mode gradient of a scalar loss for every parameter.

    Parameters that the loss does not reach get zero gradients of matching
    shape.  Node grads are cleared afterwards so parameter tensors can be
    reused across steps.
    """
    if loss.size != 1:
        raise NumericsError(f"loss must be scalar, got shape {loss.shape}")
    loss.backward(check_finite=False)
    out: dict[str, np.ndarray] = {}
    for name, t in params.items():
        if t.grad is None:
            out[name] = np.zeros_like(t.data)
        else:
            if not np.all(np.isfinite(t.grad)):
                raise NumericsError(f"non-finite gradient for parameter {name}")
            out[name] = t.grad
            t.grad = None
    return out


# -- initializers (recorded in checkpoint config; conventional choices) -------


def linear_init(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype)


def bias_init(rng: np.random.Generator, n_in: int, n_out: int, dtype=np.float32) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_out,)).astype(dtype)


def embedding_init(rng: np.random.Generator, rows: int, dim: int, dtype=np.float32) -> np.ndarray:
    return (0.02 * rng.standard_normal((rows, dim))).astype(dtype)
