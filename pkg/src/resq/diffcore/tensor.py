"""Dense float64 tensors with taped reverse-mode gradients.

Everything trainable in this package runs on these tensors. The design
goals are exactness and checkability, not speed: float64 throughout,
eager rejection of non-finite values, and a finite-difference harness
(see gradcheck.py) that every primitive must satisfy.
"""
from __future__ import annotations

import contextlib
import hashlib
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np


class DiffcoreError(Exception):
    pass


class ShapeError(DiffcoreError):
    """Operand dimensions do not line up."""


class NonFiniteError(DiffcoreError):
    """NaN or Inf encountered at tensor construction."""


class ContractError(DiffcoreError):
    """An operation was called outside its contract."""


_GRAD_ENABLED = True


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable taping inside the block; ops return detached tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """A row-major float64 array plus an optional gradient of equal size.

    Tensors are immutable by convention once they enter a graph; the
    optimizer mutates parameter ``data`` in place between steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor holds NaN/Inf values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents if _GRAD_ENABLED else ()
        self._backward = _backward if _GRAD_ENABLED else None

    # --- contract accessors -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the payload."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # --- reverse pass -------------------------------------------------------
    def backward(self, seed: np.ndarray | None = None) -> None:
        """Accumulate gradients into every reachable tensor that wants them."""
        if seed is None:
            if self.data.size != 1:
                raise ContractError("backward() without seed needs a scalar output")
            seed = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.data.shape)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def const(data) -> Tensor:
    """A constant (non-trainable) graph input."""
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    """A trainable leaf."""
    return Tensor(data, requires_grad=True)


@dataclass
class ParamSet:
    """Named parameters; frozen names never receive optimizer updates."""

    params: dict[str, Tensor] = field(default_factory=dict)
    frozen: set[str] = field(default_factory=set)

    def add(self, name: str, data, frozen: bool = False) -> Tensor:
        if name in self.params:
            raise ContractError(f"duplicate parameter id {name!r}")
        t = Tensor(data, requires_grad=not frozen)
        self.params[name] = t
        if frozen:
            self.frozen.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            if name not in self.frozen:
                yield name, self.params[name]

    def freeze_all(self) -> None:
        for name, t in self.params.items():
            self.frozen.add(name)
            t.requires_grad = False

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def n_scalars(self, trainable_only: bool = True) -> int:
        return sum(t.size for n, t in self.params.items()
                   if not (trainable_only and n in self.frozen))

    def fingerprint(self, names: Iterator[str] | None = None) -> str:
        """SHA-256 over the raw bytes of the named (default: all) parameters."""
        h = hashlib.sha256()
        for name in sorted(names) if names is not None else self.names():
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + name: self.params[name].data.copy() for name in self.names()}

    def load_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
        for name in self.names():
            src = arrays[prefix + name]
            t = self.params[name]
            if src.shape != t.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {name!r}")
            t.data = np.array(src, dtype=np.float64)
