"""Named parameter sets with freeze bookkeeping, and an AdamW optimizer.

Freezing is enforced at the optimizer: a frozen parameter keeps its exact
bytes across any number of steps, even if gradients were accumulated on it
during backward passes.
"""

from __future__ import annotations

from fnmatch import fnmatchcase
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor
from .util import array_checksum


class ParamSet:
    """Mapping of unique names to tensors plus a set of frozen names."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, tensor: Tensor, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name: {name}")
        self._params[name] = tensor
        if frozen:
            self._frozen.add(name)
        return tensor

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def select(self, patterns: Iterable[str]) -> list[str]:
        """Names matching any of the glob-style patterns, sorted."""
        pats = list(patterns)
        return [n for n in self.names() if any(fnmatchcase(n, p) for p in pats)]

    # -- freezing -------------------------------------------------------

    @property
    def frozen_names(self) -> set[str]:
        return set(self._frozen)

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def freeze(self, *patterns: str) -> None:
        matched = self.select(patterns)
        if not matched:
            raise ConfigError(f"freeze patterns matched nothing: {patterns}")
        self._frozen.update(matched)

    def unfreeze(self, *patterns: str) -> None:
        for name in self.select(patterns):
            self._frozen.discard(name)

    def set_frozen_exactly(self, names: Iterable[str]) -> None:
        names = set(names)
        unknown = names - set(self._params)
        if unknown:
            raise ConfigError(f"frozen names not in parameter set: {sorted(unknown)}")
        self._frozen = names

    def trainable_names(self) -> list[str]:
        return [n for n in self.names() if n not in self._frozen]

    # -- gradients and inspection ----------------------------------------

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def checksums(self, pattern: str = "*") -> dict[str, str]:
        return {n: array_checksum(self._params[n].data) for n in self.select([pattern])}


class AdamW:
    """Decoupled-weight-decay Adam over the non-frozen entries of a ParamSet.

    Moments are keyed by parameter name so the optimizer state can be
    serialized and restored exactly.
    """

    def __init__(self, params: ParamSet, lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self) -> None:
        """Apply one update to every trainable parameter.

        Raises ContractError if a trainable parameter has no gradient, and
        guarantees frozen parameters are untouched.
        """
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for name in self.params.trainable_names():
            p = self.params[name]
            if p.grad is None:
                raise ContractError(f"parameter '{name}' is trainable but has no gradient")
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self.m[name] = m
            self.v[name] = v
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)

    # -- state round-trip -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name in sorted(self.m):
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state(self, t: int, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(t)
        self.m = {}
        self.v = {}
        for key, arr in arrays.items():
            if key.startswith("opt.m."):
                self.m[key[len("opt.m."):]] = arr.copy()
            elif key.startswith("opt.v."):
                self.v[key[len("opt.v."):]] = arr.copy()


def adamw_step(opt: AdamW) -> None:
    """Functional alias for :meth:`AdamW.step`."""
    opt.step()
