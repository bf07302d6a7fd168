"""Logit poisoning applied by malicious clients to their uploads.

Three transformations are available besides ``none``:

* ``fdla``   - rotate confidence values one step along the rank order, so
               the runner-up class receives the top value and the top class
               receives the smallest value;
* ``random`` - replace every entry with an independent U[0, 1) draw
               (deliberately left unnormalized);
* ``zero``   - replace every entry with 0.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError


class AttackKind(str, enum.Enum):
    NONE = "none"
    FDLA = "fdla"
    RANDOM = "random"
    ZERO = "zero"

    @classmethod
    def parse(cls, value) -> "AttackKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            choices = "|".join(k.value for k in cls)
            raise ConfigError(f"unknown attack {value!r}, expected {choices}", field="attack") from None

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class AttackAssignment:
    malicious_ids: frozenset[int]
    ratio: float
    seed: int

    def is_malicious(self, client_id: int) -> bool:
        return client_id in self.malicious_ids


def sorted_indices(c) -> np.ndarray:
    """Class indices by descending confidence; ties keep ascending index."""
    c = np.asarray(c, dtype=np.float64)
    return np.argsort(-c, kind="stable")


def rank(c) -> np.ndarray:
    """1-based confidence rank of every entry (highest confidence -> 1)."""
    order = sorted_indices(c)
    r = np.empty(order.size, dtype=np.int64)
    r[order] = np.arange(1, order.size + 1)
    return r


def fdla_mapping(c) -> np.ndarray:
    """Index map ``t``: the top class points at the bottom class, every other
    class points at the class ranked one place above it."""
    order = sorted_indices(c)
    t = np.empty(order.size, dtype=np.int64)
    t[order] = np.roll(order, 1)
    return t


def fdla_transform(c) -> np.ndarray:
    """``c'[i] = c[t[i]]`` for the mapping of :func:`fdla_mapping`."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise InputError("fdla_transform expects a non-empty vector")
    return c[fdla_mapping(c)]


def fdla_transform_rows(matrix) -> np.ndarray:
    """Vectorized :func:`fdla_transform` over the rows of a matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] == 0:
        raise InputError("expected a non-empty (N, n) matrix")
    order = np.argsort(-m, axis=1, kind="stable")
    t = np.empty_like(order)
    np.put_along_axis(t, order, np.roll(order, 1, axis=1), axis=1)
    return np.take_along_axis(m, t, axis=1)


def random_poison(n: int, rng: np.random.Generator, rows: int | None = None) -> np.ndarray:
    if n < 1:
        raise InputError("n must be >= 1")
    return rng.random(n if rows is None else (rows, n))


def zero_poison(n: int, rows: int | None = None) -> np.ndarray:
    if n < 1:
        raise InputError("n must be >= 1")
    return np.zeros(n if rows is None else (rows, n))


def select_malicious(n_clients: int, ratio: float, seed: int) -> AttackAssignment:
    """Uniform random subset of ``round(ratio * K)`` clients, fixed for the run."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"must lie in [0, 1], got {ratio}", field="poison_ratio")
    if n_clients < 0:
        raise ConfigError("client count must be non-negative", field="K")
    count = int(round(ratio * n_clients))
    rng = np.random.default_rng(seed)
    ids = rng.permutation(n_clients)[:count]
    return AttackAssignment(frozenset(int(i) for i in ids), float(ratio), seed)


def apply_attack(knowledge, kind, rng: np.random.Generator | None = None) -> np.ndarray:
    """Apply ``kind`` to every row of an ``(N, n)`` knowledge matrix.

    ``none`` returns the input array object unchanged.  ``random`` needs the
    calling client's own ``rng``.
    """
    kind = AttackKind.parse(kind)
    if kind is AttackKind.NONE:
        return knowledge
    z = np.asarray(knowledge, dtype=np.float64)
    if z.ndim != 2:
        raise InputError("knowledge must be an (N, n) matrix")
    if kind is AttackKind.FDLA:
        return fdla_transform_rows(z)
    if kind is AttackKind.ZERO:
        return np.zeros_like(z)
    if rng is None:
        raise InputError("random poisoning needs an rng")
    return rng.random(z.shape)
