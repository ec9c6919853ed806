"""Packing of term-id tuples into sortable int64 keys.

Every term-id (entity or predicate) must fit in ``ID_BITS`` bits so that a
triple ``(p, s, o)`` or a prediction ``(rule, x, y)`` packs into one
non-negative int64. Sorted key arrays then stand in for hash sets: membership
is a ``searchsorted`` and deduplication is ``np.unique``.
"""
from __future__ import annotations

import numpy as np

ID_BITS = 21
MAX_ID = (1 << ID_BITS) - 1
_MASK = np.int64(MAX_ID)
_SHIFT1 = np.int64(ID_BITS)
_SHIFT2 = np.int64(2 * ID_BITS)


class CapacityError(ValueError):
    """A term-id or rule-id does not fit in the packed key space."""


def check_capacity(n_ids: int, what: str = "terms") -> None:
    if n_ids > MAX_ID + 1:
        raise CapacityError(
            f"{n_ids} {what} exceed the packed key space of {MAX_ID + 1}"
        )


def pack3(a, b, c) -> np.ndarray:
    """Pack three id columns into one key, ``a`` most significant."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    c = np.asarray(c, dtype=np.int64)
    return (a << _SHIFT2) | (b << _SHIFT1) | c


def pack2(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    return (a << _SHIFT1) | b


def unpack3(keys) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.int64)
    return keys >> _SHIFT2, (keys >> _SHIFT1) & _MASK, keys & _MASK


def unpack2(keys) -> tuple[np.ndarray, np.ndarray]:
    keys = np.asarray(keys, dtype=np.int64)
    return keys >> _SHIFT1, keys & _MASK


def isin_sorted(values, sorted_keys: np.ndarray) -> np.ndarray:
    """Boolean mask of ``values`` present in the sorted unique ``sorted_keys``."""
    values = np.asarray(values, dtype=np.int64)
    if sorted_keys.size == 0 or values.size == 0:
        return np.zeros(values.shape, dtype=bool)
    idx = np.searchsorted(sorted_keys, values)
    idx[idx == sorted_keys.size] = 0
    return sorted_keys[idx] == values


def union_sorted(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.size == 0:
        return np.unique(b)
    if b.size == 0:
        return a
    return np.unique(np.concatenate([a, b]))


def setdiff_sorted(values: np.ndarray, sorted_keys: np.ndarray) -> np.ndarray:
    """Elements of ``values`` (sorted unique) not in ``sorted_keys``."""
    return values[~isin_sorted(values, sorted_keys)]


class KeySet:
    """Sorted unique keys with a one-hash bitmap in front of the binary search.

    Most membership probes in scoring miss; the bitmap rejects nearly all of
    them with one random read instead of a full ``searchsorted``.
    """

    _MULT = np.uint64(0x9E3779B97F4A7C15)

    def __init__(self, sorted_keys: np.ndarray, bits: int | None = None):
        self.keys = sorted_keys
        if bits is None:
            bits = int(np.clip(np.ceil(np.log2(max(sorted_keys.size, 1) * 16)), 10, 26))
        self.bits = bits
        self.mask = np.zeros(1 << bits, dtype=bool)
        self.mask[self._slot(sorted_keys)] = True

    def _slot(self, values: np.ndarray) -> np.ndarray:
        h = values.astype(np.uint64) * self._MULT
        return (h >> np.uint64(64 - self.bits)).astype(np.int64)

    def __len__(self) -> int:
        return int(self.keys.size)

    def contains(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.int64)
        out = self.mask[self._slot(values)]
        idx = np.flatnonzero(out)
        if idx.size:
            out[idx] = isin_sorted(values[idx], self.keys)
        return out
