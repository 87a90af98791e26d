"""Sparse per-cell bit masks and the per-voxel decision cache."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import WORD_DTYPE, popcount

# LOW_MASKS[b] has bits 0..b-1 set; index 64 is the all-ones word.
LOW_MASKS = np.array([(1 << b) - 1 for b in range(65)], dtype=WORD_DTYPE)


@dataclass(eq=False)
class DynamicMask:
    """Potentially dynamic bits for a set of cells.

    ``cells`` are flat cell ids (``i * N2 + j``) in ascending order and
    ``words`` the matching occupancy words.
    """

    dims: tuple[int, int]
    cells: np.ndarray
    words: np.ndarray

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1)
        self.words = np.asarray(self.words, dtype=WORD_DTYPE).reshape(-1)
        if len(self.cells) != len(self.words):
            raise ValueError("cells and words length mismatch")

    @classmethod
    def empty(cls, dims) -> "DynamicMask":
        return cls(dims, np.empty(0, np.int64), np.empty(0, WORD_DTYPE))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "DynamicMask":
        flat = np.asarray(dense, dtype=WORD_DTYPE).reshape(-1)
        cells = np.flatnonzero(flat)
        return cls(tuple(dense.shape), cells, flat[cells])

    def dense(self) -> np.ndarray:
        out = np.zeros(self.dims[0] * self.dims[1], dtype=WORD_DTYPE)
        out[self.cells] = self.words
        return out.reshape(self.dims)

    def as_dict(self) -> dict[tuple[int, int], int]:
        n2 = self.dims[1]
        return {divmod(int(c), n2): int(w) for c, w in zip(self.cells, self.words) if w}

    def n_bits(self) -> int:
        return popcount(self.words)

    def with_words(self, words: np.ndarray) -> "DynamicMask":
        keep = words != 0
        return DynamicMask(self.dims, self.cells[keep], words[keep])

    def voxel_keys(self, n_bit: int) -> np.ndarray:
        """Flat voxel keys ``cell * n_bit + bit`` of every set bit."""
        if len(self.cells) == 0:
            return np.empty(0, dtype=np.int64)
        bits = bit_matrix(self.words, n_bit)
        rows, cols = np.nonzero(bits)
        return self.cells[rows] * n_bit + cols

    def is_subset_of(self, other: "DynamicMask") -> bool:
        theirs = other.dense().reshape(-1)[self.cells]
        return bool(np.all((self.words & ~theirs) == 0))


def bit_matrix(words: np.ndarray, n_bit: int) -> np.ndarray:
    """Boolean ``(len(words), n_bit)`` view of which bits are set."""
    words = np.ascontiguousarray(np.asarray(words, dtype=WORD_DTYPE).reshape(-1))
    as_bytes = words.astype("<u8").view(np.uint8).reshape(-1, 8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :n_bit].astype(bool)


@dataclass(eq=False)
class DecisionCache:
    """Tri-state per voxel: undecided, protected or dynamic (dense word arrays)."""

    protected: np.ndarray
    dynamic: np.ndarray

    @classmethod
    def for_dims(cls, dims) -> "DecisionCache":
        return cls(np.zeros(dims, WORD_DTYPE), np.zeros(dims, WORD_DTYPE))

    def n_protected(self) -> int:
        return popcount(self.protected)

    def n_dynamic(self) -> int:
        return popcount(self.dynamic)
