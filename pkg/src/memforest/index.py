"""Exact cosine top-K indexes over unit vectors (RootIndex, NodeIndex, FactIndex)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class IndexRow:
    key: str
    owner: str
    vector: np.ndarray
    text: str

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"row {self.key} vector norm {norm} is not unit")


class EmbeddingIndex:
    """Dense row store with exact brute-force search.

    Rows live in a growable float64 matrix; deletion swaps the last row into
    the hole so the matrix stays dense.
    """

    def __init__(self, name: str, dim: int | None = None):
        self.name = name
        self.dim = dim
        self._keys: list[str] = []
        self._owners: list[str] = []
        self._texts: list[str] = []
        self._pos: dict[str, int] = {}
        self._mat = np.zeros((0, dim or 0), dtype=np.float64)

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, key: str) -> bool:
        return key in self._pos

    def _ensure_capacity(self, n: int) -> None:
        if self._mat.shape[0] >= n:
            return
        cap = max(16, self._mat.shape[0] * 2, n)
        grown = np.zeros((cap, self.dim), dtype=np.float64)
        grown[: len(self._keys)] = self._mat[: len(self._keys)]
        self._mat = grown

    def upsert(self, rows) -> int:
        count = 0
        for row in rows:
            vec = np.asarray(row.vector, dtype=np.float64)
            if self.dim is None:
                self.dim = vec.shape[0]
                self._mat = np.zeros((0, self.dim), dtype=np.float64)
            if vec.shape != (self.dim,):
                raise DimensionMismatch(f"{self.name}: expected dimension {self.dim}, got {vec.shape}")
            i = self._pos.get(row.key)
            if i is None:
                i = len(self._keys)
                self._ensure_capacity(i + 1)
                self._keys.append(row.key)
                self._owners.append(row.owner)
                self._texts.append(row.text)
                self._pos[row.key] = i
            else:
                self._owners[i] = row.owner
                self._texts[i] = row.text
            self._mat[i] = vec
            count += 1
        return count

    def put(self, key: str, owner: str, vector, text: str) -> None:
        self.upsert([IndexRow(key, owner, np.asarray(vector, dtype=np.float64), text)])

    def delete(self, key: str) -> bool:
        i = self._pos.pop(key, None)
        if i is None:
            return False
        last = len(self._keys) - 1
        if i != last:
            self._keys[i] = self._keys[last]
            self._owners[i] = self._owners[last]
            self._texts[i] = self._texts[last]
            self._mat[i] = self._mat[last]
            self._pos[self._keys[i]] = i
        self._keys.pop()
        self._owners.pop()
        self._texts.pop()
        return True

    def get(self, key: str) -> IndexRow | None:
        i = self._pos.get(key)
        if i is None:
            return None
        return IndexRow(key, self._owners[i], self._mat[i].copy(), self._texts[i])

    def vector(self, key: str) -> np.ndarray:
        return self._mat[self._pos[key]]

    def keys(self) -> list[str]:
        return sorted(self._keys)

    def rows(self):
        for key in self.keys():
            yield self.get(key)

    def matrix(self) -> np.ndarray:
        return self._mat[: len(self._keys)]

    def search(self, query, k: int) -> list[tuple[str, float]]:
        """Exact top-``k`` by cosine, descending, ties broken by the smaller key."""
        if k < 1:
            raise ValueError("k must be >= 1")
        n = len(self._keys)
        if n == 0:
            return []
        q = np.ascontiguousarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise DimensionMismatch(f"{self.name}: query dimension {q.shape} != {self.dim}")
        mat = np.ascontiguousarray(self._mat[:n])
        scores = _accel.cosine_scores(mat, q)
        cand = _accel.top_candidates(scores, k)
        ranked = sorted(((float(scores[i]), self._keys[i]) for i in cand), key=lambda t: (-t[0], t[1]))
        return [(key, s) for s, key in ranked[:k]]

    def score(self, key: str, query) -> float:
        return float(np.dot(self.vector(key), np.asarray(query, dtype=np.float64)))

    def clear(self) -> None:
        self.__init__(self.name, self.dim)
