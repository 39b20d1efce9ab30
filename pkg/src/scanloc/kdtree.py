"""Exact k-nearest-neighbour kd-tree with bucketed leaves.

Ties in distance are resolved in favour of the lower entry id, so results are
identical to a sorted linear scan.
"""

from __future__ import annotations

import heapq

import numpy as np


class KDTree:
    def __init__(self, data, ids=None, leafsize: int = 16):
        data = np.ascontiguousarray(data, dtype=np.float64)
        if data.ndim != 2 or len(data) == 0:
            raise ValueError(f"kd-tree needs a non-empty (N, D) array, got shape {data.shape}")
        self.data = data
        self.ids = np.arange(len(data)) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(self.ids) != len(data):
            raise ValueError("ids and data lengths differ")
        self.leafsize = max(1, int(leafsize))
        # node arrays; leaves have dim == -1 and own order[start:end]
        self._dim, self._split, self._left, self._right = [], [], [], []
        self._start, self._end = [], []
        self.order = np.arange(len(data))
        self._build(0, len(data))

    def __len__(self) -> int:
        return len(self.data)

    def _new_node(self, dim, split, start, end) -> int:
        self._dim.append(dim)
        self._split.append(split)
        self._left.append(-1)
        self._right.append(-1)
        self._start.append(start)
        self._end.append(end)
        return len(self._dim) - 1

    def _build(self, start: int, end: int) -> int:
        idx = self.order[start:end]
        pts = self.data[idx]
        spread = pts.max(axis=0) - pts.min(axis=0)
        dim = int(np.argmax(spread))
        if end - start <= self.leafsize or spread[dim] == 0.0:
            return self._new_node(-1, 0.0, start, end)
        vals = pts[:, dim]
        mid = (end - start) // 2
        part = np.argsort(vals, kind="stable")
        self.order[start:end] = idx[part]
        split = float(vals[part[mid]])
        node = self._new_node(dim, split, start, end)
        left = self._build(start, start + mid)
        right = self._build(start + mid, end)
        self._left[node] = left
        self._right[node] = right
        return node

    def query(self, x, k: int = 1):
        """Exact k nearest entries to ``x``: (distances, ids), ascending by (distance, id)."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        if x.shape[0] != self.data.shape[1]:
            raise ValueError(f"query dimension {x.shape[0]} != {self.data.shape[1]}")
        if not 1 <= k <= len(self):
            raise ValueError(f"k must be in [1, {len(self)}], got {k}")
        # max-heap of the k best as (-d2, -id)
        best: list[tuple[float, int]] = []
        self._search(0, x, k, best)
        res = sorted((-nd, -nid) for nd, nid in best)
        d2 = np.array([r[0] for r in res])
        return np.sqrt(d2), np.array([r[1] for r in res], dtype=np.int64)

    def _search(self, node: int, x: np.ndarray, k: int, best: list):
        dim = self._dim[node]
        if dim < 0:
            rows = self.order[self._start[node]:self._end[node]]
            diff = self.data[rows] - x
            d2 = np.einsum("ij,ij->i", diff, diff)
            for dd, eid in zip(d2.tolist(), self.ids[rows].tolist()):
                item = (-dd, -eid)
                if len(best) < k:
                    heapq.heappush(best, item)
                elif item > best[0]:
                    heapq.heapreplace(best, item)
            return
        delta = x[dim] - self._split[node]
        near, far = ((self._left[node], self._right[node]) if delta < 0
                     else (self._right[node], self._left[node]))
        self._search(near, x, k, best)
        # equal-distance points across the plane may still win on id
        if len(best) < k or delta * delta <= -best[0][0]:
            self._search(far, x, k, best)

