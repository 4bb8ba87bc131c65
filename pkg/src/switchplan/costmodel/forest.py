"""Bootstrap-aggregated CART regression trees.

Written out rather than borrowed so that fitted forests serialize to plain
JSON and reload with bit-identical predictions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LEAF = -1


@dataclass
class RegressionTree:
    """Flat array representation; node 0 is the root, ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        out = np.empty(X.shape[0])
        for i, row in enumerate(X):
            node = 0
            while self.feature[node] != LEAF:
                if row[self.feature[node]] <= self.threshold[node]:
                    node = self.left[node]
                else:
                    node = self.right[node]
            out[i] = self.value[node]
        return out

    def to_json(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "RegressionTree":
        return cls(feature=np.asarray(obj["feature"], dtype=np.int64),
                   threshold=np.asarray(obj["threshold"], dtype=np.float64),
                   left=np.asarray(obj["left"], dtype=np.int64),
                   right=np.asarray(obj["right"], dtype=np.int64),
                   value=np.asarray(obj["value"], dtype=np.float64))


def _best_split(X: np.ndarray, y: np.ndarray) -> tuple[int, float, float] | None:
    """Split maximizing the reduction in summed squared error.

    Ties keep the first candidate in (feature, threshold) order.
    """
    n = len(y)
    best: tuple[int, float, float] | None = None
    # centred and scaled so the running sums do not cancel catastrophically
    y = y - y.mean()
    scale = float(np.abs(y).max())
    if scale == 0.0:
        return None
    y = y / scale
    parent_sse = float(((y - y.mean()) ** 2).sum())
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs, ys = X[order, f], y[order]
        csum, csq = np.cumsum(ys), np.cumsum(ys * ys)
        total, total_sq = csum[-1], csq[-1]
        for i in range(1, n):
            if xs[i] == xs[i - 1]:
                continue
            nl, nr = i, n - i
            sl, sr = csum[i - 1], total - csum[i - 1]
            sse = (csq[i - 1] - sl * sl / nl) + (total_sq - csq[i - 1] - sr * sr / nr)
            gain = parent_sse - sse
            if gain > 0 and (best is None or gain > best[2]):
                best = (f, 0.5 * (xs[i - 1] + xs[i]), gain)
    return best


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int = 10,
             min_samples_split: int = 2) -> RegressionTree:
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    value: list[float] = []

    def grow(idx: np.ndarray, depth: int) -> int:
        node = len(feature)
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[idx].mean()))
        if depth >= max_depth or len(idx) < min_samples_split:
            return node
        split = _best_split(X[idx], y[idx])
        if split is None:
            return node
        f, thr, _ = split
        mask = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return RegressionTree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                          np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                          np.asarray(value))


@dataclass
class RandomForest:
    n_estimators: int = 50
    max_depth: int = 10
    seed: int = 42
    trees: list[RegressionTree] = field(default_factory=list)

    def fit(self, X: np.ndarray, y: np.ndarray) -> "RandomForest":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if len(y) == 0:
            raise ValueError("cannot fit a forest on zero samples")
        rng = np.random.default_rng(self.seed)
        self.trees = []
        for _ in range(self.n_estimators):
            idx = rng.integers(0, len(y), len(y))
            self.trees.append(fit_tree(X[idx], y[idx], self.max_depth))
        return self

    def predict(self, X: np.ndarray) -> np.ndarray:
        if not self.trees:
            raise RuntimeError("forest is not fitted")
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        total = np.zeros(X.shape[0])
        for tree in self.trees:
            total += tree.predict(X)
        return total / len(self.trees)

    def to_json(self) -> dict:
        return {"n_estimators": self.n_estimators, "max_depth": self.max_depth,
                "seed": self.seed, "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, obj: dict) -> "RandomForest":
        return cls(obj["n_estimators"], obj["max_depth"], obj["seed"],
                   [RegressionTree.from_json(t) for t in obj["trees"]])
