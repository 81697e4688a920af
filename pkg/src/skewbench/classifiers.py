"""Distance-based and tree-based classifiers for device identification.

Self-contained numpy implementations so the numeric core carries no model
dependencies: k-nearest-neighbors, a CART decision tree (Gini impurity),
and a bootstrap-aggregated random forest. All are deterministic under their
seed; vote and split ties resolve to the lowest class code.
"""

from __future__ import annotations

import numpy as np


def _encode_labels(y) -> tuple[np.ndarray, np.ndarray]:
    classes, codes = np.unique(np.asarray(y), return_inverse=True)
    if len(classes) < 2:
        raise ValueError("training data must contain at least two classes")
    return classes, codes


class KNearestNeighbors:
    """Plain Euclidean kNN with majority vote."""

    def __init__(self, k: int = 7):
        if k < 1:
            raise ValueError("k must be >= 1")
        self.k = k
        self.classes_: np.ndarray | None = None

    def fit(self, X, y) -> "KNearestNeighbors":
        self._X = np.asarray(X, dtype=np.float64)
        self.classes_, self._codes = _encode_labels(y)
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        k = min(self.k, len(self._X))
        n_classes = len(self.classes_)
        train_sq = np.einsum("ij,ij->i", self._X, self._X)
        out = np.empty(len(X), dtype=int)
        chunk = max(1, 2**22 // max(len(self._X), 1))
        for start in range(0, len(X), chunk):
            block = X[start : start + chunk]
            d2 = (
                np.einsum("ij,ij->i", block, block)[:, None]
                - 2.0 * block @ self._X.T
                + train_sq[None, :]
            )
            nearest = np.argpartition(d2, k - 1, axis=1)[:, :k]
            votes = np.zeros((len(block), n_classes), dtype=int)
            rows = np.repeat(np.arange(len(block)), k)
            np.add.at(votes, (rows, self._codes[nearest].ravel()), 1)
            out[start : start + chunk] = votes.argmax(axis=1)
        return self.classes_[out]


class DecisionTree:
    """CART with Gini impurity; grows until pure unless depth-limited."""

    def __init__(
        self,
        max_depth: int | None = None,
        min_samples_leaf: int = 1,
        max_features: int | None = None,
        seed: int = 0,
    ):
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.max_features = max_features
        self.seed = seed
        self.classes_: np.ndarray | None = None

    def fit(self, X, y) -> "DecisionTree":
        X = np.asarray(X, dtype=np.float64)
        self.classes_, codes = _encode_labels(y)
        self._fit_codes(X, codes, len(self.classes_))
        return self

    def _fit_codes(self, X: np.ndarray, codes: np.ndarray, n_classes: int) -> None:
        self._n_classes = n_classes
        rng = np.random.default_rng(self.seed)
        n, d = X.shape
        m = self.max_features or d
        eye = np.eye(n_classes)

        feature: list[int] = []
        threshold: list[float] = []
        left: list[int] = []
        right: list[int] = []
        leaf_value: list[int] = []

        def new_node() -> int:
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            leaf_value.append(-1)
            return len(feature) - 1

        def make_leaf(node: int, y_node: np.ndarray) -> None:
            leaf_value[node] = int(np.bincount(y_node, minlength=n_classes).argmax())

        root = new_node()
        stack: list[tuple[int, np.ndarray, int]] = [(root, np.arange(n), 0)]
        while stack:
            node, idx, depth = stack.pop()
            y_node = codes[idx]
            n_node = len(idx)
            first = y_node[0]
            if (
                n_node < 2 * self.min_samples_leaf
                or (self.max_depth is not None and depth >= self.max_depth)
                or np.all(y_node == first)
            ):
                make_leaf(node, y_node)
                continue

            candidates = rng.choice(d, size=min(m, d), replace=False) if m < d else np.arange(d)
            best_score = np.inf
            best_feature = -1
            best_threshold = 0.0
            for f in candidates:
                xs = X[idx, f]
                order = np.argsort(xs, kind="stable")
                xs_sorted = xs[order]
                valid = xs_sorted[:-1] < xs_sorted[1:]
                if not valid.any():
                    continue
                cum = eye[y_node[order]].cumsum(axis=0)
                left_counts = cum[:-1]
                right_counts = cum[-1] - left_counts
                nl = np.arange(1, n_node, dtype=np.float64)
                nr = n_node - nl
                # weighted Gini in count units: n_side - sum(counts^2)/n_side
                score = (
                    nl
                    - np.einsum("ij,ij->i", left_counts, left_counts) / nl
                    + nr
                    - np.einsum("ij,ij->i", right_counts, right_counts) / nr
                )
                score[~valid] = np.inf
                if self.min_samples_leaf > 1:
                    bad = (nl < self.min_samples_leaf) | (nr < self.min_samples_leaf)
                    score[bad] = np.inf
                pos = int(score.argmin())
                if score[pos] < best_score:
                    thr = (xs_sorted[pos] + xs_sorted[pos + 1]) / 2.0
                    if thr >= xs_sorted[pos + 1]:
                        thr = xs_sorted[pos]
                    best_score = float(score[pos])
                    best_feature = int(f)
                    best_threshold = float(thr)

            parent_score = n_node - float(
                np.square(np.bincount(y_node, minlength=n_classes)).sum()
            ) / n_node
            if best_feature < 0 or best_score >= parent_score - 1e-12:
                make_leaf(node, y_node)
                continue

            best_mask = X[idx, best_feature] <= best_threshold
            feature[node] = best_feature
            threshold[node] = best_threshold
            left_child = new_node()
            right_child = new_node()
            left[node] = left_child
            right[node] = right_child
            stack.append((left_child, idx[best_mask], depth + 1))
            stack.append((right_child, idx[~best_mask], depth + 1))

        self._feature = np.array(feature)
        self._threshold = np.array(threshold)
        self._left = np.array(left)
        self._right = np.array(right)
        self._leaf_value = np.array(leaf_value)

    def predict_codes(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.empty(len(X), dtype=int)
        stack: list[tuple[int, np.ndarray]] = [(0, np.arange(len(X)))]
        while stack:
            node, idx = stack.pop()
            if len(idx) == 0:
                continue
            if self._leaf_value[node] >= 0:
                out[idx] = self._leaf_value[node]
                continue
            mask = X[idx, self._feature[node]] <= self._threshold[node]
            stack.append((self._left[node], idx[mask]))
            stack.append((self._right[node], idx[~mask]))
        return out

    def predict(self, X) -> np.ndarray:
        return self.classes_[self.predict_codes(X)]


class RandomForest:
    """Bootstrap-aggregated CART trees with sqrt-feature split sampling."""

    def __init__(
        self,
        n_estimators: int = 100,
        max_depth: int | None = None,
        min_samples_leaf: int = 1,
        seed: int = 0,
    ):
        if n_estimators < 1:
            raise ValueError("n_estimators must be >= 1")
        self.n_estimators = n_estimators
        self.max_depth = max_depth
        self.min_samples_leaf = min_samples_leaf
        self.seed = seed
        self.classes_: np.ndarray | None = None

    def fit(self, X, y) -> "RandomForest":
        X = np.asarray(X, dtype=np.float64)
        self.classes_, codes = _encode_labels(y)
        n, d = X.shape
        n_classes = len(self.classes_)
        max_features = max(1, int(np.sqrt(d)))
        seeds = np.random.SeedSequence(self.seed).generate_state(2 * self.n_estimators, np.uint64)
        self._trees: list[DecisionTree] = []
        for t in range(self.n_estimators):
            rng = np.random.default_rng(int(seeds[2 * t]))
            sample = rng.integers(0, n, size=n)
            tree = DecisionTree(
                max_depth=self.max_depth,
                min_samples_leaf=self.min_samples_leaf,
                max_features=max_features,
                seed=int(seeds[2 * t + 1]),
            )
            tree.classes_ = self.classes_
            tree._fit_codes(X[sample], codes[sample], n_classes)
            self._trees.append(tree)
        return self

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros((len(X), len(self.classes_)), dtype=int)
        rows = np.arange(len(X))
        for tree in self._trees:
            votes[rows, tree.predict_codes(X)] += 1
        return self.classes_[votes.argmax(axis=1)]
