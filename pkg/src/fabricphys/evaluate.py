"""Clustering accuracy of labelled points on the similarity map."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError


@dataclass
class EvalReport:
    material: str
    accuracy: float
    labels: list[int]
    confusion: np.ndarray  # rows = true label, cols = predicted label (order of ``labels``)
    n_samples: int

    def to_dict(self) -> dict:
        return {"material": self.material, "accuracy": self.accuracy, "labels": self.labels,
                "confusion": self.confusion.tolist(), "n_samples": self.n_samples}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def to_table(self) -> str:
        width = max(5, *(len(str(lab)) for lab in self.labels), len(str(self.n_samples)))
        head = "true\\pred".rjust(9) + "".join(str(lab).rjust(width + 1) for lab in self.labels)
        rows = [head]
        for lab, row in zip(self.labels, self.confusion):
            rows.append(str(lab).rjust(9) + "".join(str(int(v)).rjust(width + 1) for v in row))
        rows.append(f"material={self.material} accuracy={self.accuracy:.4f} n_samples={self.n_samples}")
        return "\n".join(rows) + "\n"


def clustering_accuracy(points, labels, material: str = "") -> EvalReport:
    """Leave-one-out 1-nearest-neighbour accuracy under squared Euclidean distance.

    Among equally near neighbours the one with the lowest label id wins.
    """
    pts = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=np.int64)
    if pts.ndim != 2 or len(pts) != len(labels):
        raise InvalidInputError("points must be (N, d) with one label each")
    uniq, counts = np.unique(labels, return_counts=True)
    if len(uniq) < 2:
        raise InvalidInputError("clustering accuracy needs at least 2 labels")
    if counts.min() < 2:
        raise InvalidInputError("every label needs at least 2 points")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(dist, np.inf)
    nearest = dist.min(axis=1, keepdims=True)
    # among tied neighbours pick the lowest label
    cand = np.where(dist == nearest, labels[None, :], np.iinfo(np.int64).max)
    pred = cand.min(axis=1)
    index = {int(u): i for i, u in enumerate(uniq)}
    confusion = np.zeros((len(uniq), len(uniq)), dtype=np.int64)
    for t, p in zip(labels, pred):
        confusion[index[int(t)], index[int(p)]] += 1
    n = len(labels)
    return EvalReport(material, float(np.trace(confusion) / n), [int(u) for u in uniq], confusion, n)
