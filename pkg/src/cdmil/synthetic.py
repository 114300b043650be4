"""Planted-signal bag generator for learning checks.

Every bag holds exactly one label-bearing instance (its embedding points
along the direction of the bag's class) with an elevated salience score, plus
low-salience distractor instances.  Distractors either point along random
directions orthogonal to all class directions (``distractors="orthogonal"``)
or along other classes' directions (``distractors="classes"``, which leaves
the label unidentifiable without salience).  The sentence vector is noise.
"""

from __future__ import annotations

import numpy as np

from .bags import normalize_salience
from .embedding import BagBatch


def class_directions(n_classes: int, dim: int, rng) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, n_classes)))
    return q.T  # orthonormal rows


def make_planted_bags(
    n_bags: int,
    n_classes: int = 10,
    dim: int = 32,
    n_max: int = 8,
    min_instances: int = 3,
    noise: float = 0.3,
    scale: float = 1.0,
    signal_salience: tuple[float, float] = (0.6, 0.9),
    distractor_salience: tuple[float, float] = (0.05, 0.2),
    use_salience: bool = True,
    seed: int = 0,
    directions: np.ndarray | None = None,
    distractors: str = "orthogonal",
):
    """Return ``(BagBatch, labels, raw_saliences)``."""
    if dim <= n_classes:
        raise ValueError("dim must exceed n_classes so distractors have room")
    rng = np.random.default_rng(seed)
    if directions is None:
        directions = class_directions(n_classes, dim, np.random.default_rng(12345))
    # projector onto the complement of the class subspace
    complement = np.eye(dim) - directions.T @ directions
    y = rng.integers(0, n_classes, size=n_bags)
    z = noise * rng.standard_normal((n_bags, dim))
    X = np.zeros((n_bags, n_max, dim))
    mask = np.zeros((n_bags, n_max))
    p = np.zeros((n_bags, n_max))
    raw = np.zeros((n_bags, n_max))
    for b in range(n_bags):
        n = int(rng.integers(min_instances, n_max + 1))
        planted = int(rng.integers(0, n))
        for i in range(n):
            if i == planted:
                cls = y[b]
                s = rng.uniform(*signal_salience)
            else:
                s = rng.uniform(*distractor_salience)
                if distractors == "classes":
                    cls = int(rng.choice([c for c in range(n_classes) if c != y[b]]))
                else:
                    cls = None
            if cls is None:
                d = complement @ rng.standard_normal(dim)
                base = d / np.linalg.norm(d)
            else:
                base = directions[cls]
            X[b, i] = scale * (base + noise * rng.standard_normal(dim))
            raw[b, i] = s
        mask[b, :n] = 1.0
        p[b, :n] = normalize_salience(raw[b, :n]) if use_salience else 1.0 / n
    ids = tuple(f"syn{seed}-{b}" for b in range(n_bags))
    return BagBatch(z, X, mask, p, ids), y, raw
