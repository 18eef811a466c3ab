"""Context-level semantics: spherical k-means over word coordinates plus
a trainable merge matrix.

Clustering uses cosine distance (1 - cosine similarity): assignment by
maximum similarity, centroid update by normalized mean of the assigned
unit vectors, which makes the objective provably non-increasing; the
implementation asserts that every iteration.  An emptied cluster is
reseeded to the element farthest from its current centroid so the
context count stays fixed.  The merge matrix starts as the identity and
is the only part of the space that later training may move.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import read_blob_file, snap_f32, write_blob_file
from .errors import ConfigMismatchError, DegenerateInputError

SPACE_FORMAT = "w2c-space"


@dataclass
class ContextSpace:
    centroids: np.ndarray          # (k, n), unit rows, float32-exact values
    merge: np.ndarray              # (k, k), float32-exact values
    seed: int
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def n(self) -> int:
        return self.centroids.shape[1]


def merge_contexts(space: ContextSpace) -> np.ndarray:
    """Merged context rows: merge matrix times the centroid matrix."""
    return space.merge @ space.centroids


def _normalize_rows(x: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} row {int(np.argmin(norms))}")
    return x / norms


def _objective(units: np.ndarray, centroids: np.ndarray, assign: np.ndarray) -> float:
    return float(np.sum(1.0 - np.einsum("ij,ij->i", units, centroids[assign])))


def _plusplus_init(units: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding under cosine distance."""
    m = units.shape[0]
    centroids = np.empty((k, units.shape[1]))
    centroids[0] = units[rng.integers(m)]
    dist = 1.0 - units @ centroids[0]
    for j in range(1, k):
        weights = np.maximum(dist, 0.0) ** 2
        total = weights.sum()
        if total <= 0.0:
            idx = int(rng.integers(m))
        else:
            idx = int(rng.choice(m, p=weights / total))
        centroids[j] = units[idx]
        dist = np.minimum(dist, 1.0 - units @ centroids[j])
    return centroids


def kmeans_cluster(elements: np.ndarray, k: int, max_iter: int = 100,
                   seed: int = 0, init: np.ndarray | None = None,
                   meta: dict | None = None) -> ContextSpace:
    """Cluster coordinate rows into k contexts by cosine distance.

    `init` overrides the seeded k-means++ initialization with explicit
    starting centroids (used by the exhaustive-restart tests).  Returns a
    ContextSpace with identity merge matrix and float32-snapped values.
    """
    elements = np.asarray(elements, dtype=np.float64)
    if elements.ndim != 2 or elements.shape[0] == 0:
        raise ValueError("elements must be a nonempty (m, n) array")
    m = elements.shape[0]
    if k < 1 or k > m:
        raise DegenerateInputError(f"need at least k={k} elements, have {m}")
    units = _normalize_rows(elements, "element")
    rng = np.random.default_rng(seed)

    if init is not None:
        centroids = _normalize_rows(np.asarray(init, dtype=np.float64).copy(), "init centroid")
        if centroids.shape != (k, units.shape[1]):
            raise ValueError(f"init must be ({k}, {units.shape[1]})")
    else:
        centroids = _plusplus_init(units, k, rng)

    assign = np.argmax(units @ centroids.T, axis=1)
    prev_obj = _objective(units, centroids, assign)
    for _ in range(max_iter):
        # centroid update
        for j in range(k):
            members = units[assign == j]
            if len(members) == 0:
                # reseed to the element farthest from the stale centroid
                centroids[j] = units[int(np.argmin(units @ centroids[j]))]
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            if norm > 0.0:
                centroids[j] = mean / norm
        new_assign = np.argmax(units @ centroids.T, axis=1)
        obj = _objective(units, centroids, new_assign)
        assert obj <= prev_obj + 1e-9, f"objective increased: {prev_obj} -> {obj}"
        prev_obj = obj
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    return ContextSpace(centroids=snap_f32(centroids), merge=snap_f32(np.eye(k)),
                        seed=seed, meta=dict(meta or {}))


def brute_force_objective(elements: np.ndarray, k: int) -> float:
    """Exact spherical k-means optimum by enumerating every assignment of
    the elements to at most k groups.  Exponential; oracle for tiny inputs."""
    units = _normalize_rows(np.asarray(elements, dtype=np.float64), "element")
    m = units.shape[0]
    if m > 10:
        raise ValueError("brute force limited to 10 elements")
    best = np.inf
    for code in range(k ** m):
        assign = np.empty(m, dtype=np.int64)
        c = code
        for i in range(m):
            assign[i] = c % k
            c //= k
        total = 0.0
        for j in range(k):
            members = units[assign == j]
            if len(members) == 0:
                continue
            # optimal centroid of a group is its normalized unit-sum, so the
            # group's minimal cost is |group| - ||sum of unit members||
            total += len(members) - np.linalg.norm(members.sum(axis=0))
        if total < best:
            best = total
    return float(best)


# -- checkpoint ---------------------------------------------------------------


def save_space(space: ContextSpace, path: str | Path) -> None:
    header = {
        "format": SPACE_FORMAT,
        "version": 1,
        "k": space.k,
        "n": space.n,
        "seed": space.seed,
        "provenance": space.meta,
    }
    write_blob_file(path, header, [space.centroids, space.merge])


def load_space(path: str | Path, expected_n: int | None = None) -> ContextSpace:
    header, (centroids, merge) = read_blob_file(path, SPACE_FORMAT)
    if centroids.shape != (header["k"], header["n"]) or merge.shape != (header["k"], header["k"]):
        raise ConfigMismatchError(f"{path}: header shapes disagree with blobs")
    if expected_n is not None and header["n"] != expected_n:
        raise ConfigMismatchError(
            f"{path}: space has n={header['n']}, configuration expects n={expected_n}")
    return ContextSpace(centroids=centroids, merge=merge,
                        seed=header["seed"], meta=header.get("provenance", {}))
