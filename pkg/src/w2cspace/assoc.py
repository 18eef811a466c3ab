"""Association network built from token co-occurrence statistics.

Scores live on unordered vocabulary pairs.  Processing a sentence first
decays every stored score by the shrink rate, then adds the reciprocal
of the position distance for each token pair in the sentence, so recent
co-occurrence dominates and stale associations fade.  Per-sentence
association matrices are sampled through a row-normalized sigmoid,
centering entries in (-0.5, 0.5).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .artifacts import atomic_write
from .autodiff import sigmoid_values
from .corpus import Sentence
from .errors import ArtifactFormatError

AKN_MAGIC = b"W2CA"
AKN_VERSION = 1
DEFAULT_SHRINK_RATE = 0.95


class AssocNetwork:
    """Sparse symmetric nonnegative score matrix over a vocabulary.

    Keys are stored upper-triangle (i <= j); queries are symmetric.
    Absent pairs score 0.
    """

    def __init__(self, vocab_size: int, shrink_rate: float = DEFAULT_SHRINK_RATE):
        if not 0.0 < shrink_rate <= 1.0:
            raise ValueError(f"shrink rate must be in (0, 1], got {shrink_rate}")
        if vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        self.vocab_size = vocab_size
        self.shrink_rate = shrink_rate
        self.scores: dict[tuple[int, int], float] = {}

    def query(self, i: int, j: int) -> float:
        if i > j:
            i, j = j, i
        return self.scores.get((i, j), 0.0)

    def _check_ids(self, ids) -> None:
        for t in ids:
            if not 0 <= t < self.vocab_size:
                raise IndexError(f"token id {t} out of range [0, {self.vocab_size})")

    def update(self, sent: Sentence) -> None:
        """Decay all scores by the shrink rate, then accumulate 1/|p-q| for
        every position pair of the sentence."""
        self._check_ids(sent.ids)
        if self.shrink_rate < 1.0:
            for key in self.scores:
                self.scores[key] *= self.shrink_rate
        ids = sent.ids
        for p in range(len(ids)):
            for q in range(p + 1, len(ids)):
                i, j = ids[p], ids[q]
                if i > j:
                    i, j = j, i
                self.scores[(i, j)] = self.scores.get((i, j), 0.0) + 1.0 / (q - p)

    def build(self, sentences) -> None:
        for sent in sentences:
            self.update(sent)

    def sample_matrix(self, sent: Sentence) -> np.ndarray:
        """Sentence-level association matrix, entries in (-0.5, 0.5).

        Row i is sigmoid(score(tok_i, tok_j) / mean_j score(tok_i, tok_j))
        - 0.5; a token with no associations inside the sentence gets an
        all-zero row (sigmoid(0) - 0.5).
        """
        self._check_ids(sent.ids)
        d = len(sent.ids)
        if d < 1:
            raise ValueError("cannot sample a matrix for an empty sentence")
        raw = np.empty((d, d), dtype=np.float64)
        for a in range(d):
            for b in range(d):
                raw[a, b] = self.query(sent.ids[a], sent.ids[b])
        avg = raw.mean(axis=1, keepdims=True)
        out = np.zeros((d, d), dtype=np.float64)
        nonzero = avg[:, 0] > 0.0
        if np.any(nonzero):
            out[nonzero] = sigmoid_values(raw[nonzero] / avg[nonzero]) - 0.5
        return out


def save_akn(net: AssocNetwork, path: str | Path) -> None:
    """Binary format: magic, version u32, v u32, SR f64, count u64, then
    (i u32, j u32, score f64) triples sorted by (i, j), little-endian."""
    triples = sorted(net.scores.items())
    parts = [AKN_MAGIC,
             struct.pack("<IId", AKN_VERSION, net.vocab_size, net.shrink_rate),
             struct.pack("<Q", len(triples))]
    for (i, j), s in triples:
        parts.append(struct.pack("<IId", i, j, s))
    atomic_write(path, b"".join(parts))


def load_akn(path: str | Path) -> AssocNetwork:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != AKN_MAGIC:
        raise ArtifactFormatError(f"{path}: bad magic (not an association network file)")
    if len(raw) < 4 + 16 + 8:
        raise ArtifactFormatError(f"{path}: truncated header")
    version, v, sr = struct.unpack_from("<IId", raw, 4)
    if version != AKN_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported version {version}")
    (count,) = struct.unpack_from("<Q", raw, 20)
    expected = 28 + count * 16
    if len(raw) != expected:
        raise ArtifactFormatError(
            f"{path}: corrupt length ({len(raw)} bytes, expected {expected})")
    net = AssocNetwork(v, sr)
    offset = 28
    for _ in range(count):
        i, j, s = struct.unpack_from("<IId", raw, offset)
        offset += 16
        if not (i <= j < v):
            raise ArtifactFormatError(f"{path}: triple ({i}, {j}) out of range")
        net.scores[(i, j)] = s
    return net
