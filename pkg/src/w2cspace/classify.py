"""Distance features and the downstream classifiers.

The classifier input is the context-relative distance matrix: cosine
similarity of every token coordinate against every merged context.  A
linear head turns that into a per-token vocabulary distribution (token
task) or, after mean-pooling over tokens, a sequence-class distribution.
Downstream training moves only the merge matrix and the head; the
mapper, the centroids, and the encoder stay frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import read_blob_file, snap_f32, write_blob_file
from .contexts import ContextSpace, merge_contexts
from .corpus import LabeledExample
from .encoder import FeatureBatch
from .errors import (ArtifactFormatError, ConfigMismatchError,
                     DegenerateInputError, TrainingDivergedError)
from .mapper import MapperNet

HEAD_FORMAT = "w2c-head"


def context_relative_distance(space: ContextSpace, coords: np.ndarray) -> np.ndarray:
    """Token-to-context similarity matrix, shape (d, k), entries in [-1, 1]."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.shape[1] != space.n:
        raise ConfigMismatchError(
            f"coordinates have n={coords.shape[1]}, space expects n={space.n}")
    merged = merge_contexts(space)
    norms = np.linalg.norm(merged, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(
            f"merged context {int(np.argmin(norms))} has zero norm")
    return ad.cosine_rows(ad.constant(coords), ad.constant(merged)).data


class TaskHead:
    """Linear map from the k distance features to output logits."""

    def __init__(self, task: str, k: int, out_dim: int, seed: int):
        if task not in ("sentiment", "correction"):
            raise ValueError(f"unknown task {task!r}")
        self.task = task
        self.k = k
        self.out_dim = out_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = ad.ParamStore()
        self.params.add("head.w", ad.init_uniform(rng, k, out_dim, k))
        self.params.add("head.b", np.zeros((1, out_dim)))

    def logits(self, distances: ad.Tensor) -> ad.Tensor:
        return ad.matmul(distances, self.params["head.w"]) + self.params["head.b"]


def token_classify(head: TaskHead, distances: np.ndarray) -> np.ndarray:
    """Per-token distribution over the vocabulary, rows summing to 1."""
    logits = head.logits(ad.constant(distances))
    return ad.softmax_values(logits.data)


def sequence_classify(head: TaskHead, distances: np.ndarray) -> np.ndarray:
    """Class distribution for one sentence (mean-pooled tokens)."""
    if distances.shape[0] == 0:
        raise DegenerateInputError("cannot classify an empty sentence")
    pooled = np.asarray(distances, dtype=np.float64).mean(axis=0, keepdims=True)
    logits = head.logits(ad.constant(pooled))
    return ad.softmax_values(logits.data)[0]


def _distance_graph(space_centroids: ad.Tensor, merge: ad.Tensor,
                    coords: np.ndarray) -> ad.Tensor:
    merged = ad.matmul(merge, space_centroids)
    return ad.cosine_rows(ad.constant(coords), merged)


def downstream_loss(merge: ad.Tensor, centroids: np.ndarray, head: TaskHead,
                    coords: np.ndarray, label) -> ad.Tensor:
    """Cross-entropy through merge matrix, distances, and head."""
    dist = _distance_graph(ad.constant(centroids), merge, coords)
    if head.task == "sentiment":
        logits = head.logits(ad.mean_rows(dist))
        return ad.softmax_cross_entropy(logits, [int(label)])
    logits = head.logits(dist)
    return ad.softmax_cross_entropy(logits, list(label))


def train_downstream(space: ContextSpace, mapper: MapperNet,
                     features: Sequence[FeatureBatch],
                     examples: Sequence[LabeledExample],
                     head: TaskHead, epochs: int, lr: float) -> list[float]:
    """Optimize the merge matrix and head; everything else is frozen.

    Updates space.merge in place (float32-snapped on completion) and
    returns the per-epoch mean loss trace.
    """
    if len(features) != len(examples):
        raise ValueError("features and examples must align")
    if head.k != space.k:
        raise ConfigMismatchError(f"head expects k={head.k}, space has k={space.k}")
    coords = [map_coords(mapper, fb) for fb in features]

    trainable = ad.ParamStore()
    merge = trainable.add("merge", space.merge)
    joint = ad.ParamStore.union(trainable, head.params)
    opt = ad.Adam(joint, lr=lr)

    trace: list[float] = []
    for _ in range(epochs):
        total = 0.0
        for c, ex in zip(coords, examples):
            joint.zero_grad()
            loss = downstream_loss(merge, space.centroids, head, c, ex.label)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite downstream loss on {ex.sentence.text!r}")
            loss.backward()
            opt.step()
            total += value
        trace.append(total / max(1, len(examples)))
    space.merge = snap_f32(merge.data)
    return trace


def map_coords(mapper: MapperNet, fb: FeatureBatch) -> np.ndarray:
    return mapper.forward(ad.constant(fb.features)).data


def predict_sequence(space: ContextSpace, mapper: MapperNet, head: TaskHead,
                     fb: FeatureBatch) -> int:
    dist = context_relative_distance(space, map_coords(mapper, fb))
    return int(np.argmax(sequence_classify(head, dist)))


def predict_tokens(space: ContextSpace, mapper: MapperNet, head: TaskHead,
                   fb: FeatureBatch) -> np.ndarray:
    dist = context_relative_distance(space, map_coords(mapper, fb))
    return np.argmax(token_classify(head, dist), axis=1)


# -- metrics ------------------------------------------------------------------


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float


def _prf(true_positive: int, predicted: int, relevant: int) -> PRF:
    p = 100.0 * true_positive / predicted if predicted else 0.0
    r = 100.0 * true_positive / relevant if relevant else 0.0
    f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f1)


@dataclass
class CorrectionMetrics:
    word_detection: PRF
    word_correction: PRF
    sentence_detection: PRF
    sentence_correction: PRF

    def as_dict(self) -> dict:
        return {
            "word": {"dp": self.word_detection.precision, "dr": self.word_detection.recall,
                     "df1": self.word_detection.f1, "cp": self.word_correction.precision,
                     "cr": self.word_correction.recall, "cf1": self.word_correction.f1},
            "sentence": {"dp": self.sentence_detection.precision,
                         "dr": self.sentence_detection.recall,
                         "df1": self.sentence_detection.f1,
                         "cp": self.sentence_correction.precision,
                         "cr": self.sentence_correction.recall,
                         "cf1": self.sentence_correction.f1},
        }


def evaluate_correction(triples: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]]
                        ) -> CorrectionMetrics:
    """Word- and sentence-level detection/correction P, R, F1 (percent).

    Each triple is (source, target, prediction) token ids of equal
    length.  Precision counts over what the model changed, recall over
    what needed changing; a sentence is detected when the model edited
    exactly the reference's error positions, corrected when on top of
    that every edit matches the target.
    """
    wd_tp = wd_pred = wd_rel = 0
    wc_tp = 0
    sd_tp = sd_pred = sd_rel = 0
    sc_tp = 0
    for idx, (src, tgt, pred) in enumerate(triples):
        if not (len(src) == len(tgt) == len(pred)):
            raise ValueError(f"triple {idx}: misaligned lengths "
                             f"({len(src)}, {len(tgt)}, {len(pred)})")
        changed = {i for i, (s, p) in enumerate(zip(src, pred)) if s != p}
        errors = {i for i, (s, t) in enumerate(zip(src, tgt)) if s != t}
        wd_pred += len(changed)
        wd_rel += len(errors)
        both = changed & errors
        wd_tp += len(both)
        wc_tp += sum(1 for i in both if pred[i] == tgt[i])

        if changed:
            sd_pred += 1
        if errors:
            sd_rel += 1
            if changed == errors:
                sd_tp += 1
                if all(pred[i] == tgt[i] for i in errors):
                    sc_tp += 1
    return CorrectionMetrics(
        word_detection=_prf(wd_tp, wd_pred, wd_rel),
        word_correction=_prf(wc_tp, wd_pred, wd_rel),
        sentence_detection=_prf(sd_tp, sd_pred, sd_rel),
        sentence_correction=_prf(sc_tp, sd_pred, sd_rel),
    )


def evaluate_classification(predictions: Sequence[int], references: Sequence[int]) -> float:
    """Accuracy in percent."""
    if len(predictions) != len(references):
        raise ValueError("prediction/reference length mismatch")
    if not references:
        raise DegenerateInputError("empty evaluation set")
    correct = sum(1 for p, r in zip(predictions, references) if p == r)
    return 100.0 * correct / len(references)


# -- head checkpoint ----------------------------------------------------------


def save_head(head: TaskHead, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "format": HEAD_FORMAT,
        "version": 1,
        "task": head.task,
        "k": head.k,
        "out_dim": head.out_dim,
        "seed": head.seed,
        "params": head.params.names(),
    }
    if extra:
        header.update(extra)
    write_blob_file(path, header, head.params.state_arrays())


def load_head(path: str | Path) -> TaskHead:
    header, arrays = read_blob_file(path, HEAD_FORMAT)
    head = TaskHead(header["task"], header["k"], header["out_dim"], header["seed"])
    if header["params"] != head.params.names():
        raise ArtifactFormatError(f"{path}: unexpected parameter list")
    head.params.load_arrays(arrays)
    return head
