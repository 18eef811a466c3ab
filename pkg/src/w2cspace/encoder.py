"""Per-token feature sources.

Features either come from the W2CE interchange file (hidden states
exported from a real pre-trained encoder) or from the built-in toy
encoder: an embedding table mixed through a single same-padded
convolution with tanh, enough context sensitivity for desk-scale runs.
Downstream stages only ever see FeatureBatch values, so the two sources
are interchangeable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import atomic_write, read_blob_file, write_blob_file
from .corpus import LabeledExample, Sentence
from .errors import ArtifactFormatError, ConfigMismatchError, TrainingDivergedError

W2CE_MAGIC = b"W2CE"
W2CE_VERSION = 1


@dataclass
class FeatureBatch:
    sentence_id: int
    features: np.ndarray  # (d, h) float64

    @property
    def d(self) -> int:
        return self.features.shape[0]

    @property
    def h(self) -> int:
        return self.features.shape[1]


class ToyEncoder:
    """Deterministic contextual encoder: embedding + width-3 conv + tanh."""

    MIX_WIDTH = 3

    def __init__(self, vocab_size: int, hidden: int, seed: int):
        self.vocab_size = vocab_size
        self.hidden = hidden
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.params = ad.ParamStore()
        self.params.add("embed", ad.init_uniform(rng, vocab_size, hidden, hidden))
        self.params.add("mix_w", ad.init_uniform(
            rng, self.MIX_WIDTH * hidden, hidden, self.MIX_WIDTH * hidden))
        self.params.add("mix_b", np.zeros((1, hidden)))

    def forward(self, ids: Sequence[int]) -> ad.Tensor:
        emb = ad.gather_rows(self.params["embed"], ids)
        mixed = ad.conv1d(emb, self.params["mix_w"], self.MIX_WIDTH)
        return ad.tanh(mixed + self.params["mix_b"])

    def encode(self, sent: Sentence) -> FeatureBatch:
        """Frozen forward pass; same sentence always gives the same bits."""
        return FeatureBatch(sentence_id=-1, features=self.forward(sent.ids).data.copy())


def toy_encode(enc: ToyEncoder, sent: Sentence, sentence_id: int = -1) -> FeatureBatch:
    fb = enc.encode(sent)
    fb.sentence_id = sentence_id
    return fb


def fine_tune_encoder(enc: ToyEncoder, data: Sequence[LabeledExample], task: str,
                      epochs: int, lr: float,
                      n_classes: int = 2) -> tuple[list[float], ad.ParamStore]:
    """Train the encoder in place plus a throwaway linear head.

    task="sentiment" mean-pools features into a sequence classifier;
    task="correction" classifies every token over the vocabulary.
    Returns the per-epoch mean loss trace (empty for epochs=0) and the
    tuned head, which callers only need for measuring fit quality.
    """
    if task not in ("sentiment", "correction"):
        raise ValueError(f"unknown task {task!r}")
    out_dim = n_classes if task == "sentiment" else enc.vocab_size
    rng = np.random.default_rng(enc.seed + 1)
    head = ad.ParamStore()
    head.add("w", ad.init_uniform(rng, enc.hidden, out_dim, enc.hidden))
    head.add("b", np.zeros((1, out_dim)))

    joint = ad.ParamStore.union(enc.params, head)
    opt = ad.Adam(joint, lr=lr)

    trace: list[float] = []
    for _ in range(epochs):
        total = 0.0
        for ex in data:
            joint.zero_grad()
            feats = enc.forward(ex.sentence.ids)
            if task == "sentiment":
                logits = ad.matmul(ad.mean_rows(feats), head["w"]) + head["b"]
                loss = ad.softmax_cross_entropy(logits, [int(ex.label)])
            else:
                logits = ad.matmul(feats, head["w"]) + head["b"]
                loss = ad.softmax_cross_entropy(logits, list(ex.label))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss while fine-tuning the encoder (sentence {ex.sentence.text!r})")
            loss.backward()
            opt.step()
            total += value
        trace.append(total / max(1, len(data)))
    return trace, head


# -- W2CE interchange format -------------------------------------------------


def write_features(path: str | Path, batches: Sequence[FeatureBatch]) -> None:
    """magic, version u32, h u32, count u64; per sentence id u64, d u32,
    then d*h float32 row-major, little-endian."""
    if not batches:
        h = 0
    else:
        h = batches[0].h
        for fb in batches:
            if fb.h != h:
                raise ValueError("all feature batches must share one hidden size")
    parts = [W2CE_MAGIC, struct.pack("<IIQ", W2CE_VERSION, h, len(batches))]
    for fb in batches:
        parts.append(struct.pack("<QI", fb.sentence_id, fb.d))
        parts.append(np.ascontiguousarray(fb.features, dtype="<f4").tobytes())
    atomic_write(path, b"".join(parts))


def read_features(path: str | Path, expected_h: int | None = None) -> Iterator[FeatureBatch]:
    """Yield batches in stored order; fails fast on any inconsistency
    without yielding a partial batch."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != W2CE_MAGIC:
        raise ArtifactFormatError(f"{path}: bad magic (not a feature file)")
    if len(raw) < 20:
        raise ArtifactFormatError(f"{path}: truncated header")
    version, h, count = struct.unpack_from("<IIQ", raw, 4)
    if version != W2CE_VERSION:
        raise ArtifactFormatError(f"{path}: unsupported version {version}")
    if expected_h is not None and h != expected_h:
        raise ConfigMismatchError(
            f"{path}: feature file has h={h}, configuration expects h={expected_h}")
    offset = 20
    for _ in range(count):
        if offset + 12 > len(raw):
            raise ArtifactFormatError(f"{path}: truncated record header at offset {offset}")
        sid, d = struct.unpack_from("<QI", raw, offset)
        offset += 12
        nbytes = 4 * d * h
        if offset + nbytes > len(raw):
            raise ArtifactFormatError(f"{path}: truncated feature block at offset {offset}")
        feats = np.frombuffer(raw, dtype="<f4", count=d * h, offset=offset)
        offset += nbytes
        yield FeatureBatch(sentence_id=sid, features=feats.astype(np.float64).reshape(d, h))
    if offset != len(raw):
        raise ArtifactFormatError(f"{path}: {len(raw) - offset} trailing bytes")


# -- encoder checkpoint ------------------------------------------------------

ENCODER_FORMAT = "w2c-encoder"


def save_encoder(enc: ToyEncoder, path: str | Path, extra: dict | None = None) -> None:
    header = {
        "format": ENCODER_FORMAT,
        "version": 1,
        "v": enc.vocab_size,
        "h": enc.hidden,
        "seed": enc.seed,
        "params": enc.params.names(),
    }
    if extra:
        header.update(extra)
    write_blob_file(path, header, enc.params.state_arrays())


def load_encoder(path: str | Path) -> ToyEncoder:
    header, arrays = read_blob_file(path, ENCODER_FORMAT)
    enc = ToyEncoder(header["v"], header["h"], header["seed"])
    if header["params"] != enc.params.names():
        raise ArtifactFormatError(f"{path}: unexpected parameter list")
    enc.params.load_arrays(arrays)
    return enc
