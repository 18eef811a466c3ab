"""Projection of encoder features into the coupled space, trained so the
pairwise cosine geometry of the projected coordinates matches the
sentence-level association matrix while a mirrored network reconstructs
the original features.

The mapping network is a bank of same-padded convolutions (widths 1, 3,
5) over the token axis whose summed output is projected to the
coordinate size, plus a linear residual path, normalized per token and
squashed with tanh so every coordinate lands in (-1, 1).  The
reconstruction network mirrors the structure back up to the feature
size, without the squashing (encoder features are unbounded).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .artifacts import read_blob_file, snap_f32, write_blob_file
from .assoc import AssocNetwork
from .corpus import Sentence
from .encoder import FeatureBatch
from .errors import ArtifactFormatError, ConfigMismatchError, TrainingDivergedError

FILTER_WIDTHS = (1, 3, 5)
MAPPER_FORMAT = "w2c-mapper"


class _ConvStack:
    """Shared structure of both networks: summed conv bank -> projection,
    plus a linear residual, all from c_in columns to c_out columns."""

    def __init__(self, params: ad.ParamStore, prefix: str, c_in: int, c_out: int,
                 rng: np.random.Generator):
        self.params = params
        self.prefix = prefix
        self.c_in = c_in
        self.c_out = c_out
        for w in FILTER_WIDTHS:
            params.add(f"{prefix}.conv{w}", ad.init_uniform(rng, w * c_in, c_in, w * c_in))
        params.add(f"{prefix}.proj_w", ad.init_uniform(rng, c_in, c_out, c_in))
        params.add(f"{prefix}.proj_b", np.zeros((1, c_out)))
        params.add(f"{prefix}.res_w", ad.init_uniform(rng, c_in, c_out, c_in))
        params.add(f"{prefix}.res_b", np.zeros((1, c_out)))

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        p = self.params
        mixed = ad.conv1d(x, p[f"{self.prefix}.conv1"], 1)
        for w in FILTER_WIDTHS[1:]:
            mixed = mixed + ad.conv1d(x, p[f"{self.prefix}.conv{w}"], w)
        projected = ad.matmul(mixed, p[f"{self.prefix}.proj_w"]) + p[f"{self.prefix}.proj_b"]
        residual = ad.matmul(x, p[f"{self.prefix}.res_w"]) + p[f"{self.prefix}.res_b"]
        return projected + residual


class MapperNet:
    """Feature-to-coordinate map: tanh(LN(convs(x) + res(x))), h -> n."""

    def __init__(self, h: int, n: int, seed: int):
        if n < 2:
            raise ValueError("coordinate size must be at least 2")
        self.h = h
        self.n = n
        self.seed = seed
        self.params = ad.ParamStore()
        rng = np.random.default_rng(seed)
        self.stack = _ConvStack(self.params, "map", h, n, rng)
        self.params.add("map.ln_g", np.ones((1, n)))
        self.params.add("map.ln_b", np.zeros((1, n)))

    def forward(self, features: ad.Tensor) -> ad.Tensor:
        if features.shape[1] != self.h:
            raise ConfigMismatchError(
                f"mapper expects h={self.h}, features have {features.shape[1]} columns")
        pre = self.stack.forward(features)
        return ad.tanh(ad.layer_norm(pre, self.params["map.ln_g"], self.params["map.ln_b"]))


class ReconNet:
    """Mirror of the mapper, n -> h, linear output."""

    def __init__(self, h: int, n: int, seed: int):
        self.h = h
        self.n = n
        self.seed = seed
        self.params = ad.ParamStore()
        rng = np.random.default_rng(seed + 7)
        self.stack = _ConvStack(self.params, "rec", n, h, rng)

    def forward(self, coords: ad.Tensor) -> ad.Tensor:
        if coords.shape[1] != self.n:
            raise ConfigMismatchError(
                f"reconstructor expects n={self.n}, coordinates have {coords.shape[1]} columns")
        return self.stack.forward(coords)


def map_forward(net: MapperNet, fb: FeatureBatch) -> np.ndarray:
    """Coordinates for one sentence, shape (d, n), entries in (-1, 1)."""
    return net.forward(ad.constant(fb.features)).data


def alignment_indicator(coords: np.ndarray, assoc_matrix: np.ndarray) -> np.ndarray:
    """Squared gap between pairwise coordinate cosine similarity and the
    association matrix, per token pair."""
    coords = np.asarray(coords, dtype=np.float64)
    d = coords.shape[0]
    if assoc_matrix.shape != (d, d):
        raise ValueError(
            f"association matrix {assoc_matrix.shape} does not match {d} coordinates")
    c = ad.constant(coords)
    sim = ad.cosine_rows(c, c).data
    return (sim - assoc_matrix) ** 2


def mapper_loss(coords: ad.Tensor, assoc_matrix: np.ndarray,
                recon: ad.Tensor, fb: FeatureBatch) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """(total, alignment, reconstruction) losses as graph nodes.

    Alignment averages the indicator over distinct token pairs.  The
    diagonal is excluded: a coordinate's self-similarity is the constant
    1 with zero gradient, so including it would only add an immovable
    offset that can never vanish (the association matrix stays below
    0.5).  Reconstruction is elementwise MAE against the encoder
    features.  Single-token sentences have no pairs and align at 0.
    """
    d = coords.shape[0]
    sim = ad.cosine_rows(coords, coords)
    gap = sim - ad.constant(assoc_matrix)
    sq = gap * gap
    if d > 1:
        off = ad.constant(1.0 - np.eye(d))
        l_align = ad.scale(ad.mean_all(sq * off), d * d / (d * d - d))
    else:
        l_align = ad.scale(ad.mean_all(sq), 0.0)
    l_rec = ad.mae(recon, ad.constant(fb.features))
    return l_align + l_rec, l_align, l_rec


@dataclass
class EpochLosses:
    total: float
    alignment: float
    reconstruction: float


def train_mapper(net: MapperNet, rnet: ReconNet,
                 data: Sequence[tuple[Sentence, FeatureBatch]],
                 akn: AssocNetwork, epochs: int, lr: float) -> list[EpochLosses]:
    """Alignment + reconstruction training over per-sentence steps.

    The encoder is frozen (features arrive precomputed); both networks
    update every step.  Deterministic for a fixed data order and seeds.
    """
    if not data and epochs > 0:
        raise ValueError("no training data")
    if net.n != rnet.n or net.h != rnet.h:
        raise ConfigMismatchError("mapper and reconstructor disagree on h/n")
    joint = ad.ParamStore.union(net.params, rnet.params)
    opt = ad.Adam(joint, lr=lr)
    matrices = [akn.sample_matrix(sent) for sent, _ in data]

    trace: list[EpochLosses] = []
    for _ in range(epochs):
        tot = np.zeros(3)
        for (sent, fb), ms in zip(data, matrices):
            joint.zero_grad()
            coords = net.forward(ad.constant(fb.features))
            recon = rnet.forward(coords)
            loss, l_align, l_rec = mapper_loss(coords, ms, recon, fb)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite mapper loss on sentence {fb.sentence_id}")
            loss.backward()
            opt.step()
            tot += (value, l_align.item(), l_rec.item())
        mean = tot / len(data)
        trace.append(EpochLosses(float(mean[0]), float(mean[1]), float(mean[2])))
    return trace


# -- checkpoint ---------------------------------------------------------------


def save_mapper(net: MapperNet, rnet: ReconNet, path: str | Path,
                extra: dict | None = None) -> None:
    header = {
        "format": MAPPER_FORMAT,
        "version": 1,
        "h": net.h,
        "n": net.n,
        "filter_widths": list(FILTER_WIDTHS),
        "seed": net.seed,
        "params": net.params.names() + rnet.params.names(),
    }
    if extra:
        header.update(extra)
    write_blob_file(path, header, net.params.state_arrays() + rnet.params.state_arrays())


def load_mapper(path: str | Path) -> tuple[MapperNet, ReconNet]:
    header, arrays = read_blob_file(path, MAPPER_FORMAT)
    if tuple(header["filter_widths"]) != FILTER_WIDTHS:
        raise ArtifactFormatError(f"{path}: unsupported filter widths")
    net = MapperNet(header["h"], header["n"], header["seed"])
    rnet = ReconNet(header["h"], header["n"], header["seed"])
    names = net.params.names() + rnet.params.names()
    if header["params"] != names:
        raise ArtifactFormatError(f"{path}: unexpected parameter list")
    k = len(net.params.names())
    net.params.load_arrays(arrays[:k])
    rnet.params.load_arrays(arrays[k:])
    return net, rnet


def snap_params_f32(*stores: ad.ParamStore) -> None:
    """Quantize parameters to the float32 grid in place, mirroring what a
    save/load cycle does, so freshly trained and reloaded networks agree."""
    for store in stores:
        for t in store.tensors():
            t.data = snap_f32(t.data)
