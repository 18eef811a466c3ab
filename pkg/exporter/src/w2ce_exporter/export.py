"""Export per-token hidden states of a pre-trained encoder to W2CE files.

The consuming pipeline is character-indexed: CJK codepoints count one
token each and runs of anything else split on whitespace.  Model
tokenizers split differently (wordpieces), so each pipeline token is
tokenized separately and its wordpiece vectors are mean-pooled back to
one vector, keeping per-sentence vector counts equal to the pipeline's
token counts.  Special tokens wrap the full sequence but are never
pooled into any output vector.

Output layout (little-endian): magic "W2CE", version u32, h u32,
sentence count u64; per sentence: id u64, d u32, then d*h float32
row-major.  A JSON manifest with a checksum of the feature file is
written alongside.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import struct
import sys
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

W2CE_MAGIC = b"W2CE"
W2CE_VERSION = 1

_CJK_RANGES = (
    (0x3040, 0x30FF),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xAC00, 0xD7AF),
    (0xF900, 0xFAFF),
)


class ExportError(RuntimeError):
    pass


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def pipeline_tokenize(text: str, mode: str = "cjk") -> list[str]:
    """The consumer's tokenization rule, reproduced for alignment."""
    if mode == "whitespace":
        return text.split()
    if mode != "cjk":
        raise ValueError(f"unknown tokenizer mode {mode!r}")
    tokens: list[str] = []
    run: list[str] = []
    for ch in text:
        if _is_cjk(ch):
            if run:
                tokens.extend("".join(run).split())
                run = []
            tokens.append(ch)
        else:
            run.append(ch)
    if run:
        tokens.extend("".join(run).split())
    return tokens


@dataclass
class ExportManifest:
    model: str
    layer: int
    tokenizer: str
    sentence_count: int
    h: int
    checksum: str

    def as_dict(self) -> dict:
        return asdict(self)


def export_embeddings(model_id: str, corpus_path: str | Path, out_path: str | Path,
                      layer: int = -1, mode: str = "cjk",
                      manifest_path: str | Path | None = None) -> ExportManifest:
    """Run the encoder over the corpus and write W2CE + manifest.

    `layer` indexes the model's hidden-state stack (0 = embedding output,
    -1 = last layer).  Deterministic: repeated runs over the same inputs
    produce checksum-identical files.
    """
    corpus_path = Path(corpus_path)
    if not corpus_path.exists():
        raise ExportError(f"corpus not found: {corpus_path}")
    lines = [ln for ln in corpus_path.read_text(encoding="utf-8").splitlines()
             if ln.strip()]

    try:
        tokenizer = AutoTokenizer.from_pretrained(model_id)
        model = AutoModel.from_pretrained(model_id)
    except Exception as exc:
        raise ExportError(f"cannot load model {model_id!r}: {exc}") from exc
    model.eval()

    n_layers = model.config.num_hidden_layers + 1  # embeddings + blocks
    if not -n_layers <= layer < n_layers:
        raise ExportError(f"layer {layer} out of range for {n_layers} hidden states")
    max_len = getattr(model.config, "max_position_embeddings", 512)

    misaligned: list[int] = []
    plans: list[tuple[int, list[str], list[int]]] = []
    for lineno, line in enumerate(lines):
        pieces: list[str] = []
        spans: list[int] = []
        ok = True
        for token in pipeline_tokenize(line, mode=mode):
            sub = tokenizer.tokenize(token)
            if not sub:
                ok = False
                break
            pieces.extend(sub)
            spans.append(len(sub))
        if not ok:
            misaligned.append(lineno + 1)
            continue
        if len(pieces) + 2 > max_len:
            raise ExportError(
                f"line {lineno + 1}: {len(pieces)} wordpieces exceed the model's "
                f"{max_len} positions")
        plans.append((lineno, pieces, spans))
    if misaligned:
        raise ExportError(
            "tokenizer produced no wordpieces for some tokens; offending lines: "
            + ", ".join(map(str, misaligned)))

    h = model.config.hidden_size
    records: list[bytes] = []
    with torch.no_grad():
        for lineno, pieces, spans in plans:
            ids = tokenizer.convert_tokens_to_ids(
                [tokenizer.cls_token] + pieces + [tokenizer.sep_token])
            out = model(torch.tensor([ids]), output_hidden_states=True)
            hidden = out.hidden_states[layer][0].numpy()  # (len(ids), h)
            vectors = np.empty((len(spans), h), dtype="<f4")
            cursor = 1  # skip the leading special token
            for row, width in enumerate(spans):
                vectors[row] = hidden[cursor:cursor + width].mean(axis=0)
                cursor += width
            records.append(struct.pack("<QI", lineno, len(spans)) + vectors.tobytes())

    payload = b"".join([W2CE_MAGIC,
                        struct.pack("<IIQ", W2CE_VERSION, h, len(records)),
                        *records])
    out_path = Path(out_path)
    out_path.write_bytes(payload)

    manifest = ExportManifest(
        model=str(model_id),
        layer=layer,
        tokenizer=type(tokenizer).__name__,
        sentence_count=len(records),
        h=h,
        checksum=hashlib.sha256(payload).hexdigest(),
    )
    manifest_path = Path(manifest_path) if manifest_path else out_path.with_suffix(
        out_path.suffix + ".manifest.json")
    manifest_path.write_text(
        json.dumps(manifest.as_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    return manifest


def main() -> None:
    parser = argparse.ArgumentParser(
        prog="w2ce-export",
        description="export per-token transformer hidden states to a W2CE file")
    parser.add_argument("--model", required=True,
                        help="model name or local checkpoint directory")
    parser.add_argument("--corpus", required=True, help="UTF-8 corpus, one sentence per line")
    parser.add_argument("--out", required=True, help="output W2CE path")
    parser.add_argument("--layer", type=int, default=-1,
                        help="hidden-state index; 0 = embeddings, -1 = last layer")
    parser.add_argument("--mode", choices=["cjk", "whitespace"], default="cjk")
    parser.add_argument("--manifest", help="manifest path (default: <out>.manifest.json)")
    args = parser.parse_args()
    try:
        manifest = export_embeddings(args.model, args.corpus, args.out,
                                     layer=args.layer, mode=args.mode,
                                     manifest_path=args.manifest)
    except (ExportError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)
    print(f"exported {manifest.sentence_count} sentences, h={manifest.h}, "
          f"layer={manifest.layer} -> {args.out}")
    print(f"checksum {manifest.checksum}")


if __name__ == "__main__":
    main()
