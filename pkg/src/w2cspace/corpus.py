"""Tokenization, vocabulary construction, and labeled dataset loading.

CJK text is processed one character per token (characters are the word
unit for the downstream tasks); runs of anything else split on
whitespace.  Dataset files are UTF-8, tab-separated, one example per
line.
"""

from __future__ import annotations

from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from pathlib import Path

from .errors import DatasetFormatError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"

# Han, kana, Hangul, and CJK compatibility blocks all split per character.
_CJK_RANGES = (
    (0x3040, 0x30FF),   # hiragana + katakana
    (0x3400, 0x4DBF),   # CJK extension A
    (0x4E00, 0x9FFF),   # CJK unified ideographs
    (0xAC00, 0xD7AF),   # Hangul syllables
    (0xF900, 0xFAFF),   # CJK compatibility ideographs
)


def _is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str, mode: str = "cjk") -> list[str]:
    """Split text into tokens; deterministic and total.

    mode="cjk" (default): every CJK codepoint is its own token, runs of
    non-CJK characters split on whitespace.  mode="whitespace": plain
    whitespace splitting.
    """
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


class Vocab:
    """Bijective token <-> dense id map with reserved PAD=0 and UNK=1."""

    def __init__(self, tokens: list[str]):
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocab must start with the PAD and UNK tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate token in vocab")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def token_of(self, idx: int) -> str:
        return self.id_to_token[idx]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.id_of(t) for t in tokens]


def build_vocab(corpus: Iterable[str], min_count: int = 1, mode: str = "cjk") -> Vocab:
    """Count tokens over sentence strings and keep those with frequency
    >= min_count, ordered by frequency desc, ties by first occurrence."""
    counts: dict[str, int] = {}
    first: dict[str, int] = {}
    seen_any = False
    for sent in corpus:
        seen_any = True
        for tok in tokenize(sent, mode=mode):
            if tok not in counts:
                counts[tok] = 0
                first[tok] = len(first)
            counts[tok] += 1
    if not seen_any:
        raise DatasetFormatError("empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], first[t]))
    return Vocab([PAD_TOKEN, UNK_TOKEN] + kept)


@dataclass
class Sentence:
    ids: list[int]
    text: str

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class LabeledExample:
    sentence: Sentence
    # int class id for sequence tasks, per-token target id list for
    # correction (always len(sentence))
    label: int | list[int]


def make_sentence(text: str, vocab: Vocab, mode: str = "cjk") -> Sentence:
    return Sentence(ids=vocab.encode(tokenize(text, mode=mode)), text=text)


def read_corpus(path: str | Path) -> list[str]:
    """One sentence per line; blank lines are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln for ln in lines if ln.strip()]


def load_labeled_dataset(path: str | Path, task: str, vocab: Vocab,
                         mode: str = "cjk") -> Iterator[LabeledExample]:
    """Stream labeled examples in file order.

    task="sentiment": lines are `<label>\\t<text>` with label in {0, 1}.
    task="correction": lines are `<source>\\t<target>` with equal token
    counts; the label is the target id sequence.
    """
    if task not in ("sentiment", "correction"):
        raise ValueError(f"unknown task {task!r}")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DatasetFormatError(
                    f"{path} line {lineno}: expected two tab-separated fields")
            if task == "sentiment":
                label_text, text = parts
                if label_text not in ("0", "1"):
                    raise DatasetFormatError(
                        f"{path} line {lineno}: unknown label {label_text!r}")
                yield LabeledExample(make_sentence(text, vocab, mode), int(label_text))
            else:
                source, target = parts
                src = make_sentence(source, vocab, mode)
                tgt_tokens = tokenize(target, mode=mode)
                if len(tgt_tokens) != len(src):
                    raise DatasetFormatError(
                        f"{path} line {lineno}: source/target length mismatch "
                        f"({len(src)} vs {len(tgt_tokens)})")
                yield LabeledExample(src, vocab.encode(tgt_tokens))
