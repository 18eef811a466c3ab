"""Command-line pipeline driver.

Stages: build-akn -> train-mapper -> cluster -> train -> eval /
interpret.  Every command reads a JSON config (flags win over config
values), writes its outputs atomically, and echoes the resolved config
plus input hashes into each output's provenance so a finished run is
reproducible from its artifacts alone.  One master seed fans out to the
per-stage seeds.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import assoc, classify, contexts, corpus, encoder, mapper, reversal
from .artifacts import atomic_write, sha256_file
from .errors import (ArtifactFormatError, ConfigMismatchError, DatasetFormatError,
                     DegenerateInputError, TrainingDivergedError)


@dataclass
class RunConfig:
    n: int = 16                 # coordinate size
    k: int = 8                  # context count
    sr: float = 0.95            # association shrink rate
    seed: int = 0               # master seed, fanned out per stage
    h: int = 32                 # toy encoder hidden size
    encoder: str = "toy"        # "toy" or "file"
    tokenizer: str = "cjk"
    min_count: int = 1
    sample_cap: int = 200000    # max word elements fed to clustering
    epochs_mapper: int = 3
    lr_mapper: float = 1e-3
    epochs_train: int = 10
    lr_train: float = 1e-2
    epochs_finetune: int = 0
    lr_finetune: float = 1e-3
    task: str = "sentiment"

    def validate(self) -> None:
        if self.n < 2:
            raise ConfigMismatchError(f"n must be >= 2, got {self.n}")
        if self.k < 2:
            raise ConfigMismatchError(f"k must be >= 2, got {self.k}")
        if not 0.0 < self.sr <= 1.0:
            raise ConfigMismatchError(f"shrink rate must be in (0, 1], got {self.sr}")
        if self.encoder not in ("toy", "file"):
            raise ConfigMismatchError(f"encoder must be 'toy' or 'file', got {self.encoder!r}")
        if self.task not in ("sentiment", "correction"):
            raise ConfigMismatchError(f"task must be 'sentiment' or 'correction', got {self.task!r}")

    def stage_seeds(self) -> dict[str, int]:
        state = np.random.SeedSequence(self.seed).generate_state(4)
        return {"encoder": int(state[0]), "mapper": int(state[1]),
                "cluster": int(state[2]), "head": int(state[3])}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = {f.name: f.default for f in fields(RunConfig)}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ArtifactFormatError(f"config file not found: {path}")
        loaded = json.loads(path.read_text(encoding="utf-8"))
        unknown = set(loaded) - set(values)
        if unknown:
            raise ConfigMismatchError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for name in values:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


def _require(path: str | Path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ArtifactFormatError(f"missing input artifact: {what} at {p}")
    return p


def _check_outputs(*paths: str | None) -> None:
    """Outputs must be writable before any stage work starts."""
    for path in paths:
        if path is None:
            continue
        parent = Path(path).parent
        if str(parent) and not parent.is_dir():
            raise ArtifactFormatError(f"output directory does not exist: {parent}")


def provenance(cfg: RunConfig, inputs: dict[str, str | Path]) -> dict:
    return {
        "config": asdict(cfg),
        "inputs": {name: {"path": str(p), "sha256": sha256_file(_require(p, name))}
                   for name, p in inputs.items()},
    }


def _write_json(path: str | Path, payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    atomic_write(path, text.encode("utf-8"))


# -- vocab persistence --------------------------------------------------------


def save_vocab(vocab: corpus.Vocab, path: str | Path, prov: dict) -> None:
    _write_json(path, {"format": "w2c-vocab", "version": 1,
                       "tokens": vocab.id_to_token, "provenance": prov})


def load_vocab(path: str | Path) -> corpus.Vocab:
    data = json.loads(_require(path, "vocabulary").read_text(encoding="utf-8"))
    if data.get("format") != "w2c-vocab":
        raise ArtifactFormatError(f"{path}: not a vocabulary file")
    return corpus.Vocab(data["tokens"])


# -- feature plumbing ---------------------------------------------------------


def _load_toy_encoder(args, cfg: RunConfig, vocab: corpus.Vocab) -> encoder.ToyEncoder:
    if getattr(args, "encoder_ckpt", None):
        enc = encoder.load_encoder(_require(args.encoder_ckpt, "encoder checkpoint"))
        if enc.vocab_size != len(vocab):
            raise ConfigMismatchError(
                f"encoder checkpoint has v={enc.vocab_size}, vocabulary has {len(vocab)}")
        return enc
    return encoder.ToyEncoder(len(vocab), cfg.h, cfg.stage_seeds()["encoder"])


def gather_features(args, cfg: RunConfig, vocab: corpus.Vocab,
                    sentences: list[corpus.Sentence]) -> list[encoder.FeatureBatch]:
    """Features for the given sentences, from the configured source."""
    if cfg.encoder == "file":
        if not getattr(args, "features", None):
            raise ConfigMismatchError("encoder 'file' requires --features")
        batches = list(encoder.read_features(_require(args.features, "feature file")))
        if len(batches) != len(sentences):
            raise ConfigMismatchError(
                f"feature file has {len(batches)} sentences, corpus has {len(sentences)}")
        for i, (fb, sent) in enumerate(zip(batches, sentences)):
            if fb.d != len(sent):
                raise ConfigMismatchError(
                    f"sentence {i}: feature file has {fb.d} tokens, corpus has {len(sent)}")
        return batches
    enc = _load_toy_encoder(args, cfg, vocab)
    return [encoder.toy_encode(enc, s, i) for i, s in enumerate(sentences)]


def _feature_inputs(args) -> dict:
    extra = {}
    if getattr(args, "features", None):
        extra["features"] = args.features
    if getattr(args, "encoder_ckpt", None):
        extra["encoder_ckpt"] = args.encoder_ckpt
    return extra


# -- commands -----------------------------------------------------------------


def cmd_build_akn(args) -> int:
    cfg = resolve_config(args)
    _check_outputs(args.out, args.vocab_out)
    lines = corpus.read_corpus(_require(args.corpus, "corpus"))
    if not lines:
        raise DatasetFormatError(f"{args.corpus}: empty corpus")
    vocab = corpus.build_vocab(lines, min_count=cfg.min_count, mode=cfg.tokenizer)
    net = assoc.AssocNetwork(len(vocab), shrink_rate=cfg.sr)
    for line in lines:
        net.update(corpus.make_sentence(line, vocab, mode=cfg.tokenizer))
    prov = provenance(cfg, {"corpus": args.corpus})
    vocab_out = args.vocab_out or args.out + ".vocab.json"
    save_vocab(vocab, vocab_out, prov)
    assoc.save_akn(net, args.out)
    _write_json(args.out + ".meta.json", {"artifact": "akn", "provenance": prov})
    print(f"built association network: v={len(vocab)}, pairs={len(net.scores)}, "
          f"sr={net.shrink_rate} -> {args.out}")
    return 0


def cmd_train_mapper(args) -> int:
    cfg = resolve_config(args)
    _check_outputs(args.out, getattr(args, "encoder_out", None))
    seeds = cfg.stage_seeds()
    vocab = load_vocab(args.vocab)
    net = assoc.load_akn(_require(args.akn, "association network"))
    if net.vocab_size != len(vocab):
        raise ConfigMismatchError(
            f"association network has v={net.vocab_size}, vocabulary has {len(vocab)}")
    lines = corpus.read_corpus(_require(args.corpus, "corpus"))
    sentences = [corpus.make_sentence(l, vocab, mode=cfg.tokenizer) for l in lines]

    enc = None
    if cfg.encoder == "toy":
        enc = _load_toy_encoder(args, cfg, vocab)
        if cfg.epochs_finetune > 0:
            if not getattr(args, "finetune_data", None):
                raise ConfigMismatchError("epochs_finetune > 0 requires --finetune-data")
            tuned_data = list(corpus.load_labeled_dataset(
                _require(args.finetune_data, "fine-tune dataset"), cfg.task, vocab,
                mode=cfg.tokenizer))
            encoder.fine_tune_encoder(enc, tuned_data, cfg.task,
                                      cfg.epochs_finetune, cfg.lr_finetune)
        if getattr(args, "encoder_out", None):
            encoder.save_encoder(enc, args.encoder_out,
                                 extra={"provenance": provenance(cfg, {"corpus": args.corpus})})
        features = [encoder.toy_encode(enc, s, i) for i, s in enumerate(sentences)]
    else:
        features = gather_features(args, cfg, vocab, sentences)

    h = features[0].h if features else cfg.h
    mnet = mapper.MapperNet(h, cfg.n, seeds["mapper"])
    rnet = mapper.ReconNet(h, cfg.n, seeds["mapper"])
    trace = mapper.train_mapper(mnet, rnet, list(zip(sentences, features)), net,
                                epochs=cfg.epochs_mapper, lr=cfg.lr_mapper)
    prov = provenance(cfg, {"corpus": args.corpus, "vocab": args.vocab,
                            "akn": args.akn, **_feature_inputs(args)})
    mapper.save_mapper(mnet, rnet, args.out, extra={
        "provenance": prov,
        "loss_trace": [[t.total, t.alignment, t.reconstruction] for t in trace],
    })
    last = trace[-1] if trace else None
    print(f"trained mapper h={h} n={cfg.n} over {len(sentences)} sentences, "
          f"{cfg.epochs_mapper} epochs"
          + (f", final losses total={last.total:.4f} align={last.alignment:.4f} "
             f"recon={last.reconstruction:.4f}" if last else ""))
    print(f"mapper checkpoint -> {args.out}")
    return 0


def cmd_cluster(args) -> int:
    cfg = resolve_config(args)
    _check_outputs(args.space)
    seeds = cfg.stage_seeds()
    if getattr(args, "elements", None):
        points = np.asarray(json.loads(
            _require(args.elements, "elements file").read_text(encoding="utf-8")),
            dtype=np.float64)
        prov = provenance(cfg, {"elements": args.elements})
        space = contexts.kmeans_cluster(points, cfg.k, seed=seeds["cluster"],
                                        meta=prov)
        contexts.save_space(space, args.space)
        print(f"clustered {points.shape[0]} explicit elements into k={cfg.k} -> {args.space}")
        return 0

    mnet, _ = mapper.load_mapper(_require(args.mapper, "mapper checkpoint"))
    if mnet.n != cfg.n:
        raise ConfigMismatchError(f"mapper checkpoint has n={mnet.n}, config expects n={cfg.n}")
    vocab = load_vocab(args.vocab)
    lines = corpus.read_corpus(_require(args.corpus, "corpus"))
    sentences = [corpus.make_sentence(l, vocab, mode=cfg.tokenizer) for l in lines]
    features = gather_features(args, cfg, vocab, sentences)

    rows = []
    total = 0
    for fb in features:
        if total >= cfg.sample_cap:
            break
        coords = classify.map_coords(mnet, fb)
        take = min(len(coords), cfg.sample_cap - total)
        rows.append(coords[:take])
        total += take
    elements = np.concatenate(rows, axis=0)
    prov = provenance(cfg, {"mapper": args.mapper, "corpus": args.corpus,
                            "vocab": args.vocab, **_feature_inputs(args)})
    space = contexts.kmeans_cluster(elements, cfg.k, seed=seeds["cluster"], meta=prov)
    contexts.save_space(space, args.space)
    print(f"clustered {elements.shape[0]} word elements into k={cfg.k} contexts -> {args.space}")
    return 0


def _load_stack(args, cfg: RunConfig):
    mnet, _ = mapper.load_mapper(_require(args.mapper, "mapper checkpoint"))
    space = contexts.load_space(_require(args.space, "context space"), expected_n=mnet.n)
    if space.n != cfg.n:
        raise ConfigMismatchError(f"space has n={space.n}, config expects n={cfg.n}")
    if space.k != cfg.k:
        raise ConfigMismatchError(f"space has k={space.k}, config expects k={cfg.k}")
    return mnet, space


def _load_task_data(args, cfg: RunConfig, vocab: corpus.Vocab):
    examples = list(corpus.load_labeled_dataset(
        _require(args.data, "labeled dataset"), cfg.task, vocab, mode=cfg.tokenizer))
    if not examples:
        raise DatasetFormatError(f"{args.data}: no examples")
    features = gather_features(args, cfg, vocab, [ex.sentence for ex in examples])
    return examples, features


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    _check_outputs(args.space_out, args.head_out)
    seeds = cfg.stage_seeds()
    vocab = load_vocab(args.vocab)
    mnet, space = _load_stack(args, cfg)
    examples, features = _load_task_data(args, cfg, vocab)
    out_dim = 2 if cfg.task == "sentiment" else len(vocab)
    head = classify.TaskHead(cfg.task, space.k, out_dim, seeds["head"])
    trace = classify.train_downstream(space, mnet, features, examples, head,
                                      epochs=cfg.epochs_train, lr=cfg.lr_train)
    prov = provenance(cfg, {"space": args.space, "mapper": args.mapper,
                            "vocab": args.vocab, "data": args.data,
                            **_feature_inputs(args)})
    space.meta = {**space.meta, "trained": prov}
    contexts.save_space(space, args.space_out)
    classify.save_head(head, args.head_out, extra={"provenance": prov,
                                                   "loss_trace": trace})
    tail = f"final loss {trace[-1]:.4f}" if trace else "no training epochs"
    print(f"trained merge matrix + {cfg.task} head over {len(examples)} examples, "
          f"{cfg.epochs_train} epochs, {tail}")
    print(f"space -> {args.space_out}; head -> {args.head_out}")
    return 0


def _predictions(cfg, space, mnet, head, examples, features):
    if cfg.task == "sentiment":
        return [classify.predict_sequence(space, mnet, head, fb) for fb in features]
    return [classify.predict_tokens(space, mnet, head, fb) for fb in features]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    _check_outputs(args.report)
    vocab = load_vocab(args.vocab)
    mnet, space = _load_stack(args, cfg)
    head = classify.load_head(_require(args.head, "task head"))
    if head.k != space.k:
        raise ConfigMismatchError(f"head has k={head.k}, space has k={space.k}")
    if head.task != cfg.task:
        raise ConfigMismatchError(f"head was trained for {head.task!r}, config says {cfg.task!r}")
    examples, features = _load_task_data(args, cfg, vocab)
    preds = _predictions(cfg, space, mnet, head, examples, features)
    if cfg.task == "sentiment":
        accuracy = classify.evaluate_classification(preds, [ex.label for ex in examples])
        metrics = {"accuracy": accuracy}
        summary = f"accuracy {accuracy:.2f}"
    else:
        triples = [(ex.sentence.ids, ex.label, list(map(int, p)))
                   for ex, p in zip(examples, preds)]
        metrics = classify.evaluate_correction(triples).as_dict()
        summary = (f"sentence-level DF1 {metrics['sentence']['df1']:.2f} "
                   f"CF1 {metrics['sentence']['cf1']:.2f}")
    prov = provenance(cfg, {"space": args.space, "mapper": args.mapper,
                            "head": args.head, "vocab": args.vocab,
                            "data": args.data, **_feature_inputs(args)})
    _write_json(args.report, {"task": cfg.task, "metrics": metrics, "provenance": prov})
    print(f"evaluated {len(examples)} examples: {summary}")
    print(f"report -> {args.report}")
    return 0


def cmd_interpret(args) -> int:
    cfg = resolve_config(args)
    _check_outputs(args.report, getattr(args, "affinity_csv", None))
    if cfg.task != "sentiment":
        raise ConfigMismatchError("the reversal probe is defined for the sentiment task")
    vocab = load_vocab(args.vocab)
    mnet, space = _load_stack(args, cfg)
    head = classify.load_head(_require(args.head, "task head"))
    if head.task != "sentiment" or head.k != space.k:
        raise ConfigMismatchError("head incompatible with the context space")
    examples, features = _load_task_data(args, cfg, vocab)
    labels = [int(ex.label) for ex in examples]

    ranking = reversal.rank_contexts(space, mnet, list(zip(features, labels)))
    reversed_space = reversal.reverse_context_space(space, ranking)
    original = [classify.predict_sequence(space, mnet, head, fb) for fb in features]
    modified = [classify.predict_sequence(reversed_space, mnet, head, fb) for fb in features]
    oa, ca, ra = reversal.reversal_metrics(original, modified, labels)
    after = reversal.rank_contexts(reversed_space, mnet, list(zip(features, labels)))

    prov = provenance(cfg, {"space": args.space, "mapper": args.mapper,
                            "head": args.head, "vocab": args.vocab,
                            "data": args.data, **_feature_inputs(args)})
    report = reversal.ReversalReport(
        original_accuracy=oa, modified_accuracy=ca, reversal_rate=ra,
        ranking_before=ranking.order, ranking_after=after.order,
        config=prov["config"])
    _write_json(args.report, {**report.as_dict(), "provenance": prov})
    if getattr(args, "affinity_csv", None):
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["context", "positive_affinity", "negative_affinity", "net"])
        for j in range(space.k):
            writer.writerow([j, repr(float(ranking.positive_affinity[j])),
                             repr(float(ranking.negative_affinity[j])),
                             repr(float(ranking.net_affinity[j]))])
        atomic_write(args.affinity_csv, buf.getvalue().encode("utf-8"))
    print(f"reversal probe over {len(examples)} sentences: "
          f"OA {oa:.2f}, CA {ca:.2f}, RA {ra:.2f}")
    print(f"report -> {args.report}")
    return 0


# -- argument wiring ----------------------------------------------------------


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--sr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--h", type=int)
    p.add_argument("--encoder", choices=["toy", "file"])
    p.add_argument("--tokenizer", choices=["cjk", "whitespace"])
    p.add_argument("--min-count", dest="min_count", type=int)
    p.add_argument("--sample-cap", dest="sample_cap", type=int)
    p.add_argument("--epochs-mapper", dest="epochs_mapper", type=int)
    p.add_argument("--lr-mapper", dest="lr_mapper", type=float)
    p.add_argument("--epochs-train", dest="epochs_train", type=int)
    p.add_argument("--lr-train", dest="lr_train", type=float)
    p.add_argument("--epochs-finetune", dest="epochs_finetune", type=int)
    p.add_argument("--lr-finetune", dest="lr_finetune", type=float)
    p.add_argument("--task", choices=["sentiment", "correction"])


def _add_feature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", help="feature file for --encoder file")
    p.add_argument("--encoder-ckpt", dest="encoder_ckpt",
                   help="toy encoder checkpoint to reuse across stages")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="w2c",
        description="word-context coupled space pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-akn", help="build the association network from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-out", dest="vocab_out")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_build_akn)

    p = sub.add_parser("train-mapper", help="train the feature-to-coordinate mapper")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--akn", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoder-out", dest="encoder_out",
                   help="save the (possibly fine-tuned) toy encoder here")
    p.add_argument("--finetune-data", dest="finetune_data",
                   help="labeled dataset for encoder fine-tuning")
    _add_feature_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_mapper)

    p = sub.add_parser("cluster", help="cluster word elements into contexts")
    p.add_argument("--space", required=True, help="output context-space checkpoint")
    p.add_argument("--mapper")
    p.add_argument("--corpus")
    p.add_argument("--vocab")
    p.add_argument("--elements", help="JSON array of vectors to cluster directly")
    _add_feature_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("train", help="train the merge matrix and task head")
    p.add_argument("--space", required=True)
    p.add_argument("--mapper", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--space-out", dest="space_out", required=True)
    p.add_argument("--head-out", dest="head_out", required=True)
    _add_feature_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained stack")
    p.add_argument("--space", required=True)
    p.add_argument("--mapper", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    _add_feature_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("interpret", help="run the context-reversal probe")
    p.add_argument("--space", required=True)
    p.add_argument("--mapper", required=True)
    p.add_argument("--head", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--affinity-csv", dest="affinity_csv")
    _add_feature_flags(p)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_interpret)

    return parser


def dispatch(argv: list[str]) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "cluster":
        if not args.elements and not (args.mapper and args.corpus and args.vocab):
            parser.error("cluster needs either --elements or --mapper/--corpus/--vocab")
    try:
        return args.fn(args)
    except (ArtifactFormatError, ConfigMismatchError, DatasetFormatError,
            DegenerateInputError, TrainingDivergedError, ValueError, IndexError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
