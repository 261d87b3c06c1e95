"""Command-line pipeline: preprocess, train, generate, extract, evaluate,
sweep, inspect.

Each stage reads the previous stage's files and writes its own, so stages
are independently re-runnable. Exit codes: 0 ok, 1 runtime failure, 2
usage/input error. Set TREESUM_DETERMINISTIC=1 to force single-threaded
torch reductions.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import metrics, objective, summarizer
from .config import Config, load_config
from .corpus import (
    Instance,
    Review,
    SyntheticSpec,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    load_instances,
    make_instances,
    save_instances,
    split_instances,
    tokenize,
)
from .latent_gmm import dump_diagnostics, topic_diagnostics
from .topic_model import TopicTree


class UsageError(Exception):
    """Bad input or arguments; exits with code 2."""


def _load_corpus(data_dir) -> tuple[list[Instance], Vocabulary]:
    data_dir = Path(data_dir)
    corpus_path = data_dir / "corpus.jsonl"
    vocab_path = data_dir / "vocab.tsv"
    if not corpus_path.exists() or not vocab_path.exists():
        raise UsageError(f"input not found: {corpus_path} / {vocab_path}")
    return load_instances(corpus_path), Vocabulary.load(vocab_path)


def _config_from_args(args) -> Config:
    overrides = dict(kv.split("=", 1) for kv in (args.set or []))
    if args.config:
        if not Path(args.config).exists():
            raise UsageError(f"input not found: {args.config}")
        return load_config(args.config, overrides)
    return Config().with_overrides(overrides)


def _load_gold(path) -> dict[str, list[str]]:
    if not Path(path).exists():
        raise UsageError(f"input not found: {path}")
    gold = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            gold[rec["product_id"]] = [
                t for s in tokenize(rec["summary"]) for t in s
            ]
    return gold


def cmd_preprocess(args) -> int:
    config = _config_from_args(args)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.synthetic:
        if not Path(args.synthetic).exists():
            raise UsageError(f"input not found: {args.synthetic}")
        with open(args.synthetic, encoding="utf-8") as f:
            spec = SyntheticSpec(**json.load(f))
        instances = generate_synthetic_corpus(spec)
    else:
        if not args.input or not Path(args.input).exists():
            raise UsageError(f"input not found: {args.input}")
        by_product: dict[str, list[Review]] = defaultdict(list)
        with open(args.input, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                by_product[rec["product_id"]].append(Review(tokenize(rec["text"])))
        products = sorted(by_product)
        rng = np.random.default_rng(config.seed)
        rng.shuffle(products)
        n_test = int(round(args.test_fraction * len(products)))
        n_val = int(round(args.val_fraction * len(products)))
        split_of = {}
        for i, p in enumerate(products):
            split_of[p] = "test" if i < n_test else "validation" if i < n_test + n_val else "train"
        instances = []
        for split in corpus_mod.SPLITS:
            subset = {p: r for p, r in by_product.items() if split_of[p] == split}
            instances.extend(
                make_instances(
                    subset,
                    reviews_per_instance=config.reviews_per_instance,
                    instances_per_product=config.instances_per_product,
                    seed=config.seed,
                    max_review_sentences=config.max_review_sentences,
                    split=split,
                )
            )

    train_instances = [i for i in instances if i.split == "train"]
    if not train_instances:
        raise UsageError("no training instances produced")
    vocab = build_vocabulary(train_instances, min_count=config.min_count)
    save_instances(out_dir / "corpus.jsonl", instances)
    vocab.save(out_dir / "vocab.tsv")
    counts = {s: len(v) for s, v in split_instances(instances).items()}
    print(f"wrote {len(instances)} instances {counts}, vocabulary size {len(vocab)}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    instances, vocab = _load_corpus(args.data)
    gold = _load_gold(args.gold) if args.gold else None
    result = objective.train(
        config, instances, vocab, args.out, gold=gold, progress_every=args.progress_every
    )
    if result.diverged:
        saved = result.last_checkpoint if (result.last_checkpoint / "params.pt").exists() else "none"
        print(
            f"training diverged at step {result.steps_run}; last good checkpoint: {saved}",
            file=sys.stderr,
        )
        return 1
    print(f"trained {result.steps_run} steps; checkpoint: {result.last_checkpoint}")
    if result.best_checkpoint:
        print(f"best validation ROUGE-L {result.best_metric:.4f}: {result.best_checkpoint}")
    return 0


def _select_split(instances, split):
    chosen = [i for i in instances if i.split == split]
    if not chosen:
        raise UsageError(f"no instances in split {split!r}")
    return chosen


def cmd_generate(args) -> int:
    instances, vocab = _load_corpus(args.data)
    model, config, _ = objective.load_checkpoint(args.checkpoint)
    chosen = _select_split(instances, args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    diagnostics = []
    projection_rows = []
    with open(out, "w", encoding="utf-8") as f:
        for index, inst in enumerate(chosen):
            sentences, topics = summarizer.generate_topic_sentences(
                model, vocab, inst, seed=args.seed
            )
            diagnostics.append(topic_diagnostics(inst.product_id, topics))
            if args.projection and index < args.projection_limit:
                projection_rows.extend(_projection_rows(inst.product_id, model.tree, topics))
            record = {
                "product_id": inst.product_id,
                "instance_index": index,
                "topics": [
                    {
                        "topic_id": ts.topic_id,
                        "label": model.tree.labels[ts.topic_id],
                        "tokens": ts.tokens,
                        "low_confidence": ts.low_confidence,
                    }
                    for ts in sentences
                ],
            }
            f.write(json.dumps(record, ensure_ascii=False) + "\n")
    if args.diagnostics:
        dump_diagnostics(args.diagnostics, diagnostics)
    if args.projection:
        with open(args.projection, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["product_id", "topic", "kind", "point", "x", "y"])
            writer.writerows(projection_rows)
    print(f"wrote topic sentences for {len(chosen)} instances to {out}")
    return 0


def _projection_rows(product_id, tree, topics):
    """Flatten one instance's 2-D latent projection for plotting tools."""
    proj = metrics.latent_projection(topics.means.numpy(), topics.covs.numpy())
    rows = []
    for k in range(tree.n_nodes):
        rows.append(
            [product_id, tree.labels[k], "mean", 0, float(proj.coords[k, 0]), float(proj.coords[k, 1])]
        )
        for i, (x, y) in enumerate(proj.ellipses[k]):
            rows.append([product_id, tree.labels[k], "ellipse", i, float(x), float(y)])
    return rows


def _load_topic_records(path):
    if not Path(path).exists():
        raise UsageError(f"input not found: {path}")
    records = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records


def cmd_extract(args) -> int:
    config = _config_from_args(args)
    instances, _ = _load_corpus(args.data)
    chosen = _select_split(instances, args.split)
    records = _load_topic_records(args.topics)
    if len(records) != len(chosen):
        raise UsageError(
            f"topic file has {len(records)} records but split has {len(chosen)} instances"
        )
    tree = TopicTree(config.tree_branching)
    summaries = []
    for rec, inst in zip(records, chosen):
        if rec["product_id"] != inst.product_id:
            raise UsageError(
                f"topic record {rec['instance_index']} is for {rec['product_id']}, "
                f"instance is {inst.product_id}; regenerate with the same split"
            )
        sentences = [
            summarizer.TopicSentence(t["topic_id"], t["tokens"], 0, t["low_confidence"])
            for t in rec["topics"]
        ]
        candidate = summarizer.extract_summary(
            sentences,
            inst,
            beam_width=config.extraction_beam_width,
            max_sentences=config.max_summary_sentences,
            redundancy_threshold=config.redundancy_threshold,
        )
        ordered = summarizer.order_depth_first(candidate, tree)
        by_topic = {ts.topic_id: ts for ts in sentences}
        summaries.append(
            summarizer.Summary(
                product_id=inst.product_id,
                topic_ids=ordered,
                sentences=[by_topic[k].tokens for k in ordered],
                score=candidate.score,
                topic_labels=[tree.labels[k] for k in ordered],
            )
        )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    summarizer.save_summaries(out, summaries)
    with open(out.with_suffix(".txt"), "w", encoding="utf-8") as f:
        for s in summaries:
            f.write(f"# {s.product_id}\n{s.text()}\n\n")
    print(f"wrote {len(summaries)} summaries to {out}")
    return 0


def cmd_evaluate(args) -> int:
    instances, _ = _load_corpus(args.data)
    chosen = _select_split(instances, args.split)
    summaries = summarizer.load_summaries(args.summaries)
    if len(summaries) != len(chosen):
        raise UsageError(
            f"summary file has {len(summaries)} records but split has {len(chosen)}"
        )
    gold = _load_gold(args.gold) if args.gold else None
    oracle_records = None
    if args.topics:
        if not gold:
            raise UsageError("--topics (oracle extraction) requires --gold")
        oracle_records = _load_topic_records(args.topics)
        if len(oracle_records) != len(chosen):
            raise UsageError("topic file does not match the evaluated split")
    config = _config_from_args(args)
    rows = []
    for index, (summary, inst) in enumerate(zip(summaries, chosen)):
        reference = (gold or {}).get(inst.product_id)
        if reference is None:
            reference = [t for s in inst.sentences() for t in s]
        tokens = summary.tokens()
        row = {
            "product_id": summary.product_id,
            "rouge1": metrics.rouge_n(tokens, reference, 1).f1,
            "rouge2": metrics.rouge_n(tokens, reference, 2).f1,
            "rougeL": metrics.rouge_l(tokens, reference).f1,
        }
        if oracle_records is not None:
            sentences = [
                summarizer.TopicSentence(t["topic_id"], t["tokens"], 0)
                for t in oracle_records[index]["topics"]
            ]
            row["oracle_rougeL"] = summarizer.oracle_extract(
                sentences, reference, count=config.oracle_count
            ).score
        rows.append(row)
    bleu = (
        metrics.self_bleu([s.tokens() for s in summaries], n_max=4)
        if len(summaries) >= 2
        else {3: float("nan"), 4: float("nan")}
    )
    mean_row = {
        "product_id": "MEAN",
        "rouge1": float(np.mean([r["rouge1"] for r in rows])),
        "rouge2": float(np.mean([r["rouge2"] for r in rows])),
        "rougeL": float(np.mean([r["rougeL"] for r in rows])),
        "self_bleu3": bleu[3],
        "self_bleu4": bleu[4],
    }
    columns = ["product_id", "rouge1", "rouge2", "rougeL", "self_bleu3", "self_bleu4"]
    if oracle_records is not None:
        mean_row["oracle_rougeL"] = float(np.mean([r["oracle_rougeL"] for r in rows]))
        columns.append("oracle_rougeL")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
        writer.writerow(mean_row)
    message = (
        f"ROUGE-1 {mean_row['rouge1']:.4f}  ROUGE-2 {mean_row['rouge2']:.4f}  "
        f"ROUGE-L {mean_row['rougeL']:.4f}  self-BLEU-3 {mean_row['self_bleu3']:.4f}  "
        f"self-BLEU-4 {mean_row['self_bleu4']:.4f}"
    )
    if oracle_records is not None:
        message += f"  oracle-ROUGE-L {mean_row['oracle_rougeL']:.4f}"
    print(message)
    return 0


def cmd_sweep(args) -> int:
    config = _config_from_args(args)
    instances, vocab = _load_corpus(args.data)
    gold = _load_gold(args.gold) if args.gold else None
    shapes: list[list[int]] = []
    for part in args.shapes.split(";"):
        shape = [int(b) for b in part.split(",") if b.strip()]
        if shape in shapes:
            print(f"warning: duplicate tree shape {shape} skipped", file=sys.stderr)
            continue
        shapes.append(shape)
    eval_split = args.split
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = []
    for shape in shapes:
        cfg = config.with_overrides({"tree_branching": ",".join(map(str, shape))})
        run_dir = out_dir / ("shape_" + "-".join(map(str, shape)))
        result = objective.train(cfg, instances, vocab, run_dir, gold=gold)
        model, _, _ = objective.load_checkpoint(result.last_checkpoint)
        chosen = _select_split(instances, eval_split)
        scores = {1: [], 2: [], "L": []}
        for inst in chosen:
            summary = summarizer.summarize_instance(model, vocab, inst, cfg.seed)
            reference = (gold or {}).get(inst.product_id)
            if reference is None:
                reference = [t for s in inst.sentences() for t in s]
            scores[1].append(metrics.rouge_n(summary.tokens(), reference, 1).f1)
            scores[2].append(metrics.rouge_n(summary.tokens(), reference, 2).f1)
            scores["L"].append(metrics.rouge_l(summary.tokens(), reference).f1)
        table.append(
            {
                "shape": "-".join(["1"] + [str(b) for b in shape]),
                "topics": TopicTree(shape).n_nodes,
                "rouge1": float(np.mean(scores[1])),
                "rouge2": float(np.mean(scores[2])),
                "rougeL": float(np.mean(scores["L"])),
            }
        )
    with open(out_dir / "sweep.csv", "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["shape", "topics", "rouge1", "rouge2", "rougeL"])
        writer.writeheader()
        writer.writerows(table)
    print(f"{'shape':<12}{'topics':>8}{'R-1':>10}{'R-2':>10}{'R-L':>10}")
    for row in table:
        print(
            f"{row['shape']:<12}{row['topics']:>8}"
            f"{row['rouge1']:>10.4f}{row['rouge2']:>10.4f}{row['rougeL']:>10.4f}"
        )
    return 0


def cmd_inspect(args) -> int:
    if args.data:
        instances, vocab = _load_corpus(args.data)
        counts = {s: len(v) for s, v in split_instances(instances).items()}
        n_sent = sum(len(i.sentences()) for i in instances)
        print(
            f"corpus: {len(instances)} instances {counts}, {n_sent} sentences, "
            f"vocabulary size {len(vocab)}"
        )
    if args.checkpoint:
        model, config, step = objective.load_checkpoint(args.checkpoint)
        n_params = sum(p.numel() for p in model.parameters())
        print(
            f"checkpoint: step {step}, config hash {config.hash()}, "
            f"tree 1-{'-'.join(map(str, config.tree_branching))} "
            f"({model.tree.n_nodes} topics), {n_params} parameters"
        )
        if args.diagnostics:
            records = metrics.load_diagnostics(args.diagnostics)
            by_level = metrics.logdet_by_level(records, model.tree)
            for level, value in by_level.items():
                print(f"mean logdet covariance, level {level}: {value:.4f}")
    elif args.diagnostics:
        raise UsageError("--diagnostics needs --checkpoint for the tree shape")
    if args.summaries:
        summaries = summarizer.load_summaries(args.summaries)
        lengths = [len(s.tokens()) for s in summaries]
        print(
            f"summaries: {len(summaries)}, mean score "
            f"{float(np.mean([s.score for s in summaries])):.4f}, "
            f"mean length {float(np.mean(lengths)):.1f} tokens"
        )
    if not (args.data or args.checkpoint or args.summaries):
        raise UsageError("nothing to inspect: pass --data, --checkpoint or --summaries")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="treesum", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")

    p = sub.add_parser("preprocess", help="build corpus.jsonl and vocab.tsv")
    p.add_argument("--input", help="raw reviews JSONL: {product_id, text}")
    p.add_argument("--synthetic", help="synthetic corpus spec JSON (instead of --input)")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.1)
    add_config_args(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a preprocessed corpus")
    p.add_argument("--data", required=True, help="directory from preprocess")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--gold", help="gold summaries JSONL: {product_id, summary}")
    p.add_argument("--progress-every", type=int, default=0)
    add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode topic sentences per instance")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--diagnostics", help="also dump topic posterior diagnostics JSONL")
    p.add_argument("--projection", help="write a 2-D latent projection CSV")
    p.add_argument("--projection-limit", type=int, default=1, metavar="N",
                   help="project the first N instances (default 1)")
    p.add_argument("--split", default="test")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("extract", help="extract summaries from topic sentences")
    p.add_argument("--data", required=True)
    p.add_argument("--topics", required=True, help="file from generate")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test")
    add_config_args(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="score summaries (ROUGE, self-BLEU)")
    p.add_argument("--data", required=True)
    p.add_argument("--summaries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gold")
    p.add_argument("--topics", help="with --gold: also report oracle extraction ROUGE-L")
    p.add_argument("--split", default="test")
    add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="train and evaluate several tree shapes")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--shapes", required=True, help='e.g. "2,2;3,3;4,4"')
    p.add_argument("--gold")
    p.add_argument("--split", default="validation")
    add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("inspect", help="summarize pipeline artifacts")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--summaries")
    p.add_argument("--diagnostics", help="with --checkpoint: mean logdet per tree level")
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    if os.environ.get("TREESUM_DETERMINISTIC"):
        import torch

        torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
