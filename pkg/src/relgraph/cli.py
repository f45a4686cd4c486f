"""Command-line entry point: ``relgraph <command> [options]``.

Every command reads its inputs from ``--data`` (default: the ``--out``
directory) and writes its outputs plus ``<command>.config``, the effective
configuration, to ``--out``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply, load_config, parse_text, write_config
from .encoders import load_table, save_table
from .kg import (DataError, load_documents, load_kg, load_mentions, load_questions,
                 save_mentions)
from .metrics import format_table
from .model import Vocab, compile_instance, init_params
from .optim import RngStream
from .pipeline import build_dataset, build_subgraphs, link, pretrain
from .retrieval import PprNotConverged, answer_recall, load_subgraphs, save_subgraphs
from .synth import SPLITS, gen_synthetic, write_benchmark
from .train import (TrainingDiverged, ablate, evaluate, predict_probabilities, train)

log = logging.getLogger("relgraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("gen", "pretrain", "link", "subgraph", "train", "eval", "ablate", "predict")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value configuration file")
    common.add_argument("--seed", type=int, help="seed for every random stream")
    common.add_argument("--out", type=Path, default=Path("."), help="output directory")
    common.add_argument("--data", type=Path, help="input directory (default: --out)")
    common.add_argument("--threads", type=int,
                        help="evaluation worker threads (default: $RELGRAPH_THREADS or 1)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser = _Parser(prog="relgraph", description="Graph network QA over a KG and documents.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    helps = {
        "gen": "generate a synthetic benchmark",
        "pretrain": "train TransE and build the word table",
        "link": "link documents to entities",
        "subgraph": "extract PageRank subgraphs for every split",
        "train": "train a model and write model.ckpt",
        "eval": "report metrics of a checkpoint on a split",
        "ablate": "train the four masked configurations and print the table",
        "predict": "rank the nodes of each question subgraph",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=helps[name])
        if name in ("eval", "predict"):
            p.add_argument("--model", type=Path, help="checkpoint (default: DATA/model.ckpt)")
            p.add_argument("--split", choices=SPLITS, default="test")
            p.add_argument("--threshold", type=float, help="override the stored threshold")
        if name == "predict":
            p.add_argument("--subgraphs", type=Path,
                           help="subgraph file (default: DATA/subgraphs_SPLIT.tsv)")
        if name == "ablate":
            p.add_argument("--split", choices=SPLITS, default="test")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(parse_text(item.replace("=", " = ", 1), "--set"))
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    threads = args.threads
    if threads is None and os.environ.get("RELGRAPH_THREADS"):
        threads = os.environ["RELGRAPH_THREADS"]
    if threads is not None:
        overrides["threads"] = str(threads)
    return apply(config, overrides)


# -- loading helpers ---------------------------------------------------------------


class Workspace:
    def __init__(self, data: Path, out: Path, config: RunConfig):
        self.data, self.out, self.config = data, out, config
        self._kg = None

    def path(self, name: str) -> Path:
        return self.data / name

    @property
    def kg(self):
        if self._kg is None:
            self._kg = load_kg(self.path("kg.tsv"))
        return self._kg

    def documents(self):
        return load_documents(self.path("documents.tsv"))

    def questions(self) -> dict:
        return {s: load_questions(self.path(f"questions_{s}.tsv"), self.kg) for s in SPLITS}

    def mentions(self):
        return load_mentions(self.path("mentions.tsv"), self.kg)

    def subgraphs(self, split: str, path: Path | None = None):
        return load_subgraphs(path or self.path(f"subgraphs_{split}.tsv"), self.kg)

    def tables(self):
        return tuple(load_table(self.path(f"{n}.tsv")) for n in ("entities", "relations", "words"))

    def dataset(self, model_config):
        splits = self.questions()
        graphs = {s: self.subgraphs(s) for s in SPLITS}
        ent, rel, words = self.tables()
        return build_dataset(self.kg, self.documents(), self.mentions(), splits, graphs,
                             ent, rel, words, model_config)


# -- commands ----------------------------------------------------------------------


def cmd_gen(ws: Workspace, args) -> None:
    write_benchmark(gen_synthetic(ws.config.synth_config()), ws.out)


def cmd_pretrain(ws: Workspace, args) -> None:
    c = ws.config
    questions = [q for qs in ws.questions().values() for q in qs]
    ent, rel, words = pretrain(ws.kg, ws.documents(), questions, c.model.d_kb,
                               c.pretrain_config(), c.seed)
    for name, table in (("entities", ent), ("relations", rel), ("words", words)):
        save_table(table, ws.out / f"{name}.tsv")


def cmd_link(ws: Workspace, args) -> None:
    mentions = link(ws.kg, ws.documents(), ws.config.retrieval, ws.config.seed)
    save_mentions(mentions, ws.kg, ws.out / "mentions.tsv")


def cmd_subgraph(ws: Workspace, args) -> None:
    mentions = ws.mentions()
    report = []
    for split, qs in ws.questions().items():
        graphs = build_subgraphs(ws.kg, qs, mentions, ws.config.retrieval)
        save_subgraphs(graphs, ws.kg, ws.out / f"subgraphs_{split}.tsv")
        report.append(f"{split}\tanswer_recall\t{answer_recall(graphs, qs):.4f}\n")
    sys.stdout.write("".join(report))


def cmd_train(ws: Workspace, args) -> None:
    c = ws.config
    data = ws.dataset(c.model)
    lines = []

    def on_epoch(entry):
        lines.append(entry.line())
        log.info(entry.line())

    result = train(data, c.model, c.train_config(), on_epoch=on_epoch)
    (ws.out / "train_log.tsv").write_text("".join(x + "\n" for x in lines), encoding="utf-8")
    save_checkpoint(result.model, ws.out / "model.ckpt")
    sys.stdout.write(f"best_epoch\t{result.best_epoch}\nbest_val_f1_avg\t{result.best_val:.4f}\n"
                     f"threshold\t{result.model.threshold!r}\n")


def _load_model(ws: Workspace, args, n_entities: int, n_relations: int):
    model = load_checkpoint(args.model or ws.path("model.ckpt"))
    cfg = model.config
    expected = init_params(cfg, n_relations, np.zeros((n_entities, cfg.d_kb)),
                           np.zeros((n_relations, cfg.d_kb)), RngStream(0))
    check_compatible(model, expected)
    if args.threshold is not None:
        if not 0.0 < args.threshold < 1.0:
            raise UsageError("--threshold must lie strictly between 0 and 1")
        model.threshold = args.threshold
    return model


def cmd_eval(ws: Workspace, args) -> None:
    kg = ws.kg
    model = _load_model(ws, args, kg.num_entities, len(kg.relations))
    data = ws.dataset(model.config)
    m = evaluate(model, data.splits[args.split], data.vocab, threads=ws.config.threads)
    text = format_table([(args.split, m)], label="Split")
    (ws.out / f"metrics_{args.split}.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_ablate(ws: Workspace, args) -> None:
    c = ws.config
    data = ws.dataset(c.model)
    seeds = [c.seed + k for k in range(c.ablation_seeds)]
    report = ablate(data, c.model, c.train_config(), seeds, split=args.split,
                    on_run=lambda name, seed, m: log.info("%s seed %d: %s", name, seed, m))
    text = report.table()
    (ws.out / "ablation.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_predict(ws: Workspace, args) -> None:
    kg = ws.kg
    model = _load_model(ws, args, kg.num_entities, len(kg.relations))
    _, _, words = ws.tables()
    vocab = Vocab.build(kg, words, ws.documents(), ws.mentions(), model.config.max_doc_tokens)
    questions = {q.id: q for q in load_questions(ws.path(f"questions_{args.split}.tsv"), kg)}
    graphs = ws.subgraphs(args.split, args.subgraphs)
    missing = [g.question for g in graphs if g.question not in questions]
    if missing:
        raise DataError(f"subgraphs for unknown questions: {', '.join(missing[:5])}")
    instances = [compile_instance(g, questions[g.question], vocab) for g in graphs]
    probs = predict_probabilities(model, instances, vocab, ws.config.threads)
    ranked, answers = [], []
    names = kg.entity_names
    for inst, p in zip(instances, probs):
        order = sorted(range(len(p)), key=lambda k: (-p[k], inst.entity_ids[k]))
        ranked += [f"{inst.qid}\t{names[inst.entity_ids[k]]}\t{float(p[k])!r}\n" for k in order]
        chosen = [names[inst.entity_ids[k]] for k in order if p[k] >= model.threshold]
        answers.append(f"{inst.qid}\t{' '.join(chosen)}\n")
    (ws.out / f"predictions_{args.split}.tsv").write_text("".join(ranked), encoding="utf-8")
    (ws.out / f"answers_{args.split}.tsv").write_text("".join(answers), encoding="utf-8")
    sys.stdout.write("".join(ranked))


HANDLERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "link": cmd_link,
            "subgraph": cmd_subgraph, "train": cmd_train, "eval": cmd_eval,
            "ablate": cmd_ablate, "predict": cmd_predict}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        config = resolve_config(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError) as exc:
        print(f"relgraph: {exc}", file=sys.stderr)
        return EXIT_DATA
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        ws = Workspace(args.data or args.out, args.out, config)
        HANDLERS[args.command](ws, args)
        write_config(config, args.out / f"{args.command}.config")
    except UsageError as exc:
        print(f"relgraph: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ValueError) as exc:
        print(f"relgraph: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, PprNotConverged, FloatingPointError) as exc:
        print(f"relgraph: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
