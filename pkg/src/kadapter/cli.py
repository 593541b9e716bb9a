"""Command-line entry point: ``kadapter <command> ...``.

Commands
    gen {fact,dep,cloze}   write synthetic corpora, vocab and label table
    pretrain               train one adapter against a frozen backbone
    finetune               fine-tune backbone + head with adapters frozen
    probe                  train only a masked-token output layer per arm, report P@1
    forget                 sequential full-model training vs one adapter per task
    paramcount             closed-form adapter size vs brute-force enumeration
    eval                   score a fine-tuned checkpoint on its task's dev split

Exit codes: 0 success, 1 runtime failure, 2 invalid input. ``KADAPTER_SEED``
overrides the training seed of any config-driven command.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import fields
from pathlib import Path
from typing import Any

from . import corpus as C
from . import plots
from . import trainer as TR
from .adapter import FULL_ADAPTER, FULL_BACKBONE, AdapterConfig, enumerate_param_count, param_count
from .backbone import BackboneConfig, init_backbone
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import (AnnotationError, ArgumentError, CheckpointFormatError, ConfigurationError,
                     DimensionError, LengthError, QueryError, ValidationError, VocabularyError)
from .probe import probe_arm

log = logging.getLogger("kadapter")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2
INPUT_ERRORS = (ArgumentError, ConfigurationError, ValidationError, VocabularyError, LengthError,
                AnnotationError, QueryError, DimensionError, CheckpointFormatError,
                FileNotFoundError, IsADirectoryError, json.JSONDecodeError)
LOCK_NAME = ".kadapter.lock"

FINETUNE_TASKS = ("typing", "relation", "qa", "multichoice")


class InputError(ConfigurationError):
    pass


# -- run configuration -------------------------------------------------------

DATA_KEYS = {"corpus": None, "kb": None, "queries": None, "vocab": None,
             "n_examples": 1000, "n_entities": 320, "n_relations": 8, "seed": 42}
TOP_KEYS = {"task", "backbone", "adapter", "train", "data", "backbone_checkpoint",
            "backbone_seed", "adapter_name", "out_dir"}


def _section(raw: dict, cls, name: str) -> dict:
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise InputError(f"unknown key(s) in '{name}': {sorted(unknown)}")
    return raw


def resolve_config(raw: dict[str, Any], overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    """Validate a RunConfig document and fill in every default.

    Unknown keys anywhere are rejected. ``KADAPTER_SEED`` in the environment
    replaces ``train.seed``.
    """
    if not isinstance(raw, dict):
        raise InputError("config must be a JSON object")
    unknown = set(raw) - TOP_KEYS
    if unknown:
        raise InputError(f"unknown config key(s): {sorted(unknown)}")
    data = dict(raw.get("data") or {})
    bad = set(data) - set(DATA_KEYS)
    if bad:
        raise InputError(f"unknown key(s) in 'data': {sorted(bad)}")
    train = dict(_section(raw.get("train") or {}, TR.TrainConfig, "train"))
    train.update(overrides or {})
    env_seed = os.environ.get("KADAPTER_SEED")
    if env_seed is not None:
        try:
            train["seed"] = int(env_seed)
        except ValueError:
            raise InputError(f"KADAPTER_SEED must be an integer, got {env_seed!r}") from None
    backbone = BackboneConfig(**_section(raw.get("backbone") or {}, BackboneConfig, "backbone"))
    adapter = AdapterConfig(**_section(raw.get("adapter") or {}, AdapterConfig, "adapter"))
    tcfg = TR.TrainConfig(**train)
    return {
        "task": raw.get("task"),
        "backbone": backbone.to_dict(),
        "adapter": adapter.to_dict(),
        "train": tcfg.to_dict(),
        "data": {**DATA_KEYS, **data},
        "backbone_checkpoint": raw.get("backbone_checkpoint"),
        "backbone_seed": int(raw.get("backbone_seed", 42)),
        "adapter_name": raw.get("adapter_name"),
        "out_dir": raw.get("out_dir"),
    }


def load_config(path, out_dir: str | None = None, overrides: dict[str, Any] | None = None) -> dict[str, Any]:
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if out_dir is not None:
        raw["out_dir"] = out_dir
    cfg = resolve_config(raw, overrides)
    if not cfg["out_dir"]:
        raise InputError("no output directory: set 'out_dir' or pass --out")
    return cfg


def _require_files(*paths) -> None:
    for p in paths:
        if p is None:
            continue
        if not Path(p).is_file():
            raise InputError(f"input file not found: {p}")


@contextmanager
def locked_out_dir(out_dir):
    """Create ``out_dir`` and hold an exclusive lock file in it for the run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise InputError(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_config(out: Path, cfg: dict[str, Any]) -> None:
    # the output location is not part of the run, so reruns elsewhere stay byte-identical
    _write_json(out / "config.json", {k: v for k, v in cfg.items() if k != "out_dir"})


def _flat_metrics(metrics: dict[str, Any]) -> dict[str, float]:
    return {k: float(v) for k, v in metrics.items()}


def _vocab(cfg) -> C.Vocab:
    path = cfg["data"]["vocab"]
    return C.Vocab.load(path) if path else C.Vocab.default()


def _backbone(cfg) -> Checkpoint:
    if cfg["backbone_checkpoint"]:
        return load_checkpoint(cfg["backbone_checkpoint"])
    bcfg = BackboneConfig(**cfg["backbone"])
    return Checkpoint.from_params(init_backbone(bcfg, cfg["backbone_seed"]),
                                  {"kind": "backbone", "backbone_config": bcfg.to_dict(),
                                   "seed": cfg["backbone_seed"]})


def _write_training_outputs(out: Path, history, title: str) -> None:
    (out / "loss.tsv").write_text("step\tlr\tloss\n" + TR.format_loss_log(history), encoding="utf-8")
    plots.loss_curve(history, out / "loss.png", title)


def _finetune_dataset(cfg) -> TR.TaskDataset:
    task, data = cfg["task"], cfg["data"]
    if task not in FINETUNE_TASKS:
        raise InputError(f"fine-tuning task must be one of {FINETUNE_TASKS}, got {task!r}")
    kb = None
    if task != "multichoice":
        if not data["kb"]:
            raise InputError(f"task {task!r} needs data.kb (written by 'gen fact')")
        kb = C.KnowledgeBase.from_dict(json.loads(Path(data["kb"]).read_text(encoding="utf-8")))
    seed, n = data["seed"], data["n_examples"]
    if task == "typing":
        examples, n_labels, names = C.gen_typing_examples(kb, seed), kb.n_types, kb.relation_names
    elif task == "relation":
        examples, n_labels, names = C.gen_relation_examples(kb, seed, n), kb.n_types, kb.relation_names
    elif task == "qa":
        examples, n_labels, names = C.gen_qa_examples(kb, seed, n), 0, []
    else:
        examples, n_labels, names = C.gen_multichoice_examples(seed, n), 0, []
    parts = C.split(examples)
    return TR.TaskDataset(task, parts["train"], parts["dev"], n_labels, list(names))


def _adapter_list(args) -> list[str]:
    if getattr(args, "no_adapters", False) or not getattr(args, "adapters", None):
        return []
    return [p for p in args.adapters.split(",") if p]


# -- commands ----------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    vocab = C.Vocab.default()
    if args.kind == "cloze":
        _require_files(args.kb)
    with locked_out_dir(out):
        vocab.save(out / "vocab.txt")
        if args.kind == "fact":
            kb = C.gen_kb(args.seed, args.entities, args.relations)
            examples = C.gen_fact_corpus(args.seed, args.entities, args.relations, args.examples)
            C.write_fact_jsonl(examples, kb.relation_names, out / "facts.jsonl")
            C.write_labels(kb.relation_names, out / "labels.txt")
            _write_json(out / "kb.json", kb.to_dict())
            print(f"facts.jsonl\t{len(examples)}\nlabels.txt\t{len(kb.relation_names)}\n"
                  f"entities\t{args.entities}")
        elif args.kind == "dep":
            examples = C.gen_dep_corpus(args.seed, args.examples)
            C.write_conllu(examples, out / "deps.conllu")
            print(f"deps.conllu\t{len(examples)}")
        else:
            kb = C.KnowledgeBase.from_dict(json.loads(Path(args.kb).read_text(encoding="utf-8")))
            records = C.gen_cloze_queries(kb, args.seed, args.queries)
            with open(out / "queries.jsonl", "w", encoding="utf-8") as fh:
                for rec in records:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            print(f"queries.jsonl\t{len(records)}\nrelations\t{len({r['relation'] for r in records})}")
    return EXIT_OK


def _load_pretrain_corpus(cfg, vocab):
    task, path = cfg["task"], cfg["data"]["corpus"]
    if task == "fact":
        examples, labels = C.load_fact_jsonl(path, vocab)
        return examples, labels
    return C.load_conllu(path, vocab), None


def cmd_pretrain(args) -> int:
    overrides = {"total_steps": args.steps} if args.steps is not None else None
    cfg = load_config(args.config, args.out, overrides)
    if cfg["task"] not in ("fact", "dep"):
        raise InputError(f"pre-training task must be 'fact' or 'dep', got {cfg['task']!r}")
    if not cfg["data"]["corpus"]:
        raise InputError("pre-training needs data.corpus")
    _require_files(cfg["data"]["corpus"], cfg["data"]["vocab"], cfg["backbone_checkpoint"])
    vocab = _vocab(cfg)
    examples, labels = _load_pretrain_corpus(cfg, vocab)
    parts = C.split(examples)
    backbone = _backbone(cfg)
    tcfg = TR.TrainConfig(**cfg["train"])
    acfg = AdapterConfig(**cfg["adapter"])
    name = cfg["adapter_name"] or ("facadapter" if cfg["task"] == "fact" else "linadapter")
    kind = "factual" if cfg["task"] == "fact" else "linguistic"
    with locked_out_dir(cfg["out_dir"]) as out:
        _write_config(out, cfg)
        ckpt, history = TR.pretrain_adapter(
            backbone, acfg, cfg["task"], parts["train"], tcfg, vocab=vocab, name=name,
            n_labels=len(labels) if labels else None, knowledge_kind=kind, label_names=labels)
        metrics = TR.evaluate_pretrain(backbone, ckpt, cfg["task"], parts["dev"], vocab) if parts["dev"] else {}
        save_checkpoint(ckpt, out / "adapter.ckpt")
        save_checkpoint(backbone, out / "backbone.ckpt")
        _write_json(out / "metrics.json", _flat_metrics(metrics))
        _write_training_outputs(out, history, f"{cfg['task']} adapter pre-training")
    print(json.dumps(_flat_metrics(metrics), sort_keys=True))
    return EXIT_OK


def cmd_finetune(args) -> int:
    overrides = {"total_steps": args.steps} if args.steps is not None else None
    cfg = load_config(args.config, args.out, overrides)
    adapters = _adapter_list(args)
    _require_files(cfg["data"]["kb"], cfg["data"]["vocab"], cfg["backbone_checkpoint"], *adapters)
    dataset = _finetune_dataset(cfg)
    vocab = _vocab(cfg)
    backbone = _backbone(cfg)
    adapter_ckpts = [load_checkpoint(p) for p in adapters]
    TR.build_model(backbone, adapter_ckpts)  # dimension checks before touching out_dir
    tcfg = TR.TrainConfig(**cfg["train"])
    with locked_out_dir(cfg["out_dir"]) as out:
        cfg_out = {**cfg, "adapters": adapters}
        _write_config(out, cfg_out)
        model, metrics, history = TR.finetune(backbone, adapter_ckpts, dataset.task, dataset, tcfg, vocab=vocab)
        save_checkpoint(model, out / "model.ckpt")
        _write_json(out / "metrics.json", _flat_metrics(metrics))
        _write_training_outputs(out, history, f"{dataset.task} fine-tuning")
    print(json.dumps(_flat_metrics(metrics), sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config, args.out)
    _require_files(args.checkpoint, cfg["data"]["kb"], cfg["data"]["vocab"])
    model = load_checkpoint(args.checkpoint)
    if model.metadata.get("kind") != "model":
        raise InputError(f"{args.checkpoint} is not a fine-tuned model checkpoint")
    cfg["task"] = model.metadata["task"]
    dataset = _finetune_dataset(cfg)
    vocab = _vocab(cfg)
    bcfg = BackboneConfig(**model.metadata["backbone_config"])
    spec = TR.ModelSpec(bcfg, [(a["name"], AdapterConfig(**a["adapter_config"]))
                               for a in model.metadata["adapters"]])
    params = model.to_params("")
    rows = TR.encode_examples(dataset.task, dataset.dev, vocab, min(cfg["train"]["max_seq_len"], bcfg.max_len))
    metrics = TR.evaluate(dataset.task, params, spec, rows, vocab.pad_id, dataset.task)
    with locked_out_dir(cfg["out_dir"]) as out:
        _write_json(out / "metrics.json", _flat_metrics(metrics))
    print(json.dumps(_flat_metrics(metrics), sort_keys=True))
    return EXIT_OK


def cmd_probe(args) -> int:
    overrides = {"total_steps": args.steps} if args.steps is not None else None
    cfg = load_config(args.config, args.out, overrides)
    data = cfg["data"]
    adapters = _adapter_list(args)
    if not data["corpus"] or not data["queries"]:
        raise InputError("probing needs data.corpus (masking text) and data.queries")
    _require_files(data["corpus"], data["queries"], data["vocab"], cfg["backbone_checkpoint"], *adapters)
    vocab = _vocab(cfg)
    examples, labels = C.load_fact_jsonl(data["corpus"], vocab)
    queries, _ = C.load_queries(data["queries"], vocab, labels)
    candidates = sorted({vocab.word_id(w) for ex in examples for w in ex.tokens if w.startswith("e")
                         and w[1:].isdigit()} | {q.gold for q in queries})
    backbone = _backbone(cfg)
    adapter_ckpts = [load_checkpoint(p) for p in adapters]
    tcfg = TR.TrainConfig(**cfg["train"])
    with locked_out_dir(cfg["out_dir"]) as out:
        _write_config(out, {**cfg, "adapters": adapters})
        base, base_head, _ = probe_arm(backbone, [], examples, queries, vocab, tcfg, candidates)
        results = {"p_at_1_backbone": base["p_at_1"]}
        save_checkpoint(base_head, out / "mlm_backbone.ckpt")
        if adapter_ckpts:
            arm, arm_head, _ = probe_arm(backbone, adapter_ckpts, examples, queries, vocab, tcfg, candidates)
            results["p_at_1_k_adapter"] = arm["p_at_1"]
            save_checkpoint(arm_head, out / "mlm_k_adapter.ckpt")
        results.update(n_queries=float(len(queries)), n_candidates=float(len(candidates)),
                       n_relations=base["n_relations"])
        _write_json(out / "metrics.json", results)
        plots.probe_bars({k[len("p_at_1_"):]: v for k, v in results.items() if k.startswith("p_at_1_")},
                         out / "probe.png")
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_forget(args) -> int:
    overrides = {"total_steps": args.steps} if args.steps is not None else None
    cfg = load_config(args.config, args.out, overrides)
    _require_files(cfg["backbone_checkpoint"])
    data = cfg["data"]
    (ea, na), (eb, nb) = C.gen_task_pair(data["seed"], data["n_entities"], data["n_relations"],
                                         data["n_examples"])
    sa, sb = C.split(ea), C.split(eb)
    task_a = TR.TaskDataset("fact", sa["train"], sa["dev"], len(na), na)
    task_b = TR.TaskDataset("fact", sb["train"], sb["dev"], len(nb), nb)
    backbone = _backbone(cfg)
    tcfg = TR.TrainConfig(**cfg["train"])
    with locked_out_dir(cfg["out_dir"]) as out:
        _write_config(out, cfg)
        report = TR.forgetting_experiment(backbone, task_a, task_b, tcfg, AdapterConfig(**cfg["adapter"]),
                                          vocab=_vocab(cfg))
        _write_json(out / "forget.json", report)
        flat = {f"{arm}_{k}": float(v) for arm in ("full_model", "k_adapter")
                for k, v in report[arm].items()}
        _write_json(out / "metrics.json", flat)
        plots.forgetting_bars(report, out / "forgetting.png")
    print(json.dumps({k: v for k, v in flat.items() if k.endswith("forgetting")}, sort_keys=True))
    return EXIT_OK


def cmd_paramcount(args) -> int:
    if args.full_config:
        acfg, bcfg = FULL_ADAPTER, FULL_BACKBONE
    elif args.config:
        cfg = load_config(args.config, out_dir=".")
        acfg, bcfg = AdapterConfig(**cfg["adapter"]), BackboneConfig(**cfg["backbone"])
    else:
        acfg, bcfg = AdapterConfig(), BackboneConfig()
    formula = param_count(acfg, bcfg)
    counted = enumerate_param_count(acfg, bcfg)
    print(f"formula count: {formula}")
    print(f"enumerated count: {counted}")
    print(f"matches enumeration: {str(formula == counted).lower()}")
    return EXIT_OK if formula == counted else EXIT_RUNTIME


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="kadapter", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write synthetic corpora")
    g.add_argument("kind", choices=("fact", "dep", "cloze"))
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--entities", type=int, default=320)
    g.add_argument("--relations", type=int, default=8)
    g.add_argument("--examples", type=int, default=2000)
    g.add_argument("--queries", type=int, default=200)
    g.add_argument("--kb", help="kb.json for 'gen cloze'")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    def config_cmd(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--steps", type=int, help="override train.total_steps")
        p.set_defaults(func=func)
        return p

    config_cmd("pretrain", cmd_pretrain, "pre-train one adapter")
    for name, func, help_ in (("finetune", cmd_finetune, "fine-tune on a downstream task"),
                              ("probe", cmd_probe, "cloze probe")):
        p = config_cmd(name, func, help_)
        grp = p.add_mutually_exclusive_group()
        grp.add_argument("--adapters", help="comma-separated adapter checkpoints")
        grp.add_argument("--no-adapters", action="store_true", help="backbone-only run")
    config_cmd("forget", cmd_forget, "forgetting experiment")

    e = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    pc = sub.add_parser("paramcount", help="adapter parameter count")
    pc.add_argument("--full-config", "--paper-config", dest="full_config", action="store_true",
                    help="42M-scale reference configuration")
    pc.add_argument("--config")
    pc.set_defaults(func=cmd_paramcount)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("run failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
