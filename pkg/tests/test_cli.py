import hashlib
import json

import pytest

from kadapter import cli
from kadapter import corpus as C
from kadapter.adapter import AdapterConfig, init_adapter
from kadapter.backbone import BackboneConfig
from kadapter.checkpoint import Checkpoint, load_checkpoint

SMALL_B = {"n_layers": 2, "hidden": 16, "n_heads": 2, "ffn_inner": 32}
SMALL_A = {"injection_layers": [0, 1], "n_inner": 1, "hidden": 8, "n_heads": 2, "down_dim": 8,
           "up_dim": 16, "ffn_inner": 16}


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_config(path, **cfg):
    path.write_text(json.dumps(cfg))
    return str(path)


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["gen", "fact", "--entities", "64", "--relations", "4", "--examples", "300",
                     "--out", str(root / "fact")]) == 0
    assert cli.main(["gen", "dep", "--examples", "120", "--out", str(root / "dep")]) == 0
    assert cli.main(["gen", "cloze", "--kb", str(root / "fact" / "kb.json"), "--queries", "16",
                     "--out", str(root / "cloze")]) == 0
    return root


def pretrain_config(tmp_path, data, task="fact", **extra):
    corpus = data / "fact" / "facts.jsonl" if task == "fact" else data / "dep" / "deps.conllu"
    return write_config(tmp_path / f"{task}.json", task=task, backbone=SMALL_B, adapter=SMALL_A,
                        train={"total_steps": 20, "batch_size": 16}, data={"corpus": str(corpus)}, **extra)


def test_gen_fact_counts_and_determinism(tmp_path, capsys):
    args = ["gen", "fact", "--seed", "42", "--relations", "8", "--examples", "2000"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b")]) == 0
    assert len((tmp_path / "a" / "facts.jsonl").read_text().splitlines()) == 2000
    assert len((tmp_path / "a" / "labels.txt").read_text().splitlines()) == 8
    for name in ("facts.jsonl", "labels.txt", "kb.json", "vocab.txt"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
    assert "facts.jsonl\t2000" in capsys.readouterr().out


def test_gen_dep_trees_validate(tmp_path):
    assert cli.main(["gen", "dep", "--examples", "500", "--out", str(tmp_path)]) == 0
    assert len(C.load_conllu(tmp_path / "deps.conllu")) == 500


def test_gen_cloze_needs_kb(tmp_path):
    assert cli.main(["gen", "cloze", "--kb", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_cloze_queries_load(data):
    queries, _ = C.load_queries(data / "cloze" / "queries.jsonl", C.Vocab.default())
    assert len(queries) == 16


def test_pretrain_writes_outputs(tmp_path, data):
    cfg = pretrain_config(tmp_path, data)
    out = tmp_path / "run"
    assert cli.main(["pretrain", "--config", cfg, "--out", str(out), "--steps", "60"]) == 0
    for name in ("adapter.ckpt", "backbone.ckpt", "config.json", "metrics.json", "loss.tsv", "loss.png"):
        assert (out / name).exists(), name
    lines = (out / "loss.tsv").read_text().splitlines()
    assert lines[0] == "step\tlr\tloss" and len(lines) == 61
    first, last = float(lines[1].split("\t")[2]), float(lines[-1].split("\t")[2])
    assert last < first
    assert set(json.loads((out / "metrics.json").read_text())) == {"accuracy"}
    assert not (out / cli.LOCK_NAME).exists()


def test_pretrain_dep(tmp_path, data):
    cfg = pretrain_config(tmp_path, data, task="dep")
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run"), "--steps", "2"]) == 0
    ck = load_checkpoint(tmp_path / "run" / "adapter.ckpt")
    assert ck.metadata["knowledge_kind"] == "linguistic" and ck.metadata["name"] == "linadapter"


def test_zero_steps_checkpoint_equals_init(tmp_path, data):
    cfg = pretrain_config(tmp_path, data)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run"), "--steps", "0"]) == 0
    ck = load_checkpoint(tmp_path / "run" / "adapter.ckpt")
    init = Checkpoint.from_params(init_adapter("facadapter", AdapterConfig(**SMALL_A),
                                               BackboneConfig(**SMALL_B), seed=42))
    for k, v in init.tensors.items():
        assert ck.tensors[k].tobytes() == v.tobytes()


def test_missing_corpus_is_input_error_with_no_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.json", task="fact", data={"corpus": str(tmp_path / "nope.jsonl")})
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert not (tmp_path / "run").exists()


@pytest.mark.parametrize("bad", [{"tsk": "fact"}, {"task": "fact", "train": {"learning_rate": 1}},
                                 {"task": "fact", "data": {"corpse": "x"}}])
def test_unknown_keys_exit_2(tmp_path, bad):
    cfg = write_config(tmp_path / "c.json", **bad)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run")]) == 2


def test_bad_arguments_exit_2(tmp_path):
    assert cli.main(["pretrain"]) == 2
    assert cli.main(["frobnicate"]) == 2
    (tmp_path / "c.json").write_text("{not json")
    assert cli.main(["pretrain", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 2


def test_runtime_failure_exits_1(tmp_path, data, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli.TR, "pretrain_adapter", boom)
    cfg = pretrain_config(tmp_path, data)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run")]) == 1


def test_busy_out_dir_is_refused(tmp_path, data):
    out = tmp_path / "run"
    out.mkdir()
    (out / cli.LOCK_NAME).write_text("123")
    cfg = pretrain_config(tmp_path, data)
    assert cli.main(["pretrain", "--config", cfg, "--out", str(out), "--steps", "1"]) == 2
    assert not (out / "adapter.ckpt").exists()


def test_rerun_is_hash_identical_and_inputs_untouched(tmp_path, data):
    cfg = pretrain_config(tmp_path, data)
    inputs = {p: sha(p) for p in (data / "fact").iterdir()}
    for run in ("a", "b"):
        assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / run), "--steps", "5"]) == 0
    for name in ("adapter.ckpt", "backbone.ckpt", "metrics.json", "loss.tsv", "loss.png"):
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name), name
    assert inputs == {p: sha(p) for p in (data / "fact").iterdir()}


def test_seed_environment_override(tmp_path, data, monkeypatch):
    cfg = pretrain_config(tmp_path, data)
    monkeypatch.setenv("KADAPTER_SEED", "7")
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run"), "--steps", "0"]) == 0
    assert load_checkpoint(tmp_path / "run" / "adapter.ckpt").metadata["seed"] == 7
    monkeypatch.setenv("KADAPTER_SEED", "x")
    assert cli.main(["pretrain", "--config", cfg, "--out", str(tmp_path / "run2")]) == 2


def test_finetune_and_eval(tmp_path, data):
    pre = pretrain_config(tmp_path, data)
    assert cli.main(["pretrain", "--config", pre, "--out", str(tmp_path / "pre"), "--steps", "3"]) == 0
    cfg = write_config(tmp_path / "ft.json", task="typing",
                       backbone_checkpoint=str(tmp_path / "pre" / "backbone.ckpt"),
                       train={"total_steps": 3}, data={"kb": str(data / "fact" / "kb.json")})
    adapter = str(tmp_path / "pre" / "adapter.ckpt")
    assert cli.main(["finetune", "--config", cfg, "--adapters", adapter, "--out", str(tmp_path / "ft")]) == 0
    metrics = json.loads((tmp_path / "ft" / "metrics.json").read_text())
    assert set(metrics) == {"precision", "recall", "micro_f1", "macro_f1", "strict_accuracy"}
    assert cli.main(["eval", "--config", cfg, "--checkpoint", str(tmp_path / "ft" / "model.ckpt"),
                     "--out", str(tmp_path / "ev")]) == 0
    assert json.loads((tmp_path / "ev" / "metrics.json").read_text()) == metrics
    assert cli.main(["finetune", "--config", cfg, "--no-adapters", "--out", str(tmp_path / "base")]) == 0


def test_finetune_dimension_mismatch_exits_2(tmp_path, data):
    pre = pretrain_config(tmp_path, data)
    assert cli.main(["pretrain", "--config", pre, "--out", str(tmp_path / "pre"), "--steps", "0"]) == 0
    cfg = write_config(tmp_path / "ft.json", task="typing", train={"total_steps": 1},
                       data={"kb": str(data / "fact" / "kb.json")})  # desk backbone, width 64
    assert cli.main(["finetune", "--config", cfg, "--adapters", str(tmp_path / "pre" / "adapter.ckpt"),
                     "--out", str(tmp_path / "ft")]) == 2
    assert not (tmp_path / "ft").exists()


def test_probe_command(tmp_path, data):
    pre = pretrain_config(tmp_path, data)
    assert cli.main(["pretrain", "--config", pre, "--out", str(tmp_path / "pre"), "--steps", "2"]) == 0
    cfg = write_config(tmp_path / "probe.json", backbone_checkpoint=str(tmp_path / "pre" / "backbone.ckpt"),
                       train={"total_steps": 3},
                       data={"corpus": str(data / "fact" / "facts.jsonl"),
                             "queries": str(data / "cloze" / "queries.jsonl")})
    out = tmp_path / "probe"
    assert cli.main(["probe", "--config", cfg, "--adapters", str(tmp_path / "pre" / "adapter.ckpt"),
                     "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert {"p_at_1_backbone", "p_at_1_k_adapter", "n_queries", "n_candidates", "n_relations"} <= set(m)
    assert (out / "probe.png").exists()


def test_forget_command(tmp_path):
    cfg = write_config(tmp_path / "forget.json", backbone=SMALL_B, adapter=SMALL_A, train={"total_steps": 3},
                       data={"n_entities": 64, "n_relations": 4, "n_examples": 120})
    out = tmp_path / "forget"
    assert cli.main(["forget", "--config", cfg, "--out", str(out)]) == 0
    m = json.loads((out / "metrics.json").read_text())
    assert m["k_adapter_forgetting"] == 0.0
    assert (out / "forgetting.png").exists() and (out / "forget.json").exists()


def test_paramcount(capsys):
    assert cli.main(["paramcount", "--full-config"]) == 0
    out = capsys.readouterr().out
    assert "formula count: 49610496" in out and "matches enumeration: true" in out
    assert cli.main(["paramcount"]) == 0
    assert "formula count: 56832" in capsys.readouterr().out
