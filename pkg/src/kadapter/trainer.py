"""Optimisation loop, freezing, adapter pre-training, fine-tuning and the
forgetting experiment."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import ndgrad as nd
from . import tasks as T
from .adapter import AdapterConfig, adapter_forward, fuse, init_adapter
from .backbone import BackboneConfig, Params, encode
from .checkpoint import Checkpoint
from .corpus import (DepExample, FactExample, Vocab, collate, encode_with_markers)
from .errors import ConfigurationError, DimensionError
from .ndgrad import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 0
    total_steps: int = 500
    batch_size: int = 32
    max_seq_len: int = 64
    seed: int = 42
    freeze_prefixes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        object.__setattr__(self, "freeze_prefixes", tuple(self.freeze_prefixes))
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be at least 1")
        if self.total_steps < 0 or self.warmup_steps < 0:
            raise ConfigurationError("step counts must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps {self.warmup_steps} exceeds total_steps {self.total_steps}")

    def replace(self, **changes) -> "TrainConfig":
        d = asdict(self)
        d.update(changes)
        return TrainConfig(**d)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["freeze_prefixes"] = list(self.freeze_prefixes)
        return d


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``cfg.lr``, then linear decay to 0 at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span <= 0:
        return cfg.lr if step <= cfg.total_steps else 0.0
    return cfg.lr * max(0.0, (cfg.total_steps - step) / span)


def adamw_step(params: dict[str, Tensor], state: dict[str, dict[str, np.ndarray]],
               cfg: TrainConfig, step: int, lr: float | None = None) -> None:
    """One AdamW update (1-based ``step``) on every parameter that holds a gradient."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    for name, p in params.items():
        if p.grad is None or not p.requires_grad:
            continue
        s = state.get(name)
        if s is None:
            s = state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
        g = p.grad
        m, v = s["m"], s["v"]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        denom = np.sqrt(v / (1 - b2 ** step))
        denom += cfg.eps
        if cfg.weight_decay:
            p.data *= 1.0 - lr * cfg.weight_decay
        p.data -= (lr / (1 - b1 ** step)) * m / denom


def apply_freeze(params: Params, freeze_prefixes: Sequence[str]) -> None:
    prefixes = tuple(freeze_prefixes)
    for name, p in params.items():
        p.requires_grad = not (prefixes and name.startswith(prefixes))
        p.grad = None


def params_digest(params: Params, prefix: str = "") -> dict[str, bytes]:
    """Raw bytes of every parameter under ``prefix`` (for byte-level comparisons)."""
    return {k: p.data.tobytes() for k, p in params.items() if k.startswith(prefix)}


# -- model wiring ------------------------------------------------------------

@dataclass
class ModelSpec:
    """Backbone plus the ordered adapters whose outputs are fused."""

    backbone: BackboneConfig
    adapters: list[tuple[str, AdapterConfig]] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        if not self.adapters:
            return self.backbone.hidden
        return sum(self.backbone.hidden + a.up_dim for _, a in self.adapters)


def features(params: Params, spec: ModelSpec, batch) -> Tensor:
    stack = encode(batch, spec.backbone, params)
    if not spec.adapters:
        return stack.last
    return fuse([adapter_forward(stack, cfg, params, name) for name, cfg in spec.adapters])


HEAD_KIND = {"fact": "relation_pretrain", "dep": "dep", "typing": "typing",
             "relation": "relation_ft", "qa": "span_qa", "multichoice": "multichoice"}
ENCODING = {"fact": "fact_pretrain", "dep": "dep_pretrain", "typing": "typing",
            "relation": "relation_ft", "qa": "span_qa", "multichoice": "multichoice"}
METRIC_KEYS = {
    "fact": ("accuracy",),
    "dep": ("head_accuracy",),
    "typing": ("precision", "recall", "micro_f1", "macro_f1", "strict_accuracy"),
    "relation": ("accuracy", "micro_f1"),
    "qa": ("em", "f1"),
    "multichoice": ("accuracy",),
}


def head_outputs(task: str, n_labels: int, spec: ModelSpec) -> int:
    if task == "dep":
        return spec.backbone.max_len + 1
    return n_labels


def encode_examples(task: str, examples: Sequence, vocab: Vocab, max_len: int) -> list:
    return [encode_with_markers(ex, ENCODING[task], vocab, max_len) for ex in examples]


def _logits(task: str, params: Params, spec: ModelSpec, rows: Sequence, pad_id: int, head: str):
    if task == "multichoice":
        n_choices = len(rows[0])
        feats = [features(params, spec, collate([r[j] for r in rows], pad_id)) for j in range(n_choices)]
        return T.multichoice_head(feats, params, head), None
    batch = collate(rows, pad_id)
    f = features(params, spec, batch)
    ann = batch.annotations
    if task == "fact":
        return T.relation_pretrain_head(f, ann["spans"], params, head), batch
    if task == "dep":
        return T.dep_head_prediction(f, params, head), batch
    if task == "typing":
        return T.entity_typing_head(f, ann["at_index"], params, head), batch
    if task == "relation":
        return T.relation_ft_head(f, ann["at_index"], ann["hash_index"], params, head), batch
    if task == "qa":
        return T.span_qa_head(f, params, head, segment_mask=ann["segment"]), batch
    raise ConfigurationError(f"unknown task {task!r}")


def task_loss(task: str, params: Params, spec: ModelSpec, rows: Sequence, pad_id: int, head: str) -> Tensor:
    out, batch = _logits(task, params, spec, rows, pad_id, head)
    if task == "multichoice":
        return nd.cross_entropy(out, [r[0].annotations["label"] for r in rows])
    ann = batch.annotations
    if task in ("fact", "relation"):
        return nd.cross_entropy(out, ann["label"])
    if task == "dep":
        return T.dep_loss(out, ann["dep_heads"], ann["length"])
    if task == "typing":
        return nd.bce_with_logits(out, np.asarray(ann["labels"], dtype=np.float64))
    start, end = out
    return T.span_qa_loss(start, end, ann["answer_span"], ann["segment"])


def evaluate(task: str, params: Params, spec: ModelSpec, rows: Sequence, pad_id: int, head: str,
             vocab: Vocab | None = None, batch_size: int = 64) -> dict[str, float]:
    """Dev-set metrics for ``task``; keys are exactly ``METRIC_KEYS[task]``."""
    if not rows:
        return {k: 0.0 for k in METRIC_KEYS[task]}
    correct = total = 0
    preds, golds = [], []
    ems, f1s = [], []
    for i in range(0, len(rows), batch_size):
        chunk = rows[i:i + batch_size]
        out, batch = _logits(task, params, spec, chunk, pad_id, head)
        if task == "multichoice":
            pred = out.data.argmax(axis=1)
            gold = np.array([r[0].annotations["label"] for r in chunk])
            correct += int((pred == gold).sum())
            total += len(chunk)
        elif task in ("fact", "relation"):
            pred = out.data.argmax(axis=1)
            correct += int((pred == np.asarray(batch.annotations["label"])).sum())
            total += len(chunk)
        elif task == "dep":
            heads = np.asarray(batch.annotations["dep_heads"])
            keep = heads != -1
            correct += int(((out.data.argmax(axis=-1) == heads) & keep).sum())
            total += int(keep.sum())
        elif task == "typing":
            preds.append(out.data > 0.0)
            golds.append(np.asarray(batch.annotations["labels"], dtype=bool))
        else:
            start, end = out
            seg = np.asarray(batch.annotations["segment"])
            for j, (gs, ge) in enumerate(batch.annotations["answer_span"]):
                s, e = T.decode_span(start.data[j], end.data[j], seg[j])
                ids = batch.token_ids[j]
                em, f1 = T.metric_em_f1(ids[s:e + 1].tolist(), ids[gs:ge + 1].tolist())
                ems.append(em)
                f1s.append(f1)
    if task == "typing":
        m = T.metric_typing(np.concatenate(preds), np.concatenate(golds))
        return {k: m[k] for k in METRIC_KEYS["typing"]}
    if task == "qa":
        return {"em": float(np.mean(ems)), "f1": float(np.mean(f1s))}
    acc = correct / total if total else 0.0
    if task == "dep":
        return {"head_accuracy": acc}
    if task == "relation":
        return {"accuracy": acc, "micro_f1": acc}
    return {"accuracy": acc}


def train_loop(params: Params, loss_fn: Callable[[list], Tensor], rows: Sequence,
               cfg: TrainConfig, on_step: Callable[[int, float, float], None] | None = None
               ) -> list[tuple[int, float, float]]:
    """Minibatch AdamW over ``rows``; returns ``(step, lr, loss)`` per step.

    Only parameters with ``requires_grad`` are touched. Batches are drawn
    without replacement within a step from a generator seeded by ``cfg.seed``.
    """
    rng = np.random.default_rng([cfg.seed, 11])
    trainable = {k: p for k, p in params.items() if p.requires_grad}
    state: dict[str, dict[str, np.ndarray]] = {}
    history = []
    bs = min(cfg.batch_size, len(rows))
    for step in range(cfg.total_steps):
        idx = rng.choice(len(rows), size=bs, replace=False)
        nd.zero_grad(trainable.values())
        loss = loss_fn([rows[i] for i in idx])
        nd.backward(loss)
        lr = lr_at(step, cfg)
        adamw_step(trainable, state, cfg, step + 1, lr)
        history.append((step, lr, float(loss.data)))
        if on_step is not None:
            on_step(step, lr, float(loss.data))
    nd.zero_grad(params.values())
    return history


def format_loss_log(history: Sequence[tuple[int, float, float]]) -> str:
    return "".join(f"{s}\t{lr:.10g}\t{loss:.10g}\n" for s, lr, loss in history)


# -- pre-training ------------------------------------------------------------

def _backbone_from(ckpt: Checkpoint) -> tuple[BackboneConfig, Params]:
    meta = ckpt.metadata.get("backbone_config")
    if meta is None:
        raise ConfigurationError("checkpoint carries no backbone_config metadata")
    return BackboneConfig(**meta), ckpt.to_params("backbone.")


def adapter_spec_from(ckpt: Checkpoint) -> tuple[str, AdapterConfig]:
    meta = ckpt.metadata
    if meta.get("kind") != "adapter":
        raise ConfigurationError("not an adapter checkpoint")
    return meta["name"], AdapterConfig(**meta["adapter_config"])


def pretrain_adapter(backbone_ckpt: Checkpoint, adapter_cfg: AdapterConfig, task: str,
                     corpus: Sequence, cfg: TrainConfig, *, vocab: Vocab | None = None,
                     name: str | None = None, n_labels: int | None = None,
                     knowledge_kind: str | None = None, label_names: Sequence[str] | None = None,
                     on_step=None) -> tuple[Checkpoint, list]:
    """Train one adapter plus its pre-training head against a frozen backbone.

    Returns the adapter checkpoint (``adapter.<name>.*`` and
    ``head.pretrain.*``) and the per-step loss history.
    """
    expected = {"fact": FactExample, "dep": DepExample}
    if task not in expected:
        raise ConfigurationError(f"pre-training task must be 'fact' or 'dep', got {task!r}")
    if not corpus or not all(isinstance(ex, expected[task]) for ex in corpus):
        raise ConfigurationError(f"corpus does not match task {task!r}")
    if "backbone." not in cfg.freeze_prefixes:
        cfg = cfg.replace(freeze_prefixes=tuple(cfg.freeze_prefixes) + ("backbone.",))
    vocab = vocab or Vocab.default()
    name = name or {"fact": "fac", "dep": "lin"}[task]
    knowledge_kind = knowledge_kind or {"fact": "factual", "dep": "linguistic"}[task]
    bcfg, params = _backbone_from(backbone_ckpt)
    adapter_cfg.validate_against(bcfg)
    spec = ModelSpec(bcfg, [(name, adapter_cfg)])
    if task == "fact":
        n_labels = n_labels or (max(ex.relation for ex in corpus) + 1)
    n_out = head_outputs(task, n_labels or 0, spec)
    params.update(init_adapter(name, adapter_cfg, bcfg, seed=cfg.seed))
    params.update(T.init_head(HEAD_KIND[task], "pretrain", spec.feature_dim, n_out, seed=cfg.seed + 1))
    apply_freeze(params, cfg.freeze_prefixes)
    max_len = min(cfg.max_seq_len, bcfg.max_len)
    rows = encode_examples(task, corpus, vocab, max_len)
    history = train_loop(params, lambda b: task_loss(task, params, spec, b, vocab.pad_id, "pretrain"),
                         rows, cfg, on_step)
    meta = {"kind": "adapter", "name": name, "knowledge_kind": knowledge_kind, "task": task,
            "adapter_config": adapter_cfg.to_dict(), "backbone_config": bcfg.to_dict(),
            "n_labels": n_labels, "step": cfg.total_steps, "seed": cfg.seed,
            "train_config": cfg.to_dict()}
    if label_names is not None:
        meta["labels"] = list(label_names)
    ckpt = Checkpoint.from_params(params, meta, prefixes=(f"adapter.{name}.", "head.pretrain."))
    return ckpt, history


def evaluate_pretrain(backbone_ckpt: Checkpoint, adapter_ckpt: Checkpoint, task: str,
                      examples: Sequence, vocab: Vocab | None = None) -> dict[str, float]:
    vocab = vocab or Vocab.default()
    bcfg, params = _backbone_from(backbone_ckpt)
    name, acfg = adapter_spec_from(adapter_ckpt)
    params.update(adapter_ckpt.to_params(""))
    rows = encode_examples(task, examples, vocab, bcfg.max_len)
    return evaluate(task, params, ModelSpec(bcfg, [(name, acfg)]), rows, vocab.pad_id, "pretrain")


# -- fine-tuning -------------------------------------------------------------

@dataclass
class TaskDataset:
    task: str
    train: list
    dev: list
    n_labels: int = 0
    label_names: list[str] = field(default_factory=list)


def build_model(backbone_ckpt: Checkpoint, adapter_ckpts: Sequence[Checkpoint]) -> tuple[ModelSpec, Params]:
    bcfg, params = _backbone_from(backbone_ckpt)
    adapters = []
    for ck in adapter_ckpts:
        name, acfg = adapter_spec_from(ck)
        other = BackboneConfig(**ck.metadata["backbone_config"])
        if other.hidden != bcfg.hidden or other.n_layers != bcfg.n_layers:
            raise DimensionError(
                f"adapter {name!r} was built for hidden={other.hidden}, layers={other.n_layers}; "
                f"backbone has hidden={bcfg.hidden}, layers={bcfg.n_layers}")
        acfg.validate_against(bcfg)
        if any(n == name for n, _ in adapters):
            raise ConfigurationError(f"two adapters named {name!r}")
        adapters.append((name, acfg))
        params.update(ck.to_params(f"adapter.{name}."))
    return ModelSpec(bcfg, adapters), params


def finetune(backbone_ckpt: Checkpoint, adapter_ckpts: Sequence[Checkpoint], task: str,
             dataset: TaskDataset, cfg: TrainConfig, *, vocab: Vocab | None = None,
             on_step=None) -> tuple[Checkpoint, dict[str, float], list]:
    """Fine-tune backbone + task head with every adapter frozen.

    An empty adapter list gives the backbone-only baseline. Returns the full
    model checkpoint, dev metrics and the loss history.
    """
    if task not in HEAD_KIND or task in ("fact", "dep"):
        raise ConfigurationError(f"unknown fine-tuning task {task!r}")
    vocab = vocab or Vocab.default()
    spec, params = build_model(backbone_ckpt, adapter_ckpts)
    freeze = tuple(cfg.freeze_prefixes) + tuple(f"adapter.{n}." for n, _ in spec.adapters)
    cfg = cfg.replace(freeze_prefixes=tuple(dict.fromkeys(freeze)))
    params.update(T.init_head(HEAD_KIND[task], task, spec.feature_dim,
                              head_outputs(task, dataset.n_labels, spec), seed=cfg.seed + 1))
    head_w = params[next(k for k in params if k.startswith(f"head.{task}."))]
    if head_w.shape[0] not in (spec.feature_dim, 2 * spec.feature_dim):
        raise DimensionError(f"head width {head_w.shape} incompatible with features {spec.feature_dim}")
    apply_freeze(params, cfg.freeze_prefixes)
    max_len = min(cfg.max_seq_len, spec.backbone.max_len)
    train_rows = encode_examples(task, dataset.train, vocab, max_len)
    dev_rows = encode_examples(task, dataset.dev, vocab, max_len)
    history = train_loop(params, lambda b: task_loss(task, params, spec, b, vocab.pad_id, task),
                         train_rows, cfg, on_step)
    metrics = evaluate(task, params, spec, dev_rows, vocab.pad_id, task)
    meta = {"kind": "model", "task": task, "backbone_config": spec.backbone.to_dict(),
            "adapters": [{"name": n, "adapter_config": a.to_dict()} for n, a in spec.adapters],
            "n_labels": dataset.n_labels, "step": cfg.total_steps, "seed": cfg.seed,
            "train_config": cfg.to_dict()}
    return Checkpoint.from_params(params, meta), metrics, history


# -- forgetting ---------------------------------------------------------------

def forgetting_experiment(backbone_ckpt: Checkpoint, task_a: TaskDataset, task_b: TaskDataset,
                          cfg: TrainConfig, adapter_cfg: AdapterConfig | None = None,
                          vocab: Vocab | None = None, probe_size: int = 8) -> dict[str, Any]:
    """Sequential full-model training versus one adapter per task.

    Both tasks are pooled-span relation classification with their own heads.
    The full-model arm retrains every parameter on B after A and measures how
    much dev accuracy on A drops. The adapter arm freezes the backbone, trains
    adapter A on A and adapter B on B, and checks that adapter A's outputs on
    a fixed probe batch are bit-identical before and after B.
    """
    overlap = set(task_a.label_names) & set(task_b.label_names)
    if overlap:
        raise ConfigurationError(f"task label spaces overlap: {sorted(overlap)}")
    vocab = vocab or Vocab.default()
    adapter_cfg = adapter_cfg or AdapterConfig()
    bcfg, base = _backbone_from(backbone_ckpt)
    max_len = min(cfg.max_seq_len, bcfg.max_len)
    enc = {k: encode_examples("fact", getattr(t, s), vocab, max_len)
           for k, t, s in (("a_train", task_a, "train"), ("a_dev", task_a, "dev"),
                           ("b_train", task_b, "train"), ("b_dev", task_b, "dev"))}
    pad = vocab.pad_id

    def run(params, spec, head, rows):
        return train_loop(params, lambda b: task_loss("fact", params, spec, b, pad, head), rows, cfg)

    def acc(params, spec, head, rows):
        return evaluate("fact", params, spec, rows, pad, head)["accuracy"]

    # arm 1: every parameter trainable, shared backbone
    spec = ModelSpec(bcfg)
    params = {k: Tensor(v.data.copy()) for k, v in base.items()}
    params.update(T.init_head("relation_pretrain", "task_a", bcfg.hidden, task_a.n_labels, seed=cfg.seed + 1))
    params.update(T.init_head("relation_pretrain", "task_b", bcfg.hidden, task_b.n_labels, seed=cfg.seed + 2))
    apply_freeze(params, ("head.task_b.",))
    run(params, spec, "task_a", enc["a_train"])
    a_before = acc(params, spec, "task_a", enc["a_dev"])
    apply_freeze(params, ("head.task_a.",))
    run(params, spec, "task_b", enc["b_train"])
    a_after = acc(params, spec, "task_a", enc["a_dev"])
    b_full = acc(params, spec, "task_b", enc["b_dev"])

    # arm 2: frozen backbone, one adapter per task
    params = {k: Tensor(v.data.copy()) for k, v in base.items()}
    params.update(init_adapter("task_a", adapter_cfg, bcfg, seed=cfg.seed))
    params.update(init_adapter("task_b", adapter_cfg, bcfg, seed=cfg.seed + 3))
    d = bcfg.hidden + adapter_cfg.up_dim
    params.update(T.init_head("relation_pretrain", "task_a", d, task_a.n_labels, seed=cfg.seed + 1))
    params.update(T.init_head("relation_pretrain", "task_b", d, task_b.n_labels, seed=cfg.seed + 2))
    spec_a = ModelSpec(bcfg, [("task_a", adapter_cfg)])
    spec_b = ModelSpec(bcfg, [("task_b", adapter_cfg)])
    apply_freeze(params, ("backbone.", "adapter.task_b.", "head.task_b."))
    run(params, spec_a, "task_a", enc["a_train"])
    ka_before = acc(params, spec_a, "task_a", enc["a_dev"])
    probe = collate(enc["a_dev"][:probe_size], pad)
    out_before = features(params, spec_a, probe).data.tobytes()
    bytes_before = params_digest(params, "adapter.task_a.")
    apply_freeze(params, ("backbone.", "adapter.task_a.", "head.task_a."))
    run(params, spec_b, "task_b", enc["b_train"])
    ka_after = acc(params, spec_a, "task_a", enc["a_dev"])
    kb = acc(params, spec_b, "task_b", enc["b_dev"])
    outputs_identical = features(params, spec_a, probe).data.tobytes() == out_before
    params_identical = params_digest(params, "adapter.task_a.") == bytes_before

    return {
        "full_model": {"dev_a_before": a_before, "dev_a_after": a_after,
                       "forgetting": a_before - a_after, "dev_b": b_full},
        "k_adapter": {"dev_a_before": ka_before, "dev_a_after": ka_after,
                      "forgetting": ka_before - ka_after, "dev_b": kb,
                      "adapter_a_outputs_identical": outputs_identical,
                      "adapter_a_params_identical": params_identical},
        "task_a": list(task_a.label_names), "task_b": list(task_b.label_names),
        "steps_per_task": cfg.total_steps, "seed": cfg.seed,
    }
