"""Cloze probing: a masked-token output layer trained on frozen features, and P@1.

The same masking machinery also drives the optional backbone warm-fit, which
trains the backbone itself with a throwaway output layer so that its hidden
states mix information across positions before any adapter is attached.
"""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from . import ndgrad as nd
from .backbone import BackboneConfig, init_backbone
from .checkpoint import Checkpoint
from .corpus import ClozeQuery, EncodedRow, FactExample, Vocab, collate
from .errors import MetricError, QueryError
from .ndgrad import Tensor
from .tasks import init_linear
from .trainer import (ModelSpec, TrainConfig, _backbone_from, apply_freeze, build_model, features,
                      params_digest, train_loop)

HEAD = "head.mlm."
OBJECT_MASK_P = 0.5
MASK_P = 0.15


def mask_rows(examples: Sequence, vocab: Vocab, seed: int, n_copies: int = 1,
              object_p: float = OBJECT_MASK_P, other_p: float = MASK_P) -> list[EncodedRow]:
    """Masked copies of each example, bos prepended.

    Fact objects are masked with ``object_p``, every other token with
    ``other_p``; a row that drew no mask gets its object (or a random token)
    masked so that every row carries at least one target.
    """
    rng = np.random.default_rng([seed, 21])
    rows = []
    for _ in range(n_copies):
        for ex in examples:
            ids = [vocab.bos_id] + [vocab.word_id(w) for w in ex.tokens]
            obj = None
            if isinstance(ex, FactExample):
                obj = set(range(ex.obj_span[0] + 1, ex.obj_span[1] + 1))
            p = np.array([0.0] + [object_p if obj and i in obj else other_p
                                  for i in range(1, len(ids))])
            picked = rng.random(len(ids)) < p
            if not picked.any():
                picked[min(obj) if obj else int(rng.integers(1, len(ids)))] = True
            pos = np.flatnonzero(picked)
            targets = [ids[i] for i in pos]
            for i in pos:
                ids[i] = vocab.mask_id
            rows.append(EncodedRow(ids, {"mask_positions": pos.tolist(), "targets": targets}))
    return rows


def init_mlm_head(d: int, vocab_size: int, seed: int | None = 42):
    rng = None if seed is None else np.random.default_rng([seed, 5])
    return init_linear(HEAD, d, vocab_size, rng)


def _masked_logits(params, spec: ModelSpec, rows: Sequence[EncodedRow], pad_id: int) -> tuple[Tensor, np.ndarray]:
    batch = collate(rows, pad_id)
    f = features(params, spec, batch)
    b, l, d = f.shape
    flat = [i * l + p for i, r in enumerate(rows) for p in r.annotations["mask_positions"]]
    picked = nd.take_rows(nd.reshape(f, (b * l, d)), np.asarray(flat))
    targets = np.array([t for r in rows for t in r.annotations["targets"]])
    return nd.linear(picked, params[HEAD + "weight"], params[HEAD + "bias"]), targets


def mlm_loss(params, spec: ModelSpec, rows: Sequence[EncodedRow], pad_id: int) -> Tensor:
    logits, targets = _masked_logits(params, spec, rows, pad_id)
    return nd.cross_entropy(logits, targets)


def train_mlm_head(params, spec: ModelSpec, corpus: Sequence, vocab: Vocab, cfg: TrainConfig,
                   on_step=None) -> tuple[Checkpoint, list]:
    """Train only ``head.mlm.*`` on masked copies of ``corpus``.

    Everything else in ``params`` is frozen for the run and checked
    byte-for-byte afterwards. Returns the head checkpoint and loss history.
    """
    params = dict(params)
    params.update(init_mlm_head(spec.feature_dim, spec.backbone.vocab_size, cfg.seed))
    others = [k for k in params if not k.startswith(HEAD)]
    before = {k: params[k].data.tobytes() for k in others}
    apply_freeze(params, tuple(dict.fromkeys(p.split(".")[0] + "." for p in others)))
    for k in params:
        if k.startswith(HEAD):
            params[k].requires_grad = True
    rows = mask_rows(corpus, vocab, cfg.seed)
    history = train_loop(params, lambda b: mlm_loss(params, spec, b, vocab.pad_id), rows, cfg, on_step)
    changed = [k for k in others if params[k].data.tobytes() != before[k]]
    if changed:
        raise AssertionError(f"probe training modified frozen parameters: {changed[:3]}")
    meta = {"kind": "mlm_head", "feature_dim": spec.feature_dim,
            "adapters": [n for n, _ in spec.adapters], "step": cfg.total_steps, "seed": cfg.seed}
    return Checkpoint.from_params(params, meta, prefixes=(HEAD,)), history


def warm_fit_backbone(cfg_backbone: BackboneConfig, corpus: Sequence, vocab: Vocab,
                      cfg: TrainConfig, on_step=None) -> tuple[Checkpoint, list]:
    """Randomly initialise a backbone, then train it with a masked-token objective.

    The output layer used for the fit is discarded; only ``backbone.*`` is
    kept in the returned checkpoint.
    """
    params = init_backbone(cfg_backbone, cfg.seed)
    spec = ModelSpec(cfg_backbone)
    params.update(init_mlm_head(cfg_backbone.hidden, cfg_backbone.vocab_size, cfg.seed))
    apply_freeze(params, cfg.freeze_prefixes)
    rows = mask_rows(corpus, vocab, cfg.seed)
    history = train_loop(params, lambda b: mlm_loss(params, spec, b, vocab.pad_id), rows, cfg, on_step)
    meta = {"kind": "backbone", "backbone_config": cfg_backbone.to_dict(),
            "warm_fit_steps": cfg.total_steps, "seed": cfg.seed}
    return Checkpoint.from_params(params, meta, prefixes=("backbone.",)), history


def cloze_predict(params, spec: ModelSpec, query: ClozeQuery, candidates: Sequence[int] | None = None,
                  vocab: Vocab | None = None) -> list[int]:
    """Token ids ranked by score at the mask position, best first; ties go to the lower id."""
    vocab = vocab or Vocab.default()
    n_masks = sum(1 for t in query.token_ids if t == vocab.mask_id)
    if n_masks != 1 or query.token_ids[query.mask_position] != vocab.mask_id:
        raise QueryError(f"query must contain exactly one mask, found {n_masks}")
    return rank_scores(_query_scores(params, spec, [query], vocab.pad_id)[0], candidates)


def rank_scores(scores: np.ndarray, candidates: Sequence[int] | None = None) -> list[int]:
    ids = np.arange(len(scores)) if candidates is None else np.unique(np.asarray(candidates, dtype=np.int64))
    # lexsort sorts by the last key first: score descending, then id ascending
    order = np.lexsort((ids, -scores[ids]))
    return ids[order].tolist()


def _query_scores(params, spec: ModelSpec, queries: Sequence[ClozeQuery], pad_id: int) -> np.ndarray:
    rows = [EncodedRow(q.token_ids, {"mask_positions": [q.mask_position], "targets": [q.gold]})
            for q in queries]
    logits, _ = _masked_logits(params, spec, rows, pad_id)
    return logits.data


def p_at_1(groups: Mapping[object, Sequence[bool]]) -> float:
    """Per-relation top-1 accuracy, then the unweighted mean over relations."""
    if not groups:
        raise MetricError("no relation groups to average")
    scores = []
    for rel, hits in groups.items():
        if len(hits) == 0:
            raise MetricError(f"relation {rel!r} has no queries")
        scores.append(float(np.mean(hits)))
    return float(np.mean(scores))


def run_probe(params, spec: ModelSpec, queries: Sequence[ClozeQuery], candidates: Sequence[int] | None = None,
              vocab: Vocab | None = None, batch_size: int = 64) -> dict[str, float]:
    vocab = vocab or Vocab.default()
    groups: dict[int, list[bool]] = {}
    for i in range(0, len(queries), batch_size):
        chunk = queries[i:i + batch_size]
        scores = _query_scores(params, spec, chunk, vocab.pad_id)
        for q, s in zip(chunk, scores):
            groups.setdefault(q.relation, []).append(rank_scores(s, candidates)[0] == q.gold)
    return {"p_at_1": p_at_1(groups), "n_queries": float(len(queries)), "n_relations": float(len(groups))}


def probe_arm(backbone_ckpt: Checkpoint, adapter_ckpts: Sequence[Checkpoint], corpus: Sequence,
              queries: Sequence[ClozeQuery], vocab: Vocab, cfg: TrainConfig,
              candidates: Sequence[int] | None = None) -> tuple[dict[str, float], Checkpoint, list]:
    """Train an output layer on one arm's frozen features and score the queries."""
    spec, params = build_model(backbone_ckpt, adapter_ckpts) if adapter_ckpts else (
        ModelSpec(_backbone_from(backbone_ckpt)[0]), _backbone_from(backbone_ckpt)[1])
    digest = params_digest(params)
    head, history = train_mlm_head(params, spec, corpus, vocab, cfg)
    if params_digest(params) != digest:
        raise AssertionError("probe modified model parameters")
    params = dict(params)
    params.update(head.to_params(HEAD))
    return run_probe(params, spec, queries, candidates, vocab), head, history
