"""Task heads (pre-training and fine-tuning), their losses, and metrics.

Every head is a handful of linear layers stored under ``head.<name>.`` and
sized from the feature width D at construction, so the same head code runs
on backbone-only features (D=H), one adapter (D=H+H_u) or a fusion of several.
"""
from __future__ import annotations

from collections import Counter
from typing import Sequence

import numpy as np

from . import ndgrad as nd
from .backbone import MASK_NEG, Params
from .errors import AnnotationError, ArgumentError, DimensionError
from .ndgrad import Tensor

QA_MAX_SPAN = 16


def init_linear(prefix: str, d_in: int, d_out: int, rng: np.random.Generator | None,
                std: float = 0.02) -> Params:
    w = np.zeros((d_in, d_out)) if rng is None else rng.normal(0.0, std, (d_in, d_out))
    return {prefix + "weight": Tensor(w), prefix + "bias": Tensor(np.zeros(d_out))}


def init_head(kind: str, name: str, d: int, n_out: int = 0, seed: int | None = 42) -> Params:
    """Build the parameters of one head.

    ``kind`` is one of relation_pretrain, dep, typing, relation_ft, span_qa,
    multichoice, mlm. ``seed=None`` gives an all-zero head.
    """
    rng = None if seed is None else np.random.default_rng(seed)
    pre = f"head.{name}."
    if kind in ("relation_pretrain", "relation_ft"):
        return init_linear(pre, 2 * d, n_out, rng)
    if kind in ("dep", "typing", "mlm"):
        return init_linear(pre, d, n_out, rng)
    if kind == "span_qa":
        return {**init_linear(pre + "start.", d, 1, rng), **init_linear(pre + "end.", d, 1, rng)}
    if kind == "multichoice":
        return init_linear(pre, d, 1, rng)
    raise ArgumentError(f"unknown head kind {kind!r}")


def _lin(x: Tensor, params: Params, prefix: str) -> Tensor:
    return nd.linear(x, params[prefix + "weight"], params[prefix + "bias"])


def _check_positions(index, length: int, what: str) -> np.ndarray:
    if index is None:
        raise AnnotationError(f"{what} marker index missing")
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= length):
        raise AnnotationError(f"{what} index out of range for length {length}")
    return index


def span_pooling_matrix(spans, length: int) -> np.ndarray:
    """[b, 2, l] averaging weights for the (subject, object) spans of each row."""
    spans = list(spans)
    P = np.zeros((len(spans), 2, length))
    for i, pair in enumerate(spans):
        if pair is None or len(pair) != 2:
            raise AnnotationError(f"row {i}: relation head needs exactly two entity spans")
        for j, span in enumerate(pair):
            if span is None:
                raise AnnotationError(f"row {i}: entity span {j} missing")
            s, e = int(span[0]), int(span[1])
            if not 0 <= s < e <= length:
                raise AnnotationError(f"row {i}: span [{s},{e}) outside length {length}")
            P[i, j, s:e] = 1.0 / (e - s)
    return P


def relation_pretrain_head(features: Tensor, spans, params: Params, name: str = "pretrain") -> Tensor:
    """Mean-pool both entity spans, concatenate, then one linear layer -> [b, R]."""
    b, l, d = features.shape
    pooled = nd.matmul(Tensor(span_pooling_matrix(spans, l)), features)
    return _lin(nd.reshape(pooled, (b, 2 * d)), params, f"head.{name}.")


def dep_head_prediction(features: Tensor, params: Params, name: str = "pretrain") -> Tensor:
    """Per-token scores over head positions: class 0 is root, class j is token j."""
    return _lin(features, params, f"head.{name}.")


def dep_loss(logits: Tensor, heads: np.ndarray, lengths=None) -> Tensor:
    heads = np.asarray(heads, dtype=np.int64)
    b, l, c = logits.shape
    if heads.shape != (b, l):
        raise DimensionError(f"dep heads {heads.shape} vs logits {logits.shape}")
    if lengths is not None:
        for i, n in enumerate(lengths):
            if (heads[i] > n).any():
                raise AnnotationError(f"row {i}: head index exceeds sentence length {n}")
    if (heads >= c).any():
        raise AnnotationError(f"head index exceeds the {c - 1} positions the head can score")
    return nd.cross_entropy(nd.reshape(logits, (b * l, c)), heads.reshape(-1), ignore_index=-1)


def entity_typing_head(features: Tensor, at_index, params: Params, name: str = "typing") -> Tensor:
    at = _check_positions(at_index, features.shape[1], "'@'")
    return _lin(nd.take_positions(features, at), params, f"head.{name}.")


def relation_ft_head(features: Tensor, at_index, hash_index, params: Params,
                     name: str = "relation") -> Tensor:
    at = _check_positions(at_index, features.shape[1], "'@'")
    hs = _check_positions(hash_index, features.shape[1], "'#'")
    pair = nd.concat_lastdim([nd.take_positions(features, at), nd.take_positions(features, hs)])
    return _lin(pair, params, f"head.{name}.")


def span_qa_head(features: Tensor, params: Params, name: str = "qa",
                 segment_mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Independent per-token start/end scores, each [b, l].

    Positions outside ``segment_mask`` (the paragraph) get -1e9 added so they
    can neither win decoding nor absorb probability mass.
    """
    b, l, _ = features.shape
    start = nd.reshape(_lin(features, params, f"head.{name}.start."), (b, l))
    end = nd.reshape(_lin(features, params, f"head.{name}.end."), (b, l))
    if segment_mask is not None:
        neg = (1.0 - np.asarray(segment_mask, dtype=np.float64)) * MASK_NEG
        start, end = nd.add_constant(start, neg), nd.add_constant(end, neg)
    return start, end


def span_qa_loss(start: Tensor, end: Tensor, gold_spans, segment_mask=None) -> Tensor:
    gold = np.asarray(gold_spans, dtype=np.int64).reshape(-1, 2)
    if segment_mask is not None:
        seg = np.asarray(segment_mask)
        for i, (s, e) in enumerate(gold):
            if not (seg[i, s] and seg[i, e]) or e < s:
                raise AnnotationError(f"row {i}: gold span ({s},{e}) lies outside the paragraph")
    return nd.scale(nd.cross_entropy(start, gold[:, 0]) + nd.cross_entropy(end, gold[:, 1]), 0.5)


def decode_span(start_logits: np.ndarray, end_logits: np.ndarray, segment_mask=None,
                max_span: int = QA_MAX_SPAN) -> tuple[int, int]:
    """Argmax start, then argmax end >= start (span length <= max_span), inside the segment."""
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    allowed = np.ones(start_logits.shape[0], bool) if segment_mask is None else np.asarray(segment_mask, bool)
    if not allowed.any():
        raise AnnotationError("no positions available for decoding")
    s = int(np.argmax(np.where(allowed, start_logits, -np.inf)))
    ok = allowed.copy()
    ok[:s] = False
    ok[s + max_span:] = False
    e = int(np.argmax(np.where(ok, end_logits, -np.inf)))
    return s, e


def multichoice_head(features_per_choice: Sequence[Tensor], params: Params,
                     name: str = "multichoice") -> Tensor:
    """Score each choice from its first-token feature with a shared layer -> [b, n_choices]."""
    if len(features_per_choice) < 2:
        raise ArgumentError("multiple choice needs at least two choices")
    b = features_per_choice[0].shape[0]
    first = np.zeros(b, dtype=np.int64)
    scores = [_lin(nd.take_positions(f, first), params, f"head.{name}.") for f in features_per_choice]
    return nd.concat_lastdim(scores)


# -- metrics -----------------------------------------------------------------

def metric_micro_f1(pred, gold) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    if pred.shape != gold.shape:
        raise DimensionError(f"prediction {pred.shape} vs gold {gold.shape}")
    tp = float((pred & gold).sum())
    p = tp / pred.sum() if pred.sum() else 0.0
    r = tp / gold.sum() if gold.sum() else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return float(p), float(r), float(f1)


def metric_typing(pred, gold) -> dict[str, float]:
    """Micro P/R/F1, loose macro-F1 (per-example averaging) and strict accuracy."""
    pred = np.asarray(pred, dtype=bool)
    gold = np.asarray(gold, dtype=bool)
    p, r, f1 = metric_micro_f1(pred, gold)
    tp = (pred & gold).sum(axis=1)
    npred, ngold = pred.sum(axis=1), gold.sum(axis=1)
    macro_p = float(np.mean(tp[npred > 0] / npred[npred > 0])) if (npred > 0).any() else 0.0
    macro_r = float(np.mean(tp[ngold > 0] / ngold[ngold > 0])) if (ngold > 0).any() else 0.0
    macro_f1 = 2 * macro_p * macro_r / (macro_p + macro_r) if macro_p + macro_r else 0.0
    strict = float(np.mean((pred == gold).all(axis=1))) if len(pred) else 0.0
    return {"precision": p, "recall": r, "micro_f1": f1, "macro_f1": macro_f1,
            "strict_accuracy": strict}


def metric_em_f1(pred_tokens: Sequence, gold_tokens: Sequence) -> tuple[int, float]:
    pred_tokens, gold_tokens = list(pred_tokens), list(gold_tokens)
    em = int(pred_tokens == gold_tokens)
    if not pred_tokens or not gold_tokens:
        return em, float(em)
    common = sum((Counter(pred_tokens) & Counter(gold_tokens)).values())
    if common == 0:
        return em, 0.0
    p, r = common / len(pred_tokens), common / len(gold_tokens)
    return em, 2 * p * r / (p + r)
