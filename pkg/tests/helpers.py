"""Shared fixtures-as-functions: tiny configs and finite-difference cases.

Each case builder takes a numpy Generator and returns ``(fn, inputs)`` where
``fn()`` rebuilds a scalar loss from scratch and ``inputs`` are the tensors
to differentiate. Losses are random linear read-outs of the op's output so
that every output element contributes a distinct weight.
"""
from __future__ import annotations

import numpy as np

from kadapter import ndgrad as nd
from kadapter import tasks as T
from kadapter.adapter import AdapterConfig, adapter_layer_forward, init_adapter
from kadapter.backbone import BackboneConfig, EncodedBatch, embed, encoder_layer_forward, init_block
from kadapter.ndgrad import Tensor

TINY_B = BackboneConfig(n_layers=3, hidden=8, n_heads=2, ffn_inner=12, vocab_size=40, max_len=10)
TINY_A = AdapterConfig(injection_layers=(0, 2), n_inner=1, hidden=4, n_heads=2, down_dim=4,
                       up_dim=8, ffn_inner=6)


def leaf(rng, shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def readout(t: Tensor, rng) -> Tensor:
    """Scalar sum(t * W) with W fixed at construction time."""
    w = Tensor(rng.normal(size=t.shape))
    return nd.sum_all(nd.mul(t, w))


def _readout_case(rng, make, *shapes):
    inputs = [leaf(rng, s) for s in shapes]
    w = rng.normal(size=make(*inputs).shape)
    return (lambda: nd.sum_all(nd.mul(make(*inputs), Tensor(w)))), inputs


def pad_mask(lengths, width) -> np.ndarray:
    m = np.zeros((len(lengths), width))
    for i, n in enumerate(lengths):
        m[i, :n] = 1.0
    return m


def random_batch(rng, cfg: BackboneConfig, lengths=(6, 4)) -> EncodedBatch:
    width = max(lengths)
    ids = rng.integers(5, cfg.vocab_size, size=(len(lengths), width))
    mask = pad_mask(lengths, width)
    ids[mask == 0] = cfg.pad_id
    return EncodedBatch(ids, mask)


def trainable(params: dict, rng=None, std=0.5) -> list[Tensor]:
    """Mark every tensor trainable; optionally re-draw values so layers are non-trivial."""
    for p in params.values():
        if rng is not None:
            p.data = rng.normal(0.0, std, size=p.shape)
        p.requires_grad = True
    return list(params.values())


# -- single operations -------------------------------------------------------

def _case_cross_entropy(rng):
    logits = leaf(rng, (4, 5))
    labels = rng.integers(0, 5, size=4)
    labels[1] = -100
    return (lambda: nd.cross_entropy(logits, labels)), [logits]


def _case_bce(rng):
    logits = leaf(rng, (3, 4))
    targets = (rng.random((3, 4)) < 0.5).astype(float)
    return (lambda: nd.bce_with_logits(logits, targets)), [logits]


def _case_take_rows(rng):
    table = leaf(rng, (6, 3))
    ids = np.array([2, 0, 2, 5, 2])
    return _readout_case(rng, lambda: nd.take_rows(table, ids))[0], [table]


def _case_take_positions(rng):
    x = leaf(rng, (3, 5, 4))
    index = np.array([1, 4, 1])
    return _readout_case(rng, lambda: nd.take_positions(x, index))[0], [x]


def _case_add_constant(rng):
    x = leaf(rng, (3, 4))
    c = rng.normal(size=(3, 4))
    return _readout_case(rng, lambda: nd.add_constant(x, c))[0], [x]


OP_CASES = {
    "add": lambda rng: _readout_case(rng, nd.add, (3, 4), (3, 4)),
    "add_bias": lambda rng: _readout_case(rng, nd.add, (2, 3, 4), (4,)),
    "sub": lambda rng: _readout_case(rng, lambda a, b: a - b, (3, 4), (3, 4)),
    "add_constant": _case_add_constant,
    "neg": lambda rng: _readout_case(rng, nd.neg, (3, 4)),
    "scale": lambda rng: _readout_case(rng, lambda x: nd.scale(x, -1.7), (3, 4)),
    "div_scalar": lambda rng: _readout_case(rng, lambda x: x / 3.0, (3, 4)),
    "mul": lambda rng: _readout_case(rng, nd.mul, (3, 4), (3, 4)),
    "mul_broadcast": lambda rng: _readout_case(rng, nd.mul, (2, 3, 4), (4,)),
    "gelu": lambda rng: _readout_case(rng, nd.gelu, (3, 5)),
    "reshape": lambda rng: _readout_case(rng, lambda x: nd.reshape(x, (3, 4)), (2, 6)),
    "transpose": lambda rng: _readout_case(rng, lambda x: nd.transpose(x, (2, 0, 1)), (2, 3, 4)),
    "concat_lastdim": lambda rng: _readout_case(rng, lambda a, b: nd.concat_lastdim([a, b]), (3, 2), (3, 4)),
    "take_rows": _case_take_rows,
    "take_positions": _case_take_positions,
    "sum_all": lambda rng: (lambda x: ((lambda: nd.sum_all(nd.mul(x, x))), [x]))(leaf(rng, (3, 4))),
    "mean_all": lambda rng: (lambda x: ((lambda: nd.mean_all(nd.mul(x, x))), [x]))(leaf(rng, (3, 4))),
    "matmul": lambda rng: _readout_case(rng, nd.matmul, (3, 4), (4, 2)),
    "matmul_batched": lambda rng: _readout_case(rng, nd.matmul, (2, 3, 4, 5), (2, 3, 5, 2)),
    "linear": lambda rng: _readout_case(rng, nd.linear, (2, 3, 4), (4, 5), (5,)),
    "softmax_lastdim": lambda rng: _readout_case(rng, nd.softmax_lastdim, (3, 5)),
    "layer_norm": lambda rng: _readout_case(rng, nd.layer_norm, (2, 3, 6), (6,), (6,)),
    "cross_entropy": _case_cross_entropy,
    "bce_with_logits": _case_bce,
}


# -- full forward paths ------------------------------------------------------

def _case_embedding(rng):
    cfg = BackboneConfig(n_layers=1, hidden=4, n_heads=1, ffn_inner=4, vocab_size=12, max_len=6)
    params = {"backbone.tok_emb": leaf(rng, (12, 4)), "backbone.pos_emb": leaf(rng, (6, 4)),
              "backbone.emb_ln.gain": leaf(rng, (4,)), "backbone.emb_ln.bias": leaf(rng, (4,))}
    batch = random_batch(rng, cfg, (5, 3))
    w = rng.normal(size=(2, 5, 4))
    return (lambda: nd.sum_all(nd.mul(embed(batch, cfg, params), Tensor(w)))), list(params.values())


def _case_backbone_layer(rng):
    params = init_block("l.", 8, 12, rng)
    inputs = trainable(params, rng)
    x = leaf(rng, (2, 5, 8))
    mask = pad_mask((5, 3), 5)
    w = rng.normal(size=(2, 5, 8))
    fn = lambda: nd.sum_all(nd.mul(encoder_layer_forward(x, mask, params, "l.", 2), Tensor(w)))  # noqa: E731
    return fn, [x, *inputs]


def _case_adapter_layer(rng):
    params = {k: v for k, v in init_adapter("t", TINY_A, TINY_B, seed=0).items()
              if k.startswith("adapter.t.layers.0.")}
    inputs = trainable(params, rng)
    h, prev = leaf(rng, (2, 5, 8)), leaf(rng, (2, 5, 8))
    mask = pad_mask((5, 4), 5)
    w = rng.normal(size=(2, 5, 8))

    def fn():
        out = adapter_layer_forward(h, prev, params, "adapter.t.layers.0.", TINY_A, mask)
        return nd.sum_all(nd.mul(out, Tensor(w)))
    return fn, [h, prev, *inputs]


def _head(rng, kind, name, d, n_out=0):
    params = T.init_head(kind, name, d, n_out, seed=None)
    return params, trainable(params, rng)


def _case_relation_pretrain(rng):
    f = leaf(rng, (3, 6, 5))
    params, inputs = _head(rng, "relation_pretrain", "p", 5, 4)
    spans = [((0, 2), (3, 4)), ((1, 2), (2, 6)), ((4, 5), (0, 3))]
    labels = rng.integers(0, 4, size=3)
    return (lambda: nd.cross_entropy(T.relation_pretrain_head(f, spans, params, "p"), labels)), [f, *inputs]


def _case_dep(rng):
    f = leaf(rng, (2, 5, 5))
    params, inputs = _head(rng, "dep", "p", 5, 6)
    heads = np.array([[-1, 2, 0, 2, 3], [-1, 0, 1, -1, -1]])
    return (lambda: T.dep_loss(T.dep_head_prediction(f, params, "p"), heads, [4, 2])), [f, *inputs]


def _case_typing(rng):
    f = leaf(rng, (3, 5, 5))
    params, inputs = _head(rng, "typing", "t", 5, 4)
    at = np.array([1, 3, 0])
    y = (rng.random((3, 4)) < 0.4).astype(float)
    return (lambda: nd.bce_with_logits(T.entity_typing_head(f, at, params, "t"), y)), [f, *inputs]


def _case_relation_ft(rng):
    f = leaf(rng, (3, 6, 5))
    params, inputs = _head(rng, "relation_ft", "r", 5, 3)
    at, hs = np.array([1, 0, 4]), np.array([3, 5, 2])
    labels = rng.integers(0, 3, size=3)
    return (lambda: nd.cross_entropy(T.relation_ft_head(f, at, hs, params, "r"), labels)), [f, *inputs]


def _case_span_qa(rng):
    f = leaf(rng, (2, 7, 5))
    params, inputs = _head(rng, "span_qa", "q", 5)
    seg = np.array([[0, 0, 1, 1, 1, 1, 0], [0, 0, 0, 1, 1, 0, 0]])
    gold = [(2, 4), (3, 3)]

    def fn():
        s, e = T.span_qa_head(f, params, "q", seg)
        return T.span_qa_loss(s, e, gold, seg)
    return fn, [f, *inputs]


def _case_multichoice(rng):
    feats = [leaf(rng, (2, 4, 5)) for _ in range(4)]
    params, inputs = _head(rng, "multichoice", "m", 5)
    labels = rng.integers(0, 4, size=2)
    return (lambda: nd.cross_entropy(T.multichoice_head(feats, params, "m"), labels)), [*feats, *inputs]


def _case_mlm(rng):
    f = leaf(rng, (2, 5, 6))
    params, inputs = _head(rng, "mlm", "mlm", 6, 9)
    rows = np.array([1, 3, 7])
    targets = rng.integers(0, 9, size=3)

    def fn():
        picked = nd.take_rows(nd.reshape(f, (10, 6)), rows)
        return nd.cross_entropy(nd.linear(picked, params["head.mlm.weight"], params["head.mlm.bias"]), targets)
    return fn, [f, *inputs]


PATH_CASES = {
    "embedding": _case_embedding,
    "backbone_layer": _case_backbone_layer,
    "adapter_layer": _case_adapter_layer,
    "head_relation_pretrain": _case_relation_pretrain,
    "head_dep": _case_dep,
    "head_typing": _case_typing,
    "head_relation_ft": _case_relation_ft,
    "head_span_qa": _case_span_qa,
    "head_multichoice": _case_multichoice,
    "head_mlm": _case_mlm,
}
