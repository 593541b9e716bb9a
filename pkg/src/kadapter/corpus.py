"""Vocabulary, dataset file formats, synthetic generators and task encoders.

The synthetic knowledge base assigns every entity one of ``n_types`` types.
Relation ``r`` always has a subject of type ``r`` and an object of type
``(r + 1) % n_types``, so entity identity alone determines the relation. Half
of the rendered sentences use the relation's own phrase ("was born in"), the
other half a relation-neutral connector ("and"), which forces a relation
classifier to store what it knows about each entity rather than reading the
label off the template.
"""
from __future__ import annotations

import hashlib
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .backbone import EncodedBatch
from .errors import ArgumentError, LengthError, QueryError, ValidationError

PAD, UNK, BOS, SEP, MASK, AT, HASH = "<pad>", "<unk>", "<s>", "</s>", "<mask>", "@", "#"
SPECIALS = (PAD, UNK, BOS, SEP, MASK, AT, HASH)
MASK_LITERAL = "[MASK]"
MAX_ENTITIES = 1024

RELATIONS = [
    ("born_in", "was born in"), ("works_for", "works for"), ("lives_in", "lives in"),
    ("member_of", "is a member of"), ("founded", "founded"), ("capital_of", "is the capital of"),
    ("located_in", "is located in"), ("owns", "owns"), ("leads", "leads"),
    ("studied_at", "studied at"), ("plays_for", "plays for"), ("wrote", "wrote"),
    ("directed", "directed"), ("sibling_of", "is a sibling of"), ("part_of", "is part of"),
    ("married_to", "is married to"),
]
PHRASE = dict(RELATIONS)
CONNECTORS = [["and"], ["with"], ["next", "to"], ["along", "with"]]
PREFIXES = [[], ["reports", "say"], ["we", "know", "that"], ["in", "short"]]
SUFFIXES = [[], ["today"], ["."], ["as", "expected"]]
TYPING_CONTEXTS = [
    ["we", "saw", "{E}", "today"], ["{E}", "was", "mentioned", "."],
    ["news", "about", "{E}", "spread"], ["people", "talk", "about", "{E}"],
]

DETS = ["the", "a", "every", "some"]
ADJS = ["big", "small", "red", "old", "young", "happy", "quiet", "green"]
NOUNS = ["cat", "dog", "bird", "man", "woman", "child", "farmer", "teacher", "horse", "fox",
         "student", "king"]
VERBS_INTRANS = ["sleeps", "runs", "sings", "waits", "laughs", "falls"]
VERBS_TRANS = ["sees", "likes", "chases", "helps", "finds", "follows"]

MC_WORDS = ["apple", "river", "stone", "cloud", "lamp", "chair", "window", "garden", "bridge",
            "candle", "mirror", "forest", "island", "ladder", "pencil", "rocket"]
MISC_WORDS = ["what", "which", "word", "appeared", "?"]

TASKS = ("typing", "relation_ft", "span_qa", "multichoice", "fact_pretrain", "dep_pretrain")


def _lexicon() -> list[str]:
    words: set[str] = set()
    for _, phrase in RELATIONS:
        words.update(phrase.split())
    for group in (CONNECTORS, PREFIXES, SUFFIXES, TYPING_CONTEXTS):
        for seq in group:
            words.update(w for w in seq if w != "{E}")
    words.update(DETS + ADJS + NOUNS + VERBS_INTRANS + VERBS_TRANS + MC_WORDS + MISC_WORDS)
    return sorted(words)


def entity_token(i: int) -> str:
    return f"e{i}"


# -- vocabulary --------------------------------------------------------------

class Vocab:
    """Closed whitespace vocabulary; the first seven ids are the specials."""

    def __init__(self, tokens: Sequence[str]):
        tokens = list(tokens)
        if tuple(tokens[:len(SPECIALS)]) != SPECIALS:
            raise ValidationError(f"vocab must start with the specials {SPECIALS}")
        if len(set(tokens)) != len(tokens):
            raise ValidationError("vocab contains duplicate tokens")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def default(cls) -> "Vocab":
        return cls(list(SPECIALS) + _lexicon() + [entity_token(i) for i in range(MAX_ENTITIES)])

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    def __len__(self) -> int:
        return len(self.tokens)

    pad_id = property(lambda self: self.index[PAD])
    unk_id = property(lambda self: self.index[UNK])
    bos_id = property(lambda self: self.index[BOS])
    sep_id = property(lambda self: self.index[SEP])
    mask_id = property(lambda self: self.index[MASK])
    at_id = property(lambda self: self.index[AT])
    hash_id = property(lambda self: self.index[HASH])

    def word_id(self, word: str) -> int:
        """Id of a text word; specials are never produced from text."""
        if word in SPECIALS:
            return self.unk_id
        return self.index.get(word, self.unk_id)

    def ids(self, words: Iterable[str]) -> list[int]:
        return [self.word_id(w) for w in words]

    def words(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


def tokenize(text: str, vocab: Vocab) -> list[int]:
    return vocab.ids(text.lower().split())


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.words(ids))


# -- example types -----------------------------------------------------------

@dataclass
class FactExample:
    tokens: list[str]
    subj_span: tuple[int, int]
    obj_span: tuple[int, int]
    relation: int

    def validate(self) -> None:
        n = len(self.tokens)
        for name, (s, e) in (("subj", self.subj_span), ("obj", self.obj_span)):
            if not 0 <= s < e <= n:
                raise ValidationError(f"{name} span [{s},{e}) out of bounds for {n} tokens")
        (a, b), (c, d) = self.subj_span, self.obj_span
        if a < d and c < b:
            raise ValidationError(f"subject {self.subj_span} and object {self.obj_span} overlap")


@dataclass
class DepExample:
    tokens: list[str]
    heads: list[int]

    def validate(self, name: str = "sentence") -> None:
        validate_tree(self.heads, name)


@dataclass
class TypingExample:
    tokens: list[str]
    span: tuple[int, int]
    labels: list[int]  # multi-hot


@dataclass
class RelationExample:
    tokens: list[str]
    subj_span: tuple[int, int]
    obj_span: tuple[int, int]
    relation: int


@dataclass
class QAExample:
    question: list[str]
    paragraph: list[str]
    answer: tuple[int, int]  # inclusive token positions inside the paragraph


@dataclass
class ChoiceExample:
    context: list[str]
    question: list[str]
    choices: list[list[str]]
    label: int


@dataclass
class ClozeQuery:
    """Encoded query (bos included) with exactly one mask position."""

    token_ids: list[int]
    gold: int
    relation: int
    mask_position: int


def validate_tree(heads: Sequence[int], name: str = "sentence") -> None:
    """Heads are 1-based (0 = root); require exactly one root and no cycles."""
    n = len(heads)
    if n == 0:
        raise ValidationError(f"{name}: empty sentence")
    if sum(1 for h in heads if h == 0) != 1:
        raise ValidationError(f"{name}: expected exactly one root, heads={list(heads)}")
    for i, h in enumerate(heads, start=1):
        if not 0 <= h <= n or h == i:
            raise ValidationError(f"{name}: token {i} has invalid head {h}")
    for i in range(1, n + 1):
        seen, j = set(), i
        while j != 0:
            if j in seen:
                raise ValidationError(f"{name}: cycle through token {j}")
            seen.add(j)
            j = heads[j - 1]


# -- knowledge base and generators ------------------------------------------

@dataclass
class KnowledgeBase:
    entity_types: list[int]
    relation_names: list[str]
    triples: list[tuple[int, int, int]]  # (subject, relation, object)

    @property
    def n_types(self) -> int:
        return len(self.relation_names)

    def object_of(self, subject: int) -> int:
        return self.triples[subject][2]

    def to_dict(self) -> dict[str, Any]:
        return {"entity_types": self.entity_types, "relation_names": self.relation_names,
                "triples": [list(t) for t in self.triples]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "KnowledgeBase":
        return cls(list(d["entity_types"]), list(d["relation_names"]),
                   [tuple(t) for t in d["triples"]])


def gen_kb(seed: int, n_entities: int, n_relations: int, relation_offset: int = 0) -> KnowledgeBase:
    """Typed entities; relation r links a type-r subject to a type-(r+1) object.

    ``relation_offset`` selects which block of the relation inventory names
    (and phrases) the labels, so two KBs can have disjoint label spaces.
    """
    if not 2 <= n_relations <= len(RELATIONS) - relation_offset or relation_offset < 0:
        raise ArgumentError(f"n_relations + relation_offset must lie in [2, {len(RELATIONS)}]")
    if not n_relations <= n_entities <= MAX_ENTITIES:
        raise ArgumentError(f"n_entities must lie in [{n_relations}, {MAX_ENTITIES}]")
    rng = np.random.default_rng([seed, 0])
    types = rng.permutation(np.arange(n_entities) % n_relations).tolist()
    by_type = [[e for e, t in enumerate(types) if t == k] for k in range(n_relations)]
    triples = []
    for s, t in enumerate(types):
        candidates = by_type[(t + 1) % n_relations]
        triples.append((s, t, int(candidates[rng.integers(len(candidates))])))
    names = [RELATIONS[relation_offset + r][0] for r in range(n_relations)]
    return KnowledgeBase(types, names, triples)


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def render_fact(kb: KnowledgeBase, triple, rng, neutral_frac: float = 0.5) -> FactExample:
    s, r, o = triple
    middle = _pick(rng, CONNECTORS) if rng.random() < neutral_frac else PHRASE[kb.relation_names[r]].split()
    prefix, suffix = _pick(rng, PREFIXES), _pick(rng, SUFFIXES)
    tokens = [*prefix, entity_token(s), *middle, entity_token(o), *suffix]
    i = len(prefix)
    j = i + 1 + len(middle)
    return FactExample(tokens, (i, i + 1), (j, j + 1), r)


def _balanced_triples(kb: KnowledgeBase, rng, n: int) -> list:
    by_rel: list[list] = [[] for _ in range(kb.n_types)]
    for t in kb.triples:
        by_rel[t[1]].append(t)
    picks = [_pick(rng, by_rel[i % kb.n_types]) for i in range(n)]
    order = rng.permutation(n)
    return [picks[k] for k in order]


def gen_fact_corpus(seed: int, n_entities: int, n_relations: int, n_examples: int,
                    neutral_frac: float = 0.5) -> list[FactExample]:
    kb = gen_kb(seed, n_entities, n_relations)
    rng = np.random.default_rng([seed, 1])
    return [render_fact(kb, t, rng, neutral_frac) for t in _balanced_triples(kb, rng, n_examples)]


def gen_task_pair(seed: int, n_entities: int, n_relations: int, n_examples: int
                  ) -> tuple[tuple[list[FactExample], list[str]], tuple[list[FactExample], list[str]]]:
    """Two relation-classification corpora that disagree about the same entities.

    Task B draws its KB from another seed (so entity types conflict with task
    A's) and names its relations from the next block of the inventory, so the
    label spaces are disjoint.
    """
    out = []
    for k in range(2):
        kb = gen_kb(seed + k, n_entities, n_relations, relation_offset=k * n_relations)
        rng = np.random.default_rng([seed + k, 1])
        examples = [render_fact(kb, t, rng) for t in _balanced_triples(kb, rng, n_examples)]
        out.append((examples, list(kb.relation_names)))
    return out[0], out[1]


def gen_dep_sentence(rng) -> DepExample:
    """NP V | NP V NP with NP = DET [ADJ] NOUN; heads are rule-determined.

    det/adj -> their noun, subject noun -> verb, verb -> root, object noun -> verb.
    """
    tokens: list[str] = []
    heads: list[int] = []

    def noun_phrase(noun_head: int) -> None:
        words = [_pick(rng, DETS)] + ([_pick(rng, ADJS)] if rng.random() < 0.5 else [])
        words.append(_pick(rng, NOUNS))
        noun_pos = len(tokens) + len(words)  # 1-based
        tokens.extend(words)
        heads.extend([noun_pos] * (len(words) - 1) + [noun_head])

    transitive = rng.random() < 0.5
    # the verb always follows the subject NP, so its position is known once the NP is sampled
    subj = [_pick(rng, DETS)] + ([_pick(rng, ADJS)] if rng.random() < 0.5 else []) + [_pick(rng, NOUNS)]
    verb_pos = len(subj) + 1
    tokens.extend(subj)
    heads.extend([len(subj)] * (len(subj) - 1) + [verb_pos])
    tokens.append(_pick(rng, VERBS_TRANS if transitive else VERBS_INTRANS))
    heads.append(0)
    if transitive:
        noun_phrase(verb_pos)
    return DepExample(tokens, heads)


def gen_dep_corpus(seed: int, n_examples: int) -> list[DepExample]:
    rng = np.random.default_rng([seed, 2])
    return [gen_dep_sentence(rng) for _ in range(n_examples)]


def gen_typing_examples(kb: KnowledgeBase, seed: int) -> list[TypingExample]:
    """One example per entity; the gold label set is the entity's type."""
    rng = np.random.default_rng([seed, 3])
    out = []
    for e, t in enumerate(kb.entity_types):
        ctx = _pick(rng, TYPING_CONTEXTS)
        pos = ctx.index("{E}")
        tokens = [entity_token(e) if w == "{E}" else w for w in ctx]
        labels = [0] * kb.n_types
        labels[t] = 1
        out.append(TypingExample(tokens, (pos, pos + 1), labels))
    return out


def gen_relation_examples(kb: KnowledgeBase, seed: int, n: int,
                          neutral_frac: float = 0.5) -> list[RelationExample]:
    rng = np.random.default_rng([seed, 4])
    out = []
    for t in _balanced_triples(kb, rng, n):
        f = render_fact(kb, t, rng, neutral_frac)
        out.append(RelationExample(f.tokens, f.subj_span, f.obj_span, f.relation))
    return out


def gen_qa_examples(kb: KnowledgeBase, seed: int, n: int) -> list[QAExample]:
    """Copy-style QA: the paragraph states the fact once, the answer is its object."""
    rng = np.random.default_rng([seed, 5])
    out = []
    for s, r, o in _balanced_triples(kb, rng, n):
        phrase = PHRASE[kb.relation_names[r]].split()
        question = ["what", entity_token(s), *phrase, "?"]
        distractor = kb.triples[int(rng.integers(len(kb.triples)))]
        while distractor[2] == o or distractor[0] == s:
            distractor = kb.triples[int(rng.integers(len(kb.triples)))]
        ds, dr, do = distractor
        fact = [entity_token(s), *phrase, entity_token(o), "."]
        other = [entity_token(ds), *PHRASE[kb.relation_names[dr]].split(), entity_token(do), "."]
        if rng.random() < 0.5:
            paragraph = fact + other
            pos = len(phrase) + 1
        else:
            paragraph = other + fact
            pos = len(other) + len(phrase) + 1
        out.append(QAExample(question, paragraph, (pos, pos)))
    return out


def gen_multichoice_examples(seed: int, n: int, n_choices: int = 4,
                             context_len: int = 4) -> list[ChoiceExample]:
    """The correct choice repeats a context word; distractors never occur in the context."""
    if n_choices < 2 or context_len + n_choices - 1 > len(MC_WORDS):
        raise ArgumentError("invalid multiple-choice sizes")
    rng = np.random.default_rng([seed, 6])
    out = []
    for _ in range(n):
        words = [MC_WORDS[i] for i in rng.permutation(len(MC_WORDS))]
        context = words[:context_len]
        answer = _pick(rng, context)
        distractors = words[context_len:context_len + n_choices - 1]
        label = int(rng.integers(n_choices))
        choices = [[w] for w in distractors]
        choices.insert(label, [answer])
        out.append(ChoiceExample(context, ["which", "word", "appeared", "?"], choices, label))
    return out


def gen_cloze_queries(kb: KnowledgeBase, seed: int, n: int) -> list[dict[str, str]]:
    """Cloze records ``{text, answer, relation}`` with the object replaced by [MASK]."""
    rng = np.random.default_rng([seed, 7])
    out = []
    for s, r, o in _balanced_triples(kb, rng, n):
        text = " ".join([entity_token(s), PHRASE[kb.relation_names[r]], MASK_LITERAL])
        out.append({"text": text, "answer": entity_token(o), "relation": kb.relation_names[r]})
    return out


def bigram_baseline_accuracy(examples: Sequence[FactExample]) -> float:
    """Train-and-test accuracy of a bigram-purity classifier on ``examples``.

    Each bigram collects label counts; a sentence takes the majority label of
    its purest bigram (ties broken by frequency). Reaching 1.0 certifies that
    the corpus is separable.
    """
    table: dict[tuple[str, str], Counter] = defaultdict(Counter)
    for ex in examples:
        for bg in zip(ex.tokens, ex.tokens[1:]):
            table[bg][ex.relation] += 1
    correct = 0
    for ex in examples:
        best = None
        for bg in zip(ex.tokens, ex.tokens[1:]):
            counts = table[bg]
            label, top = counts.most_common(1)[0]
            key = (top / sum(counts.values()), top)
            if best is None or key > best[0]:
                best = (key, label)
        correct += int(best is not None and best[1] == ex.relation)
    return correct / len(examples) if examples else 0.0


# -- splits ------------------------------------------------------------------

def split_of(index: int) -> str:
    """80/10/10 train/dev/test by a stable hash of the example index."""
    h = int.from_bytes(hashlib.blake2b(str(index).encode(), digest_size=8).digest(), "little") % 10
    return "train" if h < 8 else ("dev" if h == 8 else "test")


def split(examples: Sequence) -> dict[str, list]:
    out: dict[str, list] = {"train": [], "dev": [], "test": []}
    for i, ex in enumerate(examples):
        out[split_of(i)].append(ex)
    return out


# -- file formats ------------------------------------------------------------

def write_fact_jsonl(examples: Sequence[FactExample], labels: Sequence[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            rec = {"text": " ".join(ex.tokens), "subj": list(ex.subj_span),
                   "obj": list(ex.obj_span), "relation": labels[ex.relation]}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def write_labels(labels: Sequence[str], path) -> None:
    Path(path).write_text("".join(f"{l}\n" for l in labels), encoding="utf-8")


def read_labels(path) -> list[str]:
    return [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l]


def load_fact_jsonl(path, vocab: Vocab | None = None, labels: Sequence[str] | None = None,
                    min_count: int | None = None) -> tuple[list[FactExample], list[str]]:
    """Load and validate fact records; returns the examples and the label table.

    Without ``labels``, a ``labels.txt`` next to the file is used when
    present, otherwise relation strings are interned in order of appearance.
    Relations seen fewer than ``min_count`` times are dropped.
    """
    path = Path(path)
    if labels is None and (path.parent / "labels.txt").exists():
        labels = read_labels(path.parent / "labels.txt")
    table = list(labels) if labels is not None else []
    fixed = labels is not None
    raw: list[tuple[list[str], tuple, tuple, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                tokens = rec["text"].lower().split()
                subj, obj, rel = tuple(rec["subj"]), tuple(rec["obj"]), str(rec["relation"])
                if len(subj) != 2 or len(obj) != 2:
                    raise ValueError("spans must be [start, end)")
            except (ValueError, KeyError, TypeError, AttributeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed record ({exc})") from None
            raw.append((tokens, subj, obj, rel))
    if min_count:
        counts = Counter(r[3] for r in raw)
        raw = [r for r in raw if counts[r[3]] >= min_count]
        if not fixed:
            table = []
    examples = []
    for lineno, (tokens, subj, obj, rel) in enumerate(raw, start=1):
        if rel not in table:
            if fixed:
                raise ValidationError(f"{path}: relation {rel!r} missing from the label table")
            table.append(rel)
        ex = FactExample(tokens, (int(subj[0]), int(subj[1])), (int(obj[0]), int(obj[1])),
                         table.index(rel))
        try:
            ex.validate()
        except ValidationError as exc:
            raise ValidationError(f"{path}: record {lineno}: {exc}") from None
        examples.append(ex)
    return examples, table


_UPOS = {**{w: "DET" for w in DETS}, **{w: "ADJ" for w in ADJS}, **{w: "NOUN" for w in NOUNS},
         **{w: "VERB" for w in VERBS_INTRANS + VERBS_TRANS}}


def write_conllu(examples: Sequence[DepExample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, ex in enumerate(examples):
            fh.write(f"# sent_id = {k}\n# text = {' '.join(ex.tokens)}\n")
            for i, (w, h) in enumerate(zip(ex.tokens, ex.heads), start=1):
                rel = "root" if h == 0 else "dep"
                fh.write(f"{i}\t{w}\t{w}\t{_UPOS.get(w, 'X')}\t_\t_\t{h}\t{rel}\t_\t_\n")
            fh.write("\n")


def load_conllu(path, vocab: Vocab | None = None) -> list[DepExample]:
    """Read FORM and HEAD columns; comments, ranges (1-2) and empty nodes (1.1) are skipped."""
    out: list[DepExample] = []
    tokens: list[str] = []
    heads: list[int] = []
    name = None

    def flush():
        nonlocal tokens, heads, name
        if tokens:
            label = name or f"sentence {len(out) + 1}"
            validate_tree(heads, label)
            out.append(DepExample(tokens, heads))
        tokens, heads, name = [], [], None

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                flush()
                continue
            if line.startswith("#"):
                if line.startswith("# sent_id"):
                    name = "sentence " + line.split("=", 1)[-1].strip()
                continue
            cols = line.split("\t")
            if len(cols) != 10:
                raise ValidationError(f"{path}:{lineno}: expected 10 columns, got {len(cols)}")
            if "-" in cols[0] or "." in cols[0]:
                continue
            try:
                heads.append(int(cols[6]))
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: HEAD {cols[6]!r} is not an integer") from None
            tokens.append(cols[1].lower())
    flush()
    return out


def load_queries(path, vocab: Vocab, labels: Sequence[str] | None = None) -> tuple[list[ClozeQuery], list[str]]:
    table = list(labels) if labels else []
    queries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec["relation"] not in table:
                table.append(rec["relation"])
            queries.append(make_query(rec["text"], rec["answer"], table.index(rec["relation"]), vocab))
    return queries, table


def make_query(text: str, answer: str, relation: int, vocab: Vocab) -> ClozeQuery:
    ids, masks = [], []
    for w in text.split():
        if w == MASK_LITERAL:
            masks.append(len(ids))
            ids.append(vocab.mask_id)
        else:
            ids.append(vocab.word_id(w.lower()))
    if len(masks) != 1:
        raise QueryError(f"query must contain exactly one {MASK_LITERAL}, found {len(masks)}: {text!r}")
    gold = vocab.word_id(answer.lower())
    if gold == vocab.unk_id:
        raise QueryError(f"answer {answer!r} is not in the vocabulary")
    return ClozeQuery([vocab.bos_id] + ids, gold, relation, masks[0] + 1)


# -- task encoders -----------------------------------------------------------

@dataclass
class EncodedRow:
    ids: list[int]
    annotations: dict[str, Any] = field(default_factory=dict)


def _wrap(tokens: Sequence[str], span, open_marker: str, close_marker: str):
    s, e = span
    return list(tokens[:s]) + [open_marker] + list(tokens[s:e]) + [close_marker] + list(tokens[e:])


def _check_fits(n: int, max_len: int, needed: Iterable[int], what: str):
    if n > max_len and any(i >= max_len for i in needed):
        raise LengthError(f"truncating to {max_len} tokens would drop the {what}")


def encode_with_markers(example, task: str, vocab: Vocab, max_len: int):
    """Apply the task's marker/separator convention and recompute every index.

    Returns an :class:`EncodedRow`; multiple choice returns one row per choice.
    """
    if task not in TASKS:
        raise ArgumentError(f"unknown task {task!r}; expected one of {TASKS}")
    if task == "fact_pretrain":
        words = [BOS, *example.tokens]
        spans = [(s + 1, e + 1) for s, e in (example.subj_span, example.obj_span)]
        _check_fits(len(words), max_len, [spans[0][1] - 1, spans[1][1] - 1], "entity spans")
        return EncodedRow(_ids(words[:max_len], vocab), {"spans": spans, "label": example.relation})
    if task == "dep_pretrain":
        words = [BOS, *example.tokens][:max_len]
        heads = [-1] + [h if h < max_len else -1 for h in example.heads]
        return EncodedRow(_ids(words, vocab), {"dep_heads": heads[:max_len], "length": len(words) - 1})
    if task == "typing":
        s, e = example.span
        words = [BOS, *_wrap(example.tokens, example.span, AT, AT)]
        at, close = s + 1, e + 2
        _check_fits(len(words), max_len, [at, close], "'@' markers")
        return EncodedRow(_ids(words[:max_len], vocab), {"at_index": at, "labels": list(example.labels)})
    if task == "relation_ft":
        spans = [("@", example.subj_span), ("#", example.obj_span)]
        words = list(example.tokens)
        # insert from the rightmost span so earlier offsets stay valid
        for marker, span in sorted(spans, key=lambda x: -x[1][0]):
            words = _wrap(words, span, marker, marker)
        words = [BOS, *words]
        at, hs = words.index(AT), words.index(HASH)
        closes = [len(words) - 1 - words[::-1].index(m) for m in (AT, HASH)]
        _check_fits(len(words), max_len, [at, hs, *closes], "entity markers")
        return EncodedRow(_ids(words[:max_len], vocab),
                          {"at_index": at, "hash_index": hs, "label": example.relation})
    if task == "span_qa":
        q, p = list(example.question), list(example.paragraph)
        room = max_len - len(q) - 3
        offset = len(q) + 2
        if room < 1 or example.answer[1] >= room:
            raise LengthError(f"answer span would be truncated at max_len={max_len}")
        p = p[:room]
        words = [SEP, *q, SEP, *p, SEP]
        segment = [0] * offset + [1] * len(p) + [0]
        answer = (example.answer[0] + offset, example.answer[1] + offset)
        return EncodedRow(_ids(words, vocab), {"answer_span": answer, "segment": segment})
    # multichoice
    rows = []
    for choice in example.choices:
        words = [SEP, *example.context, SEP, *example.question, SEP, *choice, SEP]
        if len(words) > max_len:
            raise LengthError(f"multiple-choice input of {len(words)} tokens exceeds max_len={max_len}")
        rows.append(EncodedRow(_ids(words, vocab), {"label": example.label}))
    return rows


def _ids(words: Sequence[str], vocab: Vocab) -> list[int]:
    return [vocab.index[w] if w in SPECIALS else vocab.word_id(w) for w in words]


def collate(rows: Sequence[EncodedRow], pad_id: int) -> EncodedBatch:
    """Pad rows to the longest one and stack their annotations into lists."""
    if not rows:
        raise ArgumentError("cannot collate an empty batch")
    width = max(len(r.ids) for r in rows)
    ids = np.full((len(rows), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, :len(r.ids)] = r.ids
        mask[i, :len(r.ids)] = 1.0
    ann: dict[str, Any] = {}
    for key in rows[0].annotations:
        vals = [r.annotations[key] for r in rows]
        if key in ("dep_heads", "segment"):
            arr = np.full((len(rows), width), -1 if key == "dep_heads" else 0, dtype=np.int64)
            for i, v in enumerate(vals):
                arr[i, :len(v)] = v
            vals = arr
        ann[key] = vals
    return EncodedBatch(ids, mask, ann)
