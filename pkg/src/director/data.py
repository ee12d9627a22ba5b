"""Vocabulary, corpus files, token labels, synthetic tasks and batching.

Every training stream is ``<bos> context <sep> response <eos>`` (or
``<bos> response <eos>`` when the context is empty). Context positions are
conditioning only: they are never labeled and never LM targets.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .seeding import rng_for

RESERVED = ("<pad>", "<bos>", "<eos>", "<sep>", "<unk>")
PAD, BOS, EOS, SEP, UNK = range(5)

POSITIVE, NEGATIVE, UNLABELED = 1, 0, -1
_LABEL_TEXT = {"pos": "positive", "neg": "negative", "": None}


class CorpusFormatError(ValueError):
    pass


# -- vocabulary -----------------------------------------------------------

class Vocabulary:
    def __init__(self, tokens: Sequence[str]) -> None:
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocabulary must start with reserved tokens {RESERVED}")
        if len(set(tokens)) != len(tokens):
            dup = sorted({t for t in tokens if tokens.count(t) > 1})
            raise ValueError(f"duplicate tokens in vocabulary: {dup}")
        if len(tokens) < 6:
            raise ValueError("vocabulary needs at least one non-reserved token")
        if any(not t or any(c.isspace() for c in t) for t in tokens):
            raise ValueError("tokens must be non-empty and contain no whitespace")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}

    @classmethod
    def from_words(cls, words: Iterable[str]) -> "Vocabulary":
        seen = dict.fromkeys(w for w in words if w not in RESERVED)
        return cls(list(RESERVED) + list(seen))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.id(w) for w in text.split()]


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[int(i)] for i in ids)


# -- corpus records -------------------------------------------------------

@dataclass(frozen=True)
class CorpusRecord:
    context: str
    response: str
    seq_label: str | None = None  # "positive" | "negative" | None

    def __post_init__(self):
        if self.seq_label not in (None, "positive", "negative"):
            raise ValueError(f"seq_label must be positive/negative/None, got {self.seq_label!r}")


def write_corpus(path, records: Iterable[CorpusRecord]) -> None:
    short = {None: "", "positive": "pos", "negative": "neg"}
    lines = []
    for r in records:
        for text in (r.context, r.response):
            if "\t" in text or "\n" in text:
                raise CorpusFormatError("record fields may not contain tabs or newlines")
        lines.append(f"{r.context}\t{r.response}\t{short[r.seq_label]}\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.writelines(lines)


def read_corpus(path) -> list[CorpusRecord]:
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            parts = line.split("\t")
            if len(parts) == 2:
                parts.append("")
            if len(parts) != 3:
                raise CorpusFormatError(f"{path}:{lineno}: expected 2 or 3 tab-separated fields, got {len(parts)}")
            if parts[2] not in _LABEL_TEXT:
                raise CorpusFormatError(f"{path}:{lineno}: label must be pos, neg or empty, got {parts[2]!r}")
            records.append(CorpusRecord(parts[0], parts[1], _LABEL_TEXT[parts[2]]))
    return records


# -- labeled sequences ----------------------------------------------------

@dataclass
class LabeledSequence:
    """Token stream with per-token labels and weights.

    ``labels[t]`` is 1 (positive), 0 (negative) or -1 (unlabeled) for token
    ``tokens[t]``. ``lm_mask[t]`` marks positions that are LM targets.
    """

    tokens: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    lm_mask: np.ndarray | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = len(self.tokens)
        if self.lm_mask is None:
            self.lm_mask = np.zeros(n)
        self.lm_mask = np.asarray(self.lm_mask, dtype=np.float64)
        if not (len(self.labels) == len(self.weights) == len(self.lm_mask) == n):
            raise ValueError("tokens, labels, weights and lm_mask must have equal length")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def n_labeled(self) -> int:
        return int((self.labels != UNLABELED).sum())


def encode_prompt(context: Sequence[int]) -> list[int]:
    """Prefix the model conditions on before generating a response."""
    context = list(context)
    return [BOS] + context + [SEP] if context else [BOS]


def encode_example(context: Sequence[int], response: Sequence[int], max_seq_len: int | None = None,
                   response_labels: Sequence[int] | None = None,
                   response_weights: Sequence[float] | None = None) -> LabeledSequence:
    """Pack one record; overlong contexts lose tokens from the left.

    The LM mask covers response tokens and the closing ``<eos>``.
    """
    context, response = list(context), list(response)
    if max_seq_len is not None:
        budget = max_seq_len - len(response) - 3  # bos, sep, eos
        if budget < 0:
            raise ValueError(f"response of length {len(response)} cannot fit in max_seq_len={max_seq_len}")
        if len(context) > budget:
            context = context[len(context) - budget:] if budget else []
    prompt = encode_prompt(context)
    tokens = prompt + response + [EOS]
    n, start = len(tokens), len(prompt)
    labels = np.full(n, UNLABELED)
    weights = np.ones(n)
    if response_labels is not None:
        labels[start:start + len(response)] = response_labels
    if response_weights is not None:
        weights[start:start + len(response)] = response_weights
    lm_mask = np.zeros(n)
    lm_mask[start:] = 1.0
    return LabeledSequence(np.array(tokens), labels, weights, lm_mask)


def propagate_labels(record: CorpusRecord, vocab: Vocabulary, max_seq_len: int | None = None) -> LabeledSequence:
    """Give every response token the record's sequence label; context stays unlabeled."""
    if record.seq_label is None:
        raise ValueError("record has no sequence label")
    response = tokenize(record.response, vocab)
    if not response:
        raise ValueError("cannot propagate a label onto an empty response")
    label = POSITIVE if record.seq_label == "positive" else NEGATIVE
    return encode_example(tokenize(record.context, vocab), response, max_seq_len,
                          response_labels=[label] * len(response))


def encode_lm_record(record: CorpusRecord, vocab: Vocabulary, max_seq_len: int | None = None) -> LabeledSequence:
    return encode_example(tokenize(record.context, vocab), tokenize(record.response, vocab), max_seq_len)


# -- repetition labels ----------------------------------------------------

def repeated_starts(full: Sequence[int], n: int, first: int = 0) -> list[int]:
    """Start indices ``s >= first`` whose n-gram ``full[s:s+n]`` occurred at some earlier start."""
    seen: set[tuple] = set()
    out = []
    for s in range(len(full) - n + 1):
        gram = tuple(full[s:s + n])
        if gram in seen:
            if s >= first:
                out.append(s)
        else:
            seen.add(gram)
    return out


def repetition_labels(context: Sequence[int], generation: Sequence[int], max_n: int,
                      weighted: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Per-generation-token labels and weights marking repeated n-grams.

    A token is negative when it lies inside a repeating ``max_n``-gram (any
    n-gram up to ``max_n`` in weighted mode). Weighted negatives get the
    largest covering n divided by ``max_n``.
    """
    if not 1 <= max_n <= 5:
        raise ValueError(f"max_n must be in 1..5, got {max_n}")
    generation = list(generation)
    if not generation:
        raise ValueError("empty generation")
    context = list(context)
    full = context + generation
    c = len(context)
    cover = np.zeros(len(generation), dtype=np.int64)
    for n in (range(1, max_n + 1) if weighted else (max_n,)):
        for s in repeated_starts(full, n, first=c):
            cover[s - c:s - c + n] = n  # n ascends, so this keeps the largest
    labels = np.where(cover > 0, NEGATIVE, POSITIVE)
    weights = np.where(cover > 0, cover / max_n, 1.0) if weighted else np.ones(len(generation))
    return labels, weights


def label_repetitions(context: Sequence[int], generation: Sequence[int], max_n: int,
                      weighted: bool = False, max_seq_len: int | None = None) -> LabeledSequence:
    labels, weights = repetition_labels(context, generation, max_n, weighted)
    return encode_example(context, generation, max_seq_len, labels, weights)


# -- batching -------------------------------------------------------------

@dataclass
class Batch:
    tokens: np.ndarray   # (B, T) int
    lm_mask: np.ndarray  # (B, T) float
    labels: np.ndarray   # (B, T) int, -1 unlabeled
    weights: np.ndarray  # (B, T) float

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def has_labels(self) -> bool:
        return bool((self.labels != UNLABELED).any())


def collate(seqs: Sequence[LabeledSequence], pad_id: int = PAD) -> Batch:
    if not seqs:
        raise ValueError("cannot collate an empty list")
    T = max(len(s) for s in seqs)
    B = len(seqs)
    tokens = np.full((B, T), pad_id, dtype=np.int64)
    lm_mask = np.zeros((B, T))
    labels = np.full((B, T), UNLABELED, dtype=np.int64)
    weights = np.zeros((B, T))
    for i, s in enumerate(seqs):
        n = len(s)
        tokens[i, :n] = s.tokens
        lm_mask[i, :n] = s.lm_mask
        labels[i, :n] = s.labels
        weights[i, :n] = s.weights
    return Batch(tokens, lm_mask, labels, weights)


def batcher(seqs: Sequence[LabeledSequence], batch_size: int, pad_id: int = PAD) -> Iterator[Batch]:
    """Right-padded batches in input order; the last one may be short."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    for i in range(0, len(seqs), batch_size):
        yield collate(seqs[i:i + batch_size], pad_id)


# -- synthetic safety task ------------------------------------------------

@dataclass(frozen=True)
class SafetySizes:
    n_normal: int = 32
    n_trigger: int = 4
    n_lm: int = 2000
    n_class: int = 2000
    n_valid: int = 200
    n_eval: int = 100
    n_f1: int = 100
    context_len: int = 6
    response_len: int = 10
    p_bad: float = 0.5
    concentration: float = 0.3


@dataclass
class SafetyTask:
    """Markov-chain text where each trigger token is followed by its BAD token half the time."""

    vocab: Vocabulary
    sizes: SafetySizes
    trigger_ids: list[int]
    bad_ids: list[int]
    transition: np.ndarray  # (|V|, |V|) row-stochastic over token ids
    start: np.ndarray
    d_lm: list[CorpusRecord] = field(default_factory=list)
    d_class: list[CorpusRecord] = field(default_factory=list)
    valid: list[CorpusRecord] = field(default_factory=list)
    eval_prompts: list[CorpusRecord] = field(default_factory=list)
    f1_set: list[CorpusRecord] = field(default_factory=list)
    seed: int = 0

    def contains_bad(self, ids: Iterable[int]) -> bool:
        bad = set(self.bad_ids)
        return any(int(i) in bad for i in ids)

    def sample_tokens(self, rng: np.random.Generator, length: int, first: int | None = None) -> list[int]:
        out = []
        prev = first
        for _ in range(length):
            p = self.start if prev is None else self.transition[prev]
            prev = int(rng.choice(len(p), p=p))
            out.append(prev)
        return out

    def sample_record(self, rng: np.random.Generator, labeled: bool) -> CorpusRecord:
        s = self.sizes
        ctx = self.sample_tokens(rng, s.context_len)
        resp = self.sample_tokens(rng, s.response_len, first=ctx[-1])
        label = None
        if labeled:
            label = "negative" if self.contains_bad(resp) else "positive"
        return CorpusRecord(detokenize(ctx, self.vocab), detokenize(resp, self.vocab), label)

    def sample_trigger_prompt(self, rng: np.random.Generator) -> CorpusRecord:
        """Context ending at a trigger token, with a clean reference continuation."""
        s = self.sizes
        ctx = self.sample_tokens(rng, s.context_len - 1)
        trig = self.trigger_ids[int(rng.integers(len(self.trigger_ids)))]
        ctx.append(trig)
        while True:
            resp = self.sample_tokens(rng, s.response_len, first=trig)
            if not self.contains_bad(resp):
                break
        return CorpusRecord(detokenize(ctx, self.vocab), detokenize(resp, self.vocab), "positive")

    def labeled_set(self, n: int, stream: str) -> list[CorpusRecord]:
        rng = rng_for(self.seed, stream)
        return [self.sample_record(rng, labeled=True) for _ in range(n)]


def _clean_probability(q: float, p_bad: float, length: int) -> float:
    """P(no BAD token in ``length`` steps) for the normal/trigger/bad skeleton chain.

    Skeleton: normal -> trigger with prob q; trigger -> bad with prob p_bad,
    else normal; bad -> normal. Starts from the stationary distribution.
    """
    P = np.array([[1 - q, q, 0.0], [1 - p_bad, 0.0, p_bad], [1.0, 0.0, 0.0]])
    w, v = np.linalg.eig(P.T)
    pi = np.real(v[:, np.argmin(abs(w - 1))])
    pi = pi / pi.sum()
    alive = pi.copy()
    for _ in range(length):
        alive = alive @ P
        alive[2] = 0.0
    return float(alive.sum())


def make_synthetic_safety_task(seed: int = 0, sizes: SafetySizes | None = None) -> SafetyTask:
    """Build vocabulary, chain and all splits deterministically from ``seed``."""
    s = sizes or SafetySizes()
    if s.n_normal < 2 or s.n_trigger < 1 or min(s.n_lm, s.n_class) < 2 or s.response_len < 1 or s.context_len < 1:
        raise ValueError(f"sizes too small to cover both classes: {s}")
    normals = [f"w{i}" for i in range(s.n_normal)]
    triggers = [f"t{i}" for i in range(s.n_trigger)]
    bads = [f"x{i}" for i in range(s.n_trigger)]
    vocab = Vocabulary(list(RESERVED) + normals + triggers + bads)
    V = len(vocab)
    nid = np.array([vocab.id(w) for w in normals])
    tid = [vocab.id(w) for w in triggers]
    bid = [vocab.id(w) for w in bads]

    lo, hi = 0.0, 1.0
    for _ in range(60):
        q = 0.5 * (lo + hi)
        if _clean_probability(q, s.p_bad, s.response_len) > 0.5:
            lo = q
        else:
            hi = q
    q = 0.5 * (lo + hi)

    rng = rng_for(seed, "data.chain")
    P = np.zeros((V, V))
    for row in list(nid) + bid:
        P[row, nid] = (1 - q) * rng.dirichlet(np.full(s.n_normal, s.concentration))
        P[row, tid] = q * rng.dirichlet(np.ones(s.n_trigger))
    for t, b in zip(tid, bid):
        P[t, nid] = (1 - s.p_bad) * rng.dirichlet(np.full(s.n_normal, s.concentration))
        P[t, b] = s.p_bad
    start = np.zeros(V)
    start[nid] = 1.0 / s.n_normal

    task = SafetyTask(vocab, s, tid, bid, P, start, seed=seed)
    r = rng_for(seed, "data.lm")
    task.d_lm = [task.sample_record(r, labeled=False) for _ in range(s.n_lm)]
    task.d_class = task.labeled_set(s.n_class, "data.class")
    task.valid = task.labeled_set(s.n_valid, "data.valid")
    r = rng_for(seed, "data.eval")
    task.eval_prompts = [task.sample_trigger_prompt(r) for _ in range(s.n_eval)]
    r = rng_for(seed, "data.f1")
    task.f1_set = [task.sample_record(r, labeled=False) for _ in range(s.n_f1)]
    labels = {rec.seq_label for rec in task.d_class}
    if labels != {"positive", "negative"}:
        raise ValueError(f"sizes too small to cover both classes: {s}")
    return task


# -- synthetic repetition task -------------------------------------------

@dataclass(frozen=True)
class RepetitionSizes:
    n_words: int = 40
    n_train: int = 2000
    n_valid: int = 100
    n_test: int = 100
    context_len: int = 8
    response_len: int = 20
    p_top: float = 0.4
    n_alternatives: int = 6
    max_cycle: int = 4


@dataclass
class RepetitionTask:
    """First-order chain whose most likely successor map is a union of short cycles.

    Samples are varied, but greedy decoding falls into the cycles, which is
    the degenerate looping the repetition labels are meant to catch.
    """

    vocab: Vocabulary
    sizes: RepetitionSizes
    transition: np.ndarray
    successor: dict[int, int]
    train: list[CorpusRecord] = field(default_factory=list)
    valid: list[CorpusRecord] = field(default_factory=list)
    test: list[CorpusRecord] = field(default_factory=list)
    seed: int = 0

    def sample_record(self, rng: np.random.Generator) -> CorpusRecord:
        s = self.sizes
        word_ids = np.arange(len(RESERVED), len(self.vocab))
        ids = [int(rng.choice(word_ids))]
        for _ in range(s.context_len + s.response_len - 1):
            ids.append(int(rng.choice(len(self.vocab), p=self.transition[ids[-1]])))
        ctx, resp = ids[: s.context_len], ids[s.context_len:]
        return CorpusRecord(detokenize(ctx, self.vocab), detokenize(resp, self.vocab))


def make_synthetic_repetition_task(seed: int = 0, sizes: RepetitionSizes | None = None) -> RepetitionTask:
    s = sizes or RepetitionSizes()
    if s.n_words < s.n_alternatives + 2 or s.max_cycle < 2:
        raise ValueError(f"sizes too small: {s}")
    words = [f"w{i}" for i in range(s.n_words)]
    vocab = Vocabulary(list(RESERVED) + words)
    ids = np.arange(len(RESERVED), len(vocab))
    rng = rng_for(seed, "data.chain")

    order = rng.permutation(ids)
    successor: dict[int, int] = {}
    i = 0
    while i < len(order):
        k = int(rng.integers(2, s.max_cycle + 1))
        cyc = order[i:i + k]
        if len(cyc) < 2:  # fold a trailing singleton into the previous cycle
            prev = list(successor)[-1]
            successor[prev], successor[int(cyc[0])] = int(cyc[0]), successor[prev]
            break
        for a, b in zip(cyc, np.roll(cyc, -1)):
            successor[int(a)] = int(b)
        i += k

    P = np.zeros((len(vocab), len(vocab)))
    for a in ids:
        top = successor[int(a)]
        others = rng.choice([j for j in ids if j != top], size=s.n_alternatives, replace=False)
        # alternatives stay well below p_top so the greedy successor is unambiguous
        while True:
            w = (1 - s.p_top) * rng.dirichlet(np.full(s.n_alternatives, 2.0))
            if w.max() < 0.75 * s.p_top:
                break
        P[a, others] = w
        P[a, top] = s.p_top
    task = RepetitionTask(vocab, s, P, successor, seed=seed)
    for name, n in (("train", s.n_train), ("valid", s.n_valid), ("test", s.n_test)):
        r = rng_for(seed, f"data.{name}")
        setattr(task, name, [task.sample_record(r) for _ in range(n)])
    return task

