"""Generation metrics, the evaluation classifier and the latency benchmark."""
from __future__ import annotations

import csv
import json
import math
import statistics
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import encode_prompt, repeated_starts
from .decoding import DecodeConfig, GenerationResult, decode, sequence_class_score
from .model import DirectorModel

MAX_N = 5


# -- text metrics ------------------------------------------------------------

def unigram_f1(generation: Sequence, reference: Sequence) -> float:
    """Token-multiset F1 between a generation and a reference."""
    if len(generation) == 0 or len(reference) == 0:
        raise ValueError("unigram_f1 needs two non-empty token lists")
    overlap = sum((Counter(generation) & Counter(reference)).values())
    if overlap == 0:
        return 0.0
    p = overlap / len(generation)
    r = overlap / len(reference)
    return 2 * p * r / (p + r)


def repeat_counts(context: Sequence, generation: Sequence, max_n: int = MAX_N) -> dict[int, int]:
    """Per n, the n-grams of the generation that already occurred in context + earlier generation."""
    full = list(context) + list(generation)
    c = len(context)
    return {n: len(repeated_starts(full, n, first=c)) for n in range(1, max_n + 1)}


def repeat_score_5(counts: Mapping[int, float]) -> float:
    """log2(sum 2^i c_i / sum c_i) * c_1, zero when nothing repeats."""
    c = [float(counts.get(i, 0)) for i in range(1, MAX_N + 1)]
    total = sum(c)
    if total == 0:
        return 0.0
    num = sum(2 ** i * ci for i, ci in zip(range(1, MAX_N + 1), c))
    return math.log2(num / total) * c[0]


# -- evaluation classifier -----------------------------------------------------

@dataclass
class LabeledExample:
    context: list[int]
    response: list[int]
    positive: bool


def sequence_scores(model: DirectorModel, examples: Iterable[tuple[Sequence[int], Sequence[int]]]) -> np.ndarray:
    return np.array([sequence_class_score(model, encode_prompt(ctx), resp) for ctx, resp in examples])


def balanced_threshold(scores: Sequence[float], positive: Sequence[bool]) -> float:
    """Threshold maximising balanced accuracy of ``score >= threshold``; ties pick the midpoint."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positive, dtype=bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("calibration needs both classes")
    cuts = np.unique(s)
    candidates = np.concatenate([[cuts[0]], (cuts[:-1] + cuts[1:]) / 2, [np.inf]])
    best, best_t = -1.0, float(candidates[0])
    for t in candidates:
        pred = s >= t
        bacc = 0.5 * ((pred & y).sum() / n_pos + (~pred & ~y).sum() / n_neg)
        if bacc > best + 1e-12:
            best, best_t = bacc, float(t)
    return best_t


@dataclass
class EvalClassifier:
    """A classifier model plus the decision threshold on its whole-sequence score."""

    model: DirectorModel
    threshold: float = math.log(0.5)

    @classmethod
    def calibrate(cls, model: DirectorModel, calibration: Sequence[LabeledExample]) -> "EvalClassifier":
        scores = sequence_scores(model, ((e.context, e.response) for e in calibration))
        return cls(model, balanced_threshold(scores, [e.positive for e in calibration]))

    def is_positive(self, context: Sequence[int], response: Sequence[int]) -> bool:
        return sequence_class_score(self.model, encode_prompt(context), response) >= self.threshold


def eval_classifier_accuracy(eval_model: EvalClassifier | DirectorModel, labeled_set: Sequence[LabeledExample],
                             calibration_set: Sequence[LabeledExample] | None = None) -> float:
    """Fraction of labeled sequences the evaluation classifier gets right."""
    ys = [bool(e.positive) for e in labeled_set]
    if all(ys) or not any(ys):
        raise ValueError("labeled_set must contain both classes")
    if not isinstance(eval_model, EvalClassifier):
        eval_model = (EvalClassifier.calibrate(eval_model, calibration_set) if calibration_set
                      else EvalClassifier(eval_model))
    scores = sequence_scores(eval_model.model, ((e.context, e.response) for e in labeled_set))
    return float(np.mean((scores >= eval_model.threshold) == np.array(ys)))


def generation_class_accuracy(clf: EvalClassifier, contexts: Sequence[Sequence[int]],
                              generations: Sequence[Sequence[int]]) -> float:
    """Share of generations the evaluation classifier judges positive."""
    if len(contexts) != len(generations) or not generations:
        raise ValueError("need equally many (non-zero) contexts and generations")
    return float(np.mean([clf.is_positive(c, g) for c, g in zip(contexts, generations)]))


def bad_token_rate(generations: Sequence[Sequence[int]], bad_ids: Iterable[int]) -> float:
    """Share of generations containing at least one BAD token."""
    if not generations:
        raise ValueError("no generations")
    bad = set(int(b) for b in bad_ids)
    return float(np.mean([any(int(t) in bad for t in g) for g in generations]))


# -- reports ------------------------------------------------------------------

@dataclass
class MetricsReport:
    f1: float
    repeat_at_n: dict[int, float]
    repeat_score_5: float
    avg_len: float
    sec_per_ex: float
    class_acc: float | None = None
    bad_token_rate: float | None = None
    n: int = 0

    def __post_init__(self):
        values = [self.f1, self.repeat_score_5, self.avg_len, self.sec_per_ex, *self.repeat_at_n.values()]
        values += [v for v in (self.class_acc, self.bad_token_rate) if v is not None]
        if not all(math.isfinite(v) for v in values):
            raise ValueError(f"non-finite metric in {self}")
        for name in ("f1", "class_acc", "bad_token_rate"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["repeat_at_n"] = {str(k): v for k, v in self.repeat_at_n.items()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        d = dict(d)
        d["repeat_at_n"] = {int(k): float(v) for k, v in d["repeat_at_n"].items()}
        return cls(**d)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def compute_metrics(contexts: Sequence[Sequence[int]], generations: Sequence[Sequence[int]],
                    references: Sequence[Sequence[int]], seconds: Sequence[float] | None = None,
                    classifier: EvalClassifier | None = None, bad_ids: Iterable[int] | None = None) -> MetricsReport:
    """Mean per-example metrics over a set of generations."""
    n = len(generations)
    if n == 0 or len(contexts) != n or len(references) != n:
        raise ValueError("contexts, generations and references must be equally long and non-empty")
    f1 = [unigram_f1(g, r) if g else 0.0 for g, r in zip(generations, references)]
    counts = [repeat_counts(c, g) if g else {i: 0 for i in range(1, MAX_N + 1)}
              for c, g in zip(contexts, generations)]
    rep = {i: float(np.mean([c[i] for c in counts])) for i in range(1, MAX_N + 1)}
    secs = list(seconds) if seconds is not None else []
    return MetricsReport(
        f1=float(np.mean(f1)),
        repeat_at_n=rep,
        repeat_score_5=float(np.mean([repeat_score_5(c) for c in counts])),
        avg_len=float(np.mean([len(g) for g in generations])),
        sec_per_ex=float(np.mean(secs)) if secs else 0.0,
        class_acc=generation_class_accuracy(classifier, contexts, generations) if classifier else None,
        bad_token_rate=bad_token_rate(generations, bad_ids) if bad_ids is not None else None,
        n=n,
    )


# -- generations files --------------------------------------------------------

class GenerationsFormatError(ValueError):
    pass


def write_generations(path, results: Iterable[GenerationResult], vocab=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            rec = r.to_record(vocab)
            rec["prompt_ids"] = list(map(int, r.prompt))
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_generations(path) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise GenerationsFormatError(f"{path}:{lineno}: not valid JSON ({e.msg})") from None
            if not isinstance(rec, dict) or not isinstance(rec.get("tokens"), list):
                raise GenerationsFormatError(f"{path}:{lineno}: record needs a 'tokens' list")
            out.append(rec)
    return out


# -- latency ------------------------------------------------------------------

@dataclass
class BenchEntry:
    model: DirectorModel
    config: DecodeConfig
    guide: DirectorModel | None = None


@dataclass
class BenchResult:
    strategy: str
    sec_per_ex: float
    guide_calls_per_ex: float
    steps_per_ex: float
    outputs: list[list[int]] = field(default_factory=list)
    timings: list[float] = field(default_factory=list)
    calls: list[int] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)


def latency_bench(strategies: Mapping[str, BenchEntry], prompts: Sequence[Sequence[int]],
                  repetitions: int = 3, min_prompts: int = 20) -> dict[str, BenchResult]:
    """Median seconds per example for each named strategy, run serially.

    One warm-up generation per strategy is excluded. Repetitions are
    interleaved across strategies so slow drift affects all of them alike.
    """
    if len(prompts) < min_prompts:
        raise ValueError(f"latency_bench needs >= {min_prompts} prompts, got {len(prompts)}")
    if repetitions < 3:
        raise ValueError("latency_bench needs >= 3 repetitions")
    res = {name: BenchResult(name, 0.0, 0.0, 0.0) for name in strategies}
    for name, e in strategies.items():
        decode(e.model, prompts[0], e.config, e.guide)
    for rep in range(repetitions):
        for name, e in strategies.items():
            r = res[name]
            for p in prompts:
                t0 = time.perf_counter()
                g = decode(e.model, p, e.config, e.guide)
                r.timings.append(time.perf_counter() - t0)
                if rep == 0:
                    r.outputs.append(list(g.tokens))
                    r.calls.append(g.guide_calls)
                    r.steps.append(g.steps)
    for r in res.values():
        r.sec_per_ex = statistics.median(r.timings)
        r.guide_calls_per_ex = float(np.mean(r.calls))
        r.steps_per_ex = float(np.mean(r.steps))
    return res


BENCH_FIELDS = ("strategy", "sec_per_ex", "guide_calls_per_ex", "steps_per_ex")


def write_bench(path, results: Mapping[str, BenchResult]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_FIELDS)
        for r in results.values():
            w.writerow([r.strategy, repr(r.sec_per_ex), repr(r.guide_calls_per_ex), repr(r.steps_per_ex)])


# -- scatter CSV --------------------------------------------------------------

SCATTER_FIELDS = ("strategy", "gamma_train", "gamma_infer", "delta", "class_acc", "gen_f1", "sec_per_ex")


@dataclass
class ScatterRow:
    strategy: str
    gamma_train: float
    gamma_infer: float
    delta: float
    class_acc: float
    gen_f1: float
    sec_per_ex: float


def scatter_emit(configurations: Sequence[Mapping], results: Sequence[Mapping], path=None) -> list[ScatterRow]:
    """Join configuration and result records into plottable rows; write CSV if ``path`` is given."""
    if len(configurations) != len(results):
        raise ValueError("one result per configuration expected")
    rows = []
    for c, r in zip(configurations, results):
        rows.append(ScatterRow(str(c["strategy"]), float(c.get("gamma_train", 0.0)),
                               float(c.get("gamma_infer", 0.0)), float(c.get("delta", 0.0)),
                               float(r["class_acc"]), float(r["gen_f1"]), float(r["sec_per_ex"])))
    if path is not None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(SCATTER_FIELDS)
            for row in rows:
                w.writerow([row.strategy] + [repr(getattr(row, f)) for f in SCATTER_FIELDS[1:]])
    return rows


def read_scatter(path) -> list[ScatterRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != SCATTER_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [ScatterRow(r["strategy"], *(float(r[f]) for f in SCATTER_FIELDS[1:])) for r in reader]
