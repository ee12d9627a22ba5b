"""Desk-scale experiment drivers for the repetition and safety tasks."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import (POSITIVE, UNLABELED, Batch, CorpusRecord, LabeledSequence, RepetitionSizes,
                   SafetySizes, SafetyTask, Vocabulary, batcher, encode_lm_record, label_repetitions,
                   make_synthetic_repetition_task, make_synthetic_safety_task, propagate_labels, tokenize)
from .decoding import DecodeConfig, decode
from .evaluation import (BenchEntry, BenchResult, EvalClassifier, LabeledExample, MetricsReport, compute_metrics,
                         eval_classifier_accuracy, latency_bench)
from .model import DirectorModel, ModelConfig, init_params
from .seeding import rng_for
from .training import TrainConfig, TrainResult, train_loop

Log = Callable[[str], None]


def _quiet(msg: str) -> None:
    pass


def batches(seqs: Sequence[LabeledSequence], batch_size: int) -> list[Batch]:
    return list(batcher(list(seqs), batch_size))


def lm_batches(records: Sequence[CorpusRecord], vocab: Vocabulary, batch_size: int,
               max_seq_len: int | None = None) -> list[Batch]:
    return batches([encode_lm_record(r, vocab, max_seq_len) for r in records], batch_size)


def class_batches(records: Sequence[CorpusRecord], vocab: Vocabulary, batch_size: int,
                  max_seq_len: int | None = None) -> list[Batch]:
    return batches([propagate_labels(r, vocab, max_seq_len) for r in records], batch_size)


def train_model(model: DirectorModel, d_lm: Sequence[Batch], d_class: Sequence[Batch], config: TrainConfig,
                val_lm: Sequence[Batch] = (), val_class: Sequence[Batch] = ()) -> TrainResult:
    return train_loop(model, d_lm, d_class, config, val_lm, val_class)


def generate_all(model: DirectorModel, contexts: Sequence[Sequence[int]], config: DecodeConfig,
                 guide: DirectorModel | None = None):
    return [decode(model, c, config, guide) for c in contexts]


def off_candidate_deviation(model: DirectorModel, val_class: Sequence[Batch]) -> float:
    """Mean |p - 0.5| of classifier outputs for every candidate except the observed token, at labeled rows."""
    total, count = 0.0, 0
    with T.no_grad():
        for b in val_class:
            p = 1.0 / (1.0 + np.exp(-model.forward(b.tokens).class_logits.data[:, :-1]))
            rows = b.labels[:, 1:] != UNLABELED
            dev = np.abs(p - 0.5)
            obs = np.zeros_like(dev, dtype=bool)
            np.put_along_axis(obs, b.tokens[:, 1:, None], True, axis=-1)
            keep = rows[..., None] & ~obs
            total += float(dev[keep].sum())
            count += int(keep.sum())
    return total / count


# -- repetition -----------------------------------------------------------------

@dataclass
class RepetitionConfig:
    seed: int = 0
    sizes: RepetitionSizes = field(default_factory=RepetitionSizes)
    embed_dim: int = 48
    n_layers: int = 2
    n_heads: int = 2
    learning_rate: float = 3e-3
    batch_size: int = 16
    base_steps: int = 400
    director_steps: int = 400
    n_label_contexts: int = 600
    label_n: int = 3
    weighted: bool = False
    gamma_train: float = 1.0
    gamma_infer_grid: tuple[float, ...] = (0.5, 1.0, 2.0, 5.0, 10.0)
    f1_tolerance: float = 0.03
    label_top_k: int = 5


@dataclass
class RepetitionOutcome:
    baseline: MetricsReport
    director: dict[float, MetricsReport]
    selection: dict[float, MetricsReport]
    baseline_selection: MetricsReport
    best_gamma: float
    seconds: float
    label_positive_rate: float
    beam_block: MetricsReport | None = None

    @property
    def best(self) -> MetricsReport:
        return self.director[self.best_gamma]


def _rep_eval(model, task, records, gen_len, cfg_kw) -> MetricsReport:
    ctxs = [tokenize(r.context, task.vocab) for r in records]
    refs = [tokenize(r.response, task.vocab) for r in records]
    dc = DecodeConfig(max_len=gen_len, min_len=gen_len, **cfg_kw)
    gens = generate_all(model, ctxs, dc)
    return compute_metrics(ctxs, [g.tokens for g in gens], refs, [g.seconds for g in gens])


def run_repetition(cfg: RepetitionConfig | None = None, log: Log = _quiet) -> RepetitionOutcome:
    """Baseline LM that loops under greedy decoding versus DIRECTOR trained on automatic repeat labels."""
    cfg = cfg or RepetitionConfig()
    t0 = time.perf_counter()
    task = make_synthetic_repetition_task(cfg.seed, cfg.sizes)
    V, s = len(task.vocab), cfg.sizes
    mcfg = ModelConfig(vocab_size=V, embed_dim=cfg.embed_dim, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
                       max_seq_len=s.context_len + s.response_len + 4, seed=cfg.seed)
    d_lm = lm_batches(task.train, task.vocab, cfg.batch_size)
    val_lm = lm_batches(task.valid, task.vocab, 50)

    base = init_params(mcfg)
    tc = TrainConfig(gamma_train=0.0, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                     max_steps=cfg.base_steps, eval_every=100, patience=5, seed=cfg.seed)
    r = train_model(base, d_lm, [], tc, val_lm=val_lm)
    log(f"baseline LM trained: val loss {r.best_metric:.4f} at step {r.best_step}")

    # label greedy and top-k sampled continuations of training contexts
    rng = rng_for(cfg.seed, "repetition.label")
    picks = rng.choice(len(task.train), size=min(cfg.n_label_contexts, len(task.train)), replace=False)
    labeled = []
    for i, idx in enumerate(picks):
        ctx = tokenize(task.train[int(idx)].context, task.vocab)
        mode = "greedy" if i % 2 == 0 else "topk_sample"
        dc = DecodeConfig(strategy="baseline", mode=mode, top_k=cfg.label_top_k, max_len=s.response_len,
                          min_len=s.response_len, seed=cfg.seed * 100003 + i)
        gen = decode(base, ctx, dc).tokens
        labeled.append(label_repetitions(ctx, gen, cfg.label_n, cfg.weighted))
    lab = np.concatenate([q.labels[q.labels != UNLABELED] for q in labeled])
    pos_rate = float(np.mean(lab == POSITIVE))
    log(f"labeled {len(labeled)} generations, {pos_rate:.1%} positive tokens")
    cut = max(1, len(labeled) // 10)
    d_class = batches(labeled[cut:], cfg.batch_size)
    val_class = batches(labeled[:cut], 50)

    director = base.copy()
    tc = TrainConfig(gamma_train=cfg.gamma_train, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                     max_steps=cfg.director_steps, eval_every=100, patience=5, seed=cfg.seed)
    r = train_model(director, d_lm, d_class, tc, val_lm=val_lm, val_class=val_class)
    log(f"director trained: val metric {r.best_metric:.4f} at step {r.best_step}")

    gen_len = s.response_len
    base_sel = _rep_eval(base, task, task.valid, gen_len, {"strategy": "baseline"})
    selection = {g: _rep_eval(director, task, task.valid, gen_len, {"strategy": "director", "gamma_infer": g})
                 for g in cfg.gamma_infer_grid}
    ok = [g for g, m in selection.items() if m.f1 >= base_sel.f1 - cfg.f1_tolerance] or list(selection)
    best = min(ok, key=lambda g: (selection[g].repeat_at_n[3], g))
    for g, m in selection.items():
        log(f"  select gamma_infer={g:g}: repeat@3 {m.repeat_at_n[3]:.2f} f1 {m.f1:.3f}")

    baseline = _rep_eval(base, task, task.test, gen_len, {"strategy": "baseline"})
    director_test = {g: _rep_eval(director, task, task.test, gen_len, {"strategy": "director", "gamma_infer": g})
                     for g in cfg.gamma_infer_grid}
    blocked = _rep_eval(base, task, task.test, gen_len, {"strategy": "baseline", "mode": "beam", "block_n": 3})
    return RepetitionOutcome(baseline, director_test, selection, base_sel, best,
                             time.perf_counter() - t0, pos_rate, blocked)


# -- safety -----------------------------------------------------------------------

@dataclass
class SafetyConfig:
    seed: int = 0
    sizes: SafetySizes = field(default_factory=SafetySizes)
    embed_dim: int = 48
    n_layers: int = 2
    n_heads: int = 2
    learning_rate: float = 3e-3
    batch_size: int = 16
    base_steps: int = 500
    director_steps: int = 600
    classifier_steps: int = 600
    classifier_gamma: float = 5.0
    n_classifier_train: int = 2000
    n_calibration: int = 300
    n_select: int = 60
    gamma_train_grid: tuple[float, ...] = (0.2, 1.0)
    delta_grid: tuple[float, ...] = (0.0, 1.0)
    gamma_infer_grid: tuple[float, ...] = (1.0, 2.0, 5.0)
    f1_tolerance: float = 0.03
    top_k: int = 10
    beam_width: int = 4
    pacer_samples: int = 5
    guided_baselines: bool = True
    n_guided_prompts: int = 50


@dataclass
class SafetyRow:
    strategy: str
    gamma_train: float
    gamma_infer: float
    delta: float
    class_acc: float
    gen_f1: float
    bad_rate: float
    sec_per_ex: float

    def as_config(self) -> dict:
        return {"strategy": self.strategy, "gamma_train": self.gamma_train,
                "gamma_infer": self.gamma_infer, "delta": self.delta}

    def as_result(self) -> dict:
        return {"class_acc": self.class_acc, "gen_f1": self.gen_f1, "sec_per_ex": self.sec_per_ex}


@dataclass
class SafetyModels:
    task: SafetyTask
    base: DirectorModel
    directors: dict[tuple[float, float], DirectorModel]
    frozen: DirectorModel
    clf: EvalClassifier
    guide: DirectorModel | None
    val_class: list[Batch]


@dataclass
class SafetyOutcome:
    rows: list[SafetyRow]
    baseline: SafetyRow
    best: SafetyRow
    frozen: SafetyRow
    clf_accuracy: float
    clf_detector_agreement: float
    detector_accuracy: float
    deviation: dict[float, float]
    delta_class_acc: dict[float, float]
    frozen_core_identical: bool
    seconds: float
    models: SafetyModels | None = None


def _labeled_examples(task: SafetyTask, records: Sequence[CorpusRecord]) -> list[LabeledExample]:
    return [LabeledExample(tokenize(r.context, task.vocab), tokenize(r.response, task.vocab),
                           r.seq_label == "positive") for r in records]


def _train_classifier(task: SafetyTask, cfg: SafetyConfig, mcfg: ModelConfig, stream: str, log: Log) -> DirectorModel:
    """A separate model trained mainly as a classifier on its own labeled sample."""
    seed = int(rng_for(cfg.seed, stream + ".seed").integers(2 ** 31))
    model = init_params(replace(mcfg, seed=seed))
    d_lm = lm_batches(task.d_lm, task.vocab, cfg.batch_size)
    d_class = class_batches(task.labeled_set(cfg.n_classifier_train, stream), task.vocab, cfg.batch_size)
    val_class = class_batches(task.labeled_set(200, stream + ".valid"), task.vocab, 50)
    tc = TrainConfig(gamma_train=cfg.classifier_gamma, learning_rate=cfg.learning_rate,
                     batch_size=cfg.batch_size, max_steps=cfg.classifier_steps, eval_every=100, patience=5,
                     validation_metric="class_acc", seed=seed)
    r = train_model(model, d_lm, d_class, tc, val_class=val_class)
    log(f"{stream} classifier: token accuracy {r.best_metric:.3f} at step {r.best_step}")
    return model


def safety_prompts(task: SafetyTask, records: Sequence[CorpusRecord]) -> tuple[list[list[int]], list[list[int]]]:
    return ([tokenize(r.context, task.vocab) for r in records], [tokenize(r.response, task.vocab) for r in records])


def evaluate_safety(model: DirectorModel, task: SafetyTask, clf: EvalClassifier, dc: DecodeConfig,
                    prompts: Sequence[CorpusRecord], f1_records: Sequence[CorpusRecord],
                    guide: DirectorModel | None = None) -> tuple[float, float, float, float]:
    """(class_acc, bad_rate, f1, sec_per_ex) of one decoding setup."""
    ctxs, refs = safety_prompts(task, prompts)
    gens = generate_all(model, ctxs, dc, guide)
    toks = [g.tokens for g in gens]
    m = compute_metrics(ctxs, toks, refs, [g.seconds for g in gens], clf, task.bad_ids)
    fctx, frefs = safety_prompts(task, f1_records)
    fgens = generate_all(model, fctx, dc, guide)
    f1 = compute_metrics(fctx, [g.tokens for g in fgens], frefs).f1
    return m.class_acc, m.bad_token_rate, f1, m.sec_per_ex


def run_safety(cfg: SafetyConfig | None = None, log: Log = _quiet, keep_models: bool = False) -> SafetyOutcome:
    """Sweep DIRECTOR settings on the synthetic safety task against the LM baseline and guided decoders."""
    cfg = cfg or SafetyConfig()
    t0 = time.perf_counter()
    task = make_synthetic_safety_task(cfg.seed, cfg.sizes)
    s = cfg.sizes
    mcfg = ModelConfig(vocab_size=len(task.vocab), embed_dim=cfg.embed_dim, n_layers=cfg.n_layers,
                       n_heads=cfg.n_heads, max_seq_len=s.context_len + s.response_len + 4, seed=cfg.seed)
    d_lm = lm_batches(task.d_lm, task.vocab, cfg.batch_size)
    d_class = class_batches(task.d_class, task.vocab, cfg.batch_size)
    val_lm = lm_batches(task.f1_set, task.vocab, 50)
    val_class = class_batches(task.valid, task.vocab, 50)

    base = init_params(mcfg)
    r = train_model(base, d_lm, [], TrainConfig(gamma_train=0.0, learning_rate=cfg.learning_rate,
                                                batch_size=cfg.batch_size, max_steps=cfg.base_steps,
                                                eval_every=100, patience=5, seed=cfg.seed), val_lm=val_lm)
    log(f"baseline LM: val loss {r.best_metric:.4f} at step {r.best_step}")

    # independent evaluation classifier, calibrated on its own split
    eval_model = _train_classifier(task, cfg, mcfg, "eval_clf", log)
    clf = EvalClassifier.calibrate(eval_model, _labeled_examples(task, task.labeled_set(cfg.n_calibration,
                                                                                        "eval_clf.calib")))
    held = _labeled_examples(task, task.labeled_set(400, "eval_clf.test"))
    clf_acc = eval_classifier_accuracy(clf, held)
    preds = [clf.is_positive(e.context, e.response) for e in held]
    detector = [not task.contains_bad(e.response) for e in held]
    agreement = float(np.mean(np.array(preds) == np.array(detector)))
    detector_acc = float(np.mean(np.array(detector) == np.array([e.positive for e in held])))
    log(f"eval classifier: accuracy {clf_acc:.3f}, agreement with BAD detector {agreement:.3f}")

    rsel = rng_for(cfg.seed, "safety.select")
    select_prompts = [task.sample_trigger_prompt(rsel) for _ in range(cfg.n_select)]
    rsel_f1 = rng_for(cfg.seed, "safety.select_f1")
    select_f1 = [task.sample_record(rsel_f1, labeled=False) for _ in range(cfg.n_select)]
    L = s.response_len
    greedy = DecodeConfig(strategy="baseline", max_len=L, min_len=L, seed=cfg.seed)

    def measure(model, dc, prompts, f1_recs, guide=None):
        return evaluate_safety(model, task, clf, dc, prompts, f1_recs, guide)

    rows: list[SafetyRow] = []
    ca, br, f1, sec = measure(base, greedy, task.eval_prompts, task.f1_set)
    baseline = SafetyRow("baseline", 0.0, 0.0, 0.0, ca, f1, br, sec)
    _, _, base_sel_f1, _ = measure(base, greedy, select_prompts, select_f1)
    rows.append(baseline)
    log(f"baseline: class_acc {ca:.3f} bad_rate {br:.3f} f1 {f1:.3f}")

    directors: dict[tuple[float, float], DirectorModel] = {}
    candidates = []
    for gt in cfg.gamma_train_grid:
        for delta in cfg.delta_grid:
            model = base.copy()
            tc = TrainConfig(gamma_train=gt, delta=delta, learning_rate=cfg.learning_rate,
                             batch_size=cfg.batch_size, max_steps=cfg.director_steps, eval_every=100,
                             patience=5, seed=cfg.seed)
            r = train_model(model, d_lm, d_class, tc, val_lm=val_lm, val_class=val_class)
            directors[(gt, delta)] = model
            for gi in cfg.gamma_infer_grid:
                dc = replace(greedy, strategy="director", gamma_infer=gi)
                sca, sbr, sf1, _ = measure(model, dc, select_prompts, select_f1)
                candidates.append(((gt, delta, gi), sca, sbr, sf1))
                log(f"  select gt={gt:g} delta={delta:g} gi={gi:g}: class_acc {sca:.3f} "
                    f"bad_rate {sbr:.3f} f1 {sf1:.3f}")
    ok = [c for c in candidates if c[3] >= base_sel_f1 - cfg.f1_tolerance] or candidates
    (bgt, bdelta, bgi), *_ = min(ok, key=lambda c: (c[2], -c[1], -c[3]))

    for (gt, delta), model in directors.items():
        for gi in cfg.gamma_infer_grid:
            dc = replace(greedy, strategy="director", gamma_infer=gi)
            ca, br, f1, sec = measure(model, dc, task.eval_prompts, task.f1_set)
            rows.append(SafetyRow("director", gt, gi, delta, ca, f1, br, sec))
    best = next(r for r in rows if r.strategy == "director" and
                (r.gamma_train, r.delta, r.gamma_infer) == (bgt, bdelta, bgi))
    log(f"best director gt={bgt:g} delta={bdelta:g} gi={bgi:g}: class_acc {best.class_acc:.3f} "
        f"bad_rate {best.bad_rate:.3f} f1 {best.gen_f1:.3f}")

    # classifier head only, on top of the frozen baseline
    frozen = base.copy()
    frozen.frozen_core = True
    before = frozen.core_state()
    tc = TrainConfig(gamma_train=bgt, delta=bdelta, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                     max_steps=cfg.director_steps, eval_every=100, patience=5, seed=cfg.seed)
    train_model(frozen, [], d_class, tc, val_class=val_class)
    after = frozen.core_state()
    identical = all(np.array_equal(before[k], after[k]) for k in before)
    ca, br, f1, sec = measure(frozen, replace(greedy, strategy="director", gamma_infer=bgi),
                              task.eval_prompts, task.f1_set)
    frozen_row = SafetyRow("director_frozen_lm", bgt, bgi, bdelta, ca, f1, br, sec)
    rows.append(frozen_row)
    log(f"frozen LM: class_acc {ca:.3f} bad_rate {br:.3f} f1 {f1:.3f} core unchanged {identical}")

    # explicit label normalization on/off at the chosen gamma_train
    deviation, delta_acc = {}, {}
    for delta in sorted({0.0, 1.0}):
        model = directors.get((bgt, delta))
        if model is None:
            model = base.copy()
            tc = TrainConfig(gamma_train=bgt, delta=delta, learning_rate=cfg.learning_rate,
                             batch_size=cfg.batch_size, max_steps=cfg.director_steps, eval_every=100,
                             patience=5, seed=cfg.seed)
            train_model(model, d_lm, d_class, tc, val_lm=val_lm, val_class=val_class)
            directors[(bgt, delta)] = model
        deviation[delta] = off_candidate_deviation(model, val_class)
        row = next((r for r in rows if r.strategy == "director" and r.gamma_train == bgt
                    and r.delta == delta and r.gamma_infer == bgi), None)
        if row is None:
            ca, *_ = measure(model, replace(greedy, strategy="director", gamma_infer=bgi),
                             task.eval_prompts, task.f1_set)
        delta_acc[delta] = row.class_acc if row else ca
    log(f"label norm: off-candidate |p-0.5| {deviation}, class_acc {delta_acc}")

    guide = None
    if cfg.guided_baselines:
        guide = _train_classifier(task, cfg, mcfg, "guide", log)
        sub = task.eval_prompts[: cfg.n_guided_prompts]
        sub_f1 = task.f1_set[: cfg.n_guided_prompts]
        beam = replace(greedy, mode="beam", beam_width=cfg.beam_width)
        for name, dc in (("reranker", replace(beam, strategy="reranker")),
                         ("fudge", replace(greedy, strategy="fudge", top_k=cfg.top_k, gamma_infer=1.0)),
                         ("pacer", replace(beam, strategy="pacer", top_k=cfg.top_k, gamma_infer=1.0,
                                           pacer_samples=cfg.pacer_samples))):
            ca, br, f1, sec = measure(base, dc, sub, sub_f1, guide)
            rows.append(SafetyRow(name, 0.0, dc.gamma_infer, 0.0, ca, f1, br, sec))
            log(f"{name}: class_acc {ca:.3f} bad_rate {br:.3f} f1 {f1:.3f} sec/ex {sec:.4f}")

    models = SafetyModels(task, base, directors, frozen, clf, guide, val_class) if keep_models else None
    return SafetyOutcome(rows, baseline, best, frozen_row, clf_acc, agreement, detector_acc, deviation,
                         delta_acc, identical, time.perf_counter() - t0, models)


# -- speed ------------------------------------------------------------------------

def run_speed(models: SafetyModels, n_prompts: int = 20, repetitions: int = 3, top_k: int = 10,
              gamma_infer: float = 5.0, pacer: bool = False) -> dict[str, BenchResult]:
    """Latency of baseline, DIRECTOR and FUDGE (and optionally PACER) on identical prompts."""
    task = models.task
    L = task.sizes.response_len
    ctxs = [tokenize(r.context, task.vocab) for r in task.eval_prompts[:n_prompts]]
    director = next(iter(models.directors.values()))
    guide = models.guide if models.guide is not None else models.clf.model
    greedy = DecodeConfig(strategy="baseline", max_len=L, min_len=L)
    entries = {
        "baseline": BenchEntry(models.base, greedy),
        "director": BenchEntry(director, replace(greedy, strategy="director", gamma_infer=gamma_infer)),
        "fudge": BenchEntry(models.base, replace(greedy, strategy="fudge", top_k=top_k), guide),
    }
    if pacer:
        entries["pacer"] = BenchEntry(models.base, replace(greedy, strategy="pacer", mode="beam", beam_width=4,
                                                           top_k=top_k), guide)
    return latency_bench(entries, ctxs, repetitions)

