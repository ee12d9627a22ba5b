import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from director.decoding import DecodeConfig, GenerationResult, decode
from director.evaluation import (BENCH_FIELDS, SCATTER_FIELDS, BenchEntry, EvalClassifier, GenerationsFormatError,
                                 LabeledExample, MetricsReport, balanced_threshold, bad_token_rate,
                                 compute_metrics, eval_classifier_accuracy, generation_class_accuracy,
                                 latency_bench, read_generations, read_scatter, repeat_counts, repeat_score_5,
                                 scatter_emit, unigram_f1, write_bench, write_generations)
from director.model import ModelConfig, init_params
from helpers import randomize

tokens = st.lists(st.integers(0, 4), min_size=1, max_size=12)


def multiset_f1(gen, ref):
    """Greedy matching with explicit removal, independent of Counter arithmetic."""
    pool = list(ref)
    hits = 0
    for t in gen:
        if t in pool:
            pool.remove(t)
            hits += 1
    if hits == 0:
        return 0.0
    p, r = hits / len(gen), hits / len(ref)
    return 2 * p * r / (p + r)


def brute_repeat_counts(ctx, gen):
    full = list(ctx) + list(gen)
    out = {}
    for n in range(1, 6):
        out[n] = sum(1 for s in range(len(ctx), len(full) - n + 1)
                     if any(full[e:e + n] == full[s:s + n] for e in range(s)))
    return out


def make_model(seed):
    cfg = ModelConfig(vocab_size=10, embed_dim=16, n_layers=1, n_heads=2, max_seq_len=24, seed=seed)
    return randomize(init_params(cfg), seed=seed)


# -- F1 ------------------------------------------------------------------------

def test_f1_examples():
    assert unigram_f1([1, 2, 3], [1, 2, 3]) == 1.0
    assert unigram_f1([1, 2], [3, 4]) == 0.0
    assert unigram_f1([1, 2, 3, 4], [1, 2, 5, 6]) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        unigram_f1([], [1])


@settings(max_examples=300)
@given(tokens, tokens)
def test_f1_matches_multiset_oracle(gen, ref):
    assert unigram_f1(gen, ref) == pytest.approx(multiset_f1(gen, ref), abs=1e-12)
    assert unigram_f1(gen, gen) == 1.0
    if len(gen) == len(ref):
        assert unigram_f1(gen, ref) == pytest.approx(unigram_f1(ref, gen), abs=1e-15)


# -- repetition metrics ----------------------------------------------------------

def test_repeat_count_examples():
    a, b, c = 5, 6, 7
    assert repeat_counts([], [a, b, c]) == {n: 0 for n in range(1, 6)}
    assert repeat_counts([], [a, a, a]) == {1: 2, 2: 1, 3: 0, 4: 0, 5: 0}
    assert repeat_counts([a, b], [a, b]) == {1: 2, 2: 1, 3: 0, 4: 0, 5: 0}


@settings(max_examples=500)
@given(st.lists(st.integers(0, 3), max_size=8), tokens)
def test_repeat_counts_match_brute_force(ctx, gen):
    assert repeat_counts(ctx, gen) == brute_repeat_counts(ctx, gen)


def test_repeat_score_examples():
    assert repeat_score_5({n: 0 for n in range(1, 6)}) == 0.0
    assert repeat_score_5({1: 2, 2: 1}) == pytest.approx(math.log2(8 / 3) * 2)
    assert repeat_score_5({1: 2, 2: 1}) == pytest.approx(2.83, abs=5e-3)
    for k in (1, 4, 9):
        assert repeat_score_5({1: k}) == pytest.approx(k)


@settings(max_examples=100)
@given(st.lists(st.integers(0, 20), min_size=5, max_size=5))
def test_repeat_score_matches_hand_formula(c):
    counts = dict(zip(range(1, 6), c))
    total = sum(c)
    expected = 0.0 if total == 0 else math.log2(sum(2 ** i * c[i - 1] for i in range(1, 6)) / total) * c[0]
    assert repeat_score_5(counts) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=300)
@given(st.lists(st.integers(0, 20), min_size=5, max_size=5), st.integers(0, 4), st.integers(1, 5))
def test_repeat_score_monotone_where_weight_exceeds_mean(c, i, bump):
    counts = dict(zip(range(1, 6), c))
    more = dict(counts)
    more[i + 1] += bump
    total = sum(c)
    mean_weight = sum(2 ** k * c[k - 1] for k in range(1, 6)) / total if total else 0.0
    # raising count[1] or count[5] never lowers the score; a middle count only
    # helps when its weight 2^i is at least the current weighted mean
    if i in (0, 4) or 2 ** (i + 1) >= mean_weight:
        assert repeat_score_5(more) >= repeat_score_5(counts) - 1e-12


def test_repeat_score_not_monotone_in_middle_counts():
    assert repeat_score_5({1: 1, 2: 1, 5: 1}) < repeat_score_5({1: 1, 5: 1})


# -- classifier metrics -------------------------------------------------------------

def clf_fixture(bad=(9,)):
    model = make_model(0)
    model.params["class_head.w"].data[:] = 0
    model.params["class_head.b"].data[:] = 4.0
    model.params["class_head.b"].data[list(bad)] = -4.0
    return model


def labeled(n=20, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        resp = list(rng.integers(5, 9, size=4))
        if i % 2:
            resp[int(rng.integers(4))] = 9
        out.append(LabeledExample([5, 6], resp, positive=not i % 2))
    return out


def test_perfect_classifier_scores_one():
    assert eval_classifier_accuracy(clf_fixture(), labeled()) == 1.0
    calibrated = EvalClassifier.calibrate(clf_fixture(), labeled(seed=1))
    assert eval_classifier_accuracy(calibrated, labeled()) == 1.0


def test_constant_classifier_is_chance():
    model = clf_fixture(bad=())
    model.params["class_head.b"].data[:] = 0.0
    assert eval_classifier_accuracy(model, labeled()) == pytest.approx(0.5)


def test_single_class_set_rejected():
    with pytest.raises(ValueError):
        eval_classifier_accuracy(clf_fixture(), [e for e in labeled() if e.positive])


@given(st.lists(st.tuples(st.floats(-10, 10), st.booleans()), min_size=2, max_size=30))
def test_balanced_threshold_is_optimal(pairs):
    scores = [s for s, _ in pairs]
    ys = [y for _, y in pairs]
    if all(ys) or not any(ys):
        return
    y = np.array(ys)

    def bacc(t):
        pred = np.array(scores) >= t
        return 0.5 * ((pred & y).sum() / y.sum() + (~pred & ~y).sum() / (~y).sum())

    t = balanced_threshold(scores, ys)
    best = max(bacc(c) for c in sorted(set(scores)) + [np.inf])
    assert bacc(t) == pytest.approx(best)


def test_generation_class_accuracy_and_bad_rate():
    clf = EvalClassifier(clf_fixture())
    ctxs = [[5]] * 4
    gens = [[5, 6], [9, 6], [7], [8, 9]]
    assert generation_class_accuracy(clf, ctxs, gens) == 0.5
    assert bad_token_rate(gens, [9]) == 0.5
    assert bad_token_rate(gens, []) == 0.0


# -- reports and files ----------------------------------------------------------------

def test_metrics_identical_generations(tmp_path):
    gens = [[5, 6, 7], [8, 8, 8, 8]]
    rep = compute_metrics([[5], [6]], gens, gens, seconds=[0.1, 0.3])
    assert rep.f1 == 1.0 and rep.avg_len == 3.5 and rep.sec_per_ex == pytest.approx(0.2)
    assert rep.repeat_at_n[1] == 2.0 and rep.repeat_at_n[3] == 0.5
    rep.write(tmp_path / "m.json")
    assert MetricsReport.from_dict(json.loads((tmp_path / "m.json").read_text())) == rep


def test_metrics_report_bounds():
    with pytest.raises(ValueError):
        MetricsReport(f1=1.5, repeat_at_n={1: 0.0}, repeat_score_5=0, avg_len=1, sec_per_ex=0.1)
    with pytest.raises(ValueError):
        MetricsReport(f1=0.5, repeat_at_n={1: math.nan}, repeat_score_5=0, avg_len=1, sec_per_ex=0.1)


def test_generations_round_trip_and_errors(tmp_path):
    res = [GenerationResult([1, 5, 3], [6, 7], "director", 0.01, guide_calls=0)]
    write_generations(tmp_path / "g.jsonl", res)
    (rec,) = read_generations(tmp_path / "g.jsonl")
    assert rec["tokens"] == [6, 7] and rec["prompt_ids"] == [1, 5, 3]
    (tmp_path / "bad.jsonl").write_text('{"tokens": [1]}\n{oops\n')
    with pytest.raises(GenerationsFormatError, match=":2:"):
        read_generations(tmp_path / "bad.jsonl")
    (tmp_path / "bad2.jsonl").write_text('{"text": "a"}\n')
    with pytest.raises(GenerationsFormatError, match=":1:"):
        read_generations(tmp_path / "bad2.jsonl")


def test_scatter_round_trip(tmp_path):
    configs = [{"strategy": "baseline", "gamma_infer": 0.0},
               {"strategy": "director", "gamma_train": 0.2, "gamma_infer": 5.0, "delta": 1.0},
               {"strategy": "fudge", "gamma_infer": 1.0}]
    results = [{"class_acc": 0.1, "gen_f1": 0.2, "sec_per_ex": 0.01},
               {"class_acc": 0.9, "gen_f1": 1 / 3, "sec_per_ex": 0.02},
               {"class_acc": 0.5, "gen_f1": 0.25, "sec_per_ex": 0.3}]
    rows = scatter_emit(configs, results, tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert len(lines) == 4 and lines[0] == ",".join(SCATTER_FIELDS)
    assert read_scatter(tmp_path / "s.csv") == rows
    assert rows[0].strategy == "baseline" and rows[0].gamma_infer == 0.0


# -- latency ---------------------------------------------------------------------------

def test_latency_bench_accounting(tmp_path):
    model, guide = make_model(1), make_model(2)
    prompts = [[5 + i % 4, 6 + i % 3] for i in range(20)]
    base = DecodeConfig(max_len=5, min_len=5, top_k=3)
    entries = {
        "baseline": BenchEntry(model, DecodeConfig(**{**base.__dict__, "strategy": "baseline"})),
        "director": BenchEntry(model, DecodeConfig(**{**base.__dict__, "strategy": "director"})),
        "fudge": BenchEntry(model, DecodeConfig(**{**base.__dict__, "strategy": "fudge"}), guide),
        "pacer": BenchEntry(model, DecodeConfig(**{**base.__dict__, "strategy": "pacer", "mode": "beam",
                                                   "pacer_samples": 2, "beam_width": 2}), guide),
    }
    res = latency_bench(entries, prompts, repetitions=3)
    assert res["baseline"].guide_calls_per_ex == 0 and res["director"].guide_calls_per_ex == 0
    for calls, steps in zip(res["fudge"].calls, res["fudge"].steps):
        assert calls == steps * 3
    for calls, steps in zip(res["pacer"].calls, res["pacer"].steps):
        assert calls == steps * 2 + 2
    assert all(len(r.timings) == 60 and r.sec_per_ex > 0 for r in res.values())
    again = latency_bench(entries, prompts, repetitions=3)
    assert all(again[k].outputs == res[k].outputs for k in res)
    assert res["baseline"].outputs[0] == decode(model, prompts[0], entries["baseline"].config).tokens
    write_bench(tmp_path / "b.csv", res)
    lines = (tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == ",".join(BENCH_FIELDS)
    assert sorted(l.split(",")[0] for l in lines[1:]) == sorted(entries)


def test_latency_bench_preconditions():
    e = {"baseline": BenchEntry(make_model(0), DecodeConfig(strategy="baseline"))}
    with pytest.raises(ValueError):
        latency_bench(e, [[5]] * 19)
    with pytest.raises(ValueError):
        latency_bench(e, [[5]] * 20, repetitions=2)
