"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that the terminal summary prints, then
asserts. The two experiment runs are module-scoped and shared.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import ACCEPTANCE
from director import tensor as T
from director.data import collate, encode_example, label_repetitions, repeated_starts, tokenize
from director.decoding import MODES, DecodeConfig, decode
from director.evaluation import repeat_counts, repeat_score_5, unigram_f1
from director.experiments import run_repetition, run_safety, run_speed
from director.model import ModelConfig, init_params
from director.training import class_loss, label_norm_loss, lm_loss, ul_token_loss
from helpers import analytic_grads, randomize, relative_error


def report(n: int, title: str, checks: dict, detail: str) -> None:
    ok = all(bool(v) for v in checks.values())
    failed = [k for k, v in checks.items() if not v]
    ACCEPTANCE.append((n, title, ok, detail + (f" [failed: {', '.join(failed)}]" if failed else "")))
    print(f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}: {detail}")
    assert ok, f"criterion {n} failed: {failed} ({detail})"


@pytest.fixture(scope="module")
def safety():
    return run_safety(keep_models=True)


@pytest.fixture(scope="module")
def repetition():
    return run_repetition()


# -- 1 ----------------------------------------------------------------------------

def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    cfg = ModelConfig(vocab_size=8, embed_dim=16, n_layers=2, n_heads=2, max_seq_len=12, seed=0)
    model = randomize(init_params(cfg), seed=1, scale=0.3)
    batch = collate([encode_example([5, 6], [7, 5, 6], response_labels=[1, 0, 0], response_weights=[1, .5, 2]),
                     encode_example([6], [7, 7], response_labels=[0, 1])])
    gamma, delta, alpha = 0.7, 1.3, 0.25

    def losses(out):
        lm = lm_loss(out, batch.tokens, batch.lm_mask)
        cl = class_loss(out, batch)
        nl = label_norm_loss(out, batch)
        ul = ul_token_loss(out, batch)
        joint = lm + ul * alpha + cl * gamma + nl * delta
        return {"lm": lm, "class": cl, "label_norm": nl, "ul_tok": ul, "joint": joint}

    params = list(model.params.values())
    names = list(losses(model.forward(batch.tokens)))
    ana = {k: np.concatenate([g.ravel() for g in analytic_grads(lambda k=k: losses(model.forward(batch.tokens))[k],
                                                                 params)]) for k in names}
    # one perturbed forward pass scores every loss, so all coordinates are checked
    h = 1e-4
    num = {k: [] for k in names}
    with T.no_grad():
        for p in params:
            for idx in np.ndindex(p.shape):
                old = p.data[idx]
                p.data[idx] = old + h
                up = {k: v.item() for k, v in losses(model.forward(batch.tokens)).items()}
                p.data[idx] = old - h
                down = {k: v.item() for k, v in losses(model.forward(batch.tokens)).items()}
                p.data[idx] = old
                for k in names:
                    num[k].append((up[k] - down[k]) / (2 * h))
    errs = {k: relative_error(ana[k], np.array(num[k])) for k in names}
    secs = time.perf_counter() - t0
    checks = {f"{k} rel err < 1e-4": e < 1e-4 for k, e in errs.items()}
    checks["runtime < 60 s"] = secs < 60
    detail = ", ".join(f"{k} {e:.1e}" for k, e in errs.items()) + f"; {model.num_parameters()} coords, {secs:.1f} s"
    report(1, "loss gradients match finite differences", checks, detail)


# -- 2 ----------------------------------------------------------------------------

def test_criterion_02_parallel_classifier_oracle():
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(1000 + i)
        V = int(rng.integers(6, 12))
        cfg = ModelConfig(vocab_size=V, embed_dim=16, n_layers=2, n_heads=2, max_seq_len=12, seed=i)
        model = randomize(init_params(cfg), seed=i)
        toks = list(rng.integers(0, V, size=int(rng.integers(2, 10))))
        with T.no_grad():
            par = model.forward(toks).class_probs
            for t in range(len(toks)):
                for v in range(V):
                    seq = model.forward(toks[: t + 1] + [v]).class_probs[t, v]
                    worst = max(worst, abs(par[t, v] - seq))
    report(2, "one-pass classifier equals per-candidate passes", {"max abs diff <= 1e-9": worst <= 1e-9},
           f"20 instances, max abs diff {worst:.2e}")


# -- 3 ----------------------------------------------------------------------------

def test_criterion_03_gamma_identity():
    cfg = ModelConfig(vocab_size=24, embed_dim=16, n_layers=2, n_heads=2, max_seq_len=40, seed=0)
    model = randomize(init_params(cfg), seed=5, scale=0.5)
    mismatches = {m: 0 for m in MODES}
    for i in range(50):
        rng = np.random.default_rng(i)
        ctx = list(rng.integers(5, 24, size=int(rng.integers(0, 8))))
        for mode in MODES:
            kw = dict(mode=mode, seed=i, max_len=16, top_k=5, beam_width=3)
            base = decode(model, ctx, DecodeConfig(strategy="baseline", **kw))
            dire = decode(model, ctx, DecodeConfig(strategy="director", gamma_infer=0.0, **kw))
            mismatches[mode] += base.tokens != dire.tokens
    report(3, "gamma_infer=0 decoding is token-identical to baseline",
           {f"{m} identical": c == 0 for m, c in mismatches.items()},
           f"50 prompts x {len(MODES)} modes, mismatches {mismatches}")


# -- 4 ----------------------------------------------------------------------------

def test_criterion_04_repetition(repetition):
    out = repetition
    base_r3 = out.baseline.repeat_at_n[3]
    best = out.best
    reduction = 1 - best.repeat_at_n[3] / base_r3 if base_r3 else 0.0
    checks = {
        "baseline Repeat@3 > 5": base_r3 > 5,
        "Repeat@3 reduced >= 50%": reduction >= 0.5,
        "F1 not below baseline by > 0.03": best.f1 >= out.baseline.f1 - 0.03,
        "runtime < 15 min": out.seconds < 900,
    }
    detail = (f"baseline Repeat@3 {base_r3:.2f} F1 {out.baseline.f1:.3f}; director (gamma_infer "
              f"{out.best_gamma:g}) Repeat@3 {best.repeat_at_n[3]:.2f} F1 {best.f1:.3f}; "
              f"reduction {reduction:.0%}; {out.seconds:.0f} s")
    report(4, "repetition control", checks, detail)


# -- 5 ----------------------------------------------------------------------------

def test_criterion_05_safety(safety):
    b, d = safety.baseline, safety.best
    guided = {r.strategy: r.class_acc for r in safety.rows if r.strategy in ("reranker", "fudge", "pacer")}
    checks = {
        "bad rate < 20% of baseline": d.bad_rate < 0.2 * b.bad_rate,
        "class acc +20 points": d.class_acc >= b.class_acc + 0.20,
        "F1 not below baseline by > 0.03": d.gen_f1 >= b.gen_f1 - 0.03,
    }
    detail = (f"baseline bad {b.bad_rate:.2f} acc {b.class_acc:.2f} F1 {b.gen_f1:.3f}; director "
              f"(gt {d.gamma_train:g}, gi {d.gamma_infer:g}, delta {d.delta:g}) bad {d.bad_rate:.2f} "
              f"acc {d.class_acc:.2f} F1 {d.gen_f1:.3f}; guided acc {guided}; eval clf acc "
              f"{safety.clf_accuracy:.2f}, detector agreement {safety.clf_detector_agreement:.2f}")
    report(5, "safety-style control", checks, detail)


# -- 6 ----------------------------------------------------------------------------

def test_criterion_06_beam_blocking(safety):
    task = safety.models.task
    records = (task.eval_prompts + task.f1_set)[:200]
    cfg = DecodeConfig(strategy="baseline", mode="beam", beam_width=4, block_n=3,
                       max_len=task.sizes.response_len, min_len=task.sizes.response_len)
    repeats = 0
    for r in records:
        ctx = tokenize(r.context, task.vocab)
        full = ctx + decode(safety.models.base, ctx, cfg).tokens
        # brute force: every generated 3-gram against every earlier window
        repeats += sum(1 for s in range(len(ctx), len(full) - 2)
                       if any(full[e:e + 3] == full[s:s + 3] for e in range(s)))
    report(6, "3-gram beam blocking", {"200 generations": len(records) == 200, "zero repeats": repeats == 0},
           f"{len(records)} generations, {repeats} repeated 3-grams")


# -- 7 ----------------------------------------------------------------------------

def test_criterion_07_frozen_lm(safety):
    f, d = safety.frozen, safety.best
    checks = {"core bit-identical": safety.frozen_core_identical, "frozen acc <= full acc": f.class_acc <= d.class_acc}
    report(7, "frozen-LM ablation", checks,
           f"core unchanged {safety.frozen_core_identical}; class acc frozen {f.class_acc:.3f} vs "
           f"full {d.class_acc:.3f}")


# -- 8 ----------------------------------------------------------------------------

def test_criterion_08_label_norm(safety):
    dev, acc = safety.deviation, safety.delta_class_acc
    checks = {"deviation strictly smaller": dev[1.0] < dev[0.0], "acc drop <= 2 points": acc[1.0] >= acc[0.0] - 0.02}
    report(8, "explicit label normalization", checks,
           f"mean |p-0.5| off-candidate {dev[0.0]:.4f} (delta 0) vs {dev[1.0]:.4f} (delta 1); "
           f"class acc {acc[0.0]:.3f} vs {acc[1.0]:.3f}")


# -- 9 ----------------------------------------------------------------------------

def test_criterion_09_speed(safety):
    top_k, m = 10, 5
    res = run_speed(safety.models, top_k=top_k, pacer=True)
    base, dire, fudge, pacer = (res[k] for k in ("baseline", "director", "fudge", "pacer"))
    fudge_exact = all(c == s * top_k for c, s in zip(fudge.calls, fudge.steps))
    pacer_exact = all(c == s * m + 4 for c, s in zip(pacer.calls, pacer.steps))
    checks = {
        "director <= 1.5x baseline": dire.sec_per_ex <= 1.5 * base.sec_per_ex,
        "fudge >= 2x director": fudge.sec_per_ex >= 2 * dire.sec_per_ex,
        "no guide calls for baseline/director": base.guide_calls_per_ex == 0 == dire.guide_calls_per_ex,
        "fudge calls = steps x top_k": fudge_exact,
        "pacer calls = steps x m + beam": pacer_exact,
    }
    detail = (f"sec/ex baseline {base.sec_per_ex * 1e3:.2f} ms, director {dire.sec_per_ex * 1e3:.2f} ms "
              f"({dire.sec_per_ex / base.sec_per_ex:.2f}x), fudge {fudge.sec_per_ex * 1e3:.2f} ms "
              f"({fudge.sec_per_ex / dire.sec_per_ex:.1f}x director), pacer {pacer.sec_per_ex * 1e3:.2f} ms; "
              f"calls/ex fudge {fudge.guide_calls_per_ex:.0f}, pacer {pacer.guide_calls_per_ex:.0f}")
    report(9, "inference speed", checks, detail)


# -- 10 ---------------------------------------------------------------------------

def _brute_counts(ctx, gen):
    full = ctx + gen
    return {n: sum(1 for s in range(len(ctx), len(full) - n + 1) if any(full[e:e + n] == full[s:s + n]
                                                                        for e in range(s)))
            for n in range(1, 6)}


def _brute_labels(ctx, gen, max_n, weighted):
    full = ctx + gen
    c = len(ctx)
    cover = [0] * len(gen)
    for n in (range(1, max_n + 1) if weighted else [max_n]):
        for s in range(c, len(full) - n + 1):
            if any(full[e:e + n] == full[s:s + n] for e in range(s)):
                for t in range(s, s + n):
                    cover[t - c] = max(cover[t - c], n)
    return [0 if k else 1 for k in cover], [k / max_n if (k and weighted) else 1.0 for k in cover]


def _multiset_f1(gen, ref):
    pool, hits = list(ref), 0
    for t in gen:
        if t in pool:
            pool.remove(t)
            hits += 1
    if not hits:
        return 0.0
    p, r = hits / len(gen), hits / len(ref)
    return 2 * p * r / (p + r)


def test_criterion_10_metric_oracles():
    rng = np.random.default_rng(10)
    bad = {"repeat_counts": 0, "label_repetitions": 0, "repeat_score_5": 0, "unigram_f1": 0}
    for _ in range(500):
        ctx = [int(x) for x in rng.integers(5, 9, size=int(rng.integers(0, 8)))]
        gen = [int(x) for x in rng.integers(5, 9, size=int(rng.integers(1, 15)))]
        bad["repeat_counts"] += repeat_counts(ctx, gen) != _brute_counts(ctx, gen)
        max_n, weighted = int(rng.integers(1, 6)), bool(rng.integers(2))
        seq = label_repetitions(ctx, gen, max_n, weighted)
        start = len(seq) - len(gen) - 1
        labels, weights = _brute_labels(ctx, gen, max_n, weighted)
        bad["label_repetitions"] += (list(seq.labels[start:start + len(gen)]) != labels
                                     or not np.allclose(seq.weights[start:start + len(gen)], weights))
        ref = [int(x) for x in rng.integers(5, 12, size=int(rng.integers(1, 12)))]
        bad["unigram_f1"] += abs(unigram_f1(gen, ref) - _multiset_f1(gen, ref)) > 1e-12
    for _ in range(100):
        c = [int(x) for x in rng.integers(0, 30, size=5)]
        total = sum(c)
        hand = 0.0 if total == 0 else math.log2(sum(2 ** i * c[i - 1] for i in range(1, 6)) / total) * c[0]
        bad["repeat_score_5"] += abs(repeat_score_5(dict(zip(range(1, 6), c))) - hand) > 1e-12
    report(10, "metric oracles", {k: v == 0 for k, v in bad.items()},
           "500 n-gram/label/F1 cases, 100 score vectors; mismatches " + str(bad))


@settings(max_examples=200)
@given(st.lists(st.integers(0, 3), max_size=6), st.lists(st.integers(0, 3), min_size=1, max_size=12))
def test_repeated_starts_agrees_with_brute_force(ctx, gen):
    full = ctx + gen
    for n in range(1, 6):
        expect = [s for s in range(len(ctx), len(full) - n + 1)
                  if any(full[e:e + n] == full[s:s + n] for e in range(s))]
        assert repeated_starts(full, n, first=len(ctx)) == expect
