"""Command line entry point: synth, train, generate, eval, bench and sweep.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .data import (CorpusRecord, Vocabulary, detokenize, label_repetitions,
                   make_synthetic_repetition_task, make_synthetic_safety_task, read_corpus, tokenize, write_corpus)
from .decoding import GUIDED, DecodeConfig, decode
from .evaluation import (BenchEntry, EvalClassifier, LabeledExample, compute_metrics, latency_bench,
                         read_generations, scatter_emit, write_bench)
from .experiments import batches, class_batches, generate_all, lm_batches
from .model import DirectorModel, init_params, load_checkpoint, save_checkpoint
from .training import Trainer, write_history

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
CORPUS_FILES = ("train_lm.tsv", "train_class.tsv", "valid.tsv", "eval_prompts.tsv")


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _load_model(path, what: str = "checkpoint") -> DirectorModel:
    return load_checkpoint(_require_file(path, what).read_bytes())


def _write_checkpoint(model: DirectorModel, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(save_checkpoint(model))


# -- synth -------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, overwrite: bool = False) -> list[Path]:
    """Write the synthetic corpus and vocabulary for the configured task."""
    if cfg.task == "custom_corpus":
        raise ConfigError("task custom_corpus has nothing to synthesize")
    d = cfg.data
    names = ["vocab.txt", *CORPUS_FILES] + (["bad_tokens.txt"] if cfg.task == "safety_synthetic" else [])
    existing = [n for n in names if (d / n).exists()]
    if existing and not overwrite:
        raise ConfigError(f"{d} already holds {existing}; pass --overwrite to replace them")
    d.mkdir(parents=True, exist_ok=True)
    if cfg.task == "safety_synthetic":
        task = make_synthetic_safety_task(cfg.seed, cfg.sizes)
        splits = {"train_lm.tsv": task.d_lm, "train_class.tsv": task.d_class,
                  "valid.tsv": task.valid, "eval_prompts.tsv": task.eval_prompts}
        (d / "bad_tokens.txt").write_text(
            "".join(task.vocab.tokens[i] + "\n" for i in task.bad_ids), encoding="utf-8")
    else:
        task = make_synthetic_repetition_task(cfg.seed, cfg.sizes)
        splits = {"train_lm.tsv": task.train, "train_class.tsv": [],
                  "valid.tsv": task.valid, "eval_prompts.tsv": task.test}
    task.vocab.save(d / "vocab.txt")
    for name, records in splits.items():
        write_corpus(d / name, records)
    return [d / n for n in names]


# -- train -------------------------------------------------------------------

def _check_vocab(records, vocab: Vocabulary, path) -> None:
    for i, r in enumerate(records, 1):
        for field in (r.context, r.response):
            for w in field.split():
                if w not in vocab:
                    raise ValueError(f"{path}:{i}: token {w!r} is not in the vocabulary")


def _read_split(d: Path, name: str, vocab: Vocabulary, required: bool = True) -> list[CorpusRecord]:
    p = d / name
    if not p.is_file():
        if required:
            raise ConfigError(f"corpus file not found: {p}")
        return []
    records = read_corpus(p)
    _check_vocab(records, vocab, p)
    return records


def _repetition_class_data(model: DirectorModel, records, vocab, n: int, max_len: int, seed: int):
    """Label greedy and sampled continuations of training contexts by repeated n-grams."""
    seqs = []
    for i, r in enumerate(records[:600]):
        ctx = tokenize(r.context, vocab)
        mode = "greedy" if i % 2 == 0 else "topk_sample"
        dc = DecodeConfig(strategy="baseline", mode=mode, top_k=5, max_len=max_len, min_len=max_len,
                          seed=seed * 100003 + i)
        seqs.append(label_repetitions(ctx, decode(model, ctx, dc).tokens, n))
    return seqs


def cmd_train(cfg: ExperimentConfig, resume: bool = False) -> dict[str, Path]:
    """Train per config; writes best/final checkpoints and the loss history."""
    d = cfg.data
    vocab = Vocabulary.load(_require_file(d / "vocab.txt", "vocabulary"))
    if cfg.init_checkpoint:
        _require_file(cfg.init_checkpoint, "init checkpoint")
    lm_recs = _read_split(d, "train_lm.tsv", vocab)
    class_recs = _read_split(d, "train_class.tsv", vocab, required=False)
    valid = _read_split(d, "valid.tsv", vocab)
    if cfg.init_checkpoint:
        model = _load_model(cfg.init_checkpoint, "init checkpoint")
        if model.config.vocab_size != len(vocab):
            raise ValueError(f"init checkpoint has |V|={model.config.vocab_size}, vocabulary has {len(vocab)}")
    else:
        model = init_params(cfg.model_config(len(vocab)))
    model.frozen_core = cfg.frozen_lm
    msl = model.config.max_seq_len
    tc = cfg.train

    d_lm = [] if cfg.frozen_lm else lm_batches(lm_recs, vocab, tc.batch_size, msl)
    d_class = []
    if tc.gamma_train > 0 or tc.delta > 0 or tc.alpha_ul > 0:
        if cfg.label_repeats:
            resp_len = max(len(r.response.split()) for r in lm_recs)
            seqs = _repetition_class_data(model, lm_recs, vocab, cfg.label_repeats, resp_len, cfg.seed)
            d_class = batches(seqs, tc.batch_size)
        else:
            d_class = class_batches([r for r in class_recs if r.seq_label], vocab, tc.batch_size, msl)
    if tc.alpha_ul > 0 and cfg.label_repeats and not cfg.frozen_lm:
        # unlikelihood baseline: negatives ride on LM batches instead of training the classifier
        d_lm, d_class = d_lm + d_class, []
    if cfg.frozen_lm and not d_class:
        raise ConfigError("frozen_lm training needs classifier data (gamma_train > 0 and labeled records)")
    val_lm = lm_batches(valid, vocab, 50, msl)
    labeled_valid = [r for r in valid if r.seq_label]
    val_class = class_batches(labeled_valid, vocab, 50, msl) if d_class and labeled_valid else []

    out = cfg.out
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(model, d_lm, d_class, tc, val_lm=val_lm, val_class=val_class)
    resume_path = ck / "resume.pkl"
    if resume and resume_path.is_file():
        trainer.load_resume(resume_path)
        _info(f"resumed from step {trainer.state.step}")
    res = trainer.run(checkpoint_every=cfg.checkpoint_every, resume_path=resume_path)
    paths = {"best": ck / "best.ckpt", "final": ck / "final.ckpt", "history": out / "history.csv"}
    _write_checkpoint(res.model, paths["best"])
    final = res.model.copy()
    final.load_state_dict(res.final_state)
    _write_checkpoint(final, paths["final"])
    write_history(paths["history"], res.history)
    _info(f"trained {len(res.history)} steps; best metric {res.best_metric:.6g} at step {res.best_step}")
    return paths


# -- generate ----------------------------------------------------------------

def _read_prompts(path, vocab: Vocabulary) -> list[list[int]]:
    """Plain text (one context per line) or a corpus TSV, whose context column is used."""
    p = _require_file(path, "prompts file")
    if p.suffix == ".tsv":
        return [tokenize(r.context, vocab) for r in read_corpus(p)]
    return [tokenize(line, vocab) for line in p.read_text(encoding="utf-8").splitlines()]


def _guide(cfg: ExperimentConfig, strategy: str, guide_path: str | None) -> DirectorModel | None:
    if strategy not in GUIDED:
        return None
    path = guide_path or cfg.guide_checkpoint
    if not path:
        raise ConfigError(f"strategy {strategy!r} needs a guide model (decode.guide_checkpoint or --guide)")
    return _load_model(path, "guide checkpoint")


def cmd_generate(cfg: ExperimentConfig, checkpoint, prompts, out=None, guide_path=None) -> Path:
    """One JSON line per prompt; per-example timings go to a sidecar CSV."""
    vocab = Vocabulary.load(_require_file(cfg.data / "vocab.txt", "vocabulary"))
    _require_file(checkpoint, "checkpoint")
    ctxs = _read_prompts(prompts, vocab)
    model = _load_model(checkpoint)
    guide = _guide(cfg, cfg.decode.strategy, guide_path)
    results = generate_all(model, ctxs, cfg.decode, guide)
    out = Path(out) if out else cfg.out / "generations.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    # the generations file holds only deterministic fields so reruns compare byte-for-byte
    with open(out, "w", encoding="utf-8") as fh:
        for ctx, r in zip(ctxs, results):
            rec = {"prompt": detokenize(ctx, vocab), "tokens": r.tokens, "text": detokenize(r.tokens, vocab),
                   "guide_calls": r.guide_calls}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(out.with_suffix(".timing.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(("index", "strategy", "seconds", "guide_calls"))
        for i, r in enumerate(results):
            w.writerow((i, r.strategy, repr(r.seconds), r.guide_calls))
    return out


# -- eval --------------------------------------------------------------------

def _eval_classifier(cfg: ExperimentConfig, vocab: Vocabulary, checkpoint: str | None,
                     calibration: str | None) -> EvalClassifier | None:
    path = checkpoint or cfg.eval_checkpoint
    if not path:
        return None
    model = _load_model(path, "eval checkpoint")
    cal = calibration or cfg.calibration
    if not cal:
        return EvalClassifier(model)
    recs = [r for r in read_corpus(_require_file(cal, "calibration corpus")) if r.seq_label]
    ex = [LabeledExample(tokenize(r.context, vocab), tokenize(r.response, vocab), r.seq_label == "positive")
          for r in recs]
    return EvalClassifier.calibrate(model, ex)


def _bad_ids(cfg: ExperimentConfig, vocab: Vocabulary) -> list[int] | None:
    p = cfg.data / "bad_tokens.txt"
    if not p.is_file():
        return None
    return [vocab.id(w) for w in p.read_text(encoding="utf-8").split()]


def cmd_eval(cfg: ExperimentConfig, generations, references, eval_checkpoint=None, calibration=None,
             out=None) -> Path:
    vocab = Vocabulary.load(_require_file(cfg.data / "vocab.txt", "vocabulary"))
    gens = read_generations(_require_file(generations, "generations file"))
    refs = read_corpus(_require_file(references, "references file"))
    if len(gens) != len(refs):
        raise ValueError(f"{len(gens)} generations but {len(refs)} references")
    ctxs = [tokenize(r.context, vocab) for r in refs]
    ref_ids = [tokenize(r.response, vocab) for r in refs]
    toks = [[int(t) for t in g["tokens"]] for g in gens]
    clf = _eval_classifier(cfg, vocab, eval_checkpoint, calibration)
    report = compute_metrics(ctxs, toks, ref_ids, [float(g.get("seconds", 0.0)) for g in gens], clf,
                             _bad_ids(cfg, vocab))
    timing = Path(generations).with_suffix(".timing.csv")
    if timing.is_file():
        with open(timing, newline="", encoding="utf-8") as fh:
            secs = [float(row["seconds"]) for row in csv.DictReader(fh)]
        if secs:
            report.sec_per_ex = float(np.mean(secs))
    out = Path(out) if out else cfg.out / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write(out)
    return out


# -- bench -------------------------------------------------------------------

def _eval_prompts(cfg: ExperimentConfig, vocab: Vocabulary, n: int | None = None):
    recs = _read_split(cfg.data, "eval_prompts.tsv", vocab)
    if n is not None:
        recs = recs[:n]
    return recs


def cmd_bench(cfg: ExperimentConfig, checkpoint, guide_path=None, out=None) -> Path:
    vocab = Vocabulary.load(_require_file(cfg.data / "vocab.txt", "vocabulary"))
    _require_file(checkpoint, "checkpoint")
    recs = _eval_prompts(cfg, vocab, cfg.bench_prompts)
    if len(recs) < cfg.bench_prompts:
        raise ConfigError(f"bench needs {cfg.bench_prompts} prompts, eval_prompts.tsv has {len(recs)}")
    needs_guide = [s for s in cfg.bench_strategies if s in GUIDED]
    guide = _guide(cfg, needs_guide[0], guide_path) if needs_guide else None
    model = _load_model(checkpoint)
    entries = {}
    for s in cfg.bench_strategies:
        dc = replace(cfg.decode, strategy=s)
        if s == "pacer":
            dc = replace(dc, mode="beam")
        entries[s] = BenchEntry(model, dc, guide if s in GUIDED else None)
    res = latency_bench(entries, [tokenize(r.context, vocab) for r in recs], cfg.bench_repetitions)
    out = Path(out) if out else cfg.out / "bench.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench(out, res)
    return out


# -- sweep -------------------------------------------------------------------

def _sweep_rows(cfg: ExperimentConfig, vocab: Vocabulary, clf: EvalClassifier):
    recs = _eval_prompts(cfg, vocab)
    ctxs = [tokenize(r.context, vocab) for r in recs]
    refs = [tokenize(r.response, vocab) for r in recs]
    configs, results = [], []
    for gt in cfg.sweep_gamma_train:
        for delta in cfg.sweep_delta:
            sub = replace(cfg, output_dir=str(cfg.out / "sweep" / f"gt{gt:g}_delta{delta:g}"),
                          data_dir=str(cfg.data), train=replace(cfg.train, gamma_train=gt, delta=delta))
            paths = cmd_train(sub)
            model = _load_model(paths["best"])
            for gi in cfg.sweep_gamma_infer:
                strategy = "director" if gi > 0 else "baseline"
                dc = replace(cfg.decode, strategy=strategy, gamma_infer=gi, mode=cfg.decode.mode)
                gens = generate_all(model, ctxs, dc)
                m = compute_metrics(ctxs, [g.tokens for g in gens], refs, [g.seconds for g in gens], clf)
                configs.append({"strategy": strategy, "gamma_train": gt, "gamma_infer": gi, "delta": delta})
                results.append({"class_acc": m.class_acc, "gen_f1": m.f1, "sec_per_ex": m.sec_per_ex})
                _info(f"gt={gt:g} delta={delta:g} gi={gi:g}: class_acc {m.class_acc:.3f} f1 {m.f1:.3f}")
    return configs, results


def cmd_sweep(cfg: ExperimentConfig, out=None) -> Path:
    """Train each (gamma_train, delta) point, decode at each gamma_infer, write the scatter CSV."""
    vocab = Vocabulary.load(_require_file(cfg.data / "vocab.txt", "vocabulary"))
    if not cfg.eval_checkpoint:
        raise ConfigError("sweep needs eval.checkpoint for class accuracy")
    clf = _eval_classifier(cfg, vocab, None, None)
    configs, results = _sweep_rows(cfg, vocab, clf)
    out = Path(out) if out else cfg.out / "scatter.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    scatter_emit(configs, results, out)
    return out


# -- entry -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="director", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="INI experiment config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key (repeatable)")
        return sp

    sp = common(sub.add_parser("synth", help="write the synthetic corpus"))
    sp.add_argument("--overwrite", action="store_true")
    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--resume", action="store_true", help="continue from the periodic resume file")
    sp = common(sub.add_parser("generate", help="decode prompts with a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--prompts", required=True)
    sp.add_argument("--guide")
    sp.add_argument("--out")
    sp = common(sub.add_parser("eval", help="score a generations file"))
    sp.add_argument("--generations", required=True)
    sp.add_argument("--references", required=True)
    sp.add_argument("--eval-checkpoint")
    sp.add_argument("--calibration")
    sp.add_argument("--out")
    sp = common(sub.add_parser("bench", help="latency benchmark"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--guide")
    sp.add_argument("--out")
    sp = common(sub.add_parser("sweep", help="gamma/delta grid to a scatter CSV"))
    sp.add_argument("--out")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.command == "synth":
            result = cmd_synth(cfg, args.overwrite)
        elif args.command == "train":
            result = cmd_train(cfg, args.resume)
        elif args.command == "generate":
            result = cmd_generate(cfg, args.checkpoint, args.prompts, args.out, args.guide)
        elif args.command == "eval":
            result = cmd_eval(cfg, args.generations, args.references, args.eval_checkpoint, args.calibration,
                              args.out)
        elif args.command == "bench":
            result = cmd_bench(cfg, args.checkpoint, args.guide, args.out)
        else:
            result = cmd_sweep(cfg, args.out)
    except ConfigError as e:
        _info(f"config error: {e}")
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to one exit code
        _info(f"error: {type(e).__name__}: {e}")
        return EXIT_RUNTIME
    if isinstance(result, dict):
        result = list(result.values())
    for path in result if isinstance(result, list) else [result]:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
