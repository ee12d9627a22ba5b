"""Generation strategies over trained models.

``baseline`` decodes from the LM head alone; ``director`` multiplies the LM
distribution by the model's own classifier probabilities raised to
``gamma_infer``. ``reranker``, ``fudge`` and ``pacer`` consult a separate
guide model: after beam search, per pool candidate at every step, or per
sampled candidate plus a final rerank, respectively.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import BOS, EOS, PAD, SEP, UNK, Vocabulary, detokenize, encode_prompt
from .model import DirectorModel, KVCache
from .seeding import rng_for

STRATEGIES = ("baseline", "director", "reranker", "fudge", "pacer")
MODES = ("greedy", "beam", "topk_sample")
GUIDED = ("reranker", "fudge", "pacer")
BANNED = (PAD, BOS, SEP, UNK)


@dataclass
class DecodeConfig:
    strategy: str = "director"
    gamma_infer: float = 1.0
    mode: str = "greedy"
    beam_width: int = 4
    top_k: int = 10
    block_n: int | None = None
    max_len: int = 32
    min_len: int | None = None
    seed: int = 0
    pacer_samples: int = 5
    return_distributions: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.gamma_infer < 0:
            raise ValueError("gamma_infer must be non-negative")
        for name in ("beam_width", "top_k", "max_len", "pacer_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.block_n is not None:
            if self.block_n < 1:
                raise ValueError("block_n must be >= 1")
            if self.mode == "topk_sample":
                raise ValueError("block_n is only valid with beam or greedy modes")
        if self.min_len is not None and not 0 <= self.min_len <= self.max_len:
            raise ValueError("min_len must lie in [0, max_len]")


@dataclass
class StepDistribution:
    probs: np.ndarray
    log_z: float


@dataclass
class GenerationResult:
    prompt: list[int]
    tokens: list[int]
    strategy: str
    seconds: float
    guide_calls: int = 0
    steps: int = 0
    finished: bool = False
    score: float = 0.0
    text: str = ""
    distributions: list[StepDistribution] | None = None

    def to_record(self, vocab: Vocabulary | None = None) -> dict:
        text = self.text or (detokenize(self.tokens, vocab) if vocab is not None else "")
        prompt = detokenize(self.prompt, vocab) if vocab is not None else " ".join(map(str, self.prompt))
        return {"prompt": prompt, "tokens": list(map(int, self.tokens)), "text": text,
                "strategy": self.strategy, "seconds": self.seconds, "guide_calls": self.guide_calls}


# -- head combination --------------------------------------------------------

def _log_normalize(scores: np.ndarray) -> tuple[np.ndarray, float]:
    m = scores.max()
    if not np.isfinite(m):
        raise ValueError("combined distribution has no mass (every candidate scored -inf)")
    log_z = m + np.log(np.exp(scores - m).sum())
    return scores - log_z, float(log_z)


def combine_log(lm_log_probs_row: np.ndarray, class_log_probs_row: np.ndarray,
                gamma: float) -> tuple[np.ndarray, float]:
    """``log P_LM + gamma * log P_class - log Z`` for one position."""
    lm = np.asarray(lm_log_probs_row, dtype=np.float64)
    if gamma == 0:
        return lm.copy(), 0.0
    with np.errstate(invalid="ignore"):
        scores = lm + gamma * np.asarray(class_log_probs_row, dtype=np.float64)
    scores = np.where(np.isnan(scores), -np.inf, scores)
    return _log_normalize(scores)


def combine_heads(lm_log_probs_row, class_probs_row, gamma_infer: float) -> StepDistribution:
    lm = np.asarray(lm_log_probs_row, dtype=np.float64)
    cp = np.asarray(class_probs_row, dtype=np.float64)
    if lm.shape != cp.shape:
        raise ValueError(f"row shapes differ: {lm.shape} vs {cp.shape}")
    if gamma_infer == 0:
        return StepDistribution(np.exp(lm), 0.0)
    with np.errstate(divide="ignore"):
        logp, log_z = combine_log(lm, np.log(cp), gamma_infer)
    return StepDistribution(np.exp(logp), log_z)


def beam_block(hypothesis: Sequence[int], candidate_token: int, block_n: int,
               context: Sequence[int] = ()) -> bool:
    """False iff appending the candidate completes an n-gram already in context + hypothesis."""
    if block_n < 1:
        raise ValueError("block_n must be >= 1")
    seq = list(context) + list(hypothesis)
    if len(seq) < block_n - 1:
        return True
    gram = tuple(seq[len(seq) - block_n + 1:]) + (int(candidate_token),) if block_n > 1 else (int(candidate_token),)
    for s in range(len(seq) - block_n + 1):
        if tuple(seq[s:s + block_n]) == gram:
            return False
    return True


def _blocked_tokens(seq: Sequence[int], block_n: int) -> set[int]:
    """Every token that beam_block would reject after ``seq`` (one pass)."""
    k = block_n - 1
    if len(seq) < k:
        return set()
    tail = tuple(seq[len(seq) - k:]) if k else ()
    out = set()
    for s in range(len(seq) - block_n + 1):
        if tuple(seq[s:s + k]) == tail:
            out.add(int(seq[s + k]))
    return out


# -- guide helpers -------------------------------------------------------------

def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def guide_candidate_logprob(guide: DirectorModel, prefix: Sequence[int], candidate: int) -> float:
    """One external guide call: classify ``prefix + [candidate]`` from scratch."""
    with T.no_grad():
        out = guide.forward(list(prefix) + [int(candidate)])
    return float(_log_sigmoid(out.class_logits.data[-2, int(candidate)]))


def sequence_class_score(model: DirectorModel, prompt: Sequence[int], tokens: Sequence[int]) -> float:
    """Mean positive-class log-probability of ``tokens`` following ``prompt``."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        return 0.0
    seq = list(prompt) + tokens
    with T.no_grad():
        z = model.forward(seq).class_logits.data
    start = len(prompt)
    rows = z[start - 1:len(seq) - 1]
    picked = rows[np.arange(len(tokens)), tokens]
    return float(_log_sigmoid(picked).mean())


# -- search machinery ----------------------------------------------------------

@dataclass
class _Hyp:
    tokens: list[int]
    logp: float
    cache: KVCache | None
    lm_row: np.ndarray | None
    cls_row: np.ndarray | None
    finished: bool = False
    order: int = 0

    def mean(self) -> float:
        n = len(self.tokens) + (1 if self.finished else 0)
        return self.logp / n if n else 0.0


class _Decoder:
    def __init__(self, model: DirectorModel, context: Sequence[int], config: DecodeConfig,
                 guide: DirectorModel | None) -> None:
        self.model, self.cfg, self.guide = model, config, guide
        self.context = [int(t) for t in context]
        self.prompt = encode_prompt(self.context)
        self.rng = rng_for(config.seed, "decode")
        self.guide_calls = 0
        self.steps = 0
        self.dists: list[StepDistribution] | None = [] if config.return_distributions else None
        room = model.config.max_seq_len - len(self.prompt)
        if room < 1:
            raise ValueError("prompt leaves no room to generate within max_seq_len")
        self.max_len = min(config.max_len, room)

    def root(self) -> _Hyp:
        with T.no_grad():
            out, cache = self.model.step(self.prompt)
        return _Hyp([], 0.0, cache, out.lm_log_probs.data[-1], out.class_logits.data[-1])

    def extend(self, h: _Hyp, tok: int, logp: float) -> _Hyp:
        if tok == EOS or len(h.tokens) + 1 >= self.max_len:
            return _Hyp(h.tokens + [tok] if tok != EOS else list(h.tokens), h.logp + logp, None, None, None,
                        finished=tok == EOS)
        with T.no_grad():
            out, cache = self.model.step([tok], h.cache)
        return _Hyp(h.tokens + [tok], h.logp + logp, cache, out.lm_log_probs.data[-1], out.class_logits.data[-1])

    # allowed-token mask: reserved ids, EOS length rules and n-gram blocking
    def constraint(self, h: _Hyp) -> np.ndarray:
        V = self.model.config.vocab_size
        ok = np.ones(V, dtype=bool)
        ok[list(BANNED)] = False
        n = len(h.tokens)
        if self.cfg.min_len is not None:
            if n >= self.cfg.min_len:
                ok[:] = False
                ok[EOS] = True
                return ok
            ok[EOS] = False
        if self.cfg.block_n is not None:
            for tok in _blocked_tokens(self.context + h.tokens, self.cfg.block_n):
                if tok != EOS:
                    ok[tok] = False
        if not ok.any():
            ok[EOS] = True  # everything blocked: end the hypothesis
        return ok

    def own_scores(self, h: _Hyp) -> np.ndarray:
        if self.cfg.strategy == "director":
            logp, _ = combine_log(h.lm_row, _log_sigmoid(h.cls_row), self.cfg.gamma_infer)
            return logp
        return h.lm_row

    def guided_scores(self, h: _Hyp, ok: np.ndarray, sample: int | None) -> np.ndarray:
        """LM top-k pool (optionally a sampled subset) rescaled by per-candidate guide calls."""
        lm = np.where(ok, h.lm_row, -np.inf)
        allowed = np.flatnonzero(ok)
        k = min(self.cfg.top_k, len(allowed))
        order = np.lexsort((allowed, -lm[allowed]))
        pool = allowed[order[:k]]
        if sample is not None:
            if sample > self.cfg.top_k:
                raise ValueError(f"pacer_samples={sample} exceeds top_k={self.cfg.top_k}")
            m = min(sample, len(pool))
            p = np.exp(lm[pool] - lm[pool].max())
            pool = self.rng.choice(pool, size=m, replace=False, p=p / p.sum())
        prefix = self.prompt + h.tokens
        scores = np.full_like(lm, -np.inf)
        for v in pool:
            self.guide_calls += 1
            scores[v] = lm[v] + self.cfg.gamma_infer * guide_candidate_logprob(self.guide, prefix, int(v))
        return scores

    def step_scores(self, h: _Hyp) -> np.ndarray:
        self.steps += 1
        ok = self.constraint(h)
        if self.cfg.strategy in ("fudge", "pacer"):
            sample = self.cfg.pacer_samples if self.cfg.strategy == "pacer" else None
            scores = self.guided_scores(h, ok, sample)
        else:
            scores = np.where(ok, self.own_scores(h), -np.inf)
        logp, log_z = _log_normalize(scores)
        if self.dists is not None:
            self.dists.append(StepDistribution(np.exp(logp), log_z))
        return logp

    # -- modes -----------------------------------------------------------
    def run_single(self) -> _Hyp:
        h = self.root()
        while not h.finished and len(h.tokens) < self.max_len:
            logp = self.step_scores(h)
            if self.cfg.mode == "greedy":
                tok = int(np.argmax(logp))
            else:
                tok = self._sample_topk(logp)
            h = self.extend(h, tok, float(logp[tok]))
        return h

    def _sample_topk(self, logp: np.ndarray) -> int:
        idx = np.flatnonzero(np.isfinite(logp))
        order = np.lexsort((idx, -logp[idx]))
        pool = idx[order[: self.cfg.top_k]]
        p = np.exp(logp[pool] - logp[pool].max())
        return int(self.rng.choice(pool, p=p / p.sum()))

    def run_beam(self) -> list[_Hyp]:
        W = self.cfg.beam_width
        beams = [self.root()]
        done: list[_Hyp] = []
        counter = 0
        while beams and len(done) < W:
            cands = []
            for h in beams:
                logp = self.step_scores(h)
                idx = np.flatnonzero(np.isfinite(logp))
                top = idx[np.lexsort((idx, -logp[idx]))[:W]]
                for v in top:
                    cands.append((h, int(v), float(logp[v])))

            def key(c):
                h, v, lp = c
                n = len(h.tokens) + 1
                return (-(h.logp + lp) / n, tuple(h.tokens) + (v,))

            cands.sort(key=key)
            beams = []
            for h, v, lp in cands[:W]:
                nh = self.extend(h, v, lp)
                nh.order = counter
                counter += 1
                (done if nh.finished or len(nh.tokens) >= self.max_len else beams).append(nh)
        final = done + beams
        final.sort(key=lambda h: (-h.mean(), tuple(h.tokens)))
        return final[:W]


def _result(dec: _Decoder, h: _Hyp, strategy: str, t0: float) -> GenerationResult:
    return GenerationResult(
        prompt=list(dec.prompt), tokens=list(h.tokens), strategy=strategy,
        seconds=time.perf_counter() - t0, guide_calls=dec.guide_calls, steps=dec.steps,
        finished=h.finished, score=h.mean(), distributions=dec.dists)


@dataclass
class Candidate:
    tokens: list[int]
    lm_score: float
    order: int = 0
    class_score: float = field(default=0.0)


def rerank_candidates(candidates: Sequence[Candidate], reranker_model: DirectorModel,
                      prompt: Sequence[int] = (BOS,), tie_decimals: int = 10) -> list[Candidate]:
    """Sort by mean positive-class log-probability; ties fall back to LM score, then beam order."""
    cands = list(candidates)
    if len(cands) <= 1:
        return cands
    for c in cands:
        c.class_score = sequence_class_score(reranker_model, prompt, c.tokens)
    return sorted(cands, key=lambda c: (-round(c.class_score, tie_decimals),
                                        -round(c.lm_score, tie_decimals), c.order))


def _need_guide(config: DecodeConfig, guide: DirectorModel | None) -> DirectorModel:
    if guide is None:
        raise ValueError(f"strategy {config.strategy!r} needs a guide model")
    return guide


def decode(model: DirectorModel, context: Sequence[int], config: DecodeConfig,
           guide: DirectorModel | None = None) -> GenerationResult:
    """Generate a response to ``context`` (token ids, without special tokens)."""
    if config.strategy in GUIDED:
        guide = _need_guide(config, guide)
    if config.strategy == "fudge":
        return decode_fudge(model, guide, context, config)
    if config.strategy == "pacer":
        return decode_pacer(model, guide, context, config)
    t0 = time.perf_counter()
    if config.strategy == "reranker":
        dec = _Decoder(model, context, _replace(config, strategy="baseline"), None)
        finals = dec.run_beam()
        cands = [Candidate(h.tokens, h.mean(), i) for i, h in enumerate(finals)]
        ranked = rerank_candidates(cands, guide, dec.prompt)
        dec.guide_calls += len(cands) if len(cands) > 1 else 0
        best = next(h for h in finals if h.tokens == ranked[0].tokens)
        return _result(dec, best, "reranker", t0)
    dec = _Decoder(model, context, config, None)
    h = dec.run_beam()[0] if config.mode == "beam" else dec.run_single()
    return _result(dec, h, config.strategy, t0)


def decode_fudge(model: DirectorModel, classifier_model: DirectorModel, context: Sequence[int],
                 config: DecodeConfig) -> GenerationResult:
    """Rescale the LM's top-k candidates by the guide's per-candidate probability at every step."""
    t0 = time.perf_counter()
    dec = _Decoder(model, context, _replace(config, strategy="fudge"), classifier_model)
    h = dec.run_beam()[0] if config.mode == "beam" else dec.run_single()
    return _result(dec, h, "fudge", t0)


def decode_pacer(model: DirectorModel, classifier_model: DirectorModel, context: Sequence[int],
                 config: DecodeConfig) -> GenerationResult:
    """Guide a sampled subset of the top-k pool per step, then rerank the final beam."""
    if config.pacer_samples > config.top_k:
        raise ValueError(f"pacer_samples={config.pacer_samples} exceeds top_k={config.top_k}")
    t0 = time.perf_counter()
    dec = _Decoder(model, context, _replace(config, strategy="pacer", mode="beam"), classifier_model)
    finals = dec.run_beam()
    cands = [Candidate(h.tokens, h.mean(), i) for i, h in enumerate(finals)]
    for c in cands:
        c.class_score = sequence_class_score(classifier_model, dec.prompt, c.tokens)
        dec.guide_calls += 1
    ranked = sorted(cands, key=lambda c: (-round(c.class_score, 10), -round(c.lm_score, 10), c.order))
    return _result(dec, finals[ranked[0].order], "pacer", t0)


def _replace(config: DecodeConfig, **changes) -> DecodeConfig:
    d = asdict(config)
    d.update(changes)
    return DecodeConfig(**d)
