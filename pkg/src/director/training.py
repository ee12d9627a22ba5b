"""Losses and the alternating LM / classifier training loop.

All losses use mean reduction and read row ``t - 1`` of the model output for
the token at position ``t``.
"""
from __future__ import annotations

import csv
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .data import NEGATIVE, PAD, POSITIVE, UNLABELED, Batch, LabeledSequence
from .model import DirectorModel, DualHeadOutput
from .optim import Optimizer, make_optimizer
from .seeding import rng_for
from .tensor import Tensor

EPS = 1e-9
METRICS = ("mean_loss", "gen_f1", "class_acc")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    gamma_train: float = 0.2
    delta: float = 0.0
    alpha_ul: float = 0.0
    learning_rate: float = 1e-3
    batch_size: int = 16
    max_steps: int = 1000
    patience: int = 50
    eval_every: int = 50
    validation_metric: str = "mean_loss"
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        for name in ("gamma_train", "delta", "alpha_ul"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for name in ("batch_size", "patience", "eval_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.validation_metric not in METRICS:
            raise ValueError(f"validation_metric must be one of {METRICS}")


# -- losses ----------------------------------------------------------------

def _batched(output: DualHeadOutput, tokens) -> tuple[DualHeadOutput, np.ndarray]:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    lm, cls = output.lm_log_probs, output.class_logits
    if lm.ndim == 2:
        lm = lm.reshape(1, *lm.shape)
        cls = cls.reshape(1, *cls.shape)
    if tokens.shape[1] < 2:
        raise ValueError("sequence of length 1 has nothing to predict")
    if lm.shape[:2] != tokens.shape:
        raise T.ShapeError(f"output rows {lm.shape[:2]} do not match tokens {tokens.shape}")
    return DualHeadOutput(lm, cls), tokens


def _label_arrays(labeled, tokens_shape) -> tuple[np.ndarray, np.ndarray]:
    labels = np.asarray(labeled.labels, dtype=np.int64).reshape(tokens_shape)
    weights = np.asarray(labeled.weights, dtype=np.float64).reshape(tokens_shape)
    return labels[:, 1:], weights[:, 1:]


def lm_loss(output: DualHeadOutput, tokens, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``tokens[1:]``.

    ``mask`` (aligned with ``tokens``) selects target positions; by default
    every non-pad position after the first.
    """
    out, tokens = _batched(output, tokens)
    if mask is None:
        mask = (tokens != PAD).astype(np.float64)
    m = np.asarray(mask, dtype=np.float64).reshape(tokens.shape)[:, 1:]
    n = m.sum()
    if n <= 0:
        raise ValueError("no target positions for the LM loss")
    picked = T.take_last(out.lm_log_probs[:, :-1], tokens[:, 1:])
    return T.mul(picked, m).sum() * (-1.0 / n)


def class_loss(output: DualHeadOutput, labeled: LabeledSequence | Batch, eps: float = EPS) -> Tensor:
    """Weighted mean cross-entropy of the classifier head at the observed tokens."""
    out, tokens = _batched(output, labeled.tokens)
    labels, weights = _label_arrays(labeled, tokens.shape)
    w = weights * (labels != UNLABELED)
    total = w.sum()
    if total <= 0:
        raise ValueError("no labeled positions for the classifier loss")
    z = T.take_last(out.class_logits[:, :-1], tokens[:, 1:])
    floor = math.log(eps)
    log_pos = T.maximum(T.log_sigmoid(z), floor)
    log_neg = T.maximum(T.log_sigmoid(-z), floor)
    ll = T.mul(log_pos, w * (labels == POSITIVE)) + T.mul(log_neg, w * (labels == NEGATIVE))
    return ll.sum() * (-1.0 / total)


def label_norm_loss(output: DualHeadOutput, labeled: LabeledSequence | Batch) -> Tensor:
    """Mean squared distance from 0.5 of every classifier output except the observed token's."""
    out, tokens = _batched(output, labeled.tokens)
    V = out.class_logits.shape[-1]
    if V < 2:
        raise ValueError("label normalization needs |V| >= 2")
    labels, _ = _label_arrays(labeled, tokens.shape)
    rows = (labels != UNLABELED).astype(np.float64)
    if rows.sum() == 0:
        raise ValueError("no labeled positions for the label-norm loss")
    M = np.repeat(rows[..., None], V, axis=-1)
    np.put_along_axis(M, tokens[:, 1:, None], 0.0, axis=-1)
    dev = T.sigmoid(out.class_logits[:, :-1]) - 0.5
    return T.mul(T.mul(dev, dev), M).sum() * (1.0 / M.sum())


def ul_token_loss(output: DualHeadOutput, labeled: LabeledSequence | Batch, alpha: float = 1.0,
                  eps: float = EPS) -> Tensor:
    """``alpha`` times the mean of ``-log(1 - P_LM(x_t))`` over negative-labeled tokens."""
    out, tokens = _batched(output, labeled.tokens)
    labels, _ = _label_arrays(labeled, tokens.shape)
    neg = (labels == NEGATIVE).astype(np.float64)
    if alpha == 0 or neg.sum() == 0:
        return Tensor(0.0)
    lp = T.take_last(out.lm_log_probs[:, :-1], tokens[:, 1:])
    term = T.log(T.maximum(1.0 - T.exp(lp), eps))
    return T.mul(term, neg).sum() * (-alpha / neg.sum())


# -- steps ---------------------------------------------------------------

@dataclass
class StepReport:
    step: int
    kind: str
    lm_loss: float = 0.0
    class_loss: float = 0.0
    norm_loss: float = 0.0
    ul_loss: float = 0.0
    total: float = 0.0
    val_metric: float | None = None
    updated: bool = True


def _check_finite(step: int, **parts: float) -> None:
    for name, value in parts.items():
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite {name}={value} at step {step}")


def train_step(model: DirectorModel, batch: Batch, kind: str, config: TrainConfig,
               optimizer: Optimizer, step: int = 0) -> StepReport:
    """One parameter update on an LM (``"lm"``) or classifier (``"class"``) batch."""
    if kind not in ("lm", "class"):
        raise ValueError(f"kind must be 'lm' or 'class', got {kind!r}")
    if len(batch) == 0:
        raise ValueError("empty batch")
    if kind == "lm" and model.frozen_core:
        raise ValueError("LM batch on a frozen-core model: nothing trainable")
    rep = StepReport(step, kind)
    with T.Tape() as tape:
        out = model.forward(batch.tokens)
        if kind == "lm":
            loss = lm_loss(out, batch.tokens, batch.lm_mask)
            rep.lm_loss = loss.item()
            if config.alpha_ul > 0 and (batch.labels == NEGATIVE).any():
                ul = ul_token_loss(out, batch, alpha=1.0)
                rep.ul_loss = ul.item()
                loss = loss + ul * config.alpha_ul
            active = True
        else:
            cl = class_loss(out, batch)
            rep.class_loss = cl.item()
            loss = cl * config.gamma_train
            if config.delta > 0:
                nl = label_norm_loss(out, batch)
                rep.norm_loss = nl.item()
                loss = loss + nl * config.delta
            else:
                with T.no_grad():
                    rep.norm_loss = label_norm_loss(out, batch).item()
            active = config.gamma_train > 0 or config.delta > 0
        rep.total = loss.item()
    _check_finite(step, lm_loss=rep.lm_loss, class_loss=rep.class_loss,
                  norm_loss=rep.norm_loss, ul_loss=rep.ul_loss)
    if not active:
        # zero-weight objective: no update, the tape is simply dropped
        rep.updated = False
        return rep
    tape.backward(loss)
    for p in optimizer.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient for {p.name} at step {step} ({kind} batch)")
    optimizer.step(allow_missing=True)
    return rep


# -- validation ------------------------------------------------------------

def mean_losses(model: DirectorModel, val_lm: Sequence[Batch], val_class: Sequence[Batch]) -> tuple[float, float]:
    """Example-weighted mean LM and classifier loss (NaN where the split is empty)."""
    lm_vals, cl_vals = [], []
    with T.no_grad():
        for b in val_lm:
            lm_vals.append((lm_loss(model.forward(b.tokens), b.tokens, b.lm_mask).item(), len(b)))
        for b in val_class:
            cl_vals.append((class_loss(model.forward(b.tokens), b).item(), len(b)))

    def avg(vals):
        return sum(v * n for v, n in vals) / sum(n for _, n in vals) if vals else float("nan")

    return avg(lm_vals), avg(cl_vals)


def classifier_token_accuracy(model: DirectorModel, val_class: Sequence[Batch]) -> float:
    hits = total = 0
    with T.no_grad():
        for b in val_class:
            z = model.forward(b.tokens).class_logits.data[:, :-1]
            picked = np.take_along_axis(z, b.tokens[:, 1:, None], axis=-1)[..., 0]
            lab = b.labels[:, 1:]
            m = lab != UNLABELED
            hits += int(((picked > 0) == (lab == POSITIVE))[m].sum())
            total += int(m.sum())
    if total == 0:
        raise ValueError("no labeled positions in the validation set")
    return hits / total


# -- loop ------------------------------------------------------------------

@dataclass
class TrainResult:
    model: DirectorModel
    history: list[StepReport]
    evals: list[tuple[int, float]]
    best_step: int
    best_metric: float
    stopped_early: bool
    final_state: dict | None = None


@dataclass
class _LoopState:
    step: int = 0
    cursors: dict = field(default_factory=lambda: {"lm": 0, "class": 0})
    history: list = field(default_factory=list)
    evals: list = field(default_factory=list)
    best_state: dict | None = None
    best_metric: float = math.inf
    best_step: int = 0
    bad_evals: int = 0
    optimizer: Optimizer | None = None


class Trainer:
    """Alternates LM and classifier batches 1:1 and early-stops on a validation metric."""

    def __init__(self, model: DirectorModel, d_lm: Sequence[Batch], d_class: Sequence[Batch],
                 config: TrainConfig, val_lm: Sequence[Batch] = (), val_class: Sequence[Batch] = (),
                 evaluator: Callable[[DirectorModel], float] | None = None) -> None:
        if not d_lm and not model.frozen_core:
            raise ValueError("d_lm must be non-empty")
        if model.frozen_core and not d_class:
            raise ValueError("a frozen-core model needs classifier batches")
        self.model = model
        self.d = {"lm": list(d_lm) if not model.frozen_core else [], "class": list(d_class)}
        self.config = config
        self.val_lm, self.val_class = list(val_lm), list(val_class)
        self.evaluator = evaluator
        if config.validation_metric == "gen_f1" and evaluator is None:
            raise ValueError("validation_metric='gen_f1' needs an evaluator callable")
        self.state = _LoopState()
        self.state.optimizer = make_optimizer(config.optimizer, model.trainable_parameters(), config.learning_rate)

    # higher-is-better metrics are negated internally so that lower is always better
    def _score(self) -> float:
        metric = self.config.validation_metric
        if self.evaluator is not None:
            value = float(self.evaluator(self.model))
        elif metric == "mean_loss":
            parts = [v for v in mean_losses(self.model, self.val_lm, self.val_class) if not math.isnan(v)]
            value = float(np.mean(parts)) if parts else float("nan")
        else:
            value = classifier_token_accuracy(self.model, self.val_class)
        if math.isnan(value):
            raise ValueError("validation metric is undefined: provide validation batches")
        return value

    def _lower_is_better(self) -> bool:
        return self.config.validation_metric == "mean_loss"

    def _next_kind(self) -> str:
        kinds = [k for k in ("lm", "class") if self.d[k]]
        return kinds[self.state.step % len(kinds)]

    def _next_batch(self, kind: str) -> Batch:
        data = self.d[kind]
        c = self.state.cursors[kind]
        epoch, i = divmod(c, len(data))
        order = rng_for(self.config.seed, f"train.shuffle.{kind}.{epoch}").permutation(len(data))
        self.state.cursors[kind] = c + 1
        return data[order[i]]

    def evaluate(self) -> float:
        value = self._score()
        st = self.state
        key = value if self._lower_is_better() else -value
        st.evals.append((st.step, value))
        if key < st.best_metric:
            st.best_metric, st.best_step, st.bad_evals = key, st.step, 0
            st.best_state = self.model.state_dict()
        else:
            st.bad_evals += 1
        return value

    def run(self, checkpoint_every: int = 0, resume_path: str | Path | None = None) -> TrainResult:
        st, cfg = self.state, self.config
        stopped = False
        has_val = bool(self.val_lm or self.val_class or self.evaluator)
        if has_val and not st.evals:
            self.evaluate()
        while st.step < cfg.max_steps:
            kind = self._next_kind()
            rep = train_step(self.model, self._next_batch(kind), kind, cfg, st.optimizer, st.step + 1)
            st.step += 1
            if has_val and st.step % cfg.eval_every == 0:
                rep.val_metric = self.evaluate()
            st.history.append(rep)
            if resume_path and checkpoint_every and st.step % checkpoint_every == 0:
                self.save_resume(resume_path)
            if has_val and st.bad_evals >= cfg.patience:
                stopped = True
                break
        if has_val and (not st.evals or st.evals[-1][0] != st.step):
            self.evaluate()
        final_state = self.model.state_dict()
        if st.best_state is not None:
            self.model.load_state_dict(st.best_state)
        best = st.best_metric if self._lower_is_better() else -st.best_metric
        return TrainResult(self.model, st.history, st.evals, st.best_step, best, stopped, final_state)

    def save_resume(self, path) -> None:
        blob = {"params": self.model.state_dict(), "state": self.state}
        tmp = Path(str(path) + ".tmp")
        tmp.write_bytes(pickle.dumps(blob))
        tmp.replace(path)

    def load_resume(self, path) -> None:
        blob = pickle.loads(Path(path).read_bytes())
        self.model.load_state_dict(blob["params"])
        self.state = blob["state"]
        # rebind optimizer to the live parameter tensors
        self.state.optimizer.params = self.model.trainable_parameters()


def train_loop(model: DirectorModel, d_lm: Sequence[Batch], d_class: Sequence[Batch], config: TrainConfig,
               val_lm: Sequence[Batch] = (), val_class: Sequence[Batch] = (),
               evaluator: Callable[[DirectorModel], float] | None = None) -> TrainResult:
    return Trainer(model, d_lm, d_class, config, val_lm, val_class, evaluator).run()


HISTORY_FIELDS = ("step", "kind", "lm_loss", "class_loss", "norm_loss", "ul_loss", "val_metric")


def write_history(path, history: Sequence[StepReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for r in history:
            w.writerow([r.step, r.kind, repr(r.lm_loss), repr(r.class_loss), repr(r.norm_loss),
                        repr(r.ul_loss), "" if r.val_metric is None else repr(r.val_metric)])
