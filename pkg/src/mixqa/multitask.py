"""Scoring and span-extraction heads on the shared encoder, plus training.

One encoder pass per (question, paragraph) pair feeds both heads: an affine
map of H[0] gives the paragraph's relevance score, an affine map of each
paragraph position gives its start/end logits. Training alternates one
question-answering update with one scoring update; the scoring side
accumulates gradients over several examples per update to simulate a larger
batch. Both tasks run AdamW with linearly decaying learning rates and keep
separate moment state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (
    DropoutRng,
    ModelParameters,
    PackedInput,
    backward_from_cache,
    forward_with_cache,
    pack,
    pad_batch,
)


@dataclass(frozen=True)
class ScoringExample:
    """One question with ~30 candidate paragraphs, one of which is gold."""

    question_ids: np.ndarray
    paragraph_ids: tuple[np.ndarray, ...]
    gold_index: int
    chunk_ids: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.paragraph_ids) < 2:
            raise ValueError("a scoring example needs at least 2 candidate paragraphs")
        if not 0 <= self.gold_index < len(self.paragraph_ids):
            raise ValueError(f"gold_index {self.gold_index} out of range")


@dataclass(frozen=True)
class QAExample:
    """One question, one paragraph, and the gold span (token indices, inclusive)."""

    question_ids: np.ndarray
    paragraph_ids: np.ndarray
    start: int
    end: int
    chunk_id: str = ""

    def __post_init__(self) -> None:
        if not 0 <= self.start <= self.end < len(self.paragraph_ids):
            raise ValueError(f"invalid span ({self.start}, {self.end}) for paragraph of {len(self.paragraph_ids)} tokens")


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int
    lr_qa: float = 5e-5
    lr_score: float = 1e-5
    batch_qa: int = 32
    effective_batch_score: int = 16  # gradient-accumulation group per scoring update
    scoring_microbatch: int = 8  # examples encoded per pass inside a group
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self) -> None:
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if min(self.lr_qa, self.lr_score) <= 0:
            raise ValueError("learning rates must be positive")
        if min(self.batch_qa, self.effective_batch_score, self.scoring_microbatch) <= 0:
            raise ValueError("batch sizes must be positive")


@dataclass(frozen=True)
class LogRow:
    step: int
    task: str
    loss: float
    lr: float


@dataclass
class MultitaskOutput:
    scores: np.ndarray  # [P]
    start_logits: list[np.ndarray]  # per paragraph, [k_i]
    end_logits: list[np.ndarray]
    packed: list[PackedInput]
    h: np.ndarray  # [P, Lmax, D]
    cache: dict


def forward_multitask(
    params: ModelParameters,
    question_ids: np.ndarray,
    paragraphs: Sequence[np.ndarray],
    train_mode: bool = False,
    dropout_rng: DropoutRng | None = None,
) -> MultitaskOutput:
    """Score every paragraph and produce its span logits in one shared pass."""
    t = params.tensors
    packed = [pack(question_ids, p, params.config) for p in paragraphs]
    h, cache = forward_with_cache(params, *pad_batch(packed), train_mode, dropout_rng)
    scores = h[:, 0, :] @ t["heads.score.w"] + t["heads.score.b"][0]
    start_logits, end_logits = [], []
    for i, pk in enumerate(packed):
        hp = h[i, pk.paragraph_start : pk.paragraph_start + pk.paragraph_len]
        logits = hp @ t["heads.span.w"] + t["heads.span.b"]
        start_logits.append(logits[:, 0])
        end_logits.append(logits[:, 1])
    return MultitaskOutput(scores, start_logits, end_logits, packed, h, cache)


def heads_backward(
    params: ModelParameters,
    out: MultitaskOutput,
    d_scores: np.ndarray | None,
    d_starts: Sequence[np.ndarray] | None,
    d_ends: Sequence[np.ndarray] | None,
) -> dict[str, np.ndarray]:
    """Backprop head gradients into dH, then through the shared encoder."""
    t = params.tensors
    d_h = np.zeros_like(out.h)
    head_grads: dict[str, np.ndarray] = {}
    if d_scores is not None:
        d_h[:, 0, :] += np.outer(d_scores, t["heads.score.w"])
        head_grads["heads.score.w"] = out.h[:, 0, :].T @ d_scores
        head_grads["heads.score.b"] = np.array([d_scores.sum()])
    if d_starts is not None:
        dw = np.zeros_like(t["heads.span.w"])
        db = np.zeros_like(t["heads.span.b"])
        for i, pk in enumerate(out.packed):
            dlog = np.stack([d_starts[i], d_ends[i]], axis=1)  # [k_i, 2]
            sl = slice(pk.paragraph_start, pk.paragraph_start + pk.paragraph_len)
            d_h[i, sl] += dlog @ t["heads.span.w"].T
            dw += out.h[i, sl].T @ dlog
            db += dlog.sum(0)
        head_grads["heads.span.w"] = dw
        head_grads["heads.span.b"] = db
    grads = backward_from_cache(params, out.cache, d_h)
    for name, g in head_grads.items():
        grads[name] += g
    return grads


def scoring_loss(scores: np.ndarray, gold_index: int) -> float:
    """Cross-entropy of the gold paragraph against the candidate set."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or len(scores) < 2:
        raise ValueError("scoring_loss needs at least 2 scores")
    if not 0 <= gold_index < len(scores):
        raise ValueError(f"gold_index {gold_index} out of range")
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite paragraph scores")
    m = scores.max()
    return float(m + np.log(np.exp(scores - m).sum()) - scores[gold_index])


def scoring_loss_grad(scores: np.ndarray, gold_index: int) -> np.ndarray:
    p = _softmax(np.asarray(scores, dtype=np.float64))
    p[gold_index] -= 1.0
    return p


def qa_loss(start_logits: np.ndarray, end_logits: np.ndarray, s: int, e: int) -> float:
    """Cross-entropy of the gold start and end positions."""
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    n = len(start_logits)
    if len(end_logits) != n:
        raise ValueError("start/end logit lengths differ")
    if not 0 <= s <= e < n:
        raise ValueError(f"invalid span ({s}, {e}) for {n} positions")
    return float(-_log_softmax(start_logits)[s] - _log_softmax(end_logits)[e])


def qa_loss_grad(start_logits: np.ndarray, end_logits: np.ndarray, s: int, e: int):
    ds = _softmax(np.asarray(start_logits, dtype=np.float64))
    ds[s] -= 1.0
    de = _softmax(np.asarray(end_logits, dtype=np.float64))
    de[e] -= 1.0
    return ds, de


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max()
    return x - m - np.log(np.exp(x - m).sum())


def extract_span(
    start_logits: np.ndarray, end_logits: np.ndarray, max_answer_len: int = 30
) -> tuple[int, int, float]:
    """Best (s, e) with s <= e < s + max_answer_len by summed logits.

    Ties go to the smallest s, then the smallest e. The returned span_score
    is P_start(s) * P_end(e) under the per-distribution softmaxes.
    """
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    n = len(start_logits)
    if n < 1:
        raise ValueError("empty logits")
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    best_s = best_e = 0
    best_val = -np.inf
    for s in range(n):
        window = end_logits[s : s + max_answer_len]
        e_rel = int(np.argmax(window))  # first occurrence -> smallest e
        val = start_logits[s] + window[e_rel]
        if val > best_val:
            best_val, best_s, best_e = val, s, s + e_rel
    p_start = _softmax(start_logits)
    p_end = _softmax(end_logits)
    return best_s, best_e, float(p_start[best_s] * p_end[best_e])


class AdamW:
    """Decoupled-weight-decay Adam over a name-indexed parameter dict."""

    def __init__(self, beta1: float, beta2: float, eps: float, weight_decay: float):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def update(self, params: ModelParameters, grads: dict[str, np.ndarray], lr: float,
               names: Sequence[str] | None = None) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name in sorted(names if names is not None else params.tensors):
            p = params.tensors[name]
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lr * self.weight_decay * p
            p -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class TrainingDiverged(RuntimeError):
    pass


class _Sampler:
    """Cycles over a dataset in seeded shuffled epochs."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def draw(self, k: int) -> list[int]:
        out: list[int] = []
        while len(out) < k:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            out.append(int(self.order[self.pos]))
            self.pos += 1
        return out


def _qa_update_grads(params: ModelParameters, batch: Sequence[QAExample],
                     drop: DropoutRng, train_mode: bool):
    """Mean QA loss over the batch and its parameter gradients (one pass)."""
    packed = []
    spans = []
    for ex in batch:
        pk = pack(ex.question_ids, ex.paragraph_ids, params.config)
        if ex.end >= pk.paragraph_len:
            raise ValueError("gold span lies in the truncated paragraph tail; drop at dataset build")
        packed.append(pk)
        spans.append((ex.start, ex.end))
    h, cache = forward_with_cache(params, *pad_batch(packed), train_mode, drop)
    t = params.tensors
    d_h = np.zeros_like(h)
    dw = np.zeros_like(t["heads.span.w"])
    db = np.zeros_like(t["heads.span.b"])
    total = 0.0
    inv_b = 1.0 / len(batch)
    for i, (pk, (s, e)) in enumerate(zip(packed, spans)):
        sl = slice(pk.paragraph_start, pk.paragraph_start + pk.paragraph_len)
        logits = h[i, sl] @ t["heads.span.w"] + t["heads.span.b"]
        total += qa_loss(logits[:, 0], logits[:, 1], s, e)
        ds, de = qa_loss_grad(logits[:, 0], logits[:, 1], s, e)
        dlog = np.stack([ds, de], axis=1) * inv_b
        d_h[i, sl] += dlog @ t["heads.span.w"].T
        dw += h[i, sl].T @ dlog
        db += dlog.sum(0)
    grads = backward_from_cache(params, cache, d_h)
    grads["heads.span.w"] += dw
    grads["heads.span.b"] += db
    return total * inv_b, grads


def _scoring_example_grads(params: ModelParameters, ex: ScoringExample,
                           drop: DropoutRng, train_mode: bool):
    out = forward_multitask(params, ex.question_ids, ex.paragraph_ids, train_mode, drop)
    loss = scoring_loss(out.scores, ex.gold_index)
    d_scores = scoring_loss_grad(out.scores, ex.gold_index)
    grads = heads_backward(params, out, d_scores, None, None)
    return loss, grads


def _scoring_group_grads(params: ModelParameters, group: Sequence[ScoringExample],
                         drop: DropoutRng, train_mode: bool):
    """Mean scoring loss over a gradient-accumulation group, in one pass.

    All candidates of all examples share a single batched encoder call; each
    example's cross-entropy still runs over its own candidate set. This is
    the batched equivalent of accumulating per-example gradients in order.
    """
    t = params.tensors
    packed: list[PackedInput] = []
    bounds: list[tuple[int, int]] = []
    for ex in group:
        start = len(packed)
        packed.extend(pack(ex.question_ids, p, params.config) for p in ex.paragraph_ids)
        bounds.append((start, len(packed)))
    h, cache = forward_with_cache(params, *pad_batch(packed), train_mode, drop)
    cls = h[:, 0, :]
    scores = cls @ t["heads.score.w"] + t["heads.score.b"][0]

    inv = 1.0 / len(group)
    total = 0.0
    d_scores = np.zeros(len(packed))
    for ex, (lo, hi) in zip(group, bounds):
        total += scoring_loss(scores[lo:hi], ex.gold_index)
        d_scores[lo:hi] = scoring_loss_grad(scores[lo:hi], ex.gold_index) * inv

    d_h = np.zeros_like(h)
    d_h[:, 0, :] += np.outer(d_scores, t["heads.score.w"])
    grads = backward_from_cache(params, cache, d_h)
    grads["heads.score.w"] += cls.T @ d_scores
    grads["heads.score.b"] += d_scores.sum()
    return total * inv, grads


_QA_PARAM_SKIP = ("heads.score.w", "heads.score.b")
_SCORE_PARAM_SKIP = ("heads.span.w", "heads.span.b")


@dataclass
class TrainResult:
    params: ModelParameters
    log: list[LogRow] = field(default_factory=list)


def train(
    params: ModelParameters,
    scoring_dataset: Sequence[ScoringExample],
    qa_dataset: Sequence[QAExample],
    config: TrainConfig,
) -> TrainResult:
    """Alternate QA and scoring updates: QA at even global steps, scoring at odd.

    The update at global step t (0-based, of T total) uses
    lr = lr0_task * (1 - t / T). Scoring updates average gradients over
    ``effective_batch_score`` examples before the single parameter update.
    Runs are bit-reproducible for a fixed seed and config.
    """
    if not qa_dataset or not scoring_dataset:
        raise ValueError("both datasets must be non-empty")
    rng = np.random.default_rng(config.seed)
    drop = DropoutRng(config.seed)
    qa_sampler = _Sampler(len(qa_dataset), rng)
    sc_sampler = _Sampler(len(scoring_dataset), rng)
    opt_qa = AdamW(config.beta1, config.beta2, config.eps, config.weight_decay)
    opt_sc = AdamW(config.beta1, config.beta2, config.eps, config.weight_decay)
    qa_names = [n for n in params.tensors if n not in _QA_PARAM_SKIP]
    sc_names = [n for n in params.tensors if n not in _SCORE_PARAM_SKIP]

    log: list[LogRow] = []
    for t in range(config.total_steps):
        frac = 1.0 - t / config.total_steps
        if t % 2 == 0:
            lr = config.lr_qa * frac
            batch = [qa_dataset[i] for i in qa_sampler.draw(config.batch_qa)]
            loss, grads = _qa_update_grads(params, batch, drop, train_mode=True)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite QA loss at step {t}")
            opt_qa.update(params, grads, lr, qa_names)
            log.append(LogRow(t, "qa", loss, lr))
        else:
            lr = config.lr_score * frac
            group = [scoring_dataset[i] for i in sc_sampler.draw(config.effective_batch_score)]
            acc: dict[str, np.ndarray] | None = None
            loss = 0.0
            for lo in range(0, len(group), config.scoring_microbatch):
                sub = group[lo : lo + config.scoring_microbatch]
                w = len(sub) / len(group)
                sub_loss, grads = _scoring_group_grads(params, sub, drop, train_mode=True)
                loss += sub_loss * w
                if acc is None:
                    acc = {k: g * w for k, g in grads.items()}
                else:
                    for k, g in grads.items():
                        acc[k] += g * w
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite scoring loss at step {t}")
            opt_sc.update(params, acc, lr, sc_names)
            log.append(LogRow(t, "score", loss, lr))
    return TrainResult(params=params, log=log)


def write_loss_log(log: Sequence[LogRow], path: str | Path) -> None:
    lines = ["step,task,loss,lr"]
    lines += [f"{r.step},{r.task},{r.loss!r},{r.lr!r}" for r in log]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
