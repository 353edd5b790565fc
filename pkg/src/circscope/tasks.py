"""Clean/corrupt prompt pairs and the scalar metrics evaluated on them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import core
from .core import CircscopeError, Tensor

METRIC_KINDS = ("logit_diff", "prob_diff", "kl_divergence")
_ALIASES = {"kl": "kl_divergence", "logit-diff": "logit_diff", "prob-diff": "prob_diff"}


class TaskError(CircscopeError, ValueError):
    pass


@dataclass(frozen=True)
class MetricSpec:
    kind: str = "logit_diff"
    reduction: str = "mean"

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in METRIC_KINDS:
            raise TaskError(f"unknown metric kind {self.kind!r}; expected one of {METRIC_KINDS}")
        if self.reduction != "mean":
            raise TaskError("only mean reduction is supported")
        object.__setattr__(self, "kind", kind)

    @property
    def needs_reference(self) -> bool:
        return self.kind == "kl_divergence"


@dataclass(frozen=True)
class PromptPair:
    clean_tokens: tuple[int, ...]
    corrupt_tokens: tuple[int, ...]
    correct_tokens: tuple[int, ...] = ()
    wrong_tokens: tuple[int, ...] = ()
    answer_position: int | None = None

    def __post_init__(self):
        for name in ("clean_tokens", "corrupt_tokens", "correct_tokens", "wrong_tokens"):
            object.__setattr__(self, name, tuple(int(t) for t in getattr(self, name)))
        # resolve the default (last token) and negative indices once
        n = len(self.clean_tokens)
        pos = n - 1 if self.answer_position is None else int(self.answer_position)
        object.__setattr__(self, "answer_position", pos + n if pos < 0 else pos)

    @property
    def position(self) -> int:
        return self.answer_position

    def to_dict(self) -> dict:
        return {
            "clean_tokens": list(self.clean_tokens),
            "corrupt_tokens": list(self.corrupt_tokens),
            "answer_position": self.position,
            "correct_tokens": list(self.correct_tokens),
            "wrong_tokens": list(self.wrong_tokens),
        }


@dataclass(frozen=True)
class Batch:
    """Pairs of one sequence length, kept with their dataset indices."""

    indices: np.ndarray
    clean: np.ndarray
    corrupt: np.ndarray
    positions: np.ndarray
    pairs: tuple[PromptPair, ...]

    def __len__(self) -> int:
        return len(self.indices)

    def coefficients(self, vocab_size: int) -> np.ndarray:
        """+1 per correct token, -1 per wrong token, one row per pair."""
        coef = np.zeros((len(self.pairs), vocab_size))
        for i, p in enumerate(self.pairs):
            np.add.at(coef[i], list(p.correct_tokens), 1.0)
            np.add.at(coef[i], list(p.wrong_tokens), -1.0)
        return coef


@dataclass(frozen=True)
class TaskDataset:
    name: str
    pairs: tuple[PromptPair, ...]
    metric: MetricSpec = field(default_factory=MetricSpec)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(self.pairs))
        validate_pairs(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)

    def with_metric(self, metric: MetricSpec | str) -> "TaskDataset":
        if isinstance(metric, str):
            metric = MetricSpec(metric)
        return TaskDataset(self.name, self.pairs, metric)

    def subset(self, indices: Sequence[int]) -> "TaskDataset":
        return TaskDataset(self.name, [self.pairs[i] for i in indices], self.metric)

    def batches(self) -> list[Batch]:
        """Group pairs by sequence length, in order of first appearance."""
        groups: dict[int, list[int]] = {}
        for i, p in enumerate(self.pairs):
            groups.setdefault(len(p.clean_tokens), []).append(i)
        out = []
        for idx in groups.values():
            ps = tuple(self.pairs[i] for i in idx)
            out.append(Batch(
                indices=np.array(idx),
                clean=np.array([p.clean_tokens for p in ps], dtype=np.int64),
                corrupt=np.array([p.corrupt_tokens for p in ps], dtype=np.int64),
                positions=np.array([p.position for p in ps], dtype=np.int64),
                pairs=ps,
            ))
        return out

    def check_vocab(self, vocab_size: int) -> None:
        for i, p in enumerate(self.pairs):
            for t in p.clean_tokens + p.corrupt_tokens + p.correct_tokens + p.wrong_tokens:
                if not 0 <= t < vocab_size:
                    raise TaskError(f"token id {t} out of range [0, {vocab_size}) at pair {i}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "metric": {"kind": self.metric.kind},
            "pairs": [p.to_dict() for p in self.pairs],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def validate_pairs(pairs: Sequence[PromptPair]) -> None:
    if not pairs:
        raise TaskError("task has no pairs")
    for i, p in enumerate(pairs):
        if len(p.clean_tokens) != len(p.corrupt_tokens):
            raise TaskError(f"length mismatch at pair {i}")
        if not p.clean_tokens:
            raise TaskError(f"empty sequence at pair {i}")
        if not 0 <= p.position < len(p.clean_tokens):
            raise TaskError(f"answer position out of range at pair {i}")


def task_from_dict(d: dict, vocab_size: int | None = None) -> TaskDataset:
    try:
        pairs = [
            PromptPair(
                clean_tokens=p["clean_tokens"],
                corrupt_tokens=p["corrupt_tokens"],
                correct_tokens=p.get("correct_tokens", ()),
                wrong_tokens=p.get("wrong_tokens", ()),
                answer_position=p.get("answer_position"),
            )
            for p in d["pairs"]
        ]
        metric = MetricSpec(**d.get("metric", {}))
        ds = TaskDataset(d.get("name", "task"), pairs, metric)
    except (KeyError, TypeError) as exc:
        raise TaskError(f"malformed task file: {exc}") from None
    if vocab_size is not None:
        ds.check_vocab(vocab_size)
    return ds


def load_task(path: str | Path, vocab_size: int | None = None) -> TaskDataset:
    with open(path) as f:
        try:
            d = json.load(f)
        except json.JSONDecodeError as exc:
            raise TaskError(f"task file is not valid JSON: {exc}") from None
    return task_from_dict(d, vocab_size)


# ---------------------------------------------------------------------------
# Metrics on plain arrays (one pair, logits of shape (seq, vocab))


def _row(logits: np.ndarray, pair: PromptPair) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError("logits must be (seq, vocab)")
    pos = pair.position
    if not 0 <= pos < logits.shape[0]:
        raise IndexError(f"answer position {pos} out of range for {logits.shape[0]} positions")
    return logits[pos]


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


def metric_logit_diff(logits, pair: PromptPair) -> float:
    row = _row(logits, pair)
    return float(sum(row[t] for t in pair.correct_tokens) - sum(row[t] for t in pair.wrong_tokens))


def metric_prob_diff(logits, pair: PromptPair) -> float:
    p = np.exp(_log_softmax(_row(logits, pair)))
    return float(sum(p[t] for t in pair.correct_tokens) - sum(p[t] for t in pair.wrong_tokens))


def metric_kl(patched_logits, clean_logits, pair: PromptPair) -> float:
    """KL(P_clean || P_patched) at the answer position."""
    lp = _log_softmax(_row(clean_logits, pair))
    lq = _log_softmax(_row(patched_logits, pair))
    return float(np.sum(np.exp(lp) * (lp - lq)))


def metric_value(spec: MetricSpec, logits, pair: PromptPair, clean_logits=None) -> float:
    if spec.kind == "logit_diff":
        return metric_logit_diff(logits, pair)
    if spec.kind == "prob_diff":
        return metric_prob_diff(logits, pair)
    if clean_logits is None:
        raise TaskError("kl_divergence needs the clean run's logits")
    return metric_kl(logits, clean_logits, pair)


# ---------------------------------------------------------------------------
# Metrics on the tape


def batch_metric(
    logits: Tensor,
    batch: Batch,
    spec: MetricSpec,
    clean_logits: np.ndarray | None = None,
) -> Tensor:
    """Per-pair metric values, shape (B,), differentiable w.r.t. ``logits``.

    ``clean_logits`` is the (B, S, V) unpatched clean output, required for KL.
    """
    tape = logits.tape
    sel = core.take_positions(logits, batch.positions)
    if spec.kind == "kl_divergence":
        if clean_logits is None:
            raise TaskError("kl_divergence needs the clean run's logits")
        ref = np.asarray(clean_logits, dtype=np.float64)[np.arange(len(batch)), batch.positions]
        ref = ref - ref.max(axis=-1, keepdims=True)
        ref_logp = ref - np.log(np.exp(ref).sum(axis=-1, keepdims=True))
        gap = core.sub(tape.constant(ref_logp), core.log_softmax(sel))
        return core.sum_last(core.mul(tape.constant(np.exp(ref_logp)), gap))
    coef = tape.constant(batch.coefficients(logits.shape[-1]))
    if spec.kind == "prob_diff":
        sel = core.softmax(sel)
    return core.sum_last(core.mul(sel, coef))
