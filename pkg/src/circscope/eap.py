"""Edge Attribution Patching: first-order edge scores from one backward pass."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from . import core
from .core import CircscopeError
from .model import DecomposedTransformer
from .tasks import MetricSpec, TaskDataset, batch_metric

ZERO_GRAD_THRESHOLD = 1e-8
AGGREGATIONS = ("signed_mean", "abs_mean")


class ZeroGradientWarning(UserWarning):
    pass


class SelectionError(CircscopeError, ValueError):
    pass


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass(frozen=True, eq=False)
class EdgeScoreTable:
    """Per-edge scores averaged over prompt pairs.

    With ``aggregation="signed_mean"`` the absolute score is ``|mean signed|``;
    with ``"abs_mean"`` it is the mean of per-pair absolute scores.
    """

    edge_ids: tuple[str, ...]
    signed: np.ndarray
    abs: np.ndarray
    n_pairs: int
    method: str = "eap"
    aggregation: str = "signed_mean"
    per_pair: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "edge_ids", tuple(self.edge_ids))
        object.__setattr__(self, "signed", np.asarray(self.signed, dtype=np.float64))
        object.__setattr__(self, "abs", np.asarray(self.abs, dtype=np.float64))
        n = len(self.edge_ids)
        if self.signed.shape != (n,) or self.abs.shape != (n,):
            raise ValueError("score arrays must have one entry per edge")
        if len(set(self.edge_ids)) != n:
            raise ValueError("duplicate edge ids in score table")
        if not (np.all(np.isfinite(self.signed)) and np.all(np.isfinite(self.abs))):
            raise core.NonFiniteError("score table contains non-finite values")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    @classmethod
    def from_per_pair(cls, edge_ids, per_pair: np.ndarray, method: str, aggregation: str = "signed_mean"):
        per_pair = np.asarray(per_pair, dtype=np.float64)
        signed = per_pair.mean(axis=0)
        absval = np.abs(signed) if aggregation == "signed_mean" else np.abs(per_pair).mean(axis=0)
        return cls(tuple(edge_ids), signed, absval, per_pair.shape[0], method, aggregation, per_pair)

    def __len__(self) -> int:
        return len(self.edge_ids)

    def as_dict(self, absolute: bool = True) -> dict[str, float]:
        vals = self.abs if absolute else self.signed
        return dict(zip(self.edge_ids, vals.tolist()))

    def ranking(self) -> list[str]:
        """Edge ids by descending absolute score; ties keep table order."""
        order = np.argsort(-self.abs, kind="stable")
        return [self.edge_ids[i] for i in order]

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["edge_id", "signed_score", "abs_score"])
        for e, s, a in zip(self.edge_ids, self.signed, self.abs):
            w.writerow([e, _fmt(s), _fmt(a)])
        return buf.getvalue()

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv_string().encode()).hexdigest()[:16]

    def save_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv_string())

    @classmethod
    def load_csv(cls, path: str | Path, method: str = "eap") -> "EdgeScoreTable":
        ids, signed, absval = [], [], []
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != ["edge_id", "signed_score", "abs_score"]:
                raise ValueError(f"{path}: expected columns edge_id,signed_score,abs_score")
            for row in reader:
                ids.append(row["edge_id"])
                signed.append(float(row["signed_score"]))
                absval.append(float(row["abs_score"]))
        agg = "signed_mean" if np.allclose(np.abs(signed), absval, rtol=0, atol=0) else "abs_mean"
        return cls(tuple(ids), np.array(signed), np.array(absval), 0, method, agg)


@dataclass(frozen=True)
class Circuit:
    edges: tuple[str, ...]
    method: str
    parameter: Any = None
    source_digest: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(self.edges))

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, edge_id: str) -> bool:
        return edge_id in set(self.edges)

    @property
    def edge_set(self) -> frozenset[str]:
        return frozenset(self.edges)

    def to_dict(self) -> dict:
        d = {"method": self.method, "parameter": self.parameter, "edges": list(self.edges)}
        if self.source_digest is not None:
            d["source_digest"] = self.source_digest
        return d

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "Circuit":
        return cls(tuple(d["edges"]), d.get("method", "unknown"), d.get("parameter"), d.get("source_digest"))

    @classmethod
    def load(cls, path: str | Path) -> "Circuit":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def top_k_circuit(table: EdgeScoreTable, k: int) -> Circuit:
    if not 0 <= k <= len(table):
        raise SelectionError(f"k={k} out of range [0, {len(table)}]")
    keep = set(table.ranking()[:k])
    edges = tuple(e for e in table.edge_ids if e in keep)
    return Circuit(edges, f"{table.method}-topk", k, table.digest())


def threshold_circuit(table: EdgeScoreTable, tau: float) -> Circuit:
    """Edges whose absolute score is strictly above ``tau``."""
    if not tau >= 0:
        raise SelectionError(f"threshold must be >= 0, got {tau}")
    edges = tuple(e for e, a in zip(table.edge_ids, table.abs) if a > tau)
    return Circuit(edges, f"{table.method}-threshold", float(tau), table.digest())


# ---------------------------------------------------------------------------
# Scoring


def _writer_reader_index(model: DecomposedTransformer):
    g = model.graph
    w_idx = {w.name: i for i, w in enumerate(g.writers)}
    r_idx = {r.name: i for i, r in enumerate(g.readers)}
    src = np.array([w_idx[e.src.name] for e in g.edges], dtype=np.int64)
    dst = np.array([r_idx[e.dst.name] for e in g.edges], dtype=np.int64)
    return src, dst


def _warn_zero_grad(norm: float) -> None:
    if norm < ZERO_GRAD_THRESHOLD:
        warnings.warn(
            f"zero-gradient warning: metric gradient norm {norm:.3g} < {ZERO_GRAD_THRESHOLD:g} at the clean "
            "point; attribution scores will be (near) zero. KL divergence is stationary at the clean run, "
            "use a task metric such as logit_diff.",
            ZeroGradientWarning,
            stacklevel=3,
        )


def eap_per_pair(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    metric: MetricSpec | None = None,
) -> np.ndarray:
    """Signed attribution score for every (pair, edge), shape (P, E).

    Per pair: one corrupt forward, one clean forward, one clean backward.
    Each edge score is ``sum((writer_corr - writer_clean) * dL/d(reader input))``.
    """
    metric = metric or dataset.metric
    g = model.graph
    writers = [w.name for w in g.writers]
    readers = [r.name for r in g.readers]
    src, dst = _writer_reader_index(model)
    out = np.zeros((len(dataset), len(g.edges)))
    for batch in dataset.batches():
        B = len(batch)
        corr = model.run_forward(batch.corrupt, hooks=writers)
        clean = model.run_forward(batch.clean, hooks=writers + readers)
        per_pair = batch_metric(clean.logits, batch, metric, clean.logits.data)
        loss = core.mean_all(per_pair)
        grads = model.run_backward(clean, loss)
        _warn_zero_grad(grads.seed_grad_norm)
        diff = np.stack([corr[w].astype(np.float64) - clean[w] for w in writers]).reshape(len(writers), B, -1)
        grad = np.stack([grads[r] for r in readers]).reshape(len(readers), B, -1)
        for b in range(B):
            # mean-reduced metric: each row's gradient carries a 1/B factor
            full = (diff[:, b] @ grad[:, b].T) * B
            out[batch.indices[b]] = full[src, dst]
    return out


def eap_scores(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    metric: MetricSpec | None = None,
    aggregation: str = "signed_mean",
) -> EdgeScoreTable:
    per_pair = eap_per_pair(model, dataset, metric)
    return EdgeScoreTable.from_per_pair(model.graph.edge_ids, per_pair, "eap", aggregation)


def eap_scores_per_reader(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    metric: MetricSpec | None = None,
    readers: Iterable[str] | None = None,
    aggregation: str = "signed_mean",
) -> EdgeScoreTable:
    """Reference scores with one backward pass per reader.

    The chosen reader sums explicit per-edge copies of its writers, and each
    edge's gradient is read off its own copy.
    """
    metric = metric or dataset.metric
    g = model.graph
    writers = [w.name for w in g.writers]
    reader_names = [r.name for r in g.readers] if readers is None else list(readers)
    per_pair = np.zeros((len(dataset), len(g.edges)))
    for batch in dataset.batches():
        B = len(batch)
        corr = model.run_forward(batch.corrupt, hooks=writers)
        for r in reader_names:
            incoming = [w.name for w in g.incoming(r)]
            eids = [f"{w}->{r}" for w in incoming]
            cache = model.run_forward(batch.clean, hooks=writers + eids, split_readers=[r])
            loss = core.mean_all(batch_metric(cache.logits, batch, metric, cache.logits.data))
            grads = model.run_backward(cache, loss)
            for w, eid in zip(incoming, eids):
                d = (corr[w].astype(np.float64) - cache[w]).reshape(B, -1)
                s = np.einsum("bx,bx->b", d, grads[eid].reshape(B, -1)) * B
                per_pair[batch.indices, g.index(eid)] = s
    return EdgeScoreTable.from_per_pair(g.edge_ids, per_pair, "eap", aggregation)


def scores_for(table: EdgeScoreTable, edge_ids: Sequence[str]) -> np.ndarray:
    lookup = {e: i for i, e in enumerate(table.edge_ids)}
    return np.array([table.signed[lookup[e]] for e in edge_ids])
