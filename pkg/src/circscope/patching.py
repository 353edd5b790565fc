"""Edge-level activation patching and lambda-interpolated patching."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .eap import EdgeScoreTable, eap_per_pair
from .model import DecomposedTransformer, Edge, GraphError
from .tasks import Batch, MetricSpec, PromptPair, TaskDataset, batch_metric

DEFAULT_SWEEP_POINTS = 21

CorruptCache = dict[str, np.ndarray]


@dataclass(frozen=True)
class PatchRequest:
    edge: str
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")


def as_dataset(data: TaskDataset | PromptPair, metric: MetricSpec | str | None = None) -> TaskDataset:
    if isinstance(data, PromptPair):
        data = TaskDataset("pair", (data,))
    if metric is not None:
        data = data.with_metric(metric)
    return data


def corrupt_cache(model: DecomposedTransformer, tokens: np.ndarray) -> CorruptCache:
    """Writer outputs from an unpatched forward pass on the corrupt prompts."""
    names = [w.name for w in model.graph.writers]
    cache = model.run_forward(tokens, hooks=names)
    return {n: cache[n] for n in names}


def patches_for(edges: Iterable[str], lam: float = 1.0) -> dict[str, list[tuple[str, float]]]:
    """Group edge ids by destination reader."""
    out: dict[str, list[tuple[str, float]]] = {}
    for eid in edges:
        e = Edge.parse(eid)
        out.setdefault(e.dst.name, []).append((e.src.name, lam))
    return out


@dataclass
class _Prepared:
    batch: Batch
    corrupt: CorruptCache
    clean_logits: np.ndarray
    clean_metric: np.ndarray


class PairEvaluator:
    """Holds corrupt caches and clean metrics per batch; evaluates patched runs.

    Preparation costs one corrupt and one clean forward per pair.
    """

    def __init__(self, model: DecomposedTransformer, dataset: TaskDataset, metric: MetricSpec | None = None):
        self.model = model
        self.dataset = dataset
        self.metric = metric or dataset.metric
        self._prepared = []
        for batch in dataset.batches():
            corr = corrupt_cache(model, batch.corrupt)
            cache = model.run_forward(batch.clean, hooks=[])
            logits = cache.logits.data
            vals = batch_metric(cache.logits, batch, self.metric, logits).data.astype(np.float64)
            self._prepared.append(_Prepared(batch, corr, logits, vals))

    @property
    def clean_metric(self) -> np.ndarray:
        out = np.zeros(len(self.dataset))
        for p in self._prepared:
            out[p.batch.indices] = p.clean_metric
        return out

    def evaluate(self, patches: Mapping[str, Sequence[tuple[str, float]]]) -> np.ndarray:
        """Per-pair metric under ``patches`` (reader -> [(writer, lam)])."""
        out = np.zeros(len(self.dataset))
        for p in self._prepared:
            if not patches:
                out[p.batch.indices] = p.clean_metric
                continue
            cache = self.model.run_forward(p.batch.clean, hooks=[], patches=patches, corrupt=p.corrupt)
            vals = batch_metric(cache.logits, p.batch, self.metric, p.clean_logits).data
            out[p.batch.indices] = vals
        return out


def _check_edge(model: DecomposedTransformer, edge_id: str) -> None:
    if edge_id not in model.graph:
        raise GraphError(f"edge {edge_id!r} is not in the graph")


def activation_patch(
    model: DecomposedTransformer,
    data: TaskDataset | PromptPair,
    request: PatchRequest | str,
    metric: MetricSpec | str | None = None,
) -> float:
    """Mean metric with one edge set to ``lam*e_corr + (1-lam)*e_clean``."""
    if isinstance(request, str):
        request = PatchRequest(request)
    _check_edge(model, request.edge)
    ds = as_dataset(data, metric)
    ev = PairEvaluator(model, ds)
    return float(ev.evaluate(patches_for([request.edge], request.lam)).mean())


def clean_metric(model: DecomposedTransformer, data: TaskDataset | PromptPair, metric=None) -> float:
    ds = as_dataset(data, metric)
    out = []
    for batch in ds.batches():
        cache = model.run_forward(batch.clean, hooks=[])
        out.append(batch_metric(cache.logits, batch, ds.metric, cache.logits.data).data)
    vals = np.zeros(len(ds))
    for batch, v in zip(ds.batches(), out):
        vals[batch.indices] = v
    return float(vals.mean())


def activation_patch_per_pair(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    edges: Sequence[str],
    metric: MetricSpec | None = None,
) -> np.ndarray:
    """Signed per-pair metric change for each edge, shape (P, N)."""
    if not edges:
        raise ValueError("edge list is empty")
    for e in edges:
        _check_edge(model, e)
    ev = PairEvaluator(model, dataset, metric)
    base = ev.clean_metric
    out = np.zeros((len(dataset), len(edges)))
    for j, e in enumerate(edges):
        out[:, j] = ev.evaluate(patches_for([e])) - base
    return out


def activation_patch_scores(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    edges: Sequence[str] | None = None,
    metric: MetricSpec | None = None,
) -> EdgeScoreTable:
    """Per-edge mean over pairs of ``|L(patched) - L(clean)|``.

    Costs ``len(edges) + 2`` forward passes per pair.
    """
    edges = list(model.graph.edge_ids if edges is None else edges)
    per_pair = activation_patch_per_pair(model, dataset, edges, metric)
    return EdgeScoreTable.from_per_pair(edges, per_pair, "actpatch", aggregation="abs_mean")


@dataclass(frozen=True)
class SweepPoint:
    lam: float
    metric_delta: float
    linear_reference: float


def default_lambdas(n: int = DEFAULT_SWEEP_POINTS) -> np.ndarray:
    if n < 1:
        raise ValueError("need at least one lambda")
    return np.linspace(0.0, 1.0, n) if n > 1 else np.array([1.0])


def interpolation_sweep(
    model: DecomposedTransformer,
    data: TaskDataset | PromptPair,
    edge: str,
    lambdas: Sequence[float] | None = None,
    metric: MetricSpec | str | None = None,
    attribution: float | None = None,
) -> list[SweepPoint]:
    """Metric change as the edge moves from clean (0) to corrupt (1).

    Each point carries the first-order reference ``lam * attribution``;
    ``attribution`` defaults to the edge's mean signed EAP score.
    """
    _check_edge(model, edge)
    lams = default_lambdas() if lambdas is None else np.asarray(lambdas, dtype=np.float64)
    if np.any(lams < 0) or np.any(lams > 1):
        raise ValueError("lambda grid must lie within [0, 1]")
    ds = as_dataset(data, metric)
    if attribution is None:
        attribution = float(eap_per_pair(model, ds)[:, model.graph.index(edge)].mean())
    ev = PairEvaluator(model, ds)
    base = ev.clean_metric
    points = []
    for lam in lams:
        delta = float((ev.evaluate(patches_for([edge], float(lam))) - base).mean())
        points.append(SweepPoint(float(lam), delta, float(lam) * attribution))
    return points


def write_sweep_csv(path: str | Path, points: Sequence[SweepPoint]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lambda", "metric_delta", "linear_reference"])
        for p in points:
            w.writerow([repr(p.lam), repr(p.metric_delta), repr(p.linear_reference)])
