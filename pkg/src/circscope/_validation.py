"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .model import DecomposedTransformer, GraphError
from .tasks import MetricSpec, PromptPair, TaskDataset, TaskError, load_task


def check_model(model) -> DecomposedTransformer:
    if not isinstance(model, DecomposedTransformer):
        raise TypeError(f"expected a DecomposedTransformer, got {type(model).__name__}")
    return model


def check_task(X, model: DecomposedTransformer | None = None, metric=None) -> TaskDataset:
    """Coerce a dataset, a path, or a sequence of PromptPairs to a TaskDataset."""
    if isinstance(X, (str, Path)):
        X = load_task(X)
    elif not isinstance(X, TaskDataset):
        pairs = list(X)
        if not all(isinstance(p, PromptPair) for p in pairs):
            raise TypeError("X must be a TaskDataset, a task path, or a sequence of PromptPair")
        X = TaskDataset("task", pairs)
    if metric is not None:
        X = X.with_metric(metric if isinstance(metric, MetricSpec) else MetricSpec(metric))
    if model is not None:
        X.check_vocab(model.config.vocab_size)
        longest = max(len(p.clean_tokens) for p in X.pairs)
        if longest > model.config.n_ctx:
            raise TaskError(f"sequence length {longest} exceeds n_ctx={model.config.n_ctx}")
    return X


def check_selection(top_k, threshold) -> None:
    if top_k is not None and threshold is not None:
        raise ValueError("give at most one of top_k and threshold")
    if top_k is not None and (int(top_k) != top_k or top_k < 0):
        raise ValueError(f"top_k must be a non-negative integer, got {top_k!r}")
    if threshold is not None and not threshold >= 0:
        raise ValueError(f"threshold must be >= 0, got {threshold!r}")


def check_edges(edges: Sequence[str], model: DecomposedTransformer) -> list[str]:
    edges = list(edges)
    for e in edges:
        if e not in model.graph:
            raise GraphError(f"edge {e!r} is not in the graph")
    return edges


def check_tau(tau, name: str = "tau") -> float:
    if tau is None or not float(tau) >= 0:
        raise ValueError(f"{name} must be a number >= 0, got {tau!r}")
    return float(tau)
