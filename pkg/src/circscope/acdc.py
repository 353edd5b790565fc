"""Greedy activation-patching pruning (ACDC-style) and the EAP -> ACDC pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .eap import Circuit, EdgeScoreTable, eap_scores, threshold_circuit
from .model import DecomposedTransformer, GraphError
from .patching import PairEvaluator, patches_for
from .tasks import MetricSpec, TaskDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AcdcConfig:
    tau: float
    metric: MetricSpec | None = None
    start: Circuit | None = None

    def __post_init__(self):
        if not self.tau >= 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")


@dataclass
class AcdcStep:
    edge: str
    change: float
    removed: bool


def acdc_order(model: DecomposedTransformer) -> list[str]:
    """Readers from the output backwards; each reader's writers in canonical order."""
    out = []
    for r in reversed(model.graph.readers):
        out += [f"{w.name}->{r.name}" for w in model.graph.incoming(r)]
    return out


def acdc_prune(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    config: AcdcConfig,
    trace: list[AcdcStep] | None = None,
) -> Circuit:
    """Remove edges whose corruption moves the metric by at most ``tau``.

    Edges outside the starting subgraph, and every removed edge, stay patched
    to their corrupt value for all later evaluations.  The baseline is the
    current circuit's per-pair metric, updated after each removal.
    """
    graph = model.graph
    if config.start is None:
        present = set(graph.edge_ids)
    else:
        present = set(config.start.edges)
        unknown = present - set(graph.edge_ids)
        if unknown:
            raise GraphError(f"starting subgraph has unknown edge {sorted(unknown)[0]!r}")
    removed = set(graph.edge_ids) - present
    if not present:
        return Circuit((), "acdc", float(config.tau))
    ev = PairEvaluator(model, dataset, config.metric)

    def run(edges: Iterable[str]) -> np.ndarray:
        edges = set(edges)
        ordered = [e for e in graph.edge_ids if e in edges]
        return ev.evaluate(patches_for(ordered))

    baseline = run(removed)
    for eid in acdc_order(model):
        if eid not in present:
            continue
        trial = run(removed | {eid})
        change = float(np.abs(trial - baseline).mean())
        drop = change <= config.tau
        if trace is not None:
            trace.append(AcdcStep(eid, change, drop))
        if drop:
            present.discard(eid)
            removed.add(eid)
            baseline = trial
            log.debug("removed %s (change %.4g)", eid, change)
    edges = tuple(e for e in graph.edge_ids if e in present)
    return Circuit(edges, "acdc", float(config.tau))


def eap_then_acdc(
    model: DecomposedTransformer,
    dataset: TaskDataset,
    tau_eap: float,
    tau_acdc: float,
    metric: MetricSpec | None = None,
    table: EdgeScoreTable | None = None,
) -> Circuit:
    """Threshold EAP scores, then prune the survivors greedily.

    ``table`` lets grid sweeps reuse one set of EAP scores.
    """
    if tau_eap < 0 or tau_acdc < 0:
        raise ValueError("thresholds must be >= 0")
    if table is None:
        table = eap_scores(model, dataset, metric)
    start = threshold_circuit(table, tau_eap)
    param = {"tau_eap": float(tau_eap), "tau_acdc": float(tau_acdc)}
    if not start.edges:
        return Circuit((), "eap+acdc", param, table.digest())
    pruned = acdc_prune(model, dataset, AcdcConfig(tau_acdc, metric, start))
    return Circuit(pruned.edges, "eap+acdc", param, table.digest())
