"""Comparison against ground-truth circuits: ROC/AUC, Youden's J, score histograms."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import CircscopeError
from .eap import Circuit, EdgeScoreTable
from .model import DecomposedGraph, Edge


class EvaluationError(CircscopeError, ValueError):
    pass


@dataclass(frozen=True)
class GroundTruthCircuit:
    task: str
    edges: frozenset[str]
    roles: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "edges", frozenset(self.edges))
        object.__setattr__(self, "roles", dict(self.roles))

    def check_against(self, graph: DecomposedGraph) -> None:
        for e in sorted(self.edges):
            if e not in graph:
                raise EvaluationError(f"ground truth references unknown edge {e!r}")
        writers = {w.name for w in graph.writers}
        for node in self.roles:
            if node not in writers:
                raise EvaluationError(f"role assigned to {node!r}, which is not a writer node")

    def to_dict(self) -> dict:
        return {"task": self.task, "edges": sorted(self.edges), "roles": dict(sorted(self.roles.items()))}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "GroundTruthCircuit":
        try:
            return cls(d.get("task", ""), frozenset(d["edges"]), d.get("roles", {}))
        except (KeyError, TypeError) as exc:
            raise EvaluationError(f"malformed ground-truth file: {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruthCircuit":
        with open(path) as f:
            return cls.from_dict(json.load(f))


@dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float, Any], ...]  # (fpr, tpr, parameter)
    auc: float

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def _universe_counts(truth: GroundTruthCircuit, universe: Sequence[str]) -> tuple[int, int]:
    uni = set(universe)
    unknown = truth.edges - uni
    if unknown:
        raise EvaluationError(f"ground truth references unknown edge {sorted(unknown)[0]!r}")
    pos = len(truth.edges)
    neg = len(uni) - pos
    if pos == 0 or neg == 0:
        raise EvaluationError("ground truth must be a non-empty proper subset of the edge universe")
    return pos, neg


def rates(edges, truth: GroundTruthCircuit, universe: Sequence[str]) -> tuple[float, float]:
    """(tpr, fpr) of an edge set."""
    pos, neg = _universe_counts(truth, universe)
    es = set(edges)
    tp = len(es & truth.edges)
    return tp / pos, (len(es) - tp) / neg


def roc_from_ranking(table: EdgeScoreTable, truth: GroundTruthCircuit) -> RocCurve:
    """Sweep k over the absolute-score ranking; the parameter of each point is k."""
    pos, neg = _universe_counts(truth, table.edge_ids)
    hits = np.array([e in truth.edges for e in table.ranking()], dtype=np.int64)
    tp = np.concatenate([[0], np.cumsum(hits)])
    fp = np.concatenate([[0], np.cumsum(1 - hits)])
    tpr = tp / pos
    fpr = fp / neg
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    points = tuple((float(f), float(t), k) for k, (f, t) in enumerate(zip(fpr, tpr)))
    return RocCurve(points, auc)


def roc_from_circuit_family(
    circuits: Sequence[tuple[Any, Circuit]],
    truth: GroundTruthCircuit,
    universe: Sequence[str],
) -> RocCurve:
    """One point per circuit plus (0,0) and (1,1).

    The AUC integrates a step function through the observed points (tpr held
    at its running maximum until the next fpr); nothing is interpolated.
    """
    if not circuits:
        raise EvaluationError("need at least one circuit")
    uni = set(universe)
    pts: dict[tuple[float, float], Any] = {}
    for param, circ in circuits:
        bad = set(circ.edges) - uni
        if bad:
            raise EvaluationError(f"circuit references unknown edge {sorted(bad)[0]!r}")
        t, f = rates(circ.edges, truth, universe)
        pts.setdefault((f, t), param)
    pts.setdefault((0.0, 0.0), None)
    pts.setdefault((1.0, 1.0), None)
    ordered = sorted(pts.items(), key=lambda kv: kv[0])
    fpr = np.array([k[0] for k, _ in ordered])
    tpr = np.maximum.accumulate(np.array([k[1] for k, _ in ordered]))
    auc = float(np.sum(np.diff(fpr) * tpr[:-1]))
    return RocCurve(tuple((f, t, p) for (f, t), p in ordered), auc)


def youden_j(curve: RocCurve) -> float:
    if not curve.points:
        raise EvaluationError("empty ROC curve")
    return float(max(t - f for f, t, _ in curve.points))


@dataclass(frozen=True)
class Histogram:
    group: str
    bin_edges: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def score_distribution(
    table: EdgeScoreTable,
    truth: GroundTruthCircuit | None,
    bins: int | Sequence[float] = 20,
    roles: Mapping[str, str] | None = None,
) -> list[Histogram]:
    """Histograms of signed scores for in-circuit and out-of-circuit edges.

    Role groups (``role:<name>``) split the in-circuit edges by the role of
    their origin node.  Scores outside explicit bin edges are clipped into
    the end bins so group totals always add up to the edge count.
    """
    signed = table.signed
    if isinstance(bins, (int, np.integer)):
        if bins < 1:
            raise EvaluationError("bins must be >= 1")
        edges = np.histogram_bin_edges(signed, bins=int(bins))
    else:
        edges = np.asarray(bins, dtype=np.float64)
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise EvaluationError("bin edges must be a strictly increasing sequence of length >= 2")
    truth_edges = truth.edges if truth is not None else frozenset()
    if roles is None and truth is not None:
        roles = truth.roles
    roles = roles or {}
    inside = np.array([e in truth_edges for e in table.edge_ids], dtype=bool)

    def hist(mask, name):
        vals = np.clip(signed[mask], edges[0], edges[-1])
        counts, _ = np.histogram(vals, bins=edges)
        return Histogram(name, edges, counts)

    out = []
    if inside.any():
        out.append(hist(inside, "in-circuit"))
    if (~inside).any() or not inside.any():
        out.append(hist(~inside, "out-of-circuit"))
    if roles:
        origin_role = [roles.get(Edge.parse(e).src.name) for e in table.edge_ids]
        for role in sorted(set(r for r in origin_role if r is not None)):
            mask = inside & np.array([r == role for r in origin_role])
            if mask.any():
                out.append(hist(mask, f"role:{role}"))
    return out


# ---------------------------------------------------------------------------
# CSV writers


def write_roc_csv(path: str | Path, curve: RocCurve) -> None:
    """Rows of parameter,fpr,tpr followed by an ``auc,,<value>`` footer."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["parameter", "fpr", "tpr"])
        for fpr, tpr, param in curve.points:
            w.writerow(["" if param is None else param, repr(fpr), repr(tpr)])
        w.writerow(["auc", "", repr(curve.auc)])


def read_roc_csv(path: str | Path) -> RocCurve:
    points, auc = [], None
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    for row in rows[1:]:
        if row[0] == "auc":
            auc = float(row[2])
        else:
            points.append((float(row[1]), float(row[2]), row[0] or None))
    if auc is None:
        raise EvaluationError(f"{path}: missing auc footer row")
    return RocCurve(tuple(points), auc)


def write_histogram_csv(path: str | Path, hists: Sequence[Histogram]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["group", "bin_lo", "bin_hi", "count"])
        for h in hists:
            for lo, hi, c in zip(h.bin_edges[:-1], h.bin_edges[1:], h.counts):
                w.writerow([h.group, repr(float(lo)), repr(float(hi)), int(c)])


@dataclass(frozen=True)
class GridCell:
    tau_eap: float
    tau_acdc: float
    tpr: float
    fpr: float

    @property
    def youden_j(self) -> float:
        return self.tpr - self.fpr


def write_grid_csv(path: str | Path, cells: Sequence[GridCell]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["tau_eap", "tau_acdc", "tpr", "fpr", "youden_j"])
        for c in cells:
            w.writerow([repr(c.tau_eap), repr(c.tau_acdc), repr(c.tpr), repr(c.fpr), repr(c.youden_j)])


def youden_grid(
    model,
    dataset,
    truth: GroundTruthCircuit,
    tau_eaps: Sequence[float],
    tau_acdcs: Sequence[float],
    metric=None,
    table: EdgeScoreTable | None = None,
) -> list[GridCell]:
    """TPR/FPR of EAP -> ACDC for every threshold pair; EAP runs once."""
    from .acdc import eap_then_acdc
    from .eap import eap_scores

    if table is None:
        table = eap_scores(model, dataset, metric)
    universe = model.graph.edge_ids
    cells = []
    for te in tau_eaps:
        for ta in tau_acdcs:
            circ = eap_then_acdc(model, dataset, te, ta, metric, table=table)
            tpr, fpr = rates(circ.edges, truth, universe)
            cells.append(GridCell(float(te), float(ta), tpr, fpr))
    return cells
