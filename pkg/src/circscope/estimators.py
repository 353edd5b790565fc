"""scikit-learn style wrappers around the circuit discovery functions.

Samples are prompt pairs: ``fit`` takes a TaskDataset (or a list of
PromptPair, or a task file path).  Fitted estimators expose ``scores_``
and/or ``circuit_``; ``score(X, y)`` compares against a ground-truth circuit.
"""

from __future__ import annotations

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import _validation as val
from .acdc import AcdcConfig, acdc_prune, eap_then_acdc
from .eap import EdgeScoreTable, eap_per_pair, eap_scores, threshold_circuit, top_k_circuit
from .evaluation import GroundTruthCircuit, rates, roc_from_ranking
from .patching import activation_patch_per_pair


def _select(table: EdgeScoreTable, top_k, threshold):
    if top_k is not None:
        return top_k_circuit(table, int(top_k))
    if threshold is not None:
        return threshold_circuit(table, float(threshold))
    return None


class _ScoringMixin:
    def score(self, X, y: GroundTruthCircuit) -> float:
        """ROC AUC of the absolute-score ranking against ground truth ``y``."""
        check_is_fitted(self, "scores_")
        return roc_from_ranking(self.scores_, y).auc


class EdgeAttributionPatching(_ScoringMixin, TransformerMixin, BaseEstimator):
    """Attribution scores for every edge from two forwards and one backward per pair.

    Parameters
    ----------
    model : DecomposedTransformer
    metric : str or MetricSpec, optional
        Overrides the task's own metric.
    top_k, threshold : optional
        Circuit selection; at most one may be set.
    aggregation : {"signed_mean", "abs_mean"}
        Average signed per-pair scores before taking the absolute value, or
        average per-pair absolute values.
    """

    def __init__(self, model=None, metric=None, top_k=None, threshold=None, aggregation="signed_mean"):
        self.model = model
        self.metric = metric
        self.top_k = top_k
        self.threshold = threshold
        self.aggregation = aggregation

    def fit(self, X, y=None):
        model = val.check_model(self.model)
        ds = val.check_task(X, model, self.metric)
        val.check_selection(self.top_k, self.threshold)
        before = model.counter.as_dict()
        per_pair = eap_per_pair(model, ds)
        after = model.counter.as_dict()
        self.scores_ = EdgeScoreTable.from_per_pair(model.graph.edge_ids, per_pair, "eap", self.aggregation)
        self.circuit_ = _select(self.scores_, self.top_k, self.threshold)
        self.passes_ = {k: after[k] - before[k] for k in after}
        self.edge_ids_ = list(model.graph.edge_ids)
        return self

    def transform(self, X):
        """Signed per-pair attribution scores, shape (n_pairs, n_edges)."""
        check_is_fitted(self, "scores_")
        return eap_per_pair(self.model, val.check_task(X, self.model, self.metric))


class ActivationPatching(_ScoringMixin, TransformerMixin, BaseEstimator):
    """Exact per-edge patching effects; costs one forward per edge per pair."""

    def __init__(self, model=None, metric=None, edges=None, top_k=None, threshold=None):
        self.model = model
        self.metric = metric
        self.edges = edges
        self.top_k = top_k
        self.threshold = threshold

    def _edges(self):
        return val.check_edges(self.model.graph.edge_ids if self.edges is None else self.edges, self.model)

    def fit(self, X, y=None):
        model = val.check_model(self.model)
        ds = val.check_task(X, model, self.metric)
        val.check_selection(self.top_k, self.threshold)
        edges = self._edges()
        before = model.counter.as_dict()
        per_pair = activation_patch_per_pair(model, ds, edges)
        after = model.counter.as_dict()
        self.scores_ = EdgeScoreTable.from_per_pair(edges, per_pair, "actpatch", "abs_mean")
        self.circuit_ = _select(self.scores_, self.top_k, self.threshold)
        self.passes_ = {k: after[k] - before[k] for k in after}
        self.edge_ids_ = edges
        return self

    def transform(self, X):
        """Signed per-pair metric changes, shape (n_pairs, n_edges)."""
        check_is_fitted(self, "scores_")
        return activation_patch_per_pair(self.model, val.check_task(X, self.model, self.metric), self._edges())


class _CircuitScoreMixin:
    def score(self, X, y: GroundTruthCircuit) -> float:
        """Youden's J (TPR - FPR) of the fitted circuit against ``y``."""
        check_is_fitted(self, "circuit_")
        tpr, fpr = rates(self.circuit_.edges, y, self.model.graph.edge_ids)
        return tpr - fpr


class ACDC(_CircuitScoreMixin, BaseEstimator):
    """Greedy pruning: drop edges whose patching effect is at most ``tau``."""

    def __init__(self, model=None, tau=0.0, metric=None, start=None):
        self.model = model
        self.tau = tau
        self.metric = metric
        self.start = start

    def fit(self, X, y=None):
        model = val.check_model(self.model)
        ds = val.check_task(X, model, self.metric)
        tau = val.check_tau(self.tau)
        before = model.counter.as_dict()
        self.trace_ = []
        self.circuit_ = acdc_prune(model, ds, AcdcConfig(tau, ds.metric, self.start), trace=self.trace_)
        after = model.counter.as_dict()
        self.passes_ = {k: after[k] - before[k] for k in after}
        return self


class EAPThenACDC(_CircuitScoreMixin, BaseEstimator):
    """Threshold EAP scores at ``tau_eap``, then prune with ACDC at ``tau_acdc``."""

    def __init__(self, model=None, tau_eap=0.0, tau_acdc=0.0, metric=None):
        self.model = model
        self.tau_eap = tau_eap
        self.tau_acdc = tau_acdc
        self.metric = metric

    def fit(self, X, y=None):
        model = val.check_model(self.model)
        ds = val.check_task(X, model, self.metric)
        tau_eap = val.check_tau(self.tau_eap, "tau_eap")
        tau_acdc = val.check_tau(self.tau_acdc, "tau_acdc")
        before = model.counter.as_dict()
        self.scores_ = eap_scores(model, ds)
        self.circuit_ = eap_then_acdc(model, ds, tau_eap, tau_acdc, table=self.scores_)
        after = model.counter.as_dict()
        self.passes_ = {k: after[k] - before[k] for k in after}
        return self


__all__ = ["EdgeAttributionPatching", "ActivationPatching", "ACDC", "EAPThenACDC"]
