import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circscope import core
from circscope.eap import (
    Circuit,
    EdgeScoreTable,
    SelectionError,
    ZeroGradientWarning,
    eap_per_pair,
    eap_scores,
    eap_scores_per_reader,
    scores_for,
    threshold_circuit,
    top_k_circuit,
)
from circscope.patching import PairEvaluator, activation_patch_per_pair, corrupt_cache, patches_for
from circscope.tasks import TaskDataset, batch_metric

from conftest import affine_model, make_model, make_task


def table(scores: dict) -> EdgeScoreTable:
    ids = list(scores)
    return EdgeScoreTable.from_per_pair(ids, np.array([[scores[i] for i in ids]]), "eap")


ABC = {"a": 0.5, "b": 0.2, "c": 0.9}


# -- selection -----------------------------------------------------------


def test_top_k_examples():
    t = table(ABC)
    assert set(top_k_circuit(t, 2).edges) == {"c", "a"}
    assert top_k_circuit(t, 2).edges == ("a", "c")  # circuits keep table order
    assert len(top_k_circuit(t, 0)) == 0
    assert set(top_k_circuit(t, 3).edges) == set(ABC)
    with pytest.raises(SelectionError):
        top_k_circuit(t, 4)
    with pytest.raises(SelectionError):
        top_k_circuit(t, -1)


def test_threshold_examples():
    t = table(ABC)
    assert set(threshold_circuit(t, 0.3).edges) == {"a", "c"}
    assert len(threshold_circuit(t, 1.0)) == 0
    z = table({"a": 0.0, "b": -0.1, "c": 0.2})
    assert set(threshold_circuit(z, 0.0).edges) == {"b", "c"}
    with pytest.raises(SelectionError):
        threshold_circuit(t, -0.1)


def test_ties_keep_table_order():
    t = table({"x": 0.5, "y": -0.5, "z": 0.5})
    assert t.ranking() == ["x", "y", "z"]
    assert top_k_circuit(t, 2).edges == ("x", "y")
    assert top_k_circuit(t, 1).edges == ("x",)


def test_aggregation_modes():
    per = np.array([[1.0, -2.0], [-3.0, 2.0]])
    signed = EdgeScoreTable.from_per_pair(["p", "q"], per, "eap")
    np.testing.assert_array_equal(signed.signed, [-1.0, 0.0])
    np.testing.assert_array_equal(signed.abs, [1.0, 0.0])
    absm = EdgeScoreTable.from_per_pair(["p", "q"], per, "eap", "abs_mean")
    np.testing.assert_array_equal(absm.abs, [2.0, 2.0])
    with pytest.raises(core.NonFiniteError):
        EdgeScoreTable.from_per_pair(["p"], np.array([[np.nan]]), "eap")


def test_table_and_circuit_io(tmp_path):
    t = table({"embed.out->final.in": 0.1 / 3, "pos.out->final.in": -2.5e-9})
    t.save_csv(tmp_path / "s.csv")
    back = EdgeScoreTable.load_csv(tmp_path / "s.csv")
    assert back.edge_ids == t.edge_ids
    assert np.array_equal(back.signed, t.signed) and np.array_equal(back.abs, t.abs)
    assert back.to_csv_string() == t.to_csv_string()
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "edge_id,signed_score,abs_score"
    c = top_k_circuit(t, 1)
    c.save(tmp_path / "c.json")
    c2 = Circuit.load(tmp_path / "c.json")
    assert c2.edges == c.edges and c2.parameter == 1 and c2.source_digest == t.digest()
    assert scores_for(t, ["pos.out->final.in"])[0] == -2.5e-9


# -- scoring -------------------------------------------------------------


def test_identical_prompts_give_zero_scores(small_model, small_task):
    same = TaskDataset("same", [type(p)(p.clean_tokens, p.clean_tokens, p.correct_tokens, p.wrong_tokens)
                                for p in small_task.pairs])
    t = eap_scores(small_model, same)
    assert np.all(t.signed == 0)


def test_affine_model_exact():
    model, task = affine_model()
    t = eap_scores(model, task)
    assert scores_for(t, ["embed.out->final.in"])[0] == pytest.approx(4.0, abs=1e-12)
    assert scores_for(t, ["pos.out->final.in"])[0] == 0.0
    act = activation_patch_per_pair(model, task, model.graph.edge_ids)
    np.testing.assert_allclose(t.signed, act.mean(0), atol=1e-12)


def test_scores_match_finite_differences_along_writer_difference():
    model = make_model(seed=8, d_mlp=0)
    task = make_task(model.config.vocab_size, n_pairs=1, seed=5)
    batch = task.batches()[0]
    scores = eap_per_pair(model, task)[0]
    cc = corrupt_cache(model, batch.corrupt)
    clean = model.run_forward(batch.clean)
    for i, e in enumerate(model.graph.edges):
        diff = cc[e.src.name] - clean[e.src.name]

        def f(x, r=e.dst.name, diff=diff):
            c = model.run_forward(batch.clean, hooks=[], reader_deltas={r: x[0] * diff})
            return float(batch_metric(c.logits, batch, task.metric).data.mean())

        fd = core.finite_difference(f, np.zeros(1), np.ones(1), 1e-3)
        assert scores[i] == pytest.approx(fd, rel=1e-2, abs=1e-6), e.id


def test_single_backward_equals_per_reader_reference():
    model = make_model(seed=9)
    task = make_task(model.config.vocab_size, n_pairs=3, seed=2, lengths=[5, 6])
    fast = eap_scores(model, task)
    model.counter.reset()
    slow = eap_scores_per_reader(model, task)
    np.testing.assert_allclose(fast.signed, slow.signed, atol=1e-10)
    assert model.counter.backwards == 3 * len(model.graph.readers)


@pytest.mark.parametrize("n_pairs", [1, 5])
def test_pass_counts_are_two_forwards_one_backward_per_pair(n_pairs):
    model = make_model()
    task = make_task(model.config.vocab_size, n_pairs=n_pairs, lengths=[4, 6])
    eap_scores(model, task)
    assert model.counter.as_dict() == {"forwards": 2 * n_pairs, "backwards": n_pairs}


def test_scores_independent_of_batching():
    model = make_model(seed=3)
    task = make_task(model.config.vocab_size, n_pairs=4, seed=7)
    together = eap_per_pair(model, task)
    alone = np.vstack([eap_per_pair(model, task.subset([i])) for i in range(4)])
    np.testing.assert_allclose(together, alone, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(a=st.floats(0.1, 10))
def test_metric_scaling_scales_scores(a):
    model = make_model(seed=4)
    task = make_task(model.config.vocab_size, n_pairs=2, seed=1)
    base = eap_scores(model, task)
    # scaling the unembed turns logit_diff L into a*L; an additive constant has no gradient
    w = dict(model.weights)
    w["unembed.W_U"] = a * w["unembed.W_U"]
    w["unembed.b_U"] = a * w["unembed.b_U"]
    scaled_model = type(model)(model.config, w, dtype=np.float64)
    scaled = eap_scores(scaled_model, task)
    np.testing.assert_allclose(scaled.signed, a * base.signed, rtol=1e-4, atol=1e-7)
    for k in (1, 5, 20):
        assert set(top_k_circuit(scaled, k).edges) == set(top_k_circuit(base, k).edges)


def test_first_order_error_is_quadratic():
    model = make_model(seed=12)
    task = make_task(model.config.vocab_size, n_pairs=2, seed=3)
    attr = eap_per_pair(model, task).mean(0)
    ev = PairEvaluator(model, task)
    base = ev.clean_metric.mean()
    ratios = []
    for i in range(0, len(model.graph), 3):
        e = model.graph.edge_ids[i]
        errs = []
        for h in (0.02, 0.01):
            delta = ev.evaluate(patches_for([e], h)).mean() - base
            errs.append(abs(delta - h * attr[i]))
        if errs[0] > 1e-11:
            ratios.append(errs[0] / errs[1])
    assert len(ratios) >= 10
    assert np.median(ratios) == pytest.approx(4.0, rel=0.1)


def test_zero_gradient_warning_for_kl(small_model, small_task):
    with pytest.warns(ZeroGradientWarning):
        t = eap_scores(small_model, small_task.with_metric("kl"))
    assert np.all(np.abs(t.signed) < 1e-6)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ZeroGradientWarning)
        eap_scores(small_model, small_task)
