import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from circscope import core
from circscope.core import HookName, NonFiniteError, Tape, TapeError, UnknownHookError

rng = np.random.default_rng(0)


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar f at every coordinate of x."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def check_op(build, *shapes, proj_seed=1, tol=1e-6):
    """Compare tape gradients of <proj, op(inputs)> with finite differences."""
    inputs = [rng.standard_normal(s) for s in shapes]
    tape = Tape(np.float64)
    vars_ = [tape.variable(x) for x in inputs]
    out = build(*vars_)
    proj = np.random.default_rng(proj_seed).standard_normal(out.shape)
    loss = core.sum_all(core.mul(out, tape.constant(proj)))
    grads = tape.backward(loss)
    for k, x in enumerate(inputs):

        def f(xk, k=k):
            t = Tape(np.float64)
            vs = [t.variable(xk if j == k else inputs[j]) for j in range(len(inputs))]
            return float(np.sum(build(*vs).data * proj))

        expected = numeric_grad(f, x)
        got = grads.get(vars_[k].index, np.zeros_like(x))
        np.testing.assert_allclose(got, expected, rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "name, build, shapes",
    [
        ("add", core.add, [(2, 3), (2, 3)]),
        ("sub", core.sub, [(2, 3), (2, 3)]),
        ("mul", core.mul, [(2, 3), (2, 3)]),
        ("add_n", lambda a, b, c: core.add_n([a, b, c]), [(2, 3)] * 3),
        ("identity", core.identity, [(4,)]),
        ("scale", lambda a: core.scale(a, -2.5), [(3, 2)]),
        ("add_bias", core.add_bias, [(2, 3, 4), (4,)]),
        ("matmul", core.matmul, [(2, 3, 4), (4, 5)]),
        ("bmm", core.bmm, [(2, 3, 4), (2, 4, 5)]),
        ("transpose_last", core.transpose_last, [(2, 3, 4)]),
        ("reshape", lambda a: core.reshape(a, (6, 2)), [(3, 4)]),
        ("softmax", core.softmax, [(3, 5)]),
        ("log_softmax", core.log_softmax, [(3, 5)]),
        ("causal_softmax", core.causal_softmax, [(2, 4, 4)]),
        ("layernorm", core.layernorm, [(3, 6), (6,), (6,)]),
        ("layernorm_plain", lambda a: core.layernorm(a), [(3, 6)]),
        ("gelu", core.gelu, [(3, 4)]),
        ("sum_last", core.sum_last, [(3, 4)]),
        ("mean_all", core.mean_all, [(3, 4)]),
    ],
)
def test_primitive_gradients_match_finite_differences(name, build, shapes):
    check_op(build, *shapes)


def test_embedding_and_take_positions_gradients():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    check_op(lambda t: core.embedding(t, ids), (4, 5))
    pos = np.array([2, 0])
    check_op(lambda x: core.take_positions(x, pos), (2, 3, 5))


def test_softmax_rows_sum_to_one():
    tape = Tape(np.float64)
    p = core.softmax(tape.variable(rng.standard_normal((4, 7)) * 30)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


def test_causal_softmax_masks_future():
    tape = Tape(np.float64)
    p = core.causal_softmax(tape.variable(rng.standard_normal((2, 5, 5)))).data
    assert np.all(np.triu(p[0], 1) == 0)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-12)


def test_layernorm_output_statistics():
    tape = Tape(np.float64)
    y = core.layernorm(tape.variable(rng.standard_normal((5, 32)) * 3 + 7)).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), 1.0, rtol=1e-4)


def test_gelu_known_values():
    tape = Tape(np.float64)
    y = core.gelu(tape.variable(np.array([0.0, 1.0, -1.0]))).data
    # tanh approximation evaluated by hand
    c = np.sqrt(2 / np.pi)
    expected = [0.0, 0.5 * (1 + np.tanh(c * 1.044715)), -0.5 * (1 - np.tanh(c * 1.044715))]
    np.testing.assert_allclose(y, expected, rtol=1e-12)


def test_sum_distributes_gradient_identically():
    tape = Tape(np.float64)
    a, b, c = (tape.variable(rng.standard_normal(3)) for _ in range(3))
    s = core.add_n([a, b, c])
    g = tape.backward(core.sum_all(core.mul(s, tape.constant([1.0, 2.0, 3.0]))))
    for t in (a, b, c):
        np.testing.assert_array_equal(g[t.index], [1.0, 2.0, 3.0])


def test_add_n_accumulates_in_float64():
    tape = Tape(np.float32)
    big = tape.variable(np.array([1e8], np.float32))
    terms = [big] + [tape.variable(np.array([1.0], np.float32)) for _ in range(8)] + [core.scale(big, -1.0)]
    assert core.add_n(terms).data[0] == 8.0


def test_traversal_count_and_errors():
    tape = Tape(np.float64)
    with pytest.raises(TapeError):
        tape.backward(Tape(np.float64).constant(1.0))
    x = tape.variable(np.ones(3))
    loss = core.sum_all(x)
    tape.backward(loss)
    tape.backward(loss)
    assert tape.traversals == 2
    other = Tape(np.float64)
    other.variable(np.ones(2))
    with pytest.raises(TapeError):
        other.backward(loss)


def test_hook_bound_twice_rejected():
    tape = Tape()
    t = tape.variable(np.ones(2))
    tape.hook("embed.out", t)
    with pytest.raises(TapeError):
        tape.hook("embed.out", t)


def test_non_finite_values_raise():
    tape = Tape(np.float64)
    x = tape.variable(np.array([1e308, 1e308]))
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        core.add(x, x)


def test_shape_mismatch_raises():
    tape = Tape()
    with pytest.raises(ValueError):
        core.add(tape.variable(np.ones(3)), tape.variable(np.ones(4)))


# -- hook names ----------------------------------------------------------


@settings(max_examples=60)
@given(
    kind=st.sampled_from(["embed", "pos", "attn", "mlp", "final", "logits"]),
    layer=st.integers(0, 40),
    head=st.integers(0, 40),
    port=st.sampled_from(["out", "q_input", "k_input", "v_input"]),
    mport=st.sampled_from(["in", "out"]),
)
def test_hook_name_round_trip(kind, layer, head, port, mport):
    if kind == "attn":
        h = HookName(kind, layer, head, port)
    elif kind == "mlp":
        h = HookName(kind, layer, None, mport)
    elif kind == "final":
        h = HookName(kind, None, None, "in")
    else:
        h = HookName(kind)
    assert str(HookName.parse(str(h))) == str(h)


@pytest.mark.parametrize("bad", ["a0.h0.z", "m.in", "a-1.h0.out", "final.out", ""])
def test_hook_name_rejects_garbage(bad):
    with pytest.raises(UnknownHookError):
        HookName.parse(bad)


# -- drivers -------------------------------------------------------------


def _toy_builder(w):
    def build(tape, tokens):
        e = tape.hook("embed.out", core.embedding(tape.variable(w), tokens))
        return core.matmul(e, tape.constant(w.T))

    return build


def test_run_forward_backward_and_unknown_hook():
    w = rng.standard_normal((5, 3))
    tokens = np.array([[0, 1, 4]])
    cache = core.run_forward(_toy_builder(w), tokens, dtype=np.float64)
    assert set(cache.tensors) == {"embed.out", "logits"}
    grads = core.run_backward(cache, core.sum_all(cache.logits))
    # d/d e of sum(e @ w.T) is the column sums of w.T broadcast
    np.testing.assert_allclose(grads["embed.out"][0], np.tile(w.sum(0), (3, 1)))
    assert grads.seed_grad_norm == pytest.approx(np.sqrt(15))
    with pytest.raises(UnknownHookError):
        core.run_forward(_toy_builder(w), tokens, hooks=["m0.out"])
    with pytest.raises(ValueError):
        core.run_forward(_toy_builder(w), np.array([0, 1]))
    with pytest.raises(ValueError):
        core.run_backward(cache, cache.logits)


def test_run_forward_is_deterministic():
    w = rng.standard_normal((5, 3))
    a = core.run_forward(_toy_builder(w), np.array([[1, 2]])).logits.data
    b = core.run_forward(_toy_builder(w), np.array([[1, 2]])).logits.data
    assert a.tobytes() == b.tobytes()


def test_backward_from_detached_metric_raises():
    w = rng.standard_normal((5, 3))
    cache = core.run_forward(_toy_builder(w), np.array([[1]]))
    other = core.run_forward(_toy_builder(w), np.array([[1]]))
    with pytest.raises(TapeError):
        core.run_backward(cache, core.sum_all(other.logits))


def test_finite_difference_examples():
    assert core.finite_difference(lambda x: float(x @ x), np.array([1.0]), np.array([1.0]), 1e-3) == pytest.approx(2.0, abs=1e-6)
    # linear metric: exact for any step
    assert core.finite_difference(lambda x: 3 * x[0] - x[1], np.zeros(2), np.array([1.0, 1.0]), 0.5) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        core.finite_difference(lambda x: 0.0, np.zeros(1), np.ones(1), 0.0)
    with pytest.raises(NonFiniteError):
        core.finite_difference(lambda x: float("nan"), np.zeros(1), np.ones(1), 0.1)
