import numpy as np
import pytest

from circscope.model import DecomposedTransformer, ModelConfig, init_weights
from circscope.tasks import MetricSpec, PromptPair, TaskDataset

SMALL = dict(n_layers=2, n_heads=2, d_model=16, d_head=4, vocab_size=12, n_ctx=8, d_mlp=32)


def make_config(**overrides) -> ModelConfig:
    return ModelConfig(**{**SMALL, **overrides})


def make_model(seed=0, dtype=np.float64, **overrides) -> DecomposedTransformer:
    cfg = make_config(**overrides)
    return DecomposedTransformer(cfg, init_weights(cfg, seed), dtype=dtype)


def make_task(vocab_size, n_pairs=3, seq_len=5, seed=0, metric="logit_diff", lengths=None) -> TaskDataset:
    """Random pairs differing in one or two tokens; answers are distinct tokens."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        n = seq_len if lengths is None else lengths[i % len(lengths)]
        clean = rng.integers(0, vocab_size, n)
        corrupt = clean.copy()
        for j in rng.choice(n, size=min(2, n), replace=False):
            corrupt[j] = (corrupt[j] + 1 + rng.integers(vocab_size - 1)) % vocab_size
        a, b = rng.choice(vocab_size, size=2, replace=False)
        pairs.append(PromptPair(clean, corrupt, (int(a),), (int(b),)))
    return TaskDataset("random", pairs, MetricSpec(metric))


@pytest.fixture
def small_model():
    return make_model()


@pytest.fixture
def small_task(small_model):
    return make_task(small_model.config.vocab_size)


def affine_model():
    """0-layer, d_model=1, no layernorm: logits are affine in every edge.

    Token t embeds to the scalar t, positions embed to 0.5 * pos, and the
    unembed maps x to logits (2x + 0.25, 0, -x, x), so logit_diff(0 vs 1) = 2x + 0.25.
    """
    cfg = ModelConfig(n_layers=0, n_heads=0, d_model=1, d_head=1, vocab_size=4, n_ctx=4, layernorm="none")
    w = {
        "embed.W_E": np.arange(4.0).reshape(4, 1),
        "pos.W_pos": 0.5 * np.arange(4.0).reshape(4, 1),
        "unembed.W_U": np.array([[2.0, 0.0, -1.0, 1.0]]),
        "unembed.b_U": np.array([0.25, 0.0, 0.0, 0.0]),
    }
    model = DecomposedTransformer(cfg, w, dtype=np.float64)
    # clean last token 1, corrupt last token 3: embed contribution moves by 2
    task = TaskDataset("affine", [PromptPair([2, 1], [2, 3], [0], [1])], MetricSpec("logit_diff"))
    return model, task
