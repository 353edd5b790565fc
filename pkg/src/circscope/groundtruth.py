"""Built-in ground-truth circuits for IOI, Docstring and Greater-Than.

Circuits are stored at node level (heads, MLPs) as transcribed from the
original manual analyses, and expanded to edges with one rule: an edge is
in the circuit when its writer is a circuit node or a token/position
embedding, and its reader belongs to a circuit node or is the unembed input.
This is coarser than hand-specified edge lists; see the README.
"""

from __future__ import annotations

from .evaluation import GroundTruthCircuit
from .model import DecomposedGraph, ModelConfig, NodeKind, build_graph

GPT2_SMALL = ModelConfig(
    n_layers=12, n_heads=12, d_model=768, d_head=64, vocab_size=50257, n_ctx=1024, d_mlp=3072,
    layernorm="pre", positional="learned-absolute",
)
ATTN_ONLY_4L = ModelConfig(
    n_layers=4, n_heads=8, d_model=512, d_head=64, vocab_size=48262, n_ctx=2048, d_mlp=0,
    layernorm="pre", positional="shortformer",
)

IOI_ROLES: dict[str, list[tuple[int, int]]] = {
    "Name Mover": [(9, 9), (9, 6), (10, 0)],
    "Backup Name Mover": [(10, 10), (10, 6), (10, 2), (10, 1), (11, 2), (9, 7), (9, 0), (11, 9)],
    "Negative Name Mover": [(10, 7), (11, 10)],
    "S-Inhibition": [(7, 3), (7, 9), (8, 6), (8, 10)],
    "Induction": [(5, 5), (5, 8), (5, 9), (6, 9)],
    "Duplicate Token": [(0, 1), (0, 10), (3, 0)],
    "Previous Token": [(2, 2), (4, 11)],
}

DOCSTRING_HEADS = [(0, 2), (0, 4), (0, 5), (1, 2), (1, 4), (2, 0), (3, 0), (3, 6)]

GREATERTHAN_HEADS = [(5, 1), (5, 5), (6, 1), (6, 9), (7, 10), (8, 8), (8, 11), (9, 1)]
GREATERTHAN_MLPS = [8, 9, 10, 11]

TASKS = ("ioi", "docstring", "greaterthan")


def expand_nodes(graph: DecomposedGraph, heads, mlps=()) -> frozenset[str]:
    heads = set(heads)
    mlps = set(mlps)

    def in_circuit(node) -> bool:
        k = node.kind
        if k in (NodeKind.TOKEN_EMBED, NodeKind.POS_EMBED, NodeKind.FINAL_IN):
            return True
        if k in (NodeKind.MLP_IN, NodeKind.MLP_OUT):
            return node.layer in mlps
        return (node.layer, node.head) in heads

    return frozenset(e.id for e in graph.edges if in_circuit(e.src) and in_circuit(e.dst))


def builtin(task: str) -> tuple[ModelConfig, GroundTruthCircuit]:
    """Model config and ground truth for one of ``TASKS``."""
    if task == "ioi":
        graph = build_graph(GPT2_SMALL)
        heads = [h for hs in IOI_ROLES.values() for h in hs]
        roles = {f"a{l}.h{h}.out": role for role, hs in IOI_ROLES.items() for l, h in hs}
        return GPT2_SMALL, GroundTruthCircuit("ioi", expand_nodes(graph, heads), roles)
    if task == "docstring":
        graph = build_graph(ATTN_ONLY_4L)
        return ATTN_ONLY_4L, GroundTruthCircuit("docstring", expand_nodes(graph, DOCSTRING_HEADS))
    if task == "greaterthan":
        graph = build_graph(GPT2_SMALL)
        edges = expand_nodes(graph, GREATERTHAN_HEADS, GREATERTHAN_MLPS)
        return GPT2_SMALL, GroundTruthCircuit("greaterthan", edges)
    raise KeyError(f"unknown built-in task {task!r}; expected one of {TASKS}")
