"""Decomposed transformer: residual stream as an explicit sum of writer outputs.

Every reader (a head's Q/K/V input, an MLP input, the unembed input) gets
its own accumulation node.  Its value equals the residual stream at that
point, but its gradient belongs to that reader alone, so one backward pass
yields a separate gradient for every edge endpoint.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import core
from .core import ActivationCache, CircscopeError, GradientCache, Tape, Tensor

MAGIC = b"CIRCWT01"


class ConfigError(CircscopeError, ValueError):
    pass


class WeightsFormatError(CircscopeError, ValueError):
    pass


class GraphError(CircscopeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "graph error"


class PassBudgetExceeded(CircscopeError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    d_head: int
    vocab_size: int
    n_ctx: int
    d_mlp: int = 0
    layernorm: str = "pre"
    positional: str = "learned-absolute"

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_mlp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("d_model", "d_head", "vocab_size", "n_ctx"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_layers and self.n_heads < 1:
            raise ConfigError("n_heads must be >= 1 when n_layers > 0")
        if self.layernorm not in ("pre", "none"):
            raise ConfigError(f"layernorm must be 'pre' or 'none', got {self.layernorm!r}")
        if self.positional not in ("learned-absolute", "shortformer"):
            raise ConfigError(f"positional must be 'learned-absolute' or 'shortformer', got {self.positional!r}")

    @property
    def has_mlp(self) -> bool:
        return self.d_mlp > 0

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# Graph


class NodeKind(str, Enum):
    TOKEN_EMBED = "TokenEmbed"
    POS_EMBED = "PosEmbed"
    HEAD_OUT = "HeadOut"
    MLP_OUT = "MlpOut"
    HEAD_Q = "HeadQ"
    HEAD_K = "HeadK"
    HEAD_V = "HeadV"
    MLP_IN = "MlpIn"
    FINAL_IN = "FinalIn"


WRITER_KINDS = frozenset({NodeKind.TOKEN_EMBED, NodeKind.POS_EMBED, NodeKind.HEAD_OUT, NodeKind.MLP_OUT})
READER_KINDS = frozenset({NodeKind.HEAD_Q, NodeKind.HEAD_K, NodeKind.HEAD_V, NodeKind.MLP_IN, NodeKind.FINAL_IN})
_PORTS = {NodeKind.HEAD_Q: "q_input", NodeKind.HEAD_K: "k_input", NodeKind.HEAD_V: "v_input"}
_PORT_ORDER = {NodeKind.HEAD_Q: 0, NodeKind.HEAD_K: 1, NodeKind.HEAD_V: 2}


@dataclass(frozen=True)
class NodeId:
    kind: NodeKind
    layer: int = -1
    head: int = -1

    @property
    def is_writer(self) -> bool:
        return self.kind in WRITER_KINDS

    @property
    def name(self) -> str:
        k = self.kind
        if k is NodeKind.TOKEN_EMBED:
            return "embed.out"
        if k is NodeKind.POS_EMBED:
            return "pos.out"
        if k is NodeKind.HEAD_OUT:
            return f"a{self.layer}.h{self.head}.out"
        if k in _PORTS:
            return f"a{self.layer}.h{self.head}.{_PORTS[k]}"
        if k is NodeKind.MLP_OUT:
            return f"m{self.layer}.out"
        if k is NodeKind.MLP_IN:
            return f"m{self.layer}.in"
        return "final.in"

    def __str__(self) -> str:
        return self.name

    def sort_key(self) -> tuple[int, int, int, int, int]:
        # (layer, block: attn<mlp, phase: read<write, head, port)
        k = self.kind
        if k is NodeKind.TOKEN_EMBED:
            return (-1, 0, 1, 0, 0)
        if k is NodeKind.POS_EMBED:
            return (-1, 0, 1, 1, 0)
        if k in _PORT_ORDER:
            return (self.layer, 0, 0, self.head, _PORT_ORDER[k])
        if k is NodeKind.HEAD_OUT:
            return (self.layer, 0, 1, self.head, 0)
        if k is NodeKind.MLP_IN:
            return (self.layer, 1, 0, 0, 0)
        if k is NodeKind.MLP_OUT:
            return (self.layer, 1, 1, 0, 0)
        return (1 << 30, 0, 0, 0, 0)

    @classmethod
    def parse(cls, text: str) -> "NodeId":
        try:
            hook = core.HookName.parse(text)
        except core.UnknownHookError:
            raise GraphError(f"unknown node {text!r}") from None
        if hook.kind == "embed":
            return cls(NodeKind.TOKEN_EMBED)
        if hook.kind == "pos":
            return cls(NodeKind.POS_EMBED)
        if hook.kind == "attn":
            kind = {"out": NodeKind.HEAD_OUT, "q_input": NodeKind.HEAD_Q,
                    "k_input": NodeKind.HEAD_K, "v_input": NodeKind.HEAD_V}[hook.port]
            return cls(kind, hook.layer, hook.head)
        if hook.kind == "mlp":
            return cls(NodeKind.MLP_OUT if hook.port == "out" else NodeKind.MLP_IN, hook.layer)
        if hook.kind == "final":
            return cls(NodeKind.FINAL_IN)
        raise GraphError(f"{text!r} is not a graph node")


@dataclass(frozen=True)
class Edge:
    src: NodeId
    dst: NodeId

    @property
    def id(self) -> str:
        return f"{self.src.name}->{self.dst.name}"

    def __str__(self) -> str:
        return self.id

    @classmethod
    def parse(cls, text: str) -> "Edge":
        parts = text.split("->")
        if len(parts) != 2:
            raise GraphError(f"malformed edge id {text!r}")
        return cls(NodeId.parse(parts[0]), NodeId.parse(parts[1]))


def edge_is_valid(src: NodeId, dst: NodeId) -> bool:
    """Writer ``src`` feeds reader ``dst`` iff it strictly precedes it in residual order."""
    return src.is_writer and not dst.is_writer and src.sort_key() < dst.sort_key()


@dataclass(frozen=True)
class DecomposedGraph:
    config: ModelConfig
    writers: tuple[NodeId, ...]
    readers: tuple[NodeId, ...]
    edges: tuple[Edge, ...]
    _index: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self._index.update({e.id: i for i, e in enumerate(self.edges)})
        incoming: dict[str, list[NodeId]] = {r.name: [] for r in self.readers}
        for e in self.edges:
            incoming[e.dst.name].append(e.src)
        object.__setattr__(self, "_incoming", incoming)

    @property
    def edge_ids(self) -> list[str]:
        return [e.id for e in self.edges]

    def __len__(self) -> int:
        return len(self.edges)

    def __contains__(self, edge_id: str) -> bool:
        return edge_id in self._index

    def index(self, edge_id: str) -> int:
        try:
            return self._index[edge_id]
        except KeyError:
            raise GraphError(f"edge {edge_id!r} is not in the graph") from None

    def edge(self, edge_id: str) -> Edge:
        return self.edges[self.index(edge_id)]

    def incoming(self, reader: NodeId | str) -> list[NodeId]:
        name = reader if isinstance(reader, str) else reader.name
        try:
            return list(self._incoming[name])
        except KeyError:
            raise GraphError(f"unknown reader {name!r}") from None


def build_graph(config: ModelConfig) -> DecomposedGraph:
    H = config.n_heads
    nodes = [NodeId(NodeKind.TOKEN_EMBED)]
    if config.positional == "learned-absolute":
        nodes.append(NodeId(NodeKind.POS_EMBED))
    for layer in range(config.n_layers):
        for h in range(H):
            nodes += [NodeId(k, layer, h) for k in (NodeKind.HEAD_Q, NodeKind.HEAD_K, NodeKind.HEAD_V, NodeKind.HEAD_OUT)]
        if config.has_mlp:
            nodes += [NodeId(NodeKind.MLP_IN, layer), NodeId(NodeKind.MLP_OUT, layer)]
    nodes.append(NodeId(NodeKind.FINAL_IN))
    nodes.sort(key=NodeId.sort_key)
    writers = tuple(n for n in nodes if n.is_writer)
    readers = tuple(n for n in nodes if not n.is_writer)
    edges = []
    for r in readers:
        rk = r.sort_key()
        edges += [Edge(w, r) for w in writers if w.sort_key() < rk]
    return DecomposedGraph(config, writers, readers, tuple(edges))


# ---------------------------------------------------------------------------
# Weights


def weight_manifest(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Tensor name -> shape for every tensor a container must hold."""
    D, dh, H, V = config.d_model, config.d_head, config.n_heads, config.vocab_size
    m: dict[str, tuple[int, ...]] = {"embed.W_E": (V, D), "pos.W_pos": (config.n_ctx, D)}
    for layer in range(config.n_layers):
        if config.layernorm == "pre":
            m[f"ln.a{layer}.w"] = (D,)
            m[f"ln.a{layer}.b"] = (D,)
        for h in range(H):
            for w in ("W_Q", "W_K", "W_V"):
                m[f"a{layer}.h{h}.{w}"] = (D, dh)
            m[f"a{layer}.h{h}.W_O"] = (dh, D)
        for b in ("b_Q", "b_K", "b_V"):
            m[f"a{layer}.{b}"] = (H, dh)
        m[f"a{layer}.b_O"] = (D,)
        if config.has_mlp:
            if config.layernorm == "pre":
                m[f"ln.m{layer}.w"] = (D,)
                m[f"ln.m{layer}.b"] = (D,)
            m[f"m{layer}.W_in"] = (D, config.d_mlp)
            m[f"m{layer}.b_in"] = (config.d_mlp,)
            m[f"m{layer}.W_out"] = (config.d_mlp, D)
            m[f"m{layer}.b_out"] = (D,)
    if config.layernorm == "pre":
        m["ln.final.w"] = (D,)
        m["ln.final.b"] = (D,)
    m["unembed.W_U"] = (D, V)
    m["unembed.b_U"] = (V,)
    return m


class Weights(Mapping[str, np.ndarray]):
    """Read-only float32 tensors keyed by manifest name."""

    def __init__(self, tensors: Mapping[str, np.ndarray], config: ModelConfig | None = None):
        arrs = {}
        for k, v in tensors.items():
            a = np.array(v, dtype=np.float32)
            a.setflags(write=False)
            arrs[k] = a
        self._t = arrs
        if config is not None:
            validate_weights(self._t, config)

    def __getitem__(self, k: str) -> np.ndarray:
        return self._t[k]

    def __iter__(self):
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)


def validate_weights(tensors: Mapping[str, np.ndarray], config: ModelConfig) -> None:
    manifest = weight_manifest(config)
    for name, shape in manifest.items():
        if name not in tensors:
            raise WeightsFormatError(f"missing tensor {name!r}")
        got = tuple(np.shape(tensors[name]))
        if got != shape:
            raise WeightsFormatError(f"shape mismatch for {name!r}: expected {shape}, got {got}")
    extra = sorted(set(tensors) - set(manifest))
    if extra:
        raise WeightsFormatError(f"unexpected tensor {extra[0]!r} not in manifest")


def init_weights(config: ModelConfig, seed: int = 0, zero: bool = False) -> Weights:
    """Random (or all-zero) weights with roughly unit-scale activations."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in weight_manifest(config).items():
        if zero:
            out[name] = np.zeros(shape)
            continue
        leaf = name.rsplit(".", 1)[1]
        if name.startswith("ln.") and leaf == "w":
            out[name] = 1.0 + 0.1 * rng.standard_normal(shape)
        elif leaf.startswith("b"):
            out[name] = 0.1 * rng.standard_normal(shape)
        elif name in ("embed.W_E", "pos.W_pos"):
            out[name] = rng.standard_normal(shape)
        else:
            out[name] = rng.standard_normal(shape) / math.sqrt(shape[0])
    return Weights(out, config)


def save_weights(path: str | Path, weights: Mapping[str, np.ndarray]) -> None:
    header = []
    blobs = []
    offset = 0
    for name, arr in weights.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        header.append({"name": name, "shape": list(a.shape), "dtype": "f32", "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    hbytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for b in blobs:
            f.write(b)


def load_weights(path: str | Path, config: ModelConfig) -> Weights:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise WeightsFormatError("bad magic: not a CIRCWT01 weight container")
    if len(raw) < 16:
        raise WeightsFormatError("truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise WeightsFormatError("truncated header")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"unreadable header: {exc}") from None
    blob = memoryview(raw)[16 + hlen:]
    tensors = {}
    for entry in header:
        name = entry.get("name")
        if entry.get("dtype") != "f32":
            raise WeightsFormatError(f"dtype mismatch for {name!r}: expected f32, got {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        start = int(entry["offset"])
        nbytes = 4 * math.prod(shape)
        if start < 0 or start + nbytes > len(blob):
            raise WeightsFormatError(f"truncated blob: tensor {name!r} extends past end of file")
        if name in tensors:
            raise WeightsFormatError(f"duplicate tensor {name!r}")
        tensors[name] = np.frombuffer(blob[start:start + nbytes], dtype="<f4").reshape(shape)
    return Weights(tensors, config)


# ---------------------------------------------------------------------------
# Forward pass


@dataclass
class PassCounter:
    """Counts model passes per sequence; a batch of B prompts counts B."""

    forwards: int = 0
    backwards: int = 0
    budget: int | None = None

    def add_forward(self, n: int) -> None:
        if self.budget is not None and self.forwards + n > self.budget:
            raise PassBudgetExceeded(
                f"forward-pass budget exceeded: {self.forwards + n} > {self.budget}"
            )
        self.forwards += n

    def reset(self) -> None:
        self.forwards = 0
        self.backwards = 0

    def as_dict(self) -> dict:
        return {"forwards": self.forwards, "backwards": self.backwards}


def head_output_decomposition(z: np.ndarray, W_O: np.ndarray) -> np.ndarray:
    """Per-head writes into the residual stream.

    ``z`` is (B, H, S, d_head) attention-weighted values, ``W_O`` is
    (H, d_head, d_model).  Returns (H, B, S, d_model); adding ``b_O`` to the
    sum over heads gives the layer's total attention output.
    """
    return np.einsum("bhsk,hkd->hbsd", z, W_O)


Patches = Mapping[str, Sequence[tuple[str, float]]]


class DecomposedTransformer:
    """Runs a decomposed forward pass over immutable weights.

    ``counter`` records passes and is the only mutable state.
    """

    def __init__(self, config: ModelConfig, weights: Mapping[str, np.ndarray], dtype=np.float32):
        validate_weights(weights, config)
        self.config = config
        self.weights = weights if isinstance(weights, Weights) else Weights(weights)
        self.dtype = np.dtype(dtype)
        self._w = {k: np.asarray(v, dtype=self.dtype) for k, v in self.weights.items()}
        self.graph = build_graph(config)
        self.counter = PassCounter()
        self._reader_names = {r.name for r in self.graph.readers}
        self._edge_set = set(self.graph.edge_ids)

    def hook_names(self) -> list[str]:
        names = [n.name for n in sorted(self.graph.writers + self.graph.readers, key=NodeId.sort_key)]
        return names + ["logits"]

    # -- public passes ------------------------------------------------------
    def run_forward(
        self,
        tokens,
        hooks: Iterable[str] | None = None,
        *,
        patches: Patches | None = None,
        corrupt: Mapping[str, np.ndarray] | None = None,
        reader_deltas: Mapping[str, np.ndarray] | None = None,
        split_readers: Iterable[str] = (),
    ) -> ActivationCache:
        """Forward pass with optional edge interventions.

        ``patches`` maps a reader to ``(writer, lam)`` pairs: the reader's
        accumulation input gets ``lam * (corrupt[writer] - writer_now)``
        added, where ``writer_now`` is the writer's value in this run.
        ``reader_deltas`` adds raw arrays to reader inputs.  Readers in
        ``split_readers`` sum explicit per-edge copies (hooked under the edge
        id) instead of the shared residual.
        """
        tokens = np.asarray(tokens)
        if tokens.ndim != 2:
            raise ValueError(f"tokens must be (batch, seq), got shape {tokens.shape}")
        if not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError("tokens must be integers")
        patches = dict(patches or {})
        reader_deltas = dict(reader_deltas or {})
        split = set(split_readers)
        for r, plist in patches.items():
            for w, lam in plist:
                eid = f"{w}->{r}"
                if eid not in self._edge_set:
                    raise GraphError(f"edge {eid!r} is not in the graph")
                if corrupt is None or w not in corrupt:
                    raise ValueError(f"no corrupt activation for writer {w!r}")
                if not 0.0 <= lam <= 1.0:
                    raise ValueError(f"lambda must lie in [0, 1], got {lam}")
        for r in list(reader_deltas) + list(split):
            if r not in self._reader_names:
                raise GraphError(f"unknown reader {r!r}")
        self.counter.add_forward(tokens.shape[0])

        def builder(tape, toks):
            return self._build(tape, toks, patches, corrupt or {}, reader_deltas, split)

        available = None if split else self.hook_names()
        return core.run_forward(builder, tokens, hooks, self.dtype, available)

    def run_backward(self, cache: ActivationCache, output: Tensor) -> GradientCache:
        grads = core.run_backward(cache, output)
        self.counter.backwards += cache.logits.shape[0]
        return grads

    def logits(self, tokens, **kw) -> np.ndarray:
        return self.run_forward(tokens, hooks=[], **kw).logits.data

    # -- graph construction -------------------------------------------------
    def _build(self, tape: Tape, tokens, patches, corrupt, deltas, split) -> Tensor:
        cfg = self.config
        B, S = tokens.shape
        if S > cfg.n_ctx:
            raise ValueError(f"sequence length {S} exceeds n_ctx={cfg.n_ctx}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab_size):
            raise ValueError(f"token id out of range [0, {cfg.vocab_size})")
        D = cfg.d_model
        w = self._w
        const = {}

        def W(name):
            t = const.get(name)
            if t is None:
                t = const[name] = tape.constant(w[name])
            return t

        writers: dict[str, Tensor] = {}
        # residual terms in canonical writer order; (writer name | None for bias, tensor)
        terms: list[tuple[str | None, Tensor]] = []

        def write(name, t):
            tape.hook(name, t)
            writers[name] = t
            terms.append((name, t))

        def reader(name, residual):
            if name in split:
                parts = []
                for wname, t in terms:
                    if wname is None:
                        parts.append(t)
                    else:
                        parts.append(tape.hook(f"{wname}->{name}", core.identity(t)))
                acc = core.add_n(parts)
            else:
                acc = core.identity(residual)
            extra = []
            for wname, lam in patches.get(name, ()):
                diff = core.sub(tape.constant(corrupt[wname]), writers[wname])
                extra.append(core.scale(diff, lam))
            if name in deltas:
                d = np.asarray(deltas[name])
                if d.shape != acc.shape:
                    raise ValueError(f"delta for {name!r} has shape {d.shape}, expected {acc.shape}")
                extra.append(tape.constant(d))
            if extra:
                acc = core.add_n([acc, *extra])
            return tape.hook(name, acc)

        def residual():
            return core.add_n([t for _, t in terms])

        def ln(x, prefix):
            if cfg.layernorm == "none":
                return x
            return core.layernorm(x, W(f"{prefix}.w"), W(f"{prefix}.b"))

        write("embed.out", core.embedding(W("embed.W_E"), tokens))
        pos = core.embedding(W("pos.W_pos"), np.broadcast_to(np.arange(S), (B, S)))
        shortformer = cfg.positional == "shortformer"
        if not shortformer:
            write("pos.out", pos)

        inv_sqrt = 1.0 / math.sqrt(cfg.d_head)
        for layer in range(cfg.n_layers):
            res = residual()
            outs = []
            for h in range(cfg.n_heads):
                pre = f"a{layer}.h{h}"
                proj = {}
                for port, wn, bn in (("q", "W_Q", "b_Q"), ("k", "W_K", "b_K"), ("v", "W_V", "b_V")):
                    x = ln(reader(f"{pre}.{port}_input", res), f"ln.a{layer}")
                    if shortformer and port != "v":
                        x = core.add(x, pos)
                    bias = tape.constant(w[f"a{layer}.{bn}"][h])
                    proj[port] = core.add_bias(core.matmul(x, W(f"{pre}.{wn}")), bias)
                scores = core.scale(core.bmm(proj["q"], core.transpose_last(proj["k"])), inv_sqrt)
                pattern = core.causal_softmax(scores)
                z = core.bmm(pattern, proj["v"])
                outs.append(core.matmul(z, W(f"{pre}.W_O")))
            for h, o in enumerate(outs):
                write(f"a{layer}.h{h}.out", o)
            terms.append((None, tape.constant(np.broadcast_to(w[f"a{layer}.b_O"], (B, S, D)))))
            if cfg.has_mlp:
                x = ln(reader(f"m{layer}.in", residual()), f"ln.m{layer}")
                hid = core.gelu(core.add_bias(core.matmul(x, W(f"m{layer}.W_in")), W(f"m{layer}.b_in")))
                write(f"m{layer}.out", core.add_bias(core.matmul(hid, W(f"m{layer}.W_out")), W(f"m{layer}.b_out")))

        x = ln(reader("final.in", residual()), "ln.final")
        return core.add_bias(core.matmul(x, W("unembed.W_U")), W("unembed.b_U"))


def load_model(config_path, weights_path, dtype=np.float32) -> DecomposedTransformer:
    config = ModelConfig.load(config_path)
    return DecomposedTransformer(config, load_weights(weights_path, config), dtype=dtype)
