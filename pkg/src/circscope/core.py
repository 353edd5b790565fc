"""Dense tensor arithmetic with a recorded tape and reverse-mode gradients.

Only the primitives a decomposed transformer needs are provided.  Values are
stored in the tape's storage dtype (float32 by default); gradients and
reductions are carried in float64.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = float(np.sqrt(2.0 / np.pi))
LN_EPS = 1e-5


class CircscopeError(Exception):
    """Base class for library errors."""


class NonFiniteError(CircscopeError, FloatingPointError):
    pass


class UnknownHookError(CircscopeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown hook"


class TapeError(CircscopeError, RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Hook names


_HOOK_RE = re.compile(
    r"^(?:(?P<embed>embed|pos)\.out"
    r"|a(?P<al>\d+)\.h(?P<ah>\d+)\.(?P<aport>out|q_input|k_input|v_input)"
    r"|m(?P<ml>\d+)\.(?P<mport>in|out)"
    r"|final\.in"
    r"|logits)$"
)


@dataclass(frozen=True)
class HookName:
    """Structured hook identifier with a canonical, parseable string form.

    ``kind`` is one of ``embed``, ``pos``, ``attn``, ``mlp``, ``final``,
    ``logits``.
    """

    kind: str
    layer: int | None = None
    head: int | None = None
    port: str = "out"

    def __str__(self) -> str:
        if self.kind in ("embed", "pos"):
            return f"{self.kind}.out"
        if self.kind == "attn":
            return f"a{self.layer}.h{self.head}.{self.port}"
        if self.kind == "mlp":
            return f"m{self.layer}.{self.port}"
        if self.kind == "final":
            return "final.in"
        if self.kind == "logits":
            return "logits"
        raise ValueError(f"bad hook kind {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "HookName":
        m = _HOOK_RE.match(text)
        if m is None:
            raise UnknownHookError(f"unparseable hook name {text!r}")
        if m["embed"]:
            return cls(m["embed"])
        if m["al"] is not None:
            return cls("attn", int(m["al"]), int(m["ah"]), m["aport"])
        if m["ml"] is not None:
            return cls("mlp", int(m["ml"]), None, m["mport"])
        if text == "final.in":
            return cls("final", None, None, "in")
        return cls("logits", None, None, "out")


# ---------------------------------------------------------------------------
# Tensors and the tape


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite value produced by {what}")


class Tensor:
    """A value on a tape.

    Leaves created with ``requires_grad=False`` (weights, constants) never
    receive gradients.
    """

    __slots__ = ("data", "tape", "requires_grad", "index", "name")

    def __init__(self, data, tape: "Tape | None" = None, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.requires_grad = requires_grad
        self.index = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, name={self.name!r})"


@dataclass
class _Op:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


class Tape:
    """Ordered record of primitive operations plus a hook registry."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.ops: list[_Op] = []
        self.hooks: dict[str, Tensor] = {}
        self.traversals = 0

    # -- construction -----------------------------------------------------
    def constant(self, data, name: str | None = None) -> Tensor:
        return Tensor(np.asarray(data, dtype=self.dtype), self, requires_grad=False, name=name)

    def variable(self, data, name: str | None = None) -> Tensor:
        """A leaf that receives a gradient."""
        t = Tensor(np.asarray(data, dtype=self.dtype), self, requires_grad=True, name=name)
        self._record(t, (), lambda g: (), "leaf")
        return t

    def hook(self, name: str, t: Tensor) -> Tensor:
        if name in self.hooks:
            raise TapeError(f"hook {name!r} bound twice in one forward pass")
        self.hooks[name] = t
        t.name = name
        return t

    def _record(self, out: Tensor, inputs, vjp, kind: str) -> Tensor:
        out.tape = self
        out.requires_grad = True
        out.index = len(self.ops)
        self.ops.append(_Op(out, tuple(inputs), vjp, kind))
        return out

    def emit(self, value: np.ndarray, inputs: Iterable[Tensor], vjp, kind: str) -> Tensor:
        value = np.asarray(value)
        if value.dtype != self.dtype:
            value = value.astype(self.dtype)
        _check_finite(value, kind)
        return self._record(Tensor(value), inputs, vjp, kind)

    # -- reverse sweep ----------------------------------------------------
    def backward(self, output: Tensor, seed: float | np.ndarray = 1.0) -> dict[int, np.ndarray]:
        """One reverse traversal; returns float64 gradients keyed by op index."""
        if not self.ops:
            raise TapeError("backward requested before any forward operation was recorded")
        if output.tape is not self or output.index < 0 or self.ops[output.index].out is not output:
            raise TapeError("output tensor is detached from this tape")
        seed_arr = np.broadcast_to(np.asarray(seed, dtype=np.float64), output.shape).copy()
        grads: dict[int, np.ndarray] = {output.index: seed_arr}
        self.traversals += 1
        for i in range(output.index, -1, -1):
            g = grads.get(i)
            if g is None:
                continue
            op = self.ops[i]
            if not op.inputs:
                continue
            in_grads = op.vjp(g)
            for t, gi in zip(op.inputs, in_grads):
                if gi is None or not t.requires_grad or t.index < 0:
                    continue
                prev = grads.get(t.index)
                grads[t.index] = gi if prev is None else prev + gi
        return grads


# ---------------------------------------------------------------------------
# Primitive operations.  Shapes must agree exactly except where noted; the
# only implicit broadcast is weights/biases over leading dimensions.


def _tape_of(*ts: Tensor) -> Tape:
    for t in ts:
        if t.tape is not None:
            return t.tape
    raise TapeError("operation on tensors that belong to no tape")


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to_last(g: np.ndarray, ndim: int) -> np.ndarray:
    return g.reshape(-1, *g.shape[g.ndim - ndim:]).sum(axis=0)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _tape_of(a, b).emit(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _tape_of(a, b).emit(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors, accumulated in float64 in list order.

    The incoming gradient is handed unchanged to every addend.
    """
    if not terms:
        raise ValueError("add_n needs at least one term")
    for t in terms[1:]:
        _same_shape(terms[0], t, "add_n")
    acc = np.array(terms[0].data, dtype=np.float64)
    for t in terms[1:]:
        acc += t.data
    n = len(terms)
    return _tape_of(*terms).emit(acc, tuple(terms), lambda g: (g,) * n, "add_n")


def identity(a: Tensor) -> Tensor:
    return _tape_of(a).emit(a.data.copy(), (a,), lambda g: (g,), "identity")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _tape_of(a, b).emit(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _tape_of(a).emit(a.data * c, (a,), lambda g: (g * c,), "scale")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` with ``b`` matching the trailing dimensions of ``x``."""
    if x.shape[len(x.shape) - b.data.ndim:] != b.shape:
        raise ValueError(f"add_bias: bias {b.shape} does not match trailing dims of {x.shape}")
    nd = b.data.ndim
    return _tape_of(x, b).emit(x.data + b.data, (x, b), lambda g: (g, _sum_to_last(g, nd)), "add_bias")


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` for ``x`` of shape (..., k) and a 2-D ``w`` of shape (k, m)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def vjp(g):
        gx = g @ wd.T
        gw = None
        if w.requires_grad:
            gw = xd.reshape(-1, xd.shape[-1]).T.astype(np.float64) @ g.reshape(-1, g.shape[-1])
        return gx, gw

    return _tape_of(x, w).emit(xd.astype(np.float64) @ wd, (x, w), vjp, "matmul")


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul with identical leading dimensions."""
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"bmm: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _tape_of(a, b).emit(
        ad.astype(np.float64) @ bd,
        (a, b),
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
        "bmm",
    )


def transpose_last(a: Tensor) -> Tensor:
    return _tape_of(a).emit(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return _tape_of(a).emit(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def _softmax64(x: np.ndarray) -> np.ndarray:
    z = x.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor) -> Tensor:
    p = _softmax64(x.data)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _tape_of(x).emit(p, (x,), vjp, "softmax")


def log_softmax(x: Tensor) -> Tensor:
    z = x.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def vjp(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _tape_of(x).emit(out, (x,), vjp, "log_softmax")


def causal_softmax(scores: Tensor) -> Tensor:
    """Row softmax over (..., query, key) with keys after the query masked out."""
    s = scores.shape[-1]
    if scores.shape[-2] != s:
        raise ValueError("causal_softmax expects square score matrices")
    mask = np.tril(np.ones((s, s), dtype=bool))
    z = np.where(mask, scores.data.astype(np.float64), -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _tape_of(scores).emit(p, (scores,), vjp, "causal_softmax")


def layernorm(x: Tensor, w: Tensor | None = None, b: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis, then apply optional scale and shift."""
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    wd = None if w is None else w.data.astype(np.float64)
    out = xhat if wd is None else xhat * wd
    if b is not None:
        out = out + b.data
    inputs = tuple(t for t in (x, w, b) if t is not None)

    def vjp(g):
        gh = g if wd is None else g * wd
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if w is not None:
            res.append(_sum_to_last(g * xhat, 1) if w.requires_grad else None)
        if b is not None:
            res.append(_sum_to_last(g, 1) if b.requires_grad else None)
        return res

    return _tape_of(x).emit(out, inputs, vjp, "layernorm")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    xd = x.data.astype(np.float64)
    inner = GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g):
        dinner = GELU_C * (1.0 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _tape_of(x).emit(out, (x,), vjp, "gelu")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    rows = table.shape[0]

    def vjp(g):
        if not table.requires_grad:
            return (None,)
        gt = np.zeros((rows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _tape_of(table).emit(table.data[ids], (table,), vjp, "embedding")


def take_positions(x: Tensor, positions: np.ndarray) -> Tensor:
    """Select ``x[b, positions[b], :]`` for each batch row of a (B, S, V) tensor."""
    positions = np.asarray(positions, dtype=np.int64)
    bsz, seq = x.shape[0], x.shape[1]
    if positions.shape != (bsz,):
        raise ValueError("take_positions expects one position per batch row")
    if np.any(positions < 0) or np.any(positions >= seq):
        raise IndexError(f"answer position out of range [0, {seq})")
    rows = np.arange(bsz)

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[rows, positions] = g
        return (gx,)

    return _tape_of(x).emit(x.data[rows, positions], (x,), vjp, "take_positions")


def sum_last(x: Tensor) -> Tensor:
    shape = x.shape
    return _tape_of(x).emit(
        x.data.astype(np.float64).sum(axis=-1),
        (x,),
        lambda g: (np.broadcast_to(g[..., None], shape),),
        "sum_last",
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.size
    shape = x.shape
    return _tape_of(x).emit(
        np.asarray(x.data.astype(np.float64).mean()),
        (x,),
        lambda g: (np.full(shape, float(g) / n),),
        "mean_all",
    )


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _tape_of(x).emit(
        np.asarray(x.data.astype(np.float64).sum()),
        (x,),
        lambda g: (np.full(shape, float(g)),),
        "sum_all",
    )


# ---------------------------------------------------------------------------
# Forward / backward drivers


@dataclass
class ActivationCache:
    """Hooked tensors from one forward pass, plus the final logits."""

    tape: Tape
    tensors: dict[str, Tensor]
    logits: Tensor
    backward_done: bool = False

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name].data

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def values(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


@dataclass
class GradientCache:
    """float64 gradients of a scalar with respect to hooked tensors."""

    grads: dict[str, np.ndarray] = field(default_factory=dict)
    seed_grad_norm: float = 0.0

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads


def run_forward(
    builder: Callable[[Tape, np.ndarray], Tensor],
    inputs: np.ndarray,
    hooks: Iterable[str] | None = None,
    dtype=np.float32,
    available: Iterable[str] | None = None,
) -> ActivationCache:
    """Record ``builder(tape, inputs)`` on a fresh tape and collect hooks.

    ``builder`` returns the logits tensor and binds hook names via
    ``tape.hook``.  With ``hooks=None`` every bound hook is returned.
    """
    inputs = np.asarray(inputs)
    if inputs.ndim != 2:
        raise ValueError(f"inputs must be a (batch, seq) token matrix, got shape {inputs.shape}")
    wanted = None if hooks is None else list(hooks)
    if wanted is not None and available is not None:
        known = set(available)
        for h in wanted:
            if h not in known:
                raise UnknownHookError(f"unknown hook {h!r}")
    tape = Tape(dtype)
    logits = builder(tape, inputs)
    if "logits" not in tape.hooks:
        tape.hook("logits", logits)
    if wanted is None:
        tensors = dict(tape.hooks)
    else:
        missing = [h for h in wanted if h not in tape.hooks]
        if missing:
            raise UnknownHookError(f"unknown hook {missing[0]!r}")
        tensors = {h: tape.hooks[h] for h in wanted}
        tensors.setdefault("logits", tape.hooks["logits"])
    return ActivationCache(tape, tensors, logits)


def run_backward(cache: ActivationCache, output: Tensor, seed: float = 1.0) -> GradientCache:
    """Single reverse sweep from the scalar ``output``.

    Every tensor in ``cache`` gets a gradient (zeros when the output does
    not depend on it).
    """
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if output.tape is not cache.tape:
        raise TapeError("metric tensor is detached from the cached forward pass")
    raw = cache.tape.backward(output, seed)
    cache.backward_done = True
    out = GradientCache()
    for name, t in cache.tensors.items():
        g = raw.get(t.index)
        out.grads[name] = np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64)
    lt = cache.tape.hooks.get("logits")
    if lt is not None and lt.index in raw:
        out.seed_grad_norm = float(np.linalg.norm(raw[lt.index]))
    return out


def finite_difference(
    metric_fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    direction: np.ndarray,
    step: float,
) -> float:
    """Central difference ``(L(x + h d) - L(x - h d)) / 2h``."""
    if not step > 0:
        raise ValueError("step must be positive")
    point = np.asarray(point, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    hi = float(metric_fn(point + step * direction))
    lo = float(metric_fn(point - step * direction))
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise NonFiniteError("metric returned a non-finite value")
    return (hi - lo) / (2.0 * step)
