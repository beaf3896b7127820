"""Dense tensors with a reverse-mode differentiation tape.

Values live in 32-bit numpy buffers (reductions accumulate in 64-bit);
every differentiable operation records an entry on the active
:class:`Tape` holding its inputs, its output, and an exact backward
rule. Calling :func:`backward` on a scalar loss walks the tape once in
reverse and accumulates gradients additively into ``grad`` buffers, so
callers must zero gradients between optimizer steps.

A tape and the tensors it records are confined to one thread; the
active tape is tracked thread-locally and independent tapes may run in
parallel workers.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, NumericsError, ShapeError

_ids = itertools.count()
_state = threading.local()


def _tape_stack() -> list:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


class Tensor:
    """A dense array plus gradient metadata.

    ``data`` is always a contiguous float32 (or, for the gradient-check
    harness, float64) numpy array. ``grad`` is lazily allocated with the
    same shape and dtype and accumulates additively.
    """

    __slots__ = ("data", "requires_grad", "grad", "tid")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
        self.data = np.ascontiguousarray(arr, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tid = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def __repr__(self) -> str:  # pragma: no cover
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.data.dtype}{flag})"


def as_tensor(x, dtype=None) -> Tensor:
    """Wrap plain data as a constant (non-differentiable) tensor."""
    if isinstance(x, Tensor):
        return x
    return Tensor(x, requires_grad=False, dtype=dtype)


def parameter(data, dtype=np.float32) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_rule: Callable[[np.ndarray], Sequence[np.ndarray | None]]

    @property
    def input_ids(self) -> tuple[int, ...]:
        return tuple(t.tid for t in self.inputs)

    @property
    def output_id(self) -> int:
        return self.output.tid


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()

    def zero_grads(self) -> None:
        """Clear gradient buffers of every tensor touched by this tape."""
        for entry in self.entries:
            for t in entry.inputs:
                t.grad = None
            entry.output.grad = None


def _active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericsError(f"{op} produced a non-finite value")


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], backward_rule) -> Tensor:
    _check_finite(op, data)
    out = Tensor(data, requires_grad=any(t.requires_grad for t in inputs), dtype=data.dtype)
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape.entries.append(TapeEntry(op, inputs, out, backward_rule))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate gradients of a scalar loss into all upstream tensors.

    The seed gradient is 1; each tape entry is visited exactly once, in
    reverse recording order.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if tape.entries and loss.tid not in {e.output_id for e in tape.entries}:
        raise ContractError("loss tensor is not on the tape")
    loss.accumulate_grad(np.ones_like(loss.data))
    for entry in reversed(tape.entries):
        g = entry.output.grad
        if g is None:
            continue
        grads = entry.backward_rule(g)
        for t, gi in zip(entry.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            _check_finite(f"{entry.op}.backward", gi)
            t.accumulate_grad(gi)


# ---------------------------------------------------------------------------
# kernels


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    data = a.data @ b.data

    def rule(g):
        return g @ b.data.T, a.data.T @ g

    return _emit("matmul", data, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")
    data = np.ascontiguousarray(a.data.T)

    def rule(g):
        return (np.ascontiguousarray(g.T),)

    return _emit("transpose", data, (a,), rule)


def _binary_mode(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if b.data.size == 1:
        return "b_scalar"
    if a.data.size == 1:
        return "a_scalar"
    if a.data.ndim == 2 and b.data.ndim == 2 and b.shape == (1, a.shape[1]):
        return "b_row"
    raise ShapeError(f"{op} shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum(dtype=np.float64)).reshape(shape)
    # row-vector operand of a matrix op
    return g.sum(axis=0, keepdims=True, dtype=np.float64)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b, "add")
    data = a.data + b.data

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit("add", data, (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b, "sub")
    data = a.data - b.data

    def rule(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit("sub", data, (a, b), rule)


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product; one operand may be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    _binary_mode(a, b, "mul")
    data = a.data * b.data

    def rule(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _emit("mul", data, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    data = a.data * a.data.dtype.type(c)

    def rule(g):
        return (g * c,)

    return _emit("scale", data, (a,), rule)


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0)
    mask = a.data > 0

    def rule(g):
        return (g * mask,)

    return _emit("relu", data, (a,), rule)


def row_sum(a: Tensor) -> Tensor:
    """Sum within each row: (m, n) -> (m, 1)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"row_sum expects a matrix, got shape {a.shape}")
    data = a.data.sum(axis=1, keepdims=True, dtype=np.float64).astype(a.dtype)

    def rule(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _emit("row_sum", data, (a,), rule)


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    data = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)

    def rule(g):
        return (np.full(a.shape, float(g), dtype=a.dtype),)

    return _emit("sum_all", data, (a,), rule)


def mean_pool_rows(a: Tensor) -> Tensor:
    """Mean across rows: (m, n) -> (1, n)."""
    a = as_tensor(a)
    if a.data.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"mean_pool_rows expects a non-empty matrix, got {a.shape}")
    m = a.shape[0]
    data = (a.data.sum(axis=0, keepdims=True, dtype=np.float64) / m).astype(a.dtype)

    def rule(g):
        return (np.broadcast_to(g / m, a.shape).astype(a.dtype, copy=True),)

    return _emit("mean_pool_rows", data, (a,), rule)


def sqnorm_rows(a: Tensor) -> Tensor:
    """Squared L2 norm of each row: (m, n) -> (m, 1)."""
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"sqnorm_rows expects a matrix, got shape {a.shape}")
    data = (a.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True).astype(a.dtype)

    def rule(g):
        return (2.0 * a.data * g,)

    return _emit("sqnorm_rows", data, (a,), rule)


def l2_normalize_rows(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a matrix, got shape {a.shape}")
    norms = np.sqrt((a.data.astype(np.float64) ** 2).sum(axis=1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateInputError("l2_normalize_rows: zero-norm row")
    data = (a.data / norms).astype(a.dtype)

    def rule(g):
        dot = (g.astype(np.float64) * a.data).sum(axis=1, keepdims=True)
        ga = g / norms - a.data * (dot / norms**3)
        return (ga.astype(a.dtype),)

    return _emit("l2_normalize_rows", data, (a,), rule)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    x = as_tensor(x)
    if x.data.ndim != 2 or x.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects a non-empty matrix, got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = (e / e.sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)

    def rule(g):
        inner = (g.astype(np.float64) * s).sum(axis=1, keepdims=True)
        return ((s * (g - inner)).astype(x.dtype),)

    return _emit("softmax_rows", s, (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    pos = x.data >= 0
    z = np.exp(np.where(pos, -x.data, x.data))
    s = np.where(pos, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def rule(g):
        return ((g * s * (1.0 - s)).astype(x.dtype),)

    return _emit("sigmoid", s, (x,), rule)


def pairwise_sqdist(a: Tensor, b: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances: (n, d), (m, d) -> (n, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(
            f"pairwise_sqdist shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}"
        )
    a64 = a.data.astype(np.float64)
    b64 = b.data.astype(np.float64)
    d2 = (
        (a64**2).sum(axis=1, keepdims=True)
        + (b64**2).sum(axis=1, keepdims=True).T
        - 2.0 * (a64 @ b64.T)
    )
    data = np.maximum(d2, 0.0).astype(np.result_type(a.dtype, b.dtype))

    def rule(g):
        rs = g.sum(axis=1, keepdims=True, dtype=np.float64)
        cs = g.sum(axis=0, keepdims=True, dtype=np.float64)
        ga = 2.0 * (rs * a64 - g.astype(np.float64) @ b64)
        gb = 2.0 * (cs.T * b64 - g.astype(np.float64).T @ a64)
        return ga.astype(a.dtype), gb.astype(b.dtype)

    return _emit("pairwise_sqdist", data, (a, b), rule)


def concat_rows(tensors: Sequence[Tensor]) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeError("concat_rows of zero tensors")
    ncols = tensors[0].shape[1] if tensors[0].data.ndim == 2 else None
    for t in tensors:
        if t.data.ndim != 2 or t.shape[1] != ncols:
            raise ShapeError("concat_rows requires matrices with equal column counts")
    data = np.concatenate([t.data for t in tensors], axis=0)
    offsets = np.cumsum([0] + [t.shape[0] for t in tensors])

    def rule(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(tensors)))

    return _emit("concat_rows", data, tensors, rule)


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by index; backward scatter-adds (duplicates accumulate)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    if a.data.ndim != 2 or idx.ndim != 1:
        raise ShapeError("gather_rows expects a matrix and a 1-D index array")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    data = a.data[idx]

    def rule(g):
        buf = np.zeros(a.shape, dtype=np.float64)
        np.add.at(buf, idx, g.astype(np.float64))
        return (buf.astype(a.dtype),)

    return _emit("gather_rows", data, (a,), rule)


def cross_entropy_mean(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over rows, fused for stability."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy_mean expects (n, C) logits and n labels")
    if labels.size == 0:
        raise ContractError("cross_entropy_mean on an empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeError("cross_entropy_mean label out of range")
    n = logits.shape[0]
    x = logits.data.astype(np.float64)
    mx = x.max(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(np.exp(x - mx).sum(axis=1))
    data = np.asarray((lse - x[np.arange(n), labels]).mean(), dtype=logits.dtype)

    def rule(g):
        p = np.exp(x - mx)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return ((p * (float(g) / n)).astype(logits.dtype),)

    return _emit("cross_entropy_mean", data, (logits,), rule)


def bce_with_logits_mean(scores: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw scores, fused for stability."""
    scores = as_tensor(scores)
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != scores.shape:
        raise ShapeError("bce_with_logits_mean target shape mismatch")
    if scores.data.size == 0:
        raise ContractError("bce_with_logits_mean on an empty batch")
    s = scores.data.astype(np.float64)
    per = np.maximum(s, 0.0) - s * t + np.log1p(np.exp(-np.abs(s)))
    data = np.asarray(per.mean(), dtype=scores.dtype)
    n = scores.data.size

    def rule(g):
        sig = 1.0 / (1.0 + np.exp(-s))
        return (((sig - t) * (float(g) / n)).astype(scores.dtype),)

    return _emit("bce_with_logits_mean", data, (scores,), rule)


# ---------------------------------------------------------------------------
# straight-through quantization

_st = threading.local()


@contextmanager
def st_record():
    """Record quantization snap offsets for later frozen replay."""
    _st.mode = "record"
    _st.slots = []
    try:
        yield _st.slots
    finally:
        _st.mode = None


@contextmanager
def st_replay(slots):
    """Replay quantization as the linearized map input + frozen offset.

    Used by the finite-difference harness so the numeric path sees the
    same pass-through gradient contract as the analytic backward rule.
    """
    _st.mode = "replay"
    _st.slots = list(slots)
    _st.cursor = 0
    try:
        yield
    finally:
        _st.mode = None


def quantize_rows_st(h: Tensor, codebook: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Snap each row to its nearest codebook row (ties to the lowest index).

    Returns the snapped tensor and the chosen indices. The backward rule
    is straight-through: the incoming gradient passes to ``h`` unchanged.
    The codebook is plain data, never differentiated.
    """
    h = as_tensor(h)
    codebook = np.asarray(codebook)
    if codebook.ndim != 2 or codebook.shape[0] < 1:
        raise ContractError("quantize_rows_st: empty codebook")
    if h.data.ndim != 2 or h.shape[1] != codebook.shape[1]:
        raise ShapeError(
            f"quantize_rows_st dim mismatch: {tuple(h.shape)} vs codebook {codebook.shape}"
        )
    mode = getattr(_st, "mode", None)
    if mode == "replay":
        offset = _st.slots[_st.cursor]
        _st.cursor += 1
        data = (h.data.astype(np.float64) + offset).astype(h.dtype)
        idx = None
    else:
        h64 = h.data.astype(np.float64)
        c64 = codebook.astype(np.float64)
        d2 = (
            (h64**2).sum(axis=1, keepdims=True)
            + (c64**2).sum(axis=1, keepdims=True).T
            - 2.0 * (h64 @ c64.T)
        )
        idx = d2.argmin(axis=1)
        data = codebook[idx].astype(h.dtype)
        if mode == "record":
            _st.slots.append(data.astype(np.float64) - h.data.astype(np.float64))

    def rule(g):
        return (g.copy(),)

    out = _emit("quantize_rows_st", data, (h,), rule)
    return out, idx


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    """Adam moments and hyperparameters; moments match parameter shapes."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    The step counter is incremented before the update, so the first call
    uses t = 1. Missing or None gradients are treated as zero.
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        g = np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adam_step: grad shape {g.shape} does not match param '{name}' {p.shape}"
            )
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)


class Adam:
    """Convenience wrapper driving :func:`adam_step` from ``.grad`` buffers."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)

    def step(self) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adam_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference harness

def grad_check(f, x: Tensor, h: float = 1e-4, abs_floor: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a scalar tensor using engine ops only.
    Both paths run in float64; straight-through quantization offsets are
    recorded on the analytic pass and replayed frozen around each
    perturbed evaluation, so the numeric path differentiates the same
    surrogate the pass-through rule claims to. Per component the error is
    |a - n| / max(abs_floor, |a| + |n|).
    """
    x64 = Tensor(x.data.astype(np.float64), requires_grad=True, dtype=np.float64)
    with Tape() as tape, st_record() as slots:
        y = f(x64)
        backward(y, tape)
    if x64.grad is None:
        analytic = np.zeros_like(x64.data)
    else:
        analytic = x64.grad.copy()

    flat = x64.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with st_replay(slots):
            fp = f(Tensor(x64.data, dtype=np.float64)).item()
        flat[i] = orig - h
        with st_replay(slots):
            fm = f(Tensor(x64.data, dtype=np.float64)).item()
        flat[i] = orig
        numeric[i] = (fp - fm) / (2.0 * h)
    numeric = numeric.reshape(x64.data.shape)

    denom = np.maximum(abs_floor, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def grad_check_multi(make_loss, params: dict[str, Tensor], h: float = 1e-4,
                     abs_floor: float = 1e-6) -> float:
    """Run :func:`grad_check` once per parameter, varying one at a time."""
    worst = 0.0
    for name in params:
        def f(x, _name=name):
            saved = params[_name]
            params[_name] = x
            try:
                return make_loss(params)
            finally:
                params[_name] = saved

        worst = max(worst, grad_check(f, params[name], h=h, abs_floor=abs_floor))
    return worst
