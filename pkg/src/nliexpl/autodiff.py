"""Minimal reverse-mode autodiff engine on a numpy backend.

Implements exactly the operations the model zoo needs: affine maps,
elementwise arithmetic, tanh/sigmoid, masked softmax, max-over-time
pooling, concatenation, sequence stacking/reversal, attention
contractions, embedding lookup with partially trainable rows, dropout,
an LSTM cell, and plain SGD with per-epoch learning-rate decay.

Forward passes record onto an explicit :class:`Tape`; `backward` walks
the tape once in reverse. Production paths run in float32; gradient
checking replays the same graph in float64 (cast parameters first).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-12  # clamp for -log(p) on degenerate distributions

# Fixed LSTM gate ordering along the 4H axis: input, forget,
# cell-candidate, output. The forget slice is rows [H:2H).
GATE_ORDER = ("input", "forget", "cell", "output")


class ShapeError(ValueError):
    """Operand dimensions are inconsistent."""


class EmptySequenceError(ValueError):
    """A time-indexed op received zero timesteps."""


class MaskError(ValueError):
    """A softmax row has no unmasked position."""


class TapeError(RuntimeError):
    """Tape used out of order (backward before forward, or twice)."""


class GradientError(RuntimeError):
    """Non-finite gradients detected; the optimizer step was aborted."""


class NumericsWarning(RuntimeWarning):
    """A probability hit the log floor inside a loss."""


_node_counter = 0


def _next_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


class Tensor:
    """Dense array with an optional gradient slot.

    `data` is row-major; production code keeps it float32, the gradient
    check harness casts parameters to float64 and every op follows the
    dtype of its inputs.
    """

    __slots__ = ("data", "grad", "node_id", "is_param", "name")

    def __init__(self, data, is_param: bool = False, name: str = ""):
        data = np.asarray(data)
        if not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        self.data = data
        self.grad: np.ndarray | None = None
        self.node_id = _next_id()
        self.is_param = is_param
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" param={self.name!r}" if self.is_param else ""
        return f"Tensor(shape={self.shape}{tag})"


def tensor(data, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype))


def param(data, name: str) -> Tensor:
    return Tensor(data, is_param=True, name=name)


def uniform_param(rng: np.random.Generator, shape, fan_in: int, name: str,
                  dtype=np.float32) -> Tensor:
    """Weight init: uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return param(rng.uniform(-bound, bound, size=shape).astype(dtype), name)


# ---------------------------------------------------------------------------
# Tape


class Tape:
    """Ordered record of forward operations.

    Ops are appended in execution order, which is a topological order by
    construction. One backward pass per tape; recording or replaying
    after backward raises :class:`TapeError`.
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self._out_ids: set[int] = set()
        self._done = False

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        if self._done:
            raise TapeError("tape already consumed by backward; use a fresh tape")
        self.records.append((out, inputs, backward_fn))
        self._out_ids.add(out.node_id)

    def reset(self) -> None:
        self.records.clear()
        self._out_ids.clear()
        self._done = False


_tape_stack: list[Tape] = []


def _active_tape() -> Tape | None:
    return _tape_stack[-1] if _tape_stack else None


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
    t = _active_tape()
    if t is not None:
        t.record(out, inputs, backward_fn)


def backward(tape: Tape, loss: Tensor) -> None:
    """Run reverse-mode accumulation from `loss` over `tape`.

    Populates `.grad` on every parameter reachable from `loss` and frees
    the gradient buffers of non-parameter intermediates.
    """
    if tape._done:
        raise TapeError("backward already ran on this tape")
    if loss.node_id not in tape._out_ids:
        raise TapeError("loss was not produced by a forward pass on this tape")
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")

    loss.grad = np.ones_like(loss.data)
    for out, inputs, backward_fn in reversed(tape.records):
        g = out.grad
        if g is None:
            continue
        grads = backward_fn(g)
        for t, gi in zip(inputs, grads):
            if gi is None:
                continue
            t.grad = gi if t.grad is None else t.grad + gi
        if not out.is_param:
            out.grad = None
    for out, inputs, _ in tape.records:
        for t in inputs:
            if not t.is_param:
                t.grad = None
    tape._done = True
    tape.records.clear()  # frees saved activations


# ---------------------------------------------------------------------------
# Elementwise and affine ops


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    _record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    _record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g * bd, g * ad))
    return out


def scale(a: Tensor, k: float) -> Tensor:
    out = Tensor(a.data * k)
    _record(out, (a,), lambda g: (g * k,))
    return out


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array (dropout / pad masks); no grad to `c`."""
    out = Tensor(a.data * c)
    _record(out, (a,), lambda g: (g * c,))
    return out


def abs_(a: Tensor) -> Tensor:
    """Elementwise |a| with sign subgradient (0 at 0)."""
    out = Tensor(np.abs(a.data))
    s = np.sign(a.data)
    _record(out, (a,), lambda g: (g * s,))
    return out


def tanh_(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    od = out.data
    _record(out, (a,), lambda g: (g * (1.0 - od * od),))
    return out


def sigmoid_(a: Tensor) -> Tensor:
    ad = a.data
    # stable two-branch form
    out_data = np.where(ad >= 0, 1.0 / (1.0 + np.exp(-np.abs(ad))),
                        np.exp(-np.abs(ad)) / (1.0 + np.exp(-np.abs(ad))))
    out = Tensor(out_data.astype(ad.dtype, copy=False))
    od = out.data
    _record(out, (a,), lambda g: (g * od * (1.0 - od),))
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    ad, bd = a.data, b.data
    _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w.T + b with w of shape (out, in); x may be (..., in)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: x {x.shape} incompatible with w {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"linear: bias {b.shape} incompatible with w {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    out = Tensor(y)
    xd, wd = x.data, w.data

    def _bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        x2 = xd.reshape(-1, wd.shape[1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        if b is None:
            return (gx, gw)
        return (gx, gw, g2.sum(axis=0))

    inputs = (x, w) if b is None else (x, w, b)
    _record(out, inputs, _bw)
    return out


def concat(parts: list[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    _record(out, tuple(parts), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def slice_last(a: Tensor, start: int, stop: int) -> Tensor:
    """Slice along the last axis (used for gate splitting)."""
    out = Tensor(a.data[..., start:stop].copy())
    shape = a.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    _record(out, (a,), _bw)
    return out


def sum_(a: Tensor) -> Tensor:
    out = Tensor(np.asarray(a.data.sum(), dtype=a.dtype))
    shape = a.shape
    _record(out, (a,), lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))
    return out


# ---------------------------------------------------------------------------
# Softmax and losses


def softmax(logits: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise stable softmax; masked positions get exactly 0.

    `logits` is 1-D (n,) or 2-D (rows, n); `mask` is a boolean array of
    the same shape, True on positions allowed to receive mass. Every row
    must keep at least one unmasked position.
    """
    x = logits.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"softmax: mask {mask.shape} vs logits {x.shape}")
        if not mask.any(axis=-1).all():
            raise MaskError("softmax: a row has all positions masked")
        neg = np.finfo(x.dtype).min
        x = np.where(mask, x, neg)
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    if mask is not None:
        e = np.where(mask, e, 0.0)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s.astype(logits.dtype, copy=False))
    sd = out.data

    def _bw(g):
        inner = (g * sd).sum(axis=-1, keepdims=True)
        return (sd * (g - inner),)

    _record(out, (logits,), _bw)
    return out


def nll_rows(probs: Tensor, targets: np.ndarray,
             mask: np.ndarray | None = None) -> Tensor:
    """-log probs[i, targets[i]] per row, clamped at the log floor.

    Probabilities below the floor are flagged with a NumericsWarning and
    contribute zero gradient (the clamp is flat there). Rows where
    `mask` is falsy produce exactly 0 loss and no gradient (used for
    padded targets).
    """
    p = probs.data
    if p.ndim != 2:
        raise ShapeError(f"nll_rows: probs must be 2-D, got {p.shape}")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (p.shape[0],):
        raise ShapeError(f"nll_rows: targets {targets.shape} vs probs {p.shape}")
    rows = np.arange(p.shape[0])
    picked = p[rows, targets]
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        picked = np.where(mask, picked, 1.0)
    clamped = np.maximum(picked, LOG_FLOOR)
    if (picked < LOG_FLOOR).any():
        warnings.warn("probability clamped at log floor", NumericsWarning,
                      stacklevel=2)
    out = Tensor((-np.log(clamped)).astype(p.dtype, copy=False))
    shape = p.shape
    live = picked >= LOG_FLOOR
    if mask is not None:
        live = live & mask

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[rows, targets] = np.where(live, -g / clamped, 0.0)
        return (full,)

    _record(out, (probs,), _bw)
    return out


def cross_entropy(probs: Tensor, target: int) -> Tensor:
    """-log probs[target] for a single distribution; scalar output."""
    if probs.data.ndim != 1:
        raise ShapeError(f"cross_entropy: expected 1-D probs, got {probs.shape}")
    row = reshape(probs, (1, probs.shape[0]))
    losses = nll_rows(row, np.array([target]))
    return reshape(losses, ())


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    old = a.shape
    _record(out, (a,), lambda g: (g.reshape(old),))
    return out


# ---------------------------------------------------------------------------
# Sequence ops


def stack_steps(steps: list[Tensor]) -> Tensor:
    """Stack T same-shape tensors along a new leading time axis."""
    if not steps:
        raise EmptySequenceError("stack_steps: no timesteps")
    out = Tensor(np.stack([s.data for s in steps], axis=0))
    _record(out, tuple(steps), lambda g: tuple(g[t] for t in range(len(steps))))
    return out


def max_over_time(seq: Tensor, lengths: np.ndarray | None = None) -> Tensor:
    """Per-dimension max over the leading time axis.

    `seq` is (T, d) or (T, B, d). With `lengths` (B,), only timesteps
    t < lengths[b] participate for row b. Backward routes the gradient
    to the first maximal timestep per dimension.
    """
    x = seq.data
    if x.ndim not in (2, 3):
        raise ShapeError(f"max_over_time: expected (T,d) or (T,B,d), got {x.shape}")
    T = x.shape[0]
    if T == 0:
        raise EmptySequenceError("max_over_time: empty sequence")
    if lengths is None:
        masked = x
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if x.ndim != 3 or lengths.shape != (x.shape[1],):
            raise ShapeError("max_over_time: lengths must be (B,) with (T,B,d) input")
        if (lengths < 1).any():
            raise EmptySequenceError("max_over_time: a row has zero real timesteps")
        valid = (np.arange(T)[:, None] < lengths[None, :])  # (T,B)
        masked = np.where(valid[..., None], x, -np.inf)
    idx = masked.argmax(axis=0)  # first occurrence on ties
    out = Tensor(np.take_along_axis(x, idx[None], axis=0)[0])
    shape = x.shape

    def _bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, idx[None], g[None], axis=0)
        return (full,)

    _record(out, (seq,), _bw)
    return out


def reverse_steps(seq: Tensor, lengths: np.ndarray) -> Tensor:
    """Reverse each row's real prefix along time; pad tail stays put.

    out[t, b] = seq[lengths[b]-1-t, b] for t < lengths[b]. The index map
    is an involution per row, so backward applies the same permutation.
    """
    x = seq.data
    if x.ndim != 3:
        raise ShapeError(f"reverse_steps: expected (T,B,d), got {x.shape}")
    T, B = x.shape[0], x.shape[1]
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (B,):
        raise ShapeError("reverse_steps: lengths must be (B,)")
    t_idx = np.arange(T)[:, None]
    idx = np.where(t_idx < lengths[None, :], lengths[None, :] - 1 - t_idx, t_idx)
    b_idx = np.broadcast_to(np.arange(B)[None, :], (T, B))
    out = Tensor(x[idx, b_idx])

    def _bw(g):
        full = np.zeros_like(g)
        np.add.at(full, (idx, b_idx), g)
        return (full,)

    _record(out, (seq,), _bw)
    return out


def attn_scores(query: Tensor, keys: Tensor) -> Tensor:
    """Dot products of one query per batch row with all timestep keys.

    query (B, A), keys (T, B, A) -> scores (B, T).
    """
    q, k = query.data, keys.data
    if q.ndim != 2 or k.ndim != 3 or k.shape[1:] != q.shape:
        raise ShapeError(f"attn_scores: query {q.shape} vs keys {k.shape}")
    out = Tensor(np.einsum("ba,tba->bt", q, k, optimize=True))

    def _bw(g):
        gq = np.einsum("bt,tba->ba", g, k, optimize=True)
        gk = np.einsum("bt,ba->tba", g, q, optimize=True)
        return (gq, gk)

    _record(out, (query, keys), _bw)
    return out


def attn_combine(weights: Tensor, values: Tensor) -> Tensor:
    """Weighted sum of timestep values: (B,T) x (T,B,A) -> (B,A)."""
    w, v = weights.data, values.data
    if w.ndim != 2 or v.ndim != 3 or (v.shape[0], v.shape[1]) != (w.shape[1], w.shape[0]):
        raise ShapeError(f"attn_combine: weights {w.shape} vs values {v.shape}")
    out = Tensor(np.einsum("bt,tba->ba", w, v, optimize=True))

    def _bw(g):
        gw = np.einsum("ba,tba->bt", g, v, optimize=True)
        gv = np.einsum("bt,ba->tba", w, g, optimize=True)
        return (gw, gv)

    _record(out, (weights, values), _bw)
    return out


# ---------------------------------------------------------------------------
# Embedding lookup


def embedding_lookup(frozen: np.ndarray, ids: np.ndarray,
                     trainable: Tensor | None = None,
                     slots: np.ndarray | None = None) -> Tensor:
    """Row lookup into a frozen table with optionally trainable rows.

    `slots` maps vocabulary id -> row of `trainable` (-1 = frozen). Only
    trainable rows receive gradient; the frozen table never does.
    """
    ids = np.asarray(ids, dtype=np.int64)
    rows = frozen[ids]
    if trainable is not None:
        sl = slots[ids]
        hit = sl >= 0
        if hit.any():
            rows = rows.copy()
            rows[hit] = trainable.data[sl[hit]]
        out = Tensor(rows)
        k = trainable.shape[0]

        def _bw(g):
            gt = np.zeros((k, g.shape[-1]), dtype=g.dtype)
            if hit.any():
                np.add.at(gt, sl[hit], g[hit])
            return (gt,)

        _record(out, (trainable,), _bw)
        return out
    return Tensor(rows)


# ---------------------------------------------------------------------------
# Dropout


def dropout_mask(rng: np.random.Generator, shape, rate: float,
                 dtype=np.float32) -> np.ndarray:
    """Inverted-dropout mask: Bernoulli(1-rate) scaled by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0,1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    keep = (rng.random(shape) >= rate).astype(dtype)
    return keep / np.dtype(dtype).type(1.0 - rate)


def dropout(x: Tensor, rate: float, train: bool,
            rng: np.random.Generator | None = None) -> Tensor:
    """Single-use dropout. Eval mode is the identity.

    Recurrent use samples one mask per sequence via `dropout_mask` and
    applies it with `mul_const` at every timestep.
    """
    if not train or rate == 0.0:
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0,1), got {rate}")
        return x
    return mul_const(x, dropout_mask(rng, x.shape, rate, x.dtype))


# ---------------------------------------------------------------------------
# LSTM cell


@dataclass
class LstmParams:
    """One LSTM cell's weights.

    wi: input-to-gates (4H, D); wh: hidden-to-gates (4H, H); b: (4H,).
    Gate order along the 4H axis is input, forget, cell-candidate,
    output; the forget bias slice starts at 1.0.
    """

    wi: Tensor
    wh: Tensor
    b: Tensor

    @property
    def hidden(self) -> int:
        return self.wh.shape[1]

    @property
    def input_dim(self) -> int:
        return self.wi.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.wi": self.wi, f"{prefix}.wh": self.wh, f"{prefix}.b": self.b}


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int,
              prefix: str, dtype=np.float32) -> LstmParams:
    wi = uniform_param(rng, (4 * hidden, input_dim), input_dim, f"{prefix}.wi", dtype)
    wh = uniform_param(rng, (4 * hidden, hidden), hidden, f"{prefix}.wh", dtype)
    bias = np.zeros(4 * hidden, dtype=dtype)
    bias[hidden:2 * hidden] = 1.0  # forget gate
    b = param(bias, f"{prefix}.b")
    return LstmParams(wi=wi, wh=wh, b=b)


def lstm_cell(x: Tensor, h: Tensor, c: Tensor,
              params: LstmParams) -> tuple[Tensor, Tensor]:
    """One step of canonical LSTM gating.

    c' = sigmoid(f) * c + sigmoid(i) * tanh(g); h' = sigmoid(o) * tanh(c').
    Inputs are (B, D) / (B, H); returns (h', c').
    """
    H = params.hidden
    if x.shape[-1] != params.input_dim or h.shape[-1] != H or c.shape[-1] != H:
        raise ShapeError(
            f"lstm_cell: x {x.shape}, h {h.shape}, c {c.shape} vs params "
            f"D={params.input_dim} H={H}")
    gates = add(linear(x, params.wi, params.b), linear(h, params.wh))
    i = sigmoid_(slice_last(gates, 0, H))
    f = sigmoid_(slice_last(gates, H, 2 * H))
    g = tanh_(slice_last(gates, 2 * H, 3 * H))
    o = sigmoid_(slice_last(gates, 3 * H, 4 * H))
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh_(c_new))
    return h_new, c_new


# ---------------------------------------------------------------------------
# SGD


@dataclass
class SgdState:
    """Learning-rate schedule state: lr(epoch) = base * decay**epoch."""

    base_lr: float = 0.1
    decay: float = 0.99
    epoch: int = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.decay ** self.epoch

    def advance_epoch(self) -> None:
        self.epoch += 1


def sgd_step(params: dict[str, Tensor], state: SgdState,
             clip_norm: float | None = None, weight_decay: float = 0.0) -> None:
    """In-place p <- p - lr * g on every parameter with a gradient.

    Aborts without touching any parameter if a gradient is non-finite.
    Gradients are cleared afterwards.
    """
    live = [(name, p) for name, p in params.items() if p.grad is not None]
    bad = [name for name, p in live if not np.isfinite(p.grad).all()]
    if bad:
        raise GradientError(f"non-finite gradient in {bad}; step aborted")
    if clip_norm is not None:
        total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for _, p in live)))
        if total > clip_norm:
            factor = clip_norm / total
            for _, p in live:
                p.grad = p.grad * factor
    lr = state.lr
    for _, p in live:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        p.data -= (lr * g).astype(p.data.dtype, copy=False)
        p.grad = None
