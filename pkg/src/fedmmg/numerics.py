"""Dense float64 tensors with tape-based reverse-mode gradients.

The operator set is deliberately small: matrix products, elementwise
arithmetic, the usual activations, masked/temperature softmax, layer
normalization, row gathers, concatenation, and a mean-aggregating graph
convolution. Gradient tapes are confined to the thread that created them;
tensor values are never mutated in place, so published tensors and
parameter snapshots are safe to share across threads.
"""

from __future__ import annotations

import threading
import zlib
from dataclasses import dataclass, field

import numpy as np

# Additive attention-mask sentinel. After row-max subtraction, exp() of the
# sentinel underflows to exactly 0.0, so masked weights are exact zeros.
MASK_NEG = -1e30

_LN_EPS = 1e-8


class EmptyAttentionError(ValueError):
    """Every token of an attention bank is masked out."""


class GradientError(RuntimeError):
    """Non-finite value encountered during differentiation."""


# ---------------------------------------------------------------------------
# Tape machinery
# ---------------------------------------------------------------------------

_TLS = threading.local()


def _tape_stack() -> list:
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records backward closures in execution order (thread-confined)."""

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, out: "Tensor", backward) -> None:
        self._records.append((out, backward))

    def backward(self, loss: "Tensor") -> None:
        """Propagate d(loss)/d(input) into every reachable .grad slot."""
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        if not np.isfinite(loss.data).all():
            raise GradientError("loss is not finite")
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._records):
            g = out.grad
            if g is not None:
                fn(g)

    def __len__(self) -> int:
        return len(self._records)


class Tensor:
    """Row-major float64 array plus an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def const(data) -> Tensor:
    """Wrap an array as a non-differentiable tensor."""
    return Tensor(data, requires_grad=False)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data: np.ndarray, parents: tuple, backward) -> Tensor:
    tape = _active_tape()
    needs = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.record(out, backward)
    return out


# ---------------------------------------------------------------------------
# Elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g, b.data.shape))

    return _result(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g, b.data.shape))

    return _result(data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(-g)

    return _result(-a.data, (a,), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g * bd, ad.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(g * ad, bd.shape))

    return _result(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g / bd, ad.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(-g * ad / (bd * bd), bd.shape))

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * c)

    return _result(a.data * c, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; operands must be >= 2-D (leading axes broadcast)."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    data = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate(_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape))
        if b.requires_grad:
            b.accumulate(_unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _result(data, (a, b), backward)


class KinkWatch:
    """Tracks how close any relu input comes to its kink during a forward.

    Finite-difference gradient checks are only trustworthy when no hidden
    unit sits within the probe step of zero; callers reseed when the
    recorded margin is too small.
    """

    def __init__(self):
        self.margin = np.inf

    def __enter__(self) -> "KinkWatch":
        _TLS.kink_watch = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TLS.kink_watch = None


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    watch = getattr(_TLS, "kink_watch", None)
    if watch is not None and a.data.size:
        watch.margin = min(watch.margin, float(np.abs(a.data).min()))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * mask)

    return _result(a.data * mask, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_np(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * data * (1.0 - data))

    return _result(data, (a,), backward)


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * (1.0 - data * data))

    return _result(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * data)

    return _result(data, (a,), backward)


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * 0.5 / data)

    return _result(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        if a.requires_grad:
            a.accumulate(g * _sigmoid_np(x))

    return _result(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax with row-max subtraction.

    Entries at or below the MASK_NEG sentinel come out as exact zeros
    whenever the row contains at least one unmasked entry.
    """
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    x = a.data / temperature
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a.accumulate(data * (g - dot) / temperature)

    return _result(data, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
    data = x - lse

    def backward(g):
        if a.requires_grad:
            a.accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))

    return _result(data, (a,), backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Normalize the last axis to mean 0 / population variance 1, then affine."""
    x = a.data
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs a last axis of extent >= 2")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    data = gain.data * y + bias.data

    def backward(g):
        dy = g * gain.data
        if a.requires_grad:
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            a.accumulate(inv * (dy - m1 - y * m2))
        if gain.requires_grad:
            gain.accumulate(_unbroadcast(g * y, gain.data.shape))
        if bias.requires_grad:
            bias.accumulate(_unbroadcast(g, bias.data.shape))

    return _result(data, (a, gain, bias), backward)


def total_sum(a: Tensor) -> Tensor:
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate(np.broadcast_to(g, shape).copy())

    return _result(np.asarray(a.data.sum()), (a,), backward)


def mean(a: Tensor) -> Tensor:
    return scale(total_sum(a), 1.0 / a.data.size)


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            gg = g if keepdims else np.expand_dims(g, axis)
            a.accumulate(np.broadcast_to(gg, shape).copy())

    return _result(data, (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                t.accumulate(g[tuple(index)])
            offset += size

    return _result(data, tuple(tensors), backward)


def rows(a: Tensor, index) -> Tensor:
    """Gather rows along axis 0. Backward scatter-adds (deterministic)."""
    idx = np.asarray(index, dtype=np.intp)
    data = a.data[idx]
    shape = a.data.shape

    def backward(g):
        if a.requires_grad:
            full = np.zeros(shape)
            np.add.at(full, idx, g)
            a.accumulate(full)

    return _result(data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape

    def backward(g):
        if a.requires_grad:
            a.accumulate(g.reshape(orig))

    return _result(a.data.reshape(shape), (a,), backward)


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate(np.swapaxes(g, ax1, ax2))

    return _result(np.swapaxes(a.data, ax1, ax2), (a,), backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Detach a value from the tape; gradient does not flow past it."""
    return Tensor(a.data, requires_grad=False)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = matmul(x, w)
    if b is not None:
        out = add(out, b)
    return out


def cosine_rows(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity with an epsilon-guarded denominator.

    Zero-norm rows get similarity 0 rather than a division error.
    """
    dots = sum_axis(mul(a, b), -1, keepdims=True)
    na = sqrt(add(sum_axis(mul(a, a), -1, keepdims=True), const(1e-24)))
    nb = sqrt(add(sum_axis(mul(b, b), -1, keepdims=True), const(1e-24)))
    return div(dots, add(mul(na, nb), const(eps)))


# ---------------------------------------------------------------------------
# Graph convolution and attention
# ---------------------------------------------------------------------------


def neighbor_mean_matrix(n: int, edges) -> np.ndarray:
    """Dense row-normalized adjacency; isolated nodes get an all-zero row."""
    mat = np.zeros((n, n))
    for u, v in edges:
        mat[u, v] = 1.0
        mat[v, u] = 1.0
    deg = mat.sum(axis=1, keepdims=True)
    np.divide(mat, deg, out=mat, where=deg > 0)
    return mat


def sage_conv(x: Tensor, neigh_mat: Tensor, w_self: Tensor, w_neigh: Tensor,
              bias: Tensor | None = None) -> Tensor:
    """Mean-aggregating graph convolution: W_self x_i + W_neigh mean_j x_j."""
    out = add(matmul(x, w_self), matmul(matmul(neigh_mat, x), w_neigh))
    if bias is not None:
        out = add(out, bias)
    return out


@dataclass
class AttentionParams:
    """Projection weights for multi-head attention (no biases)."""
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor


def attention_batched(query: Tensor, keys: Tensor, values: Tensor,
                      add_mask: np.ndarray, heads: int,
                      params: AttentionParams) -> tuple[Tensor, np.ndarray]:
    """Batched masked multi-head attention.

    query [G, dq], keys [G, S, dk], values [G, S, dv], add_mask [G, S]
    holding 0 for usable tokens and MASK_NEG for excluded ones. Returns the
    attended output [G, dout] and detached per-head weights [G, H, S].
    """
    g_count, s_count = add_mask.shape
    d_attn = params.wq.shape[1]
    if d_attn % heads:
        raise ValueError("attention width must be divisible by the head count")
    dh = d_attn // heads

    def split(t: Tensor) -> Tensor:
        # [G, S, d_attn] -> [G, H, S, dh]
        return swapaxes(reshape(t, (g_count, -1, heads, dh)), 1, 2)

    qh = split(reshape(matmul(query, params.wq), (g_count, 1, d_attn)))
    kh = split(matmul(keys, params.wk))
    vh = split(matmul(values, params.wv))

    logits = scale(matmul(qh, swapaxes(kh, 2, 3)), 1.0 / np.sqrt(dh))
    logits = add(logits, const(add_mask.reshape(g_count, 1, 1, s_count)))
    weights = softmax(logits, axis=-1)
    ctx = matmul(weights, vh)                       # [G, H, 1, dh]
    ctx = reshape(swapaxes(ctx, 1, 2), (g_count, d_attn))
    out = matmul(ctx, params.wo)
    return out, weights.data.reshape(g_count, heads, s_count)


def multi_head_attention(query: Tensor, bank: Tensor, values: Tensor,
                         additive_mask: np.ndarray, heads: int,
                         params: AttentionParams) -> tuple[Tensor, np.ndarray]:
    """Single-query masked attention over a token bank.

    query [1, dq], bank [S, dk], values [S, dv], additive_mask [S] with
    entries 0 or MASK_NEG. Raises EmptyAttentionError when every token is
    masked; callers are expected to fall back to a structural branch.
    """
    mask = np.asarray(additive_mask, dtype=np.float64).reshape(-1)
    s_count = bank.shape[0]
    if s_count < 1 or mask.shape[0] != s_count:
        raise ValueError("bank and mask sizes disagree")
    if np.all(mask <= MASK_NEG / 2):
        raise EmptyAttentionError("every attention token is masked out")
    keys3 = reshape(bank, (1,) + tuple(bank.shape))
    vals3 = reshape(values, (1,) + tuple(values.shape))
    out, weights = attention_batched(query, keys3, vals3,
                                     mask.reshape(1, -1), heads, params)
    return out, weights[0]


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors with gradient slots."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        for name in self.names():
            yield name, self._params[name]

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad = None

    def grad_norm(self) -> float:
        total = 0.0
        for p in self._params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            factor = max_norm / norm
            for p in self._params.values():
                if p.grad is not None:
                    p.grad = p.grad * factor
        return norm

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load(self, values: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            v = values[name]
            if v.shape != p.data.shape:
                raise ValueError(f"shape mismatch loading {name}")
            p.data = np.array(v, dtype=np.float64)
        p_extra = set(values) - set(self._params)
        if p_extra:
            raise ValueError(f"unknown parameters: {sorted(p_extra)}")


@dataclass
class AdamState:
    """First/second-moment slots plus a shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, store: ParamStore) -> "AdamState":
        state = cls()
        for name, p in store.items():
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(store: ParamStore, state: AdamState, lr: float,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam update; gradients are cleared afterwards."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.isfinite(g).all():
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name] = b1 * state.m[name] + (1 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grads()


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    per_param: dict[str, float]

    def passed(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(fn, store: ParamStore, h: float = 1e-5,
               max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``fn(store) -> Tensor`` must be a deterministic scalar function of the
    parameters. Entries may be subsampled per parameter for speed.
    """
    if not (1e-6 <= h <= 1e-3):
        raise ValueError("step h must lie in [1e-6, 1e-3]")
    rng = rng or np.random.default_rng(0)

    store.zero_grads()
    with Tape() as tape:
        loss = fn(store)
        if not np.isfinite(loss.data).all():
            raise GradientError("objective is not finite at the check point")
        tape.backward(loss)
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in store.items()}
    store.zero_grads()

    per_param: dict[str, float] = {}
    worst_name, worst_err = "", 0.0
    for name, p in store.items():
        flat = p.data.reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            picks = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            picks = np.arange(n)
        err = 0.0
        for j in picks:
            orig = flat[j]
            flat[j] = orig + h
            f_plus = float(fn(store).data)
            flat[j] = orig - h
            f_minus = float(fn(store).data)
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradientError(f"non-finite objective while probing {name!r}")
            numeric = (f_plus - f_minus) / (2 * h)
            a = analytic[name].reshape(-1)[j]
            rel = abs(a - numeric) / max(abs(a) + abs(numeric), 1e-6)
            err = max(err, rel)
        per_param[name] = err
        if err >= worst_err:
            worst_err, worst_name = err, name
    return GradCheckReport(max_rel_err=worst_err, worst_param=worst_name,
                           per_param=per_param)


# ---------------------------------------------------------------------------
# Initialization helpers
# ---------------------------------------------------------------------------


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Per-parameter stream so init is independent of creation order."""
    return np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(name.encode())])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
