"""Minimal dense-tensor numerics with reverse-mode gradients.

Everything is 64-bit float and deterministic: same inputs give bitwise
identical outputs.  The engine is a flat tape of ``Tensor`` nodes; each op
records a closure that routes the output gradient back into its parents.
Shapes are limited to what the model needs (vectors, matrices, and
head-batched 3-D matmuls) -- no general broadcasting beyond row-wise bias
addition.

Set ``DEBUG_FINITE = True`` to assert finiteness after every op.
"""

import struct
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    IncompatibleCheckpoint,
    InvalidArgument,
    InvalidState,
    NumericFailure,
    SchemaError,
    ShapeError,
)
from .rng import substream

DEBUG_FINITE = False

CHECKPOINT_MAGIC = b"OIKG0001"


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)  # keep 0-d scalars 0-d
    return arr


class Tensor:
    """Shape-tagged float64 array with optional gradient tracking."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = _as_f64(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._done = False
        if DEBUG_FINITE and not np.all(np.isfinite(self.data)):
            raise NumericFailure("non-finite tensor values")

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small operator sugar used all over the model code
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _result(data, parents, backward) -> Tensor:
    tracked = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=tracked,
                  _parents=tuple(parents) if tracked else (),
                  _backward=backward if tracked else None)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over axes that were broadcast to reach its shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- basic ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return _result(out_data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return _result(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _result(out_data, (a, b), backward)


def scale(a: Tensor, s: float) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * s)

    return _result(a.data * s, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 1D@2D, 2D@2D, and batch-matched 3D@3D operands."""
    an, bn = a.data.ndim, b.data.ndim
    if (an, bn) not in ((1, 2), (2, 2), (3, 3)):
        raise ShapeError(f"unsupported matmul ranks {an}@{bn}")
    if a.shape[-1] != b.shape[-2] or (an == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        if an == 1:
            if a.requires_grad:
                a.accumulate_grad(b.data @ g)
            if b.requires_grad:
                b.accumulate_grad(np.outer(a.data, g))
        elif an == 2:
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)
        else:
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.transpose(0, 2, 1))
            if b.requires_grad:
                b.accumulate_grad(a.data.transpose(0, 2, 1) @ g)

    return _result(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0.0

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _result(np.maximum(a.data, 0.0), (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(g.transpose(inv))

    return _result(a.data.transpose(axes), (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not parts:
        raise InvalidArgument("concat needs at least one tensor")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p.accumulate_grad(g[tuple(idx)])

    return _result(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


def stack_rows(rows: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors into a 2-D matrix, one per row."""
    if not rows:
        raise InvalidArgument("stack_rows needs at least one row")

    def backward(g):
        for i, r in enumerate(rows):
            if r.requires_grad:
                r.accumulate_grad(g[i])

    return _result(np.stack([r.data for r in rows], axis=0), rows, backward)


def tsum(a: Tensor) -> Tensor:
    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(a.shape, float(g)))

    return _result(a.data.sum(), (a,), backward)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(np.full(a.shape, float(g) / n))

    return _result(a.data.mean(), (a,), backward)


def embedding(ids: Sequence[int], table: Tensor) -> Tensor:
    """Row lookup: out[i] = table[ids[i]]."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding ids must be a 1-D sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise InvalidArgument(f"token id out of vocabulary (size {table.shape[0]})")

    def backward(g):
        if table.requires_grad:
            dT = np.zeros_like(table.data)
            np.add.at(dT, idx, g)
            table.accumulate_grad(dT)

    return _result(table.data[idx], (table,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: rows sum to 1, invariant to per-row shifts."""
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if a.requires_grad:
            dot = (g * p).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - dot) * p)

    return _result(p, (a,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + eps)
    xhat = (x.data - mu) / sigma

    def backward(g):
        ghat = g * gamma.data
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        if x.requires_grad:
            x.accumulate_grad((ghat - m1 - xhat * m2) / sigma)
        sum_axes = tuple(range(g.ndim - 1))
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=sum_axes))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=sum_axes))

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """y = x @ w + b, with the bias broadcast over rows."""
    if w.data.ndim != 2:
        raise ShapeError(f"linear weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shape mismatch {x.shape} @ {w.shape}")
    y = matmul(x, w)
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} != ({w.shape[1]},)")
        y = add(y, b)
    return y


def mlp(x: Tensor, layers: Sequence[tuple[Tensor, Tensor]]) -> Tensor:
    """Stack of linear layers with ReLU between them; final layer is linear."""
    if not layers:
        raise InvalidArgument("mlp needs at least one layer")
    h = x
    for i, (w, b) in enumerate(layers):
        h = linear(h, w, b)
        if i + 1 < len(layers):
            h = relu(h)
    return h


def attention(q: Tensor, k: Tensor, v: Tensor,
              wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
              heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    q: (n, dm), k/v: (m, dm).  Per head: softmax(QWq (KWk)^T / sqrt(dm/h)) VWv;
    heads are concatenated and output-projected back to (n, dm).
    """
    n, dm = q.shape
    m = k.shape[0]
    if k.shape != (m, dm) or v.shape != (m, dm):
        raise ShapeError(f"attention key/value shapes {k.shape}/{v.shape} != ({m},{dm})")
    if dm % heads != 0:
        raise ShapeError(f"model dim {dm} not divisible by {heads} heads")
    dh = dm // heads

    def split(t: Tensor, rows: int) -> Tensor:
        # (rows, dm) -> (heads, rows, dh)
        return transpose(reshape(t, (rows, heads, dh)), (1, 0, 2))

    qh = split(linear(q, wq), n)
    kh = split(linear(k, wk), m)
    vh = split(linear(v, wv), m)
    scores = scale(matmul(qh, transpose(kh, (0, 2, 1))), 1.0 / np.sqrt(dh))
    weights = softmax(scores, axis=-1)  # (heads, n, m), rows sum to 1
    mixed = matmul(weights, vh)  # (heads, n, dh)
    merged = reshape(transpose(mixed, (1, 0, 2)), (n, dm))
    return linear(merged, wo)


def cross_entropy(logits: Tensor, target: int) -> Tensor:
    """-log softmax(logits)[target] for a 1-D logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-D logits, got {logits.shape}")
    m = logits.shape[0]
    if not 0 <= int(target) < m:
        raise InvalidArgument(f"target {target} out of range for {m} logits")
    z = logits.data - logits.data.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[int(target)]
    p = np.exp(z - lse)

    def backward(g):
        if logits.requires_grad:
            d = p.copy()
            d[int(target)] -= 1.0
            logits.accumulate_grad(d * float(g))

    return _result(loss, (logits,), backward)


# ------------------------------------------------------------- autodiff core


def backward(loss: Tensor) -> None:
    """Populate .grad on every tracked tensor reachable from a scalar loss."""
    if loss.data.ndim != 0:
        raise InvalidArgument(f"backward expects a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise InvalidState("loss does not belong to a tracked graph")
    if loss._done:
        raise InvalidState("backward already ran on this graph; rebuild the loss first")
    loss._done = True

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss.accumulate_grad(np.array(1.0))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ------------------------------------------------------------ parameter store


class ParamStore:
    """Named parameters plus per-parameter adaptive-moment optimizer state."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise InvalidArgument(f"duplicate parameter name {name!r}")
        t = Tensor(data, requires_grad=True)
        self.params[name] = t
        self._m[name] = np.zeros_like(t.data)
        self._v[name] = np.zeros_like(t.data)
        self._t[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return sorted(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def global_grad_norm(self) -> float:
        total = 0.0
        for t in self.params.values():
            if t.grad is not None:
                total += float(np.sum(t.grad * t.grad))
        return float(np.sqrt(total))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: self.params[name].data.copy() for name in self.names()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise IncompatibleCheckpoint(
                f"parameter name mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, arr in state.items():
            if arr.shape != self.params[name].shape:
                raise IncompatibleCheckpoint(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape} vs config {self.params[name].shape}")
            self.params[name].data = _as_f64(arr)


def init_params(spec: Iterable[tuple[str, tuple]], seed: int) -> ParamStore:
    """Build a store from (name, shape) pairs.

    Matrices get uniform values in +-sqrt(6/(fan_in+fan_out)); vectors and
    scalars (biases, learned embedding rows) start at zero.  Each parameter
    draws from its own named substream, so a given name always receives the
    same values for a given seed regardless of what else is in the spec.
    """
    store = ParamStore()
    for name, shape in spec:
        shape = tuple(int(s) for s in shape)
        if len(shape) >= 2:
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            data = substream(seed, "init", name).uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        store.add(name, data)
    return store


def clip_global_norm(store: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global norm is at most max_norm; returns the pre-clip norm."""
    norm = store.global_grad_norm()
    if norm > max_norm > 0.0:
        factor = max_norm / norm
        for t in store.params.values():
            if t.grad is not None:
                t.grad *= factor
    return norm


def optimizer_step(store: ParamStore, lr: float,
                   beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Adaptive-moment update with bias correction; gradients are zeroed after."""
    for name in store.names():
        p = store.params[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        store._t[name] += 1
        t = store._t[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    store.zero_grad()


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, store: ParamStore) -> None:
    """Length-prefixed binary blocks (name, dims, little-endian float64 data)."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for name in store.names():
            data = store.params[name].data
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise SchemaError(f"{path}: bad checkpoint magic")
    out: dict[str, np.ndarray] = {}
    off = len(CHECKPOINT_MAGIC)

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise SchemaError(f"{path}: truncated checkpoint")
        piece = blob[off:off + n]
        off += n
        return piece

    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(count * 8), dtype="<f8").reshape(shape)
        out[name] = data.astype(np.float64).copy()
    return out
