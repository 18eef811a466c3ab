"""Dense numeric kernel: reverse-mode autodiff over 2-D numpy arrays.

Everything in the pipeline is expressed with matrices, so the engine only
handles rank-2 float64 arrays (vectors travel as 1xN rows).  The op set is
exactly what the forward passes need: matmul, windowed unfold (1-D
convolution via im2col), tanh, sigmoid, layer norm, means, MAE, softmax
cross-entropy, a row-wise cosine similarity matrix, and an embedding
gather.  Parameters live in a ParamStore and are updated with Adam.

Broadcasting is limited to (1, c) rows and (1, 1) scalars against (d, c)
matrices; anything fancier raises.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError

Array = np.ndarray


def _as_matrix(data) -> Array:
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"expected a rank-2 array, got shape {a.shape}")
    return a


def _unbroadcast(grad: Array, shape: tuple[int, int]) -> Array:
    """Sum `grad` down to `shape` (inverse of the limited broadcast)."""
    if grad.shape == shape:
        return grad
    out = grad
    if shape[0] == 1 and grad.shape[0] != 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] != 1:
        out = out.sum(axis=1, keepdims=True)
    if out.shape != shape:
        raise ValueError(f"cannot reduce grad {grad.shape} to {shape}")
    return out


class Tensor:
    """A rank-2 value in the computation graph.

    `data` is always float64 C-order.  `grad` is filled by backward() and
    accumulates across calls until zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_matrix(data)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], None] | None = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on non-scalar shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def _accumulate(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from this scalar."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        out = _make(a.data + b.data, (a, b))
        if out.requires_grad:
            def bw(g: Array) -> None:
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.shape))
            out._backward = bw
        return out

    def __sub__(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        out = _make(a.data - b.data, (a, b))
        if out.requires_grad:
            def bw(g: Array) -> None:
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g, b.shape))
            out._backward = bw
        return out

    def __mul__(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        out = _make(a.data * b.data, (a, b))
        if out.requires_grad:
            ad, bd = a.data, b.data
            def bw(g: Array) -> None:
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * bd, a.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * ad, b.shape))
            out._backward = bw
        return out

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _make(data: Array, parents: Iterable[Tensor]) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = parents
    return out


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def scale(x: Tensor, s: float) -> Tensor:
    out = _make(x.data * s, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * s)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = _make(a.data @ b.data, (a, b))
    if out.requires_grad:
        ad, bd = a.data, b.data
        def bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g @ bd.T)
            if b.requires_grad:
                b._accumulate(ad.T @ g)
        out._backward = bw
    return out


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    out = _make(y, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * (1.0 - y * y))
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = sigmoid_values(x.data)
    out = _make(y, (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(g * y * (1.0 - y))
    return out


def sigmoid_values(x: Array) -> Array:
    """Numerically stable logistic function on raw arrays."""
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def unfold(x: Tensor, width: int) -> Tensor:
    """im2col for a same-padded 1-D convolution along the row axis.

    Input (d, c) becomes (d, width*c); a convolution with a (width*c, m)
    weight is then a plain matmul.  Rows outside [0, d) contribute zeros.
    """
    if width < 1 or width % 2 == 0:
        raise ValueError("unfold width must be a positive odd integer")
    d, c = x.shape
    pad = width // 2
    cols = np.zeros((d, width * c), dtype=np.float64)
    for u in range(width):
        lo = max(0, pad - u)
        hi = min(d, d + pad - u)
        if lo < hi:
            cols[lo:hi, u * c:(u + 1) * c] = x.data[lo - pad + u:hi - pad + u]
    out = _make(cols, (x,))
    if out.requires_grad:
        def bw(g: Array) -> None:
            dx = np.zeros((d, c), dtype=np.float64)
            for u in range(width):
                lo = max(0, pad - u)
                hi = min(d, d + pad - u)
                if lo < hi:
                    dx[lo - pad + u:hi - pad + u] += g[lo:hi, u * c:(u + 1) * c]
            x._accumulate(dx)
        out._backward = bw
    return out


def conv1d(x: Tensor, weight: Tensor, width: int) -> Tensor:
    """Same-padded 1-D convolution: weight shape (width*c_in, c_out)."""
    return matmul(unfold(x, width), weight)


LAYER_NORM_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row normalization to zero mean / unit variance, then affine.

    Constant rows normalize to zero (the eps floor keeps the division
    finite), so the output degenerates to the bias.
    """
    d, c = x.shape
    if c == 0:
        raise DegenerateInputError("layer_norm on zero-width rows")
    if gain.shape != (1, c) or bias.shape != (1, c):
        raise ValueError(f"gain/bias must be (1, {c})")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = _make(xhat * gain.data + bias.data, (x, gain, bias))
    if out.requires_grad:
        def bw(g: Array) -> None:
            if gain.requires_grad:
                gain._accumulate((g * xhat).sum(axis=0, keepdims=True))
            if bias.requires_grad:
                bias._accumulate(g.sum(axis=0, keepdims=True))
            if x.requires_grad:
                dxhat = g * gain.data
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                x._accumulate(inv * (dxhat - m1 - xhat * m2))
        out._backward = bw
    return out


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = _make(np.array([[x.data.mean()]]), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(np.full(x.shape, g[0, 0] / n))
    return out


def mean_rows(x: Tensor) -> Tensor:
    """Mean over rows: (d, c) -> (1, c)."""
    d = x.shape[0]
    out = _make(x.data.mean(axis=0, keepdims=True), (x,))
    if out.requires_grad:
        out._backward = lambda g: x._accumulate(np.repeat(g / d, d, axis=0))
    return out


def mae(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute error between same-shaped matrices."""
    if a.shape != b.shape:
        raise ValueError(f"mae shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = _make(np.array([[np.abs(diff).mean()]]), (a, b))
    if out.requires_grad:
        sign = np.sign(diff)
        def bw(g: Array) -> None:
            if a.requires_grad:
                a._accumulate(g[0, 0] * sign / n)
            if b.requires_grad:
                b._accumulate(-g[0, 0] * sign / n)
        out._backward = bw
    return out


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Row lookup (embedding): (v, h) table, integer ids -> (d, h)."""
    idx = np.asarray(ids, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("ids must be a flat sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError("gather id out of range")
    out = _make(table.data[idx], (table,))
    if out.requires_grad:
        def bw(g: Array) -> None:
            dt = np.zeros_like(table.data)
            np.add.at(dt, idx, g)
            table._accumulate(dt)
        out._backward = bw
    return out


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of every row of `a` against every row of `b`.

    (p, n) x (q, n) -> (p, q), entries clipped to [-1, 1].  Zero-norm rows
    are rejected rather than propagated as NaN.
    """
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"cosine_rows width mismatch: {a.shape} vs {b.shape}")

    def normalize(x: Array, side: str) -> tuple[Array, Array]:
        # scale by the row max first so squared sums of tiny rows cannot
        # underflow to subnormals and skew the norm
        scale = np.abs(x).max(axis=1, keepdims=True)
        if np.any(scale == 0.0):
            raise DegenerateInputError(
                f"zero-norm row {int(np.argmin(scale))} in {side} cosine operand")
        scaled = x / scale
        ns = np.linalg.norm(scaled, axis=1, keepdims=True)
        return scaled / ns, ns * scale

    ahat, na = normalize(a.data, "left")
    bhat, nb = normalize(b.data, "right")
    sim = np.clip(ahat @ bhat.T, -1.0, 1.0)
    out = _make(sim, (a, b))
    if out.requires_grad:
        def bw(g: Array) -> None:
            if a.requires_grad:
                dahat = g @ bhat
                a._accumulate((dahat - (dahat * ahat).sum(axis=1, keepdims=True) * ahat) / na)
            if b.requires_grad:
                dbhat = g.T @ ahat
                b._accumulate((dbhat - (dbhat * bhat).sum(axis=1, keepdims=True) * bhat) / nb)
        out._backward = bw
    return out


def cosine_similarity(a, b) -> float:
    """Cosine similarity of two vectors, in [-1, 1].

    Raises DegenerateInputError on zero-norm input instead of returning NaN.
    """
    va = _as_matrix(a)
    vb = _as_matrix(b)
    if va.shape != vb.shape or va.shape[0] != 1:
        raise ValueError("cosine_similarity expects two equal-length vectors")
    return float(cosine_rows(Tensor(va), Tensor(vb)).data[0, 0])


def softmax_values(logits: Array) -> Array:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer targets."""
    t = np.asarray(targets, dtype=np.int64)
    d, v = logits.shape
    if t.shape != (d,):
        raise ValueError(f"expected {d} targets, got {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError("target id out of range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = logz[:, 0] - z[np.arange(d), t]
    out = _make(np.array([[nll.mean()]]), (logits,))
    if out.requires_grad:
        probs = np.exp(z - logz)
        def bw(g: Array) -> None:
            dz = probs.copy()
            dz[np.arange(d), t] -= 1.0
            logits._accumulate(g[0, 0] * dz / d)
        out._backward = bw
    return out


# -- parameters and optimization ------------------------------------------


class ParamStore:
    """Named trainable tensors with insertion-ordered iteration.

    The declared order is the serialization order for checkpoints, so it
    must be stable across runs.
    """

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True)
        self._params[name] = t
        return t

    @classmethod
    def union(cls, *stores: "ParamStore") -> "ParamStore":
        """A view sharing the member tensors, for joint optimization."""
        joined = cls()
        for k, store in enumerate(stores):
            for name, tensor in store.items():
                joined._params[f"{k}.{name}"] = tensor
        return joined

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state_arrays(self) -> list[Array]:
        return [t.data.copy() for t in self._params.values()]

    def load_arrays(self, arrays: Sequence[Array]) -> None:
        if len(arrays) != len(self._params):
            raise ValueError("parameter count mismatch")
        for t, a in zip(self._params.values(), arrays):
            a = np.asarray(a, dtype=np.float64)
            if a.shape != t.data.shape:
                raise ValueError(f"parameter shape mismatch: {a.shape} vs {t.data.shape}")
            t.data = a.copy()


class Adam:
    """Adam with the usual defaults; lr=0 leaves parameters untouched."""

    def __init__(self, store: ParamStore, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in store.tensors()]
        self._v = [np.zeros_like(p.data) for p in store.tensors()]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.store.tensors()):
            if p.grad is None:
                continue
            g = p.grad
            self._m[i] = b1 * self._m[i] + (1 - b1) * g
            self._v[i] = b2 * self._v[i] + (1 - b2) * g * g
            mhat = self._m[i] / (1 - b1 ** self.t)
            vhat = self._v[i] / (1 - b2 ** self.t)
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- gradient checking ------------------------------------------------------


def grad_check(f: Callable[[], Tensor], store: ParamStore, step: float = 1e-5) -> float:
    """Compare reverse-mode gradients of f() against central differences.

    f must rebuild its graph from the current parameter values on every
    call.  Returns the worst per-element error |analytic - numeric| /
    max(1, |analytic|, |numeric|) across all parameters.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    store.zero_grad()
    loss = f()
    if not np.isfinite(loss.item()):
        raise DegenerateInputError("non-finite loss in grad_check")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in store.tensors()]

    worst = 0.0
    for p, ga in zip(store.tensors(), analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up = f().item()
            flat[j] = orig - step
            down = f().item()
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise DegenerateInputError("non-finite loss in grad_check")
            numeric = (up - down) / (2.0 * step)
            err = abs(gflat[j] - numeric) / max(1.0, abs(gflat[j]), abs(numeric))
            worst = max(worst, err)
    store.zero_grad()
    return worst


def init_uniform(rng: np.random.Generator, rows: int, cols: int, fan_in: int) -> Array:
    """Uniform fan-in-scaled init, the default for every weight matrix."""
    bound = 1.0 / np.sqrt(max(1, fan_in))
    return rng.uniform(-bound, bound, size=(rows, cols))
