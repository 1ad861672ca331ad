"""Dense 2-D float64 tensors with tape-based reverse-mode autodiff.

Tensors are always rank 2; multi-head quantities are passed around as Python
lists of per-head matrices. Operations executed inside a ``with Tape()``
block record a backward closure; ``backward`` replays the closures in exact
reverse execution order. Outside a tape the same functions run forward-only,
which keeps evaluation and finite-difference probing cheap.

The ``heads_*`` family applies one operation to a whole list of per-head
matrices in a single tape entry (stacked 3-D arithmetic internally), which is
what keeps the per-step Python overhead tolerable at training time.
"""

from __future__ import annotations

import hashlib
import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, NumericError, ShapeError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "RngState",
    "init_params",
    "finite_diff_grad",
    "matmul",
    "add",
    "sub",
    "scale",
    "add_row",
    "transpose",
    "relu",
    "softmax_rows",
    "layer_norm_rows",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "gather_rows",
    "gather_cols",
    "row_sums",
    "mul_rows",
    "pow_elem",
    "sum_all",
    "heads_project",
    "heads_matmul",
    "heads_softmax_rows",
    "heads_relu",
    "heads_add_identity",
    "heads_concat_cols",
    "split_cols_heads",
    "heads_const_matmul",
]


class Tensor:
    """A rows x cols matrix of float64 values with an optional gradient."""

    __slots__ = ("data", "grad", "name", "_block", "_bidx")

    def __init__(self, data, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"tensor must be 2-D, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.name = name
        # when this tensor is slice h of a batched (H, n, d) result, _block
        # holds the parent array so _stack can reuse it without copying
        self._block: np.ndarray | None = None
        self._bidx = 0

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def values(self):
        """Flat row-major view of the entries."""
        return self.data.ravel()

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}({self.rows}x{self.cols})"


_TLS = threading.local()


def _tape() -> "Tape | None":
    return getattr(_TLS, "tape", None)


class Tape:
    """Ordered record of executed operations for one forward pass."""

    __slots__ = ("_entries",)

    def __init__(self):
        self._entries: list[tuple[tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        if _tape() is not None:
            raise ContractError("tapes do not nest")
        _TLS.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _TLS.tape = None
        return False

    def _rec(self, outs: tuple[Tensor, ...], fn: Callable) -> None:
        self._entries.append((outs, fn))

    def __len__(self) -> int:
        return len(self._entries)


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate grads of everything on the tape that the scalar loss reaches."""
    if loss.data.shape != (1, 1):
        raise ContractError(f"loss must be 1x1, got {loss.data.shape}")
    loss.grad = np.ones((1, 1))
    for outs, fn in reversed(tape._entries):
        gs = [o.grad for o in outs]
        if all(g is None for g in gs):
            continue
        fn(*[g if g is not None else np.zeros_like(o.data) for g, o in zip(gs, outs)])


def _acc(t: Tensor, g: np.ndarray, own: bool = False) -> None:
    # own=True promises g is a freshly allocated array that nothing else holds
    if t.grad is None:
        t.grad = g if own else np.array(g)
    else:
        t.grad += g


# ---- elementwise / structural operations ----


def matmul(a: Tensor, b: Tensor, alpha: float = 1.0) -> Tensor:
    """a (m, k) @ b (k, n) -> (m, n), optionally scaled by alpha."""
    if a.cols != b.rows:
        raise ShapeError(f"matmul shape mismatch: {a.rows}x{a.cols} @ {b.rows}x{b.cols}")
    prod = a.data @ b.data
    out = Tensor(prod if alpha == 1.0 else alpha * prod)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            if alpha != 1.0:
                g = alpha * g
            _acc(a, g @ b.data.T, own=True)
            _acc(b, a.data.T @ g, own=True)
        tp._rec((out,), bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(a, g)
            _acc(b, g)
        tp._rec((out,), bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(a, g)
            _acc(b, -g, own=True)
        tp._rec((out,), bwd)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(c * x.data)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, c * g, own=True)
        tp._rec((out,), bwd)
    return out


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """x (n, d) plus a (1, d) row broadcast over all n rows."""
    if b.rows != 1 or b.cols != x.cols:
        raise ShapeError(f"add_row expects (1, {x.cols}) bias, got {b.shape}")
    out = Tensor(x.data + b.data)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, g)
            _acc(b, g.sum(axis=0, keepdims=True), own=True)
        tp._rec((out,), bwd)
    return out


def transpose(x: Tensor) -> Tensor:
    out = Tensor(x.data.T.copy())
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, g.T.copy(), own=True)
        tp._rec((out,), bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, g * (x.data > 0.0), own=True)
        tp._rec((out,), bwd)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, max-shifted for stability."""
    y = _softmax(x.data)
    out = Tensor(y)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, y * (g - (g * y).sum(axis=1, keepdims=True)), own=True)
        tp._rec((out,), bwd)
    return out


def layer_norm_rows(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row (population variance), then scale and shift."""
    if gamma.shape != (1, x.cols) or beta.shape != (1, x.cols):
        raise ShapeError(f"layer_norm params must be (1, {x.cols})")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor(xhat * gamma.data + beta.data)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(gamma, (g * xhat).sum(axis=0, keepdims=True), own=True)
            _acc(beta, g.sum(axis=0, keepdims=True), own=True)
            gh = g * gamma.data
            _acc(
                x,
                inv * (gh - gh.mean(axis=1, keepdims=True)
                       - xhat * (gh * xhat).mean(axis=1, keepdims=True)),
                own=True,
            )
        tp._rec((out,), bwd)
    return out


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise ShapeError("concat_rows: column counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    tp = _tape()
    if tp is not None:
        offsets = np.cumsum([0] + [p.rows for p in parts])
        def bwd(g):
            for p, r0, r1 in zip(parts, offsets[:-1], offsets[1:]):
                _acc(p, g[r0:r1])
        tp._rec((out,), bwd)
    return out


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = parts[0].rows
    for p in parts:
        if p.rows != rows:
            raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    tp = _tape()
    if tp is not None:
        offsets = np.cumsum([0] + [p.cols for p in parts])
        def bwd(g):
            for p, c0, c1 in zip(parts, offsets[:-1], offsets[1:]):
                _acc(p, g[:, c0:c1])
        tp._rec((out,), bwd)
    return out


def slice_rows(x: Tensor, r0: int, r1: int) -> Tensor:
    out = Tensor(x.data[r0:r1].copy())
    tp = _tape()
    if tp is not None:
        def bwd(g):
            z = np.zeros_like(x.data)
            z[r0:r1] = g
            _acc(x, z, own=True)
        tp._rec((out,), bwd)
    return out


def slice_cols(x: Tensor, c0: int, c1: int) -> Tensor:
    out = Tensor(x.data[:, c0:c1].copy())
    tp = _tape()
    if tp is not None:
        def bwd(g):
            z = np.zeros_like(x.data)
            z[:, c0:c1] = g
            _acc(x, z, own=True)
        tp._rec((out,), bwd)
    return out


def gather_rows(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[idx])
    tp = _tape()
    if tp is not None:
        def bwd(g):
            z = np.zeros_like(x.data)
            np.add.at(z, idx, g)
            _acc(x, z, own=True)
        tp._rec((out,), bwd)
    return out


def gather_cols(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    out = Tensor(x.data[:, idx])
    tp = _tape()
    if tp is not None:
        def bwd(g):
            z = np.zeros_like(x.data)
            np.add.at(z.T, idx, g.T)
            _acc(x, z, own=True)
        tp._rec((out,), bwd)
    return out


def row_sums(x: Tensor) -> Tensor:
    """x (m, n) -> column vector (m, 1) of row sums."""
    out = Tensor(x.data.sum(axis=1, keepdims=True))
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, np.broadcast_to(g, x.shape).copy(), own=True)
        tp._rec((out,), bwd)
    return out


def mul_rows(x: Tensor, s: Tensor) -> Tensor:
    """Scale row i of x (m, n) by s[i, 0]; s is (m, 1)."""
    if s.shape != (x.rows, 1):
        raise ShapeError(f"mul_rows expects ({x.rows}, 1) scales, got {s.shape}")
    out = Tensor(x.data * s.data)
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, g * s.data, own=True)
            _acc(s, (g * x.data).sum(axis=1, keepdims=True), own=True)
        tp._rec((out,), bwd)
    return out


def pow_elem(x: Tensor, p: float) -> Tensor:
    out = Tensor(np.power(x.data, p))
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, g * p * np.power(x.data, p - 1.0), own=True)
        tp._rec((out,), bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor([[x.data.sum()]])
    tp = _tape()
    if tp is not None:
        def bwd(g):
            _acc(x, np.full_like(x.data, g[0, 0]), own=True)
        tp._rec((out,), bwd)
    return out


# ---- per-head batched operations ----
# Each call handles a whole list of per-head matrices in one tape entry,
# stacking them into a 3-D array internally.


def _stack(ts: Sequence[Tensor]) -> np.ndarray:
    first = ts[0]
    blk = first._block
    if blk is not None and len(ts) == blk.shape[0]:
        if all(t._block is blk and t._bidx == h for h, t in enumerate(ts)):
            return blk
    H = len(ts)
    out = np.empty((H,) + ts[0].data.shape)
    for h, t in enumerate(ts):
        out[h] = t.data
    return out


def _unstack(block: np.ndarray) -> tuple[Tensor, ...]:
    """Wrap the slices of a (H, n, d) array as head tensors sharing its memory."""
    block = np.ascontiguousarray(block)
    outs = []
    for h in range(block.shape[0]):
        t = Tensor(block[h])
        t._block = block
        t._bidx = h
        outs.append(t)
    return tuple(outs)


def heads_project(x: Tensor, ws: Sequence[Tensor], alpha: float = 1.0) -> list[Tensor]:
    """Shared input against per-head weights: x (n, di) @ w_h (di, do) for each h."""
    W = _stack(ws)
    Y = np.matmul(x.data, W)
    if alpha != 1.0:
        Y = alpha * Y
    outs = _unstack(Y)
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            G = np.stack(gs)
            if alpha != 1.0:
                G = alpha * G
            _acc(x, np.matmul(G, W.transpose(0, 2, 1)).sum(axis=0), own=True)
            dW = np.matmul(x.data.T[None], G)
            for w, dw in zip(ws, dW):
                _acc(w, dw, own=True)
        tp._rec(outs, bwd)
    return list(outs)


def heads_matmul(
    a: Sequence[Tensor],
    b: Sequence[Tensor],
    transpose_b: bool = False,
    alpha: float = 1.0,
) -> list[Tensor]:
    """Per-head product alpha * a_h @ b_h (or a_h @ b_h.T)."""
    A = _stack(a)
    B = _stack(b)
    Bx = B.transpose(0, 2, 1) if transpose_b else B
    C = np.matmul(A, Bx)
    if alpha != 1.0:
        C = alpha * C
    outs = _unstack(C)
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            G = np.stack(gs)
            if alpha != 1.0:
                G = alpha * G
            dA = np.matmul(G, Bx.transpose(0, 2, 1))
            if transpose_b:
                dB = np.matmul(G.transpose(0, 2, 1), A)
            else:
                dB = np.matmul(A.transpose(0, 2, 1), G)
            for t, d in zip(a, dA):
                _acc(t, d, own=True)
            for t, d in zip(b, dB):
                _acc(t, d, own=True)
        tp._rec(outs, bwd)
    return list(outs)


def heads_softmax_rows(xs: Sequence[Tensor]) -> list[Tensor]:
    X = _stack(xs)
    Y = _softmax(X)
    outs = _unstack(Y)
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            G = np.stack(gs)
            dX = Y * (G - (G * Y).sum(axis=2, keepdims=True))
            for t, d in zip(xs, dX):
                _acc(t, d, own=True)
        tp._rec(outs, bwd)
    return list(outs)


def heads_relu(xs: Sequence[Tensor]) -> list[Tensor]:
    X = _stack(xs)
    outs = _unstack(np.maximum(X, 0.0))
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            for t, g in zip(xs, gs):
                _acc(t, g * (t.data > 0.0), own=True)
        tp._rec(outs, bwd)
    return list(outs)


def heads_add_identity(xs: Sequence[Tensor], beta: float = 1.0) -> list[Tensor]:
    """a_h + beta * I for square a_h."""
    eye = beta * np.eye(xs[0].rows)
    outs = _unstack(_stack(xs) + eye)
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            for t, g in zip(xs, gs):
                _acc(t, g)
        tp._rec(outs, bwd)
    return list(outs)


def heads_concat_cols(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate per-head (n, dh) blocks into (n, H*dh), head order preserved."""
    H = len(xs)
    n, dh = xs[0].shape
    out = Tensor(_stack(xs).transpose(1, 0, 2).reshape(n, H * dh))
    tp = _tape()
    if tp is not None:
        def bwd(g):
            G = g.reshape(n, H, dh).transpose(1, 0, 2)
            for t, d in zip(xs, G):
                _acc(t, d)
        tp._rec((out,), bwd)
    return out


def split_cols_heads(x: Tensor, H: int) -> list[Tensor]:
    """Split (n, d) into H column blocks of width d / H."""
    if x.cols % H != 0:
        raise ShapeError(f"cannot split {x.cols} columns into {H} heads")
    dh = x.cols // H
    outs = _unstack(x.data.reshape(x.rows, H, dh).transpose(1, 0, 2))
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            _acc(x, np.concatenate(gs, axis=1), own=True)
        tp._rec(outs, bwd)
    return list(outs)


def heads_const_matmul(s: np.ndarray, xs: Sequence[Tensor]) -> list[Tensor]:
    """Constant matrix s (m, n) applied to each head: s @ x_h. No gradient into s."""
    X = _stack(xs)
    Y = np.matmul(s, X)
    outs = _unstack(Y)
    tp = _tape()
    if tp is not None:
        st = s.T.copy()
        def bwd(*gs):
            G = np.stack(gs)
            dX = np.matmul(st, G)
            for t, d in zip(xs, dX):
                _acc(t, d, own=True)
        tp._rec(outs, bwd)
    return list(outs)


# ---- seeded randomness and initialization ----


class RngState:
    """Splittable counter-based random source keyed by (seed, component path).

    Child streams are independent of draw order elsewhere, so adding a layer
    never perturbs the initialization of unrelated tensors.
    """

    __slots__ = ("seed", "path")

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = path

    def child(self, *names: str) -> "RngState":
        return RngState(self.seed, self.path + tuple(str(n) for n in names))

    def generator(self) -> np.random.Generator:
        words: list[int] = []
        for name in self.path:
            digest = hashlib.sha256(name.encode("utf-8")).digest()
            words.append(int.from_bytes(digest[0:4], "little"))
            words.append(int.from_bytes(digest[4:8], "little"))
        ss = np.random.SeedSequence(
            entropy=self.seed & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(words)
        )
        return np.random.Generator(np.random.Philox(ss))


def init_params(shape: tuple[int, int], scheme: str, rng: RngState, sigma: float = 0.02) -> Tensor:
    """Create a parameter tensor. scheme is one of xavier_uniform, normal, zeros."""
    rows, cols = shape
    if scheme == "zeros":
        return Tensor(np.zeros((rows, cols)))
    gen = rng.generator()
    if scheme == "xavier_uniform":
        lim = np.sqrt(6.0 / (rows + cols))
        return Tensor(gen.uniform(-lim, lim, size=(rows, cols)))
    if scheme == "normal":
        return Tensor(gen.normal(0.0, sigma, size=(rows, cols)))
    raise ConfigError(f"unknown init scheme {scheme!r}")


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-6) -> Tensor:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    out = np.zeros_like(x.data)
    flat_x = x.data.ravel()
    flat_o = out.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        fp = float(f(x))
        flat_x[i] = orig - h
        fm = float(f(x))
        flat_x[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite value while probing coordinate {i}")
        flat_o[i] = (fp - fm) / (2.0 * h)
    return Tensor(out)
