"""Attention operators.

``exact_mha`` is the quadratic-cost reference; ``nystrom_attention`` is the
linear-cost approximation built from landmark means and an iterative
pseudoinverse. The class token's attention row is always computed exactly
(one query row is cheap) because downstream token pruning ranks and weights
by it. ``cross_attention`` is the single-query operator used to exchange
class tokens between resolution branches.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ShapeError
from .numerics import (
    RngState,
    Tensor,
    _acc,
    _stack,
    _unstack,
    _tape,
    concat_rows,
    heads_concat_cols,
    heads_const_matmul,
    heads_matmul,
    heads_project,
    heads_softmax_rows,
    init_params,
    matmul,
    slice_cols,
    softmax_rows,
    transpose,
)


@dataclass
class AttentionHeadParams:
    """Per-head projections plus the shared output projection."""

    w_q: list[Tensor]
    w_k: list[Tensor]
    w_v: list[Tensor]
    w_o: Tensor

    @classmethod
    def build(cls, d_model: int, n_heads: int, rng: RngState) -> "AttentionHeadParams":
        if d_model % n_heads != 0:
            raise ConfigError(f"n_heads {n_heads} must divide d_model {d_model}")
        dh = d_model // n_heads
        def mk(kind: str, h: int) -> Tensor:
            return init_params((d_model, dh), "xavier_uniform", rng.child(f"h{h}", kind))
        H = n_heads
        return cls(
            w_q=[mk("wq", h) for h in range(H)],
            w_k=[mk("wk", h) for h in range(H)],
            w_v=[mk("wv", h) for h in range(H)],
            w_o=init_params((d_model, d_model), "xavier_uniform", rng.child("wo")),
        )

    @property
    def n_heads(self) -> int:
        return len(self.w_q)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for h in range(self.n_heads):
            yield f"{prefix}.h{h}.wq", self.w_q[h]
            yield f"{prefix}.h{h}.wk", self.w_k[h]
            yield f"{prefix}.h{h}.wv", self.w_v[h]
        yield f"{prefix}.wo", self.w_o


@dataclass
class NystromConfig:
    m_landmarks: int = 32
    pinv_iters: int = 6
    d: int | None = None  # scaling divisor; None means the head width

    def __post_init__(self):
        if self.m_landmarks < 1:
            raise ConfigError("m_landmarks must be >= 1")
        if self.pinv_iters < 1:
            raise ConfigError("pinv_iters must be >= 1")


@dataclass
class AttentionTrace:
    """Class-to-patch attention rows, per head and head-averaged."""

    rows: list[Tensor]
    abar: Tensor


@dataclass
class CrossAttentionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    @classmethod
    def build(cls, d_model: int, rng: RngState) -> "CrossAttentionParams":
        return cls(*(init_params((d_model, d_model), "xavier_uniform", rng.child(k))
                     for k in ("wq", "wk", "wv")))

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.wq", self.w_q
        yield f"{prefix}.wk", self.w_k
        yield f"{prefix}.wv", self.w_v


# ---- pseudoinverse ----


def heads_pinv(mats: Sequence[Tensor], iters: int = 6) -> list[Tensor]:
    """Newton-Schulz pseudoinverse of each square matrix, batched over heads.

    Initialized at Z0 = A.T / (|A|_1 * |A|_inf) and driven by the degree-3
    polynomial update Z <- 0.25 Z (13 I - B (15 I - B (7 I - B))) with B = A Z.
    The backward pass unrolls the same recurrence in reverse, so gradients are
    exact for the computed (not the idealized) output.
    """
    if iters < 1:
        raise ConfigError("pinv iters must be >= 1")
    A = _stack(mats)
    H, m, m2 = A.shape
    if m != m2:
        raise ShapeError(f"pinv expects square matrices, got {m}x{m2}")
    absA = np.abs(A)
    n_one = absA.sum(axis=1).max(axis=1)   # max column abs sum
    n_inf = absA.sum(axis=2).max(axis=1)   # max row abs sum
    denom = n_one * n_inf
    ok = denom > 0.0
    s = np.where(ok, 1.0 / np.where(ok, denom, 1.0), 0.0)
    At = A.transpose(0, 2, 1)
    Z = At * s[:, None, None]
    eye = np.eye(m)
    steps = []
    for _ in range(iters):
        B = np.matmul(A, Z)
        P1 = 7.0 * eye - B
        P2 = 15.0 * eye - np.matmul(B, P1)
        P3 = 13.0 * eye - np.matmul(B, P2)
        Zn = 0.25 * np.matmul(Z, P3)
        steps.append((Z, B, P1, P2, P3))
        Z = Zn
    outs = _unstack(Z)
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            dZ = np.stack(gs)
            dA = np.zeros_like(A)
            for Z0, B, P1, P2, P3 in reversed(steps):
                Bt = B.transpose(0, 2, 1)
                dP3 = 0.25 * np.matmul(Z0.transpose(0, 2, 1), dZ)
                dZ0 = 0.25 * np.matmul(dZ, P3.transpose(0, 2, 1))
                dB = -np.matmul(dP3, P2.transpose(0, 2, 1))
                dP2 = -np.matmul(Bt, dP3)
                dB -= np.matmul(dP2, P1.transpose(0, 2, 1))
                dP1 = -np.matmul(Bt, dP2)
                dB -= dP1
                dA += np.matmul(dB, Z0.transpose(0, 2, 1))
                dZ0 += np.matmul(A.transpose(0, 2, 1), dB)
                dZ = dZ0
            # initialization Z0 = A.T * s
            dA += dZ.transpose(0, 2, 1) * s[:, None, None]
            ds = np.einsum("hij,hij->h", dZ, At)
            dd = -(s ** 2) * ds
            j_star = absA.sum(axis=1).argmax(axis=1)
            i_star = absA.sum(axis=2).argmax(axis=1)
            sgn = np.sign(A)
            for h in range(H):
                if not ok[h]:
                    continue
                dA[h, :, j_star[h]] += dd[h] * n_inf[h] * sgn[h, :, j_star[h]]
                dA[h, i_star[h], :] += dd[h] * n_one[h] * sgn[h, i_star[h], :]
            for t, d in zip(mats, dA):
                _acc(t, d)
        tp._rec(outs, bwd)
    return list(outs)


def pinv_iterative(a: Tensor, iters: int = 6) -> Tensor:
    """Approximate Moore-Penrose pseudoinverse of one square matrix."""
    return heads_pinv([a], iters)[0]


# ---- landmarks ----


def segment_matrix(n: int, m: int) -> np.ndarray:
    """Averaging matrix (m, n): contiguous segments, remainder to the first ones."""
    base, extra = divmod(n, m)
    out = np.zeros((m, n))
    start = 0
    for i in range(m):
        size = base + (1 if i < extra else 0)
        out[i, start:start + size] = 1.0 / size
        start += size
    return out


def landmark_means(q: Tensor, m: int) -> Tensor:
    """Means of m contiguous row segments of q."""
    if m < 1:
        raise ConfigError("landmark count must be >= 1")
    if m > q.rows:
        warnings.warn(f"landmark count {m} clamped to sequence length {q.rows}")
        m = q.rows
    return heads_const_matmul(segment_matrix(q.rows, m), [q])[0]


# ---- class attention rows ----


def class_attention_row(q_cls: Tensor, k: Tensor) -> Tensor:
    """Exact attention row of the class query against class + patch keys.

    k has the class key at row 0; the class column is dropped from the
    softmaxed row without renormalizing, so the n returned entries sum to
    1 minus the class self-attention mass.
    """
    sc = 1.0 / np.sqrt(q_cls.cols)
    row = softmax_rows(matmul(q_cls, transpose(k), alpha=sc))
    return slice_cols(row, 1, k.rows)


def _class_rows(qs: Sequence[Tensor], ks: Sequence[Tensor], sc: float) -> AttentionTrace:
    """Fused per-head class attention rows plus their head average."""
    Q = _stack(qs)
    K = _stack(ks)
    H, n_seq, _ = Q.shape
    q0 = Q[:, :1, :]
    Sc = sc * np.matmul(q0, K.transpose(0, 2, 1))          # (H, 1, n_seq)
    Sc -= Sc.max(axis=2, keepdims=True)
    E = np.exp(Sc)
    P = E / E.sum(axis=2, keepdims=True)
    R = P[:, :, 1:]
    abar_arr = R.mean(axis=0)
    rows = list(_unstack(R))
    abar = Tensor(abar_arr)
    tp = _tape()
    if tp is not None:
        outs = tuple(rows) + (abar,)
        def bwd(*gs):
            gR = np.stack(gs[:-1]) + gs[-1][None] / H
            gP = np.concatenate([np.zeros((H, 1, 1)), gR], axis=2)
            gS = P * (gP - (gP * P).sum(axis=2, keepdims=True))
            dq0 = sc * np.matmul(gS, K)
            dK = sc * np.matmul(gS.transpose(0, 2, 1), q0)
            for h in range(H):
                dq = np.zeros_like(Q[h])
                dq[0] = dq0[h, 0]
                _acc(qs[h], dq, own=True)
                _acc(ks[h], dK[h])
        tp._rec(outs, bwd)
    return AttentionTrace(rows, abar)


# ---- multi-head attention ----


def _check_heads(x: Tensor, params: AttentionHeadParams, H: int | None) -> int:
    n_heads = params.n_heads
    if H is not None and H != n_heads:
        raise ConfigError(f"H={H} but params carry {n_heads} heads")
    if x.cols % n_heads != 0:
        raise ConfigError(f"n_heads {n_heads} must divide d_model {x.cols}")
    return n_heads


def exact_mha(x: Tensor, params: AttentionHeadParams, H: int | None = None):
    """Quadratic-cost softmax attention. Returns (output, per-head maps)."""
    H = _check_heads(x, params, H)
    dh = x.cols // H
    q = heads_project(x, params.w_q)
    k = heads_project(x, params.w_k)
    v = heads_project(x, params.w_v)
    maps = heads_softmax_rows(heads_matmul(q, k, transpose_b=True, alpha=1.0 / np.sqrt(dh)))
    out = matmul(heads_concat_cols(heads_matmul(maps, v)), params.w_o)
    return out, maps


def nystrom_attention(
    x: Tensor,
    params: AttentionHeadParams,
    H: int | None = None,
    cfg: NystromConfig | None = None,
):
    """Linear-cost attention via m landmark means per head.

    Output follows softmax(Q Kt'/sqrt(d)) pinv(softmax(Qt Kt'/sqrt(d)))
    softmax(Qt K'/sqrt(d)) V per head, with Qt, Kt the segment means of Q, K.
    The returned trace carries the exactly computed class attention rows
    (row 0 is treated as the class token).
    """
    cfg = cfg or NystromConfig()
    H = _check_heads(x, params, H)
    dh = x.cols // H
    sc = 1.0 / np.sqrt(cfg.d if cfg.d else dh)
    n = x.rows
    m = min(cfg.m_landmarks, n)
    q = heads_project(x, params.w_q)
    k = heads_project(x, params.w_k)
    v = heads_project(x, params.w_v)
    seg = segment_matrix(n, m)
    qt = heads_const_matmul(seg, q)
    kt = heads_const_matmul(seg, k)
    f1 = heads_softmax_rows(heads_matmul(q, kt, transpose_b=True, alpha=sc))
    f2 = heads_softmax_rows(heads_matmul(qt, kt, transpose_b=True, alpha=sc))
    f3 = heads_softmax_rows(heads_matmul(qt, k, transpose_b=True, alpha=sc))
    z = heads_pinv(f2, cfg.pinv_iters)
    o = heads_matmul(f1, heads_matmul(z, heads_matmul(f3, v)))
    out = matmul(heads_concat_cols(o), params.w_o)
    trace = _class_rows(q, k, sc)
    return out, trace


def cross_attention(x_cls: Tensor, x_other_patches: Tensor, params: CrossAttentionParams):
    """Single-query attention of a class token over itself plus foreign patches.

    Returns (output row, attention row); the attention row spans
    [own class token, patch tokens...] and sums to 1.
    """
    xp = concat_rows([x_cls, x_other_patches]) if x_other_patches.rows else x_cls
    q = matmul(x_cls, params.w_q)
    kk = matmul(xp, params.w_k)
    vv = matmul(xp, params.w_v)
    row = softmax_rows(matmul(q, transpose(kk), alpha=1.0 / np.sqrt(x_cls.cols)))
    return matmul(row, vv), row
