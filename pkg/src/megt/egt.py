"""Efficient Graph-Transformer branch.

Pipeline per branch: input projection, class token, pre-norm encoder layer,
class-attention token pruning, a graph-transformer layer whose attention
scores double as a GCN adjacency, and a second encoder layer. The class
token bypasses the graph-transformer layer and is re-prepended unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterator, Sequence

import numpy as np

from .attention import (
    AttentionHeadParams,
    AttentionTrace,
    NystromConfig,
    exact_mha,
    nystrom_attention,
)
from .errors import ConfigError, DataError, ShapeError
from .numerics import (
    RngState,
    Tensor,
    _acc,
    _stack,
    _unstack,
    _tape,
    add,
    add_row,
    concat_cols,
    concat_rows,
    gather_cols,
    gather_rows,
    heads_add_identity,
    heads_concat_cols,
    heads_matmul,
    heads_relu,
    heads_softmax_rows,
    init_params,
    layer_norm_rows,
    matmul,
    relu,
    scale,
    slice_cols,
    slice_rows,
    split_cols_heads,
)


def _ones_row(d: int) -> Tensor:
    return Tensor(np.ones((1, d)))


# ---- encoder layer ----


@dataclass
class EncoderLayerParams:
    attn: AttentionHeadParams
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def build(cls, d_model: int, n_heads: int, rng: RngState, mlp_ratio: int = 4):
        hidden = mlp_ratio * d_model
        return cls(
            attn=AttentionHeadParams.build(d_model, n_heads, rng.child("attn")),
            ln1_g=_ones_row(d_model),
            ln1_b=init_params((1, d_model), "zeros", rng),
            ln2_g=_ones_row(d_model),
            ln2_b=init_params((1, d_model), "zeros", rng),
            w1=init_params((d_model, hidden), "xavier_uniform", rng.child("w1")),
            b1=init_params((1, hidden), "zeros", rng),
            w2=init_params((hidden, d_model), "xavier_uniform", rng.child("w2")),
            b2=init_params((1, d_model), "zeros", rng),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.ln1.g", self.ln1_g
        yield f"{prefix}.ln1.b", self.ln1_b
        yield from self.attn.named(f"{prefix}.attn")
        yield f"{prefix}.ln2.g", self.ln2_g
        yield f"{prefix}.ln2.b", self.ln2_b
        yield f"{prefix}.mlp.w1", self.w1
        yield f"{prefix}.mlp.b1", self.b1
        yield f"{prefix}.mlp.w2", self.w2
        yield f"{prefix}.mlp.b2", self.b2


def encoder_layer(
    t_prev: Tensor,
    params: EncoderLayerParams,
    attention_kind: str = "nystrom",
    cfg: NystromConfig | None = None,
) -> tuple[Tensor, AttentionTrace]:
    """Pre-norm residual layer: T' = MSA(LN(T)) + T, then T'' = MLP(LN(T')) + T'."""
    ln1 = layer_norm_rows(t_prev, params.ln1_g, params.ln1_b)
    if attention_kind == "nystrom":
        attn_out, trace = nystrom_attention(ln1, params.attn, cfg=cfg)
    elif attention_kind == "exact":
        attn_out, maps = exact_mha(ln1, params.attn)
        n_seq = t_prev.rows
        rows = [slice_cols(slice_rows(m, 0, 1), 1, n_seq) for m in maps]
        trace = AttentionTrace(rows, head_average(rows))
    else:
        raise ConfigError(f"unknown attention kind {attention_kind!r}")
    t_mid = add(attn_out, t_prev)
    ln2 = layer_norm_rows(t_mid, params.ln2_g, params.ln2_b)
    hidden = relu(add_row(matmul(ln2, params.w1), params.b1))
    out = add(add_row(matmul(hidden, params.w2), params.b2), t_mid)
    return out, trace


def head_average(rows: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of the per-head class attention rows."""
    n = rows[0].cols
    for r in rows:
        if r.cols != n:
            raise ShapeError(f"head rows disagree in length: {r.cols} vs {n}")
    if len(rows) == 1:
        return rows[0]
    return scale(reduce(add, rows), 1.0 / len(rows))


# ---- token pruning ----


@dataclass
class PruneResult:
    kept_indices: list[int]
    kept_tokens: Tensor
    fusion_token: Tensor | None
    abar: Tensor


def prune_tokens(patches: Tensor, abar: Tensor, k: int) -> PruneResult:
    """Keep the k highest-scoring tokens in original order; compress the rest.

    Ties break toward the lower original index. The fusion token is the
    score-weighted sum of the discarded tokens with the weights used as-is.
    """
    if k < 1:
        raise ConfigError("keep count must be >= 1")
    n = patches.rows
    if abar.shape != (1, n):
        raise ShapeError(f"scores must be (1, {n}), got {abar.shape}")
    if k >= n:
        return PruneResult(list(range(n)), patches, None, abar)
    order = np.argsort(-abar.data[0], kind="stable")
    kept = np.sort(order[:k])
    dropped = np.sort(order[k:])
    kept_tokens = gather_rows(patches, kept)
    fusion = matmul(gather_cols(abar, dropped), gather_rows(patches, dropped))
    return PruneResult([int(i) for i in kept], kept_tokens, fusion, abar)


# ---- graph-transformer layer ----


@dataclass
class GtlParams:
    w_q: Tensor
    w_k: Tensor
    w_v1: Tensor
    w_v2: Tensor
    w_gcn: list[Tensor]
    w_o1: Tensor
    w_o2: Tensor
    w_o3: Tensor

    @classmethod
    def build(cls, d_model: int, n_heads: int, rng: RngState) -> "GtlParams":
        if d_model % n_heads != 0:
            raise ConfigError(f"n_heads {n_heads} must divide d_model {d_model}")
        dh = d_model // n_heads
        def mk(name, shape):
            return init_params(shape, "xavier_uniform", rng.child(name))
        return cls(
            w_q=mk("wq", (d_model, d_model)),
            w_k=mk("wk", (d_model, d_model)),
            w_v1=mk("wv1", (d_model, d_model)),
            w_v2=mk("wv2", (d_model, d_model)),
            w_gcn=[mk(f"gcn{h}", (dh, dh)) for h in range(n_heads)],
            w_o1=mk("wo1", (d_model, d_model)),
            w_o2=mk("wo2", (d_model, d_model)),
            w_o3=mk("wo3", (2 * d_model, d_model)),
        )

    @property
    def n_heads(self) -> int:
        return len(self.w_gcn)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.wq", self.w_q
        yield f"{prefix}.wk", self.w_k
        yield f"{prefix}.wv1", self.w_v1
        yield f"{prefix}.wv2", self.w_v2
        for h, w in enumerate(self.w_gcn):
            yield f"{prefix}.gcn.h{h}.w", w
        yield f"{prefix}.wo1", self.w_o1
        yield f"{prefix}.wo2", self.w_o2
        yield f"{prefix}.wo3", self.w_o3


def heads_gcn_norm(adj: Sequence[Tensor]) -> list[Tensor]:
    """Symmetric degree normalization D^{-1/2} A D^{-1/2} per head.

    Degrees are the row sums of A; A must have strictly positive row sums.
    """
    X = _stack(adj)
    d = X.sum(axis=2)
    if (d <= 0.0).any():
        raise DataError("adjacency has a non-positive degree")
    r = 1.0 / np.sqrt(d)
    Y = X * r[:, :, None] * r[:, None, :]
    outs = _unstack(Y)
    tp = _tape()
    if tp is not None:
        def bwd(*gs):
            G = np.stack(gs)
            GA = G * X
            srow = np.einsum("hij,hj->hi", GA, r)
            scol = np.einsum("hij,hi->hj", GA, r)
            dd = -0.5 * d ** (-1.5) * (srow + scol)
            dX = G * r[:, :, None] * r[:, None, :] + dd[:, :, None]
            for t, g in zip(adj, dX):
                _acc(t, g)
        tp._rec(outs, bwd)
    return list(outs)


def gtl_scores(x_patch: Tensor, params: GtlParams, H: int | None = None) -> list[Tensor]:
    """Raw per-head scores A_i = Q_i K_i^T / sqrt(d/H) from the four-projection layer."""
    H = H or params.n_heads
    if x_patch.cols % H != 0:
        raise ConfigError(f"n_heads {H} must divide width {x_patch.cols}")
    dh = x_patch.cols // H
    q = split_cols_heads(matmul(x_patch, params.w_q), H)
    k = split_cols_heads(matmul(x_patch, params.w_k), H)
    return heads_matmul(q, k, transpose_b=True, alpha=1.0 / np.sqrt(dh))


def gtl_transformer_branch(
    a_heads: Sequence[Tensor], v1_heads: Sequence[Tensor], w_o1: Tensor
) -> Tensor:
    """softmax(A_i) V1_i per head, heads concatenated, projected by w_o1."""
    mixed = heads_matmul(heads_softmax_rows(a_heads), v1_heads)
    return matmul(heads_concat_cols(mixed), w_o1)


def gtl_gcn_branch(
    a_heads: Sequence[Tensor],
    v2_heads: Sequence[Tensor],
    gcn_weights: Sequence[Tensor],
    w_o2: Tensor,
) -> Tensor:
    """One GCN hop per head over the self-connected softmax adjacency."""
    adj = heads_add_identity(heads_softmax_rows(a_heads))
    norm = heads_gcn_norm(adj)
    propagated = heads_matmul(norm, heads_matmul(v2_heads, gcn_weights))
    return matmul(heads_concat_cols(heads_relu(propagated)), w_o2)


def gtl_fuse(v1_out: Tensor, v2_out: Tensor, w_o3: Tensor) -> Tensor:
    """Column-concatenate the two branch outputs and project."""
    return matmul(concat_cols([v1_out, v2_out]), w_o3)


def gtl_layer(x_patch: Tensor, params: GtlParams) -> Tensor:
    """Full graph-transformer layer over patch tokens (no class token)."""
    H = params.n_heads
    a_heads = gtl_scores(x_patch, params, H)
    v1 = split_cols_heads(matmul(x_patch, params.w_v1), H)
    v2 = split_cols_heads(matmul(x_patch, params.w_v2), H)
    t_out = gtl_transformer_branch(a_heads, v1, params.w_o1)
    g_out = gtl_gcn_branch(a_heads, v2, params.w_gcn, params.w_o2)
    return gtl_fuse(t_out, g_out, params.w_o3)


# ---- assembled branch ----


@dataclass
class EgtBranchParams:
    class_token: Tensor
    w_in: Tensor
    encoder_1: EncoderLayerParams
    encoder_2: EncoderLayerParams
    gtl: GtlParams
    k_keep: int

    def __post_init__(self):
        if self.k_keep < 1:
            raise ConfigError("k_keep must be >= 1")

    @classmethod
    def build(
        cls,
        d_in: int,
        d_model: int,
        n_heads: int,
        k_keep: int,
        rng: RngState,
        mlp_ratio: int = 4,
    ) -> "EgtBranchParams":
        return cls(
            class_token=init_params((1, d_model), "normal", rng.child("cls")),
            w_in=init_params((d_in, d_model), "xavier_uniform", rng.child("w_in")),
            encoder_1=EncoderLayerParams.build(d_model, n_heads, rng.child("enc1"), mlp_ratio),
            encoder_2=EncoderLayerParams.build(d_model, n_heads, rng.child("enc2"), mlp_ratio),
            gtl=GtlParams.build(d_model, n_heads, rng.child("gtl")),
            k_keep=k_keep,
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.cls", self.class_token
        yield f"{prefix}.w_in", self.w_in
        yield from self.encoder_1.named(f"{prefix}.enc1")
        yield from self.encoder_2.named(f"{prefix}.enc2")
        yield from self.gtl.named(f"{prefix}.gtl")


@dataclass
class EgtTrace:
    encoder_1: AttentionTrace
    prune: PruneResult | None
    encoder_2: AttentionTrace


def egt_forward(
    features: Tensor,
    branch: EgtBranchParams,
    cfg: NystromConfig | None = None,
    enable_tpm: bool = True,
    enable_gtl: bool = True,
    attention_kind: str = "nystrom",
) -> tuple[Tensor, EgtTrace]:
    """Run one branch over a bag's feature rows. Row 0 of the output is the class token."""
    n = features.rows
    if n == 0:
        raise DataError("cannot run on an empty bag")
    x = matmul(features, branch.w_in)
    t0 = concat_rows([branch.class_token, x])
    t1, trace1 = encoder_layer(t0, branch.encoder_1, attention_kind, cfg)
    cls_tok = slice_rows(t1, 0, 1)
    patches = slice_rows(t1, 1, n + 1)
    prune = None
    if enable_tpm:
        prune = prune_tokens(patches, trace1.abar, branch.k_keep)
        if prune.fusion_token is not None:
            patches = concat_rows([prune.kept_tokens, prune.fusion_token])
        else:
            patches = prune.kept_tokens
    if enable_gtl:
        patches = gtl_layer(patches, branch.gtl)
    t2 = concat_rows([cls_tok, patches])
    out, trace2 = encoder_layer(t2, branch.encoder_2, attention_kind, cfg)
    return out, EgtTrace(trace1, prune, trace2)
