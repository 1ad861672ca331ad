"""Finite-difference verification of the hand-derived backward passes.

Each scope assembles a small fixture, runs one taped backward, then probes a
seeded sample of input and parameter coordinates with central differences.
A relative error above the tolerance fails the check and names the offending
parameter and coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    AttentionHeadParams,
    CrossAttentionParams,
    NystromConfig,
    cross_attention,
    exact_mha,
    nystrom_attention,
)
from .data import Bag
from .egt import EgtBranchParams, EncoderLayerParams, GtlParams, egt_forward, encoder_layer, gtl_layer
from .errors import ConfigError
from .model import MffmBlockParams, ModelConfig, build_model, cross_entropy_loss, megt_forward, mffm_block
from .numerics import RngState, Tape, Tensor, add, backward, sum_all

SCOPES = ("all", "attention", "egt", "gtl", "mffm", "model")
_TOL = 1e-4
_H = 1e-6


@dataclass
class CheckResult:
    scope: str
    name: str
    coords: int
    worst: float
    worst_param: str
    worst_coord: tuple[int, int]
    ok: bool
    corrupted: str | None = None


def _probe(scope, name, build, leaves, quota, rng, corrupt=None) -> CheckResult:
    """Compare taped gradients of build() against central differences."""
    for _, t in leaves:
        t.zero_grad()
    with Tape() as tape:
        loss = build()
        backward(tape, loss)
    grads = {}
    for leaf_name, t in leaves:
        grads[leaf_name] = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        t.zero_grad()
    corrupted = None
    if corrupt is not None and corrupt in grads:
        grads[corrupt] = grads[corrupt] + 0.01 * (1.0 + np.abs(grads[corrupt]))
        corrupted = corrupt

    coords = []
    for leaf_name, t in leaves:
        for i in range(t.rows):
            for j in range(t.cols):
                coords.append((leaf_name, t, i, j))
    take = min(quota, len(coords))
    picks = list(rng.choice(len(coords), size=take, replace=False))
    if corrupted is not None:
        # a corrupted gradient must not escape the sample
        forced = [k for k, c in enumerate(coords) if c[0] == corrupted]
        picks.extend(forced[:8])

    worst = 0.0
    worst_param = ""
    worst_coord = (0, 0)
    for idx in picks:
        leaf_name, t, i, j = coords[int(idx)]
        old = t.data[i, j]
        t.data[i, j] = old + _H
        up = float(build().data[0, 0])
        t.data[i, j] = old - _H
        down = float(build().data[0, 0])
        t.data[i, j] = old
        num = (up - down) / (2.0 * _H)
        ana = grads[leaf_name][i, j]
        rel = abs(ana - num) / max(abs(ana), abs(num), 1e-3)
        if rel > worst:
            worst = rel
            worst_param = leaf_name
            worst_coord = (i, j)
    return CheckResult(scope, name, len(picks), worst, worst_param, worst_coord,
                       worst <= _TOL, corrupted)


def _attention_checks(seed):
    rng = RngState(seed, ("gradcheck", "attention"))
    g = rng.generator()
    checks = []

    x1 = Tensor(g.normal(size=(4, 8)))
    p1 = AttentionHeadParams.build(8, 2, rng.child("mha"))
    checks.append((
        "exact_mha",
        lambda: sum_all(exact_mha(x1, p1, 2)[0]),
        [("x", x1), ("h0.wq", p1.w_q[0]), ("h1.wv", p1.w_v[1]), ("wo", p1.w_o)],
        16,
    ))

    x2 = Tensor(g.normal(size=(6, 8)))
    p2 = AttentionHeadParams.build(8, 2, rng.child("nys"))
    cfg = NystromConfig(m_landmarks=3, pinv_iters=6)

    def nys_loss():
        out, trace = nystrom_attention(x2, p2, 2, cfg)
        return add(sum_all(out), sum_all(trace.abar))

    checks.append((
        "nystrom",
        nys_loss,
        [("x", x2), ("h0.wk", p2.w_k[0]), ("wo", p2.w_o)],
        16,
    ))

    cls = Tensor(g.normal(size=(1, 8)))
    patches = Tensor(g.normal(size=(5, 8)))
    p3 = CrossAttentionParams.build(8, rng.child("ca"))

    def ca_loss():
        out, row = cross_attention(cls, patches, p3)
        return add(sum_all(out), sum_all(row))

    checks.append((
        "cross_attention",
        ca_loss,
        [("cls", cls), ("patches", patches), ("wq", p3.w_q), ("wv", p3.w_v)],
        16,
    ))
    return checks


def _egt_checks(seed):
    rng = RngState(seed, ("gradcheck", "egt"))
    g = rng.generator()
    checks = []

    t = Tensor(g.normal(size=(5, 6)))
    enc = EncoderLayerParams.build(6, 2, rng.child("enc"))
    cfg = NystromConfig(m_landmarks=3, pinv_iters=6)

    def enc_loss():
        out, trace = encoder_layer(t, enc, "nystrom", cfg)
        return add(sum_all(out), sum_all(trace.abar))

    checks.append((
        "encoder_layer",
        enc_loss,
        [("t", t), ("h0.wq", enc.attn.w_q[0]), ("w1", enc.w1), ("ln1.g", enc.ln1_g)],
        20,
    ))

    feats = Tensor(g.normal(size=(4, 5)))
    branch = EgtBranchParams.build(5, 6, 2, 3, rng.child("branch"))

    def branch_loss():
        out, _ = egt_forward(feats, branch, cfg)
        return sum_all(out)

    checks.append((
        "branch",
        branch_loss,
        [("features", feats), ("cls", branch.class_token),
         ("w_in", branch.w_in), ("enc2.w2", branch.encoder_2.w2)],
        20,
    ))
    return checks


def _gtl_checks(seed):
    rng = RngState(seed, ("gradcheck", "gtl"))
    g = rng.generator()
    x = Tensor(g.normal(size=(5, 6)))
    p = GtlParams.build(6, 2, rng.child("gtl"))
    leaves = [("x", x), ("wq", p.w_q), ("wk", p.w_k), ("wv1", p.w_v1),
              ("wv2", p.w_v2), ("wgcn0", p.w_gcn[0]), ("wgcn1", p.w_gcn[1]),
              ("wo1", p.w_o1), ("wo2", p.w_o2), ("wo3", p.w_o3)]
    return [("gtl_layer", lambda: sum_all(gtl_layer(x, p)), leaves, 32)]


def _mffm_checks(seed):
    rng = RngState(seed, ("gradcheck", "mffm"))
    g = rng.generator()
    cfg = ModelConfig(d_in=5, d_model=8, n_heads=2, m_landmarks=4,
                      l_low=1, l_high=1, k_mffm=1, seed=seed)
    p = MffmBlockParams.build(cfg, rng.child("block"))
    low = Tensor(g.normal(size=(3, 8)))
    high = Tensor(g.normal(size=(5, 8)))

    def loss():
        lo, hi, _ = mffm_block(low, high, p, "nystrom", cfg.nystrom())
        return add(sum_all(lo), sum_all(hi))

    leaves = [("low", low), ("high", high), ("ca_low.wq", p.ca_low.w_q),
              ("ca_high.wv", p.ca_high.w_v), ("low.enc0.w1", p.low_encoders[0].w1)]
    return [("mffm_block", loss, leaves, 40)]


def _model_checks(seed):
    cfg = ModelConfig(d_in=5, d_model=8, n_heads=2, k_keep=3, m_landmarks=4,
                      l_low=1, l_high=1, k_mffm=1, seed=seed)
    model = build_model(cfg)
    g = RngState(seed, ("gradcheck", "model")).generator()
    bag = Bag(Tensor(g.normal(size=(4, 5))), Tensor(g.normal(size=(8, 5))), 1, "gc")

    def loss():
        _, probs, _ = megt_forward(bag, model)
        return cross_entropy_loss(probs, [bag.label])

    return [("megt", loss, list(model.named_parameters()), 64)]


_BUILDERS = {
    "attention": _attention_checks,
    "egt": _egt_checks,
    "gtl": _gtl_checks,
    "mffm": _mffm_checks,
    "model": _model_checks,
}


def run_gradcheck(scope: str = "all", seed: int = 0, corrupt: str | None = None):
    """Run the checks for a scope. Returns (results, total_coords, passed)."""
    if scope not in SCOPES:
        raise ConfigError(f"unknown gradcheck scope {scope!r}")
    scopes = [s for s in SCOPES[1:]] if scope == "all" else [scope]
    rng = RngState(seed, ("gradcheck", "sample")).generator()
    results: list[CheckResult] = []
    matched = False
    for s in scopes:
        for name, build, leaves, quota in _BUILDERS[s](seed):
            if corrupt is not None and any(n == corrupt for n, _ in leaves):
                matched = True
            results.append(_probe(s, name, build, leaves, quota, rng, corrupt))
    if corrupt is not None and not matched:
        raise ConfigError(f"corrupt target {corrupt!r} matches no parameter in scope {scope!r}")
    total = sum(r.coords for r in results)
    passed = all(r.ok for r in results)
    return results, total, passed
