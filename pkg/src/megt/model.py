"""Model assembly, training, and persistence.

Three architectures share one config surface: the dual-resolution
fusion model (``megt``), a single-resolution branch classifier (``egt``),
and a mean-pooling linear baseline (``mean_pool``). All are trained by the
same Adam loop with early stopping on validation loss.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field

import numpy as np

from .attention import CrossAttentionParams, NystromConfig, cross_attention
from .data import Bag
from .egt import EgtBranchParams, EgtTrace, EncoderLayerParams, egt_forward, encoder_layer
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NumericError,
    ShapeError,
)
from .numerics import (
    RngState,
    Tape,
    Tensor,
    _acc,
    _tape,
    add,
    add_row,
    backward,
    concat_cols,
    concat_rows,
    init_params,
    matmul,
    relu,
    slice_rows,
    softmax_rows,
)

_ADAM_EPS = 1e-8

_ARCHES = ("megt", "egt", "mean_pool")
_RESOLUTIONS = ("low", "high", "both")


@dataclass
class ModelConfig:
    d_in: int = 64
    d_model: int = 128
    n_heads: int = 8
    k_keep: int = 128
    m_landmarks: int = 32
    pinv_iters: int = 6
    l_low: int = 1
    l_high: int = 2
    k_mffm: int = 2
    n_classes: int = 2
    mlp_ratio: int = 4
    enable_tpm: bool = True
    enable_gtl: bool = True
    lr: float = 1e-4
    weight_decay: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    max_epochs: int = 150
    patience: int = 30
    seed: int = 0
    arch: str = "megt"
    resolution: str = "both"

    def __post_init__(self):
        for name in ("d_in", "d_model", "n_heads", "k_keep", "m_landmarks",
                     "pinv_iters", "k_mffm", "mlp_ratio", "max_epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.l_low < 0 or self.l_high < 0:
            raise ConfigError("encoder layer counts must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be >= 0")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        if self.arch not in _ARCHES:
            raise ConfigError(f"unknown arch {self.arch!r}")
        if self.resolution not in _RESOLUTIONS:
            raise ConfigError(f"unknown resolution {self.resolution!r}")
        if self.arch == "megt" and self.resolution != "both":
            raise ConfigError("arch=megt requires resolution=both")
        if self.arch == "egt" and self.resolution == "both":
            raise ConfigError("arch=egt requires resolution=low or high")

    def nystrom(self) -> NystromConfig:
        return NystromConfig(m_landmarks=self.m_landmarks, pinv_iters=self.pinv_iters)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = coerce_value(key, types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv_text(text))


def parse_kv_text(text: str) -> dict:
    """Parse key=value lines; blank lines and '#' comments are ignored."""
    out = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"config line {ln}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce_value(key: str, typ, raw):
    """Turn a string (or already-typed value) into the config field's type."""
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    if isinstance(raw, str) and typ is not str:
        if typ is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ConfigError(f"config key {key!r}: expected true/false, got {raw!r}")
        try:
            return typ(raw)
        except ValueError:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r}") from None
    if typ is bool and not isinstance(raw, bool):
        raise ConfigError(f"config key {key!r}: expected a boolean")
    return typ(raw) if not isinstance(raw, typ) else raw


# ---- multi-scale fusion block ----


@dataclass
class MffmBlockParams:
    low_encoders: list[EncoderLayerParams]
    high_encoders: list[EncoderLayerParams]
    ca_low: CrossAttentionParams   # low class token queries high patches
    ca_high: CrossAttentionParams  # high class token queries low patches

    @classmethod
    def build(cls, cfg: ModelConfig, rng: RngState) -> "MffmBlockParams":
        return cls(
            low_encoders=[
                EncoderLayerParams.build(cfg.d_model, cfg.n_heads, rng.child(f"low{i}"),
                                         cfg.mlp_ratio)
                for i in range(cfg.l_low)
            ],
            high_encoders=[
                EncoderLayerParams.build(cfg.d_model, cfg.n_heads, rng.child(f"high{i}"),
                                         cfg.mlp_ratio)
                for i in range(cfg.l_high)
            ],
            ca_low=CrossAttentionParams.build(cfg.d_model, rng.child("ca_low")),
            ca_high=CrossAttentionParams.build(cfg.d_model, rng.child("ca_high")),
        )

    def named(self, prefix: str):
        for i, enc in enumerate(self.low_encoders):
            yield from enc.named(f"{prefix}.low.enc{i}")
        for i, enc in enumerate(self.high_encoders):
            yield from enc.named(f"{prefix}.high.enc{i}")
        yield from self.ca_low.named(f"{prefix}.ca_low")
        yield from self.ca_high.named(f"{prefix}.ca_high")


@dataclass
class MffmBlockTrace:
    low_row: Tensor   # low class token over [own class, high patches]
    high_row: Tensor  # high class token over [own class, low patches]


def mffm_block(
    low_tokens: Tensor,
    high_tokens: Tensor,
    params: MffmBlockParams,
    attention_kind: str = "nystrom",
    cfg: NystromConfig | None = None,
) -> tuple[Tensor, Tensor, MffmBlockTrace]:
    """Per-branch encoders, then a simultaneous class-token exchange.

    Both cross-attentions read the pre-exchange tokens; patch tokens pass
    through unchanged.
    """
    if low_tokens.rows < 1 or high_tokens.rows < 1:
        raise ContractError("each branch needs its class token at row 0")
    for enc in params.low_encoders:
        low_tokens, _ = encoder_layer(low_tokens, enc, attention_kind, cfg)
    for enc in params.high_encoders:
        high_tokens, _ = encoder_layer(high_tokens, enc, attention_kind, cfg)
    cls_low = slice_rows(low_tokens, 0, 1)
    patch_low = slice_rows(low_tokens, 1, low_tokens.rows)
    cls_high = slice_rows(high_tokens, 0, 1)
    patch_high = slice_rows(high_tokens, 1, high_tokens.rows)
    ca_low_out, row_low = cross_attention(cls_low, patch_high, params.ca_low)
    ca_high_out, row_high = cross_attention(cls_high, patch_low, params.ca_high)
    new_low = concat_rows([add(cls_low, ca_low_out), patch_low])
    new_high = concat_rows([add(cls_high, ca_high_out), patch_high])
    return new_low, new_high, MffmBlockTrace(row_low, row_high)


# ---- full model ----


@dataclass
class ModelTrace:
    low: EgtTrace | None
    high: EgtTrace | None
    blocks: list[MffmBlockTrace]


@dataclass
class MegtModel:
    config: ModelConfig
    low: EgtBranchParams | None = None
    high: EgtBranchParams | None = None
    mffm: list[MffmBlockParams] = field(default_factory=list)
    head_w1: Tensor | None = None
    head_b1: Tensor | None = None
    head_w2: Tensor | None = None
    head_b2: Tensor | None = None
    pool_w: Tensor | None = None
    pool_b: Tensor | None = None

    def named_parameters(self):
        if self.low is not None:
            yield from self.low.named("low")
        if self.high is not None:
            yield from self.high.named("high")
        for i, block in enumerate(self.mffm):
            yield from block.named(f"mffm{i}")
        if self.head_w1 is not None:
            yield "head.w1", self.head_w1
            yield "head.b1", self.head_b1
            yield "head.w2", self.head_w2
            yield "head.b2", self.head_b2
        if self.pool_w is not None:
            yield "pool.w", self.pool_w
            yield "pool.b", self.pool_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            t.data[:] = snap[name]


def build_model(config: ModelConfig) -> MegtModel:
    root = RngState(config.seed, ("model",))
    model = MegtModel(config=config)

    def branch(name: str) -> EgtBranchParams:
        return EgtBranchParams.build(
            config.d_in, config.d_model, config.n_heads, config.k_keep,
            root.child(name), config.mlp_ratio,
        )

    if config.arch == "mean_pool":
        width = config.d_in * (2 if config.resolution == "both" else 1)
        model.pool_w = init_params((width, config.n_classes), "xavier_uniform",
                                   root.child("pool"))
        model.pool_b = init_params((1, config.n_classes), "zeros", root)
        return model
    if config.arch == "megt":
        model.low = branch("low")
        model.high = branch("high")
        model.mffm = [
            MffmBlockParams.build(config, root.child(f"mffm{i}"))
            for i in range(config.k_mffm)
        ]
        head_in = 2 * config.d_model
    else:
        if config.resolution == "low":
            model.low = branch("low")
        else:
            model.high = branch("high")
        head_in = config.d_model
    model.head_w1 = init_params((head_in, config.d_model), "xavier_uniform",
                                root.child("head", "w1"))
    model.head_b1 = init_params((1, config.d_model), "zeros", root)
    model.head_w2 = init_params((config.d_model, config.n_classes), "xavier_uniform",
                                root.child("head", "w2"))
    model.head_b2 = init_params((1, config.n_classes), "zeros", root)
    return model


def _check_bag(model: MegtModel, bag: Bag) -> None:
    cfg = model.config
    if bag.low.cols != cfg.d_in:
        raise DataError(
            f"model expects feature width {cfg.d_in}, bag {bag.id!r} has {bag.low.cols}"
        )
    if cfg.resolution in ("low", "both") and bag.low.rows == 0:
        raise DataError(f"bag {bag.id!r}: low resolution is empty")
    if cfg.resolution in ("high", "both") and bag.high.rows == 0:
        raise DataError(f"bag {bag.id!r}: high resolution is empty")


def _head(model: MegtModel, z: Tensor) -> tuple[Tensor, Tensor]:
    hidden = relu(add_row(matmul(z, model.head_w1), model.head_b1))
    logits = add_row(matmul(hidden, model.head_w2), model.head_b2)
    return logits, softmax_rows(logits)


def megt_forward(
    bag: Bag, model: MegtModel, attention_kind: str = "nystrom"
) -> tuple[Tensor, Tensor, ModelTrace]:
    """Dual-branch forward: per-resolution branches, fusion blocks, MLP head."""
    cfg = model.config
    _check_bag(model, bag)
    ncfg = cfg.nystrom()
    low_t, tr_low = egt_forward(bag.low, model.low, ncfg, cfg.enable_tpm,
                                cfg.enable_gtl, attention_kind)
    high_t, tr_high = egt_forward(bag.high, model.high, ncfg, cfg.enable_tpm,
                                  cfg.enable_gtl, attention_kind)
    blocks: list[MffmBlockTrace] = []
    for params in model.mffm:
        low_t, high_t, btr = mffm_block(low_t, high_t, params, attention_kind, ncfg)
        blocks.append(btr)
    z = concat_cols([slice_rows(low_t, 0, 1), slice_rows(high_t, 0, 1)])
    logits, probs = _head(model, z)
    return logits, probs, ModelTrace(tr_low, tr_high, blocks)


def model_forward(
    model: MegtModel, bag: Bag, attention_kind: str = "nystrom"
) -> tuple[Tensor, Tensor, ModelTrace]:
    """Architecture dispatch returning (logits, probabilities, trace)."""
    cfg = model.config
    if cfg.arch == "megt":
        return megt_forward(bag, model, attention_kind)
    _check_bag(model, bag)
    if cfg.arch == "egt":
        feats = bag.low if cfg.resolution == "low" else bag.high
        branch = model.low if cfg.resolution == "low" else model.high
        tokens, trace = egt_forward(feats, branch, cfg.nystrom(), cfg.enable_tpm,
                                    cfg.enable_gtl, attention_kind)
        logits, probs = _head(model, slice_rows(tokens, 0, 1))
        low_tr = trace if cfg.resolution == "low" else None
        high_tr = trace if cfg.resolution == "high" else None
        return logits, probs, ModelTrace(low_tr, high_tr, [])
    parts = []
    if cfg.resolution in ("low", "both"):
        parts.append(bag.low.data.mean(axis=0))
    if cfg.resolution in ("high", "both"):
        parts.append(bag.high.data.mean(axis=0))
    pooled = Tensor(np.concatenate(parts)[None])
    logits = add_row(matmul(pooled, model.pool_w), model.pool_b)
    return logits, softmax_rows(logits), ModelTrace(None, None, [])


def mean_pool_baseline(bag: Bag, model: MegtModel) -> Tensor:
    """Probabilities of the mean-pooling linear baseline."""
    if model.config.arch != "mean_pool":
        raise ConfigError("model was not built with arch=mean_pool")
    _, probs, _ = model_forward(model, bag)
    return probs


# ---- loss ----


def cross_entropy_loss(probabilities: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true classes."""
    labels = [int(y) for y in labels]
    M, C = probabilities.shape
    if len(labels) != M:
        raise ShapeError(f"{len(labels)} labels for {M} probability rows")
    for y in labels:
        if not 0 <= y < C:
            raise DataError(f"label {y} outside [0, {C})")
    idx = np.arange(M)
    py = probabilities.data[idx, labels]
    with np.errstate(divide="ignore"):
        out = Tensor([[-np.log(py).mean()]])
    tp = _tape()
    if tp is not None:
        def bwd(g):
            d = np.zeros_like(probabilities.data)
            d[idx, labels] = -g[0, 0] / (M * py)
            _acc(probabilities, d, own=True)
        tp._rec((out,), bwd)
    return out


# ---- optimizer ----


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    scratch: list[tuple[np.ndarray, np.ndarray]]
    t: int = 0

    @classmethod
    def init(cls, params) -> "AdamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            scratch=[(np.empty_like(p.data), np.empty_like(p.data)) for p in params],
        )


def adam_step(params, grads, state: AdamState, config: ModelConfig) -> None:
    """Bias-corrected Adam with weight decay added to the gradient.

    Runs in place through per-parameter scratch buffers; a training step
    allocates nothing here.
    """
    b1, b2 = config.adam_beta1, config.adam_beta2
    wd = config.weight_decay
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    inv_sqrt_c2 = 1.0 / np.sqrt(1.0 - b2 ** state.t)
    step_scale = config.lr / c1
    for p, g, m, v, (buf, buf2) in zip(params, grads, state.m, state.v, state.scratch):
        if g is None:
            np.multiply(p.data, wd, out=buf)
        elif wd != 0.0:
            np.multiply(p.data, wd, out=buf)
            buf += g
        else:
            buf[:] = g
        np.multiply(buf, 1.0 - b1, out=buf2)
        m *= b1
        m += buf2
        np.square(buf, out=buf)
        buf *= 1.0 - b2
        v *= b2
        v += buf
        np.sqrt(v, out=buf)
        buf *= inv_sqrt_c2
        buf += _ADAM_EPS
        np.divide(m, buf, out=buf)
        buf *= step_scale
        p.data -= buf


# ---- training ----


def _bag_loss(model: MegtModel, bag: Bag) -> float:
    _, probs, _ = model_forward(model, bag)
    p = float(probs.data[0, bag.label])
    return -np.log(p) if p > 0.0 else float("inf")


def fit(model: MegtModel, train_bags, val_bags, config: ModelConfig):
    """Train with batch size 1, early stopping on validation loss.

    Training order reshuffles every epoch from the seeded stream. Stops when
    validation loss has not improved for max(1, patience) consecutive epochs
    or at max_epochs, then restores the best-epoch weights.
    """
    if not train_bags or not val_bags:
        raise ConfigError("training and validation splits must be non-empty")
    params = model.parameters()
    state = AdamState.init(params)
    shuffle_rng = RngState(config.seed, ("fit", "shuffle")).generator()
    stop_after = max(1, config.patience)
    best_val = np.inf
    best_snap = None
    stall = 0
    history: list[dict] = []
    for epoch in range(1, config.max_epochs + 1):
        order = shuffle_rng.permutation(len(train_bags))
        total = 0.0
        for i in order:
            bag = train_bags[int(i)]
            model.zero_grads()
            with Tape() as tape:
                _, probs, _ = model_forward(model, bag)
                loss = cross_entropy_loss(probs, [bag.label])
                lval = float(loss.data[0, 0])
                if not np.isfinite(lval):
                    raise NumericError(f"non-finite training loss at epoch {epoch}")
                backward(tape, loss)
            adam_step(params, [p.grad for p in params], state, config)
            total += lval
        val_losses = [_bag_loss(model, b) for b in val_bags]
        val_loss = float(np.mean(val_losses))
        if not np.isfinite(val_loss):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        history.append({
            "epoch": epoch,
            "train_loss": total / len(train_bags),
            "val_loss": val_loss,
        })
        if val_loss < best_val:
            best_val = val_loss
            best_snap = model.snapshot()
            stall = 0
        else:
            stall += 1
            if stall >= stop_after:
                break
    if best_snap is not None:
        model.restore(best_snap)
    return model, history


def predict_label(model: MegtModel, bag: Bag) -> tuple[int, np.ndarray]:
    _, probs, _ = model_forward(model, bag)
    row = probs.data[0]
    return int(np.argmax(row)), row


# ---- persistence ----

_CKPT_MAGIC = b"MEGM"
_CKPT_VERSION = 1


def save_model(model: MegtModel, path: str) -> None:
    """Write magic, version, config text block, then parameters in canonical order."""
    cfg_text = model.config.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<H", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(cfg_text)))
        fh.write(cfg_text)
        for name, t in model.named_parameters():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", t.rows, t.cols))
            fh.write(t.data.astype("<f8").tobytes())


def load_model(path: str) -> MegtModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4)) != _CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (version,) = struct.unpack("<H", take(2))
    if version != _CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = ModelConfig.from_text(bytes(take(cfg_len)).decode("utf-8"))
    model = build_model(config)
    for name, t in model.named_parameters():
        (name_len,) = struct.unpack("<H", take(2))
        found = bytes(take(name_len)).decode("utf-8")
        if found != name:
            raise CheckpointError(f"{path}: expected parameter {name!r}, found {found!r}")
        rows, cols = struct.unpack("<II", take(8))
        if (rows, cols) != t.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {rows}x{cols}, expected "
                f"{t.rows}x{t.cols}"
            )
        t.data[:] = np.frombuffer(take(rows * cols * 8), dtype="<f8").reshape(rows, cols)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return model
