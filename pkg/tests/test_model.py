"""Model config, fusion blocks, loss, optimizer, training loop, persistence."""

import numpy as np
import pytest
from _helpers import fd_check

from megt.data import Bag, SynthSpec, generate_synthetic
from megt.egt import egt_forward
from megt.errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    ShapeError,
)
from megt.model import (
    AdamState,
    MffmBlockParams,
    ModelConfig,
    adam_step,
    build_model,
    cross_entropy_loss,
    fit,
    load_model,
    mean_pool_baseline,
    megt_forward,
    mffm_block,
    model_forward,
    parse_kv_text,
    save_model,
)
from megt.numerics import RngState, Tape, Tensor, backward, init_params, sum_all


def tiny_config(**overrides):
    base = dict(d_in=5, d_model=8, n_heads=2, k_keep=3, m_landmarks=4,
                l_low=1, l_high=1, k_mffm=1, seed=0)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_bag(seed=0, n_low=4, children=2, d=5, label=1):
    rng = np.random.default_rng(seed)
    return Bag(
        Tensor(rng.normal(size=(n_low, d))),
        Tensor(rng.normal(size=(n_low * children, d))),
        label,
        f"tiny{seed}",
    )


class TestModelConfig:
    def test_defaults_valid(self):
        cfg = ModelConfig()
        assert cfg.d_model == 128 and cfg.arch == "megt"

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            ModelConfig(d_model=16, n_heads=3)

    def test_n_classes_floor(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_classes=1)

    def test_arch_resolution_pairing(self):
        with pytest.raises(ConfigError):
            ModelConfig(arch="megt", resolution="low")
        with pytest.raises(ConfigError):
            ModelConfig(arch="egt", resolution="both")
        ModelConfig(arch="egt", resolution="high")
        ModelConfig(arch="mean_pool", resolution="both")

    def test_unknown_arch(self):
        with pytest.raises(ConfigError):
            ModelConfig(arch="transformer")

    def test_text_round_trip(self):
        cfg = tiny_config(lr=3e-3, enable_gtl=False, arch="egt", resolution="low")
        assert ModelConfig.from_text(cfg.to_text()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError, match="unknown config key"):
            ModelConfig.from_text("d_model=16\nwarmup=5\n")

    def test_bad_bool(self):
        with pytest.raises(ConfigError):
            ModelConfig.from_text("enable_tpm=maybe\n")

    def test_comments_and_blank_lines_ignored(self):
        text = "# comment\n\nd_in=5\nd_model=8\nn_heads=2\n"
        cfg = ModelConfig.from_text(text)
        assert (cfg.d_in, cfg.d_model, cfg.n_heads) == (5, 8, 2)

    def test_malformed_line(self):
        with pytest.raises(ConfigError, match="key=value"):
            parse_kv_text("d_model 16\n")


class TestCrossEntropy:
    def test_certain_prediction_zero_loss(self):
        loss = cross_entropy_loss(Tensor([[1.0, 0.0]]), [0])
        assert loss.data[0, 0] == 0.0

    def test_uniform_three_class(self):
        loss = cross_entropy_loss(Tensor([[1 / 3, 1 / 3, 1 / 3]]), [2])
        np.testing.assert_allclose(loss.data[0, 0], np.log(3.0), rtol=1e-15)

    def test_two_row_mean(self):
        probs = Tensor([[0.5, 0.5], [0.25, 0.75]])
        loss = cross_entropy_loss(probs, [0, 0])
        np.testing.assert_allclose(loss.data[0, 0], 1.5 * np.log(2.0), rtol=1e-15)

    def test_label_out_of_range(self):
        with pytest.raises(DataError):
            cross_entropy_loss(Tensor([[0.5, 0.5]]), [2])

    def test_label_count_mismatch(self):
        with pytest.raises(ShapeError):
            cross_entropy_loss(Tensor([[0.5, 0.5]]), [0, 1])

    def test_gradient_formula(self):
        probs = Tensor([[0.2, 0.3, 0.5], [0.25, 0.25, 0.5]])
        with Tape() as tape:
            loss = cross_entropy_loss(probs, [2, 0])
            backward(tape, loss)
        expected = np.zeros((2, 3))
        expected[0, 2] = -1.0 / (2 * 0.5)
        expected[1, 0] = -1.0 / (2 * 0.25)
        np.testing.assert_allclose(probs.grad, expected, rtol=1e-15)
        probs.zero_grad()

    def test_gradient_finite_difference(self):
        probs = Tensor([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])
        fd_check(lambda: cross_entropy_loss(probs, [1, 0]), [probs])


def adam_oracle(p0, grads, lr, wd, b1, b2, eps=1e-8):
    p = p0.copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdam:
    def test_first_step_scalar(self):
        p = Tensor([[1.0]])
        cfg = tiny_config(lr=0.1, weight_decay=0.0)
        state = AdamState.init([p])
        adam_step([p], [np.array([[1.0]])], state, cfg)
        # bias-corrected first step moves by lr * g / (|g| + eps)
        np.testing.assert_allclose(p.data[0, 0], 1.0 - 0.1 / (1.0 + 1e-8), rtol=1e-15)

    def test_ten_steps_match_reference_loop(self):
        rng = np.random.default_rng(9)
        p0 = rng.normal(size=(3, 4))
        grads = [rng.normal(size=(3, 4)) for _ in range(10)]
        p = Tensor(p0.copy())
        cfg = tiny_config(lr=0.01, weight_decay=0.02)
        state = AdamState.init([p])
        for g in grads:
            adam_step([p], [g], state, cfg)
        np.testing.assert_allclose(
            p.data, adam_oracle(p0, grads, 0.01, 0.02, cfg.adam_beta1, cfg.adam_beta2),
            rtol=1e-12,
        )
        assert state.t == 10

    def test_missing_grad_without_decay_is_inert(self):
        p = Tensor([[2.0, -3.0]])
        before = p.data.copy()
        state = AdamState.init([p])
        adam_step([p], [None], state, tiny_config(lr=0.1, weight_decay=0.0))
        np.testing.assert_array_equal(p.data, before)

    def test_missing_grad_with_decay_shrinks(self):
        p = Tensor([[2.0, -3.0]])
        state = AdamState.init([p])
        adam_step([p], [None], state, tiny_config(lr=0.1, weight_decay=0.5))
        expected = adam_oracle(np.array([[2.0, -3.0]]), [np.zeros((1, 2))],
                               0.1, 0.5, 0.9, 0.999)
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)
        assert abs(p.data[0, 0]) < 2.0 and abs(p.data[0, 1]) < 3.0


class TestMffmBlock:
    def build(self, cfg, seed=1):
        return MffmBlockParams.build(cfg, RngState(seed, ("test", "mffm")))

    def zero_block(self, cfg):
        params = self.build(cfg)
        for _, t in params.named("b"):
            t.data[:] = 0.0
        return params

    def test_zeroed_block_is_identity(self):
        cfg = tiny_config()
        params = self.zero_block(cfg)
        rng = np.random.default_rng(2)
        low = Tensor(rng.normal(size=(4, 8)))
        high = Tensor(rng.normal(size=(7, 8)))
        new_low, new_high, _ = mffm_block(low, high, params, "exact")
        np.testing.assert_array_equal(new_low.data, low.data)
        np.testing.assert_array_equal(new_high.data, high.data)

    def test_patch_rows_pass_through_zero_encoders(self):
        # with zeroed encoders the exchange only rewrites row 0
        cfg = tiny_config()
        params = self.build(cfg)
        for enc in params.low_encoders + params.high_encoders:
            for _, t in enc.named("e"):
                t.data[:] = 0.0
        rng = np.random.default_rng(3)
        low = Tensor(rng.normal(size=(4, 8)))
        high = Tensor(rng.normal(size=(6, 8)))
        new_low, new_high, trace = mffm_block(low, high, params, "exact")
        np.testing.assert_array_equal(new_low.data[1:], low.data[1:])
        np.testing.assert_array_equal(new_high.data[1:], high.data[1:])
        assert not np.array_equal(new_low.data[0], low.data[0])
        # each class token attends over its own class token plus the other
        # branch's patches
        assert trace.low_row.shape == (1, 1 + 5)
        assert trace.high_row.shape == (1, 1 + 3)

    def test_exchange_reads_pre_exchange_tokens(self):
        # simultaneous update: swapping which branch is computed first cannot
        # matter because both queries read the original tokens
        cfg = tiny_config()
        params = self.build(cfg)
        for enc in params.low_encoders + params.high_encoders:
            for _, t in enc.named("e"):
                t.data[:] = 0.0
        rng = np.random.default_rng(4)
        low = Tensor(rng.normal(size=(3, 8)))
        high = Tensor(rng.normal(size=(5, 8)))
        new_low, new_high, _ = mffm_block(low, high, params, "exact")
        from megt.attention import cross_attention
        from megt.numerics import slice_rows

        ca_out, _ = cross_attention(
            slice_rows(Tensor(low.data.copy()), 0, 1),
            Tensor(high.data[1:].copy()),
            params.ca_low,
        )
        np.testing.assert_allclose(new_low.data[0], low.data[0] + ca_out.data[0],
                                   rtol=1e-12)

    def test_needs_class_rows(self):
        cfg = tiny_config()
        params = self.build(cfg)
        with pytest.raises(ContractError):
            mffm_block(Tensor(np.zeros((0, 8))), Tensor(np.ones((2, 8))), params)

    def test_gradients(self):
        cfg = tiny_config(d_model=6, n_heads=2, m_landmarks=4)
        params = self.build(cfg, seed=5)
        rng = np.random.default_rng(6)
        low = Tensor(rng.normal(size=(3, 6)))
        high = Tensor(rng.normal(size=(4, 6)))

        def build():
            from megt.numerics import add
            lo, hi, _ = mffm_block(low, high, params, "nystrom", cfg.nystrom())
            return add(sum_all(lo), sum_all(hi))

        leaves = [low, high, params.ca_low.w_q, params.ca_low.w_v,
                  params.low_encoders[0].w1, params.high_encoders[0].ln1_g]
        fd_check(build, leaves)


class TestForward:
    def test_probabilities_normalized_and_positive(self):
        cfg = tiny_config()
        model = build_model(cfg)
        _, probs, _ = megt_forward(tiny_bag(), model)
        assert probs.shape == (1, 2)
        assert probs.data.min() > 0.0
        np.testing.assert_allclose(probs.data.sum(), 1.0, rtol=1e-12)

    def test_high_instance_permutation_invariance_exact(self):
        cfg = tiny_config()
        model = build_model(cfg)
        bag = tiny_bag(seed=3)
        _, p1, _ = megt_forward(bag, model, attention_kind="exact")
        rng = np.random.default_rng(8)
        perm = rng.permutation(bag.high.rows)
        shuffled = Bag(Tensor(bag.low.data.copy()),
                       Tensor(bag.high.data[perm].copy()), bag.label, "p")
        _, p2, _ = megt_forward(shuffled, model, attention_kind="exact")
        np.testing.assert_allclose(p2.data, p1.data, rtol=0, atol=1e-9)

    def test_width_mismatch_names_both_widths(self):
        model = build_model(tiny_config())
        with pytest.raises(DataError, match="5.*7|7.*5"):
            model_forward(model, tiny_bag(d=7))

    def test_single_branch_arch_matches_manual_assembly(self):
        cfg = tiny_config(arch="egt", resolution="high")
        model = build_model(cfg)
        bag = tiny_bag(seed=4)
        _, probs, _ = model_forward(model, bag)
        tokens, _ = egt_forward(bag.high, model.high, cfg.nystrom())
        z = tokens.data[0:1]
        h = np.maximum(z @ model.head_w1.data + model.head_b1.data, 0.0)
        logits = h @ model.head_w2.data + model.head_b2.data
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(probs.data, e / e.sum(), rtol=1e-12)

    def test_mean_pool_matches_hand_computation(self):
        cfg = tiny_config(arch="mean_pool", resolution="both")
        model = build_model(cfg)
        bag = tiny_bag(seed=5)
        probs = mean_pool_baseline(bag, model)
        pooled = np.concatenate([bag.low.data.mean(0), bag.high.data.mean(0)])[None]
        logits = pooled @ model.pool_w.data + model.pool_b.data
        e = np.exp(logits - logits.max())
        np.testing.assert_allclose(probs.data, e / e.sum(), rtol=1e-12)

    def test_mean_pool_permutation_invariant(self):
        cfg = tiny_config(arch="mean_pool", resolution="both")
        model = build_model(cfg)
        bag = tiny_bag(seed=6, n_low=6)
        p1 = mean_pool_baseline(bag, model)
        rng = np.random.default_rng(10)
        shuffled = Bag(Tensor(bag.low.data[rng.permutation(6)].copy()),
                       Tensor(bag.high.data[rng.permutation(12)].copy()),
                       bag.label, "s")
        p2 = mean_pool_baseline(shuffled, model)
        np.testing.assert_allclose(p2.data, p1.data, rtol=0, atol=1e-12)

    def test_mean_pool_guard(self):
        model = build_model(tiny_config())
        with pytest.raises(ConfigError):
            mean_pool_baseline(tiny_bag(), model)

    def test_build_is_deterministic(self):
        cfg = tiny_config(seed=42)
        a = dict(build_model(cfg).named_parameters())
        b = dict(build_model(cfg).named_parameters())
        assert a.keys() == b.keys()
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_head_widths_track_arch(self):
        m_dual = build_model(tiny_config())
        assert m_dual.head_w1.shape == (16, 8)
        m_single = build_model(tiny_config(arch="egt", resolution="low"))
        assert m_single.head_w1.shape == (8, 8)


def witness_bags(n, d=5, seed=0):
    spec = SynthSpec(task="witness", bags=n, n_low_min=3, n_low_max=5,
                     children_per_low=2, d=d, seed=seed)
    return generate_synthetic(spec)


class TestFit:
    def test_empty_split_rejected(self):
        cfg = tiny_config()
        model = build_model(cfg)
        bags = witness_bags(4)
        with pytest.raises(ConfigError):
            fit(model, [], bags, cfg)
        with pytest.raises(ConfigError):
            fit(model, bags, [], cfg)

    def test_zero_lr_keeps_weights_and_history_flat(self):
        cfg = tiny_config(lr=0.0, max_epochs=3, patience=30)
        model = build_model(cfg)
        before = model.snapshot()
        bags = witness_bags(6)
        _, history = fit(model, bags[:4], bags[4:], cfg)
        assert len(history) == 3
        assert history[0]["train_loss"] == history[2]["train_loss"]
        assert history[0]["val_loss"] == history[1]["val_loss"] == history[2]["val_loss"]
        for name, t in model.named_parameters():
            np.testing.assert_array_equal(t.data, before[name])

    def test_patience_zero_stops_after_first_stall(self):
        cfg = tiny_config(lr=0.0, max_epochs=10, patience=0)
        model = build_model(cfg)
        bags = witness_bags(6)
        _, history = fit(model, bags[:4], bags[4:], cfg)
        assert len(history) == 2

    def test_loss_decreases_on_learnable_task(self):
        cfg = tiny_config(lr=3e-3, max_epochs=8, patience=8, seed=1)
        model = build_model(cfg)
        bags = witness_bags(16, seed=2)
        _, history = fit(model, bags[:12], bags[12:], cfg)
        assert history[-1]["train_loss"] < history[0]["train_loss"]

    def test_training_is_bitwise_deterministic(self):
        cfg = tiny_config(lr=1e-3, max_epochs=3, patience=30, seed=5)
        bags = witness_bags(8, seed=3)
        m1, h1 = fit(build_model(cfg), bags[:6], bags[6:], cfg)
        m2, h2 = fit(build_model(cfg), bags[:6], bags[6:], cfg)
        assert h1 == h2
        for (n1, t1), (n2, t2) in zip(m1.named_parameters(), m2.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_best_epoch_weights_restored(self):
        cfg = tiny_config(lr=3e-3, max_epochs=6, patience=2, seed=7)
        model = build_model(cfg)
        bags = witness_bags(10, seed=4)
        model, history = fit(model, bags[:7], bags[7:], cfg)
        best = min(h["val_loss"] for h in history)
        val_losses = []
        for b in bags[7:]:
            _, probs, _ = model_forward(model, b)
            val_losses.append(-np.log(probs.data[0, b.label]))
        np.testing.assert_allclose(np.mean(val_losses), best, rtol=1e-12)


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        cfg = tiny_config(seed=9, enable_gtl=False)
        model = build_model(cfg)
        path = str(tmp_path / "model.megm")
        save_model(model, path)
        back = load_model(path)
        assert back.config == cfg
        for (n1, t1), (n2, t2) in zip(model.named_parameters(), back.named_parameters()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.megm"
        save_model(build_model(tiny_config()), str(path))
        blob = bytearray(path.read_bytes())
        blob[0] = ord("X")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_model(str(path))

    def test_unsupported_version(self, tmp_path):
        path = tmp_path / "m.megm"
        save_model(build_model(tiny_config()), str(path))
        blob = bytearray(path.read_bytes())
        blob[4:6] = (9).to_bytes(2, "little")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="version"):
            load_model(str(path))

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.megm"
        save_model(build_model(tiny_config()), str(path))
        blob = path.read_bytes()
        path.write_bytes(blob[:len(blob) - 5])
        with pytest.raises(CheckpointError, match="truncated"):
            load_model(str(path))

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "m.megm"
        save_model(build_model(tiny_config()), str(path))
        path.write_bytes(path.read_bytes() + b"!!")
        with pytest.raises(CheckpointError, match="trailing"):
            load_model(str(path))

    def test_tampered_parameter_name(self, tmp_path):
        path = tmp_path / "m.megm"
        model = build_model(tiny_config())
        save_model(model, str(path))
        cfg_len = len(model.config.to_text().encode())
        name_off = 4 + 2 + 4 + cfg_len + 2  # first byte of the first name
        blob = bytearray(path.read_bytes())
        blob[name_off] = ord("z")
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="expected parameter"):
            load_model(str(path))


class TestEndToEndGradients:
    def test_sampled_parameters_pass_finite_differences(self):
        cfg = tiny_config()
        model = build_model(cfg)
        bag = tiny_bag(seed=11)

        def build():
            _, probs, _ = megt_forward(bag, model)
            return cross_entropy_loss(probs, [bag.label])

        leaves = [
            model.low.class_token,
            model.high.class_token,
            model.head_b1,
            model.head_w2,
            model.mffm[0].ca_low.w_v,
            model.low.gtl.w_gcn[0],
        ]
        fd_check(build, leaves)
