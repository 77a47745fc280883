import numpy as np
import pytest

from monorecon import autodiff as dn
from monorecon.lora import (
    ConvNeck,
    GatedLoraLayer,
    Phase,
    SOFTPLUS_HALF_BIAS,
    ToyBackbone,
    TrainSchedule,
    bind_trainable,
    gate_from_input,
    load_checkpoint,
    save_checkpoint,
)
from monorecon.optim import AdamW


def fresh_layer(d=2, k=2, rank=2, seed=0):
    return GatedLoraLayer(d, k, rank, np.random.default_rng(seed))


class TestLoraForward:
    def test_zero_init_second_factor_gives_base_only(self):
        layer = fresh_layer(4, 4, rank=2, seed=1)
        x = np.array([0.5, -1.0, 2.0, 0.25])
        out = layer.lora_forward(x)
        assert np.array_equal(out.reshape(-1), layer.params["w0"] @ x)

    def test_identity_composition(self):
        layer = fresh_layer()
        layer.params["w0"][:] = 0.0
        layer.params["A_d"][:] = np.eye(2)
        layer.params["B_d"][:] = np.eye(2)
        out = layer.lora_forward(np.array([1.0, 2.0]))
        assert np.array_equal(out.reshape(-1), [1.0, 2.0])

    def test_hand_matrix_product(self):
        layer = GatedLoraLayer(2, 2, 1, np.random.default_rng(0))
        layer.params["w0"][:] = 0.0
        layer.params["A_d"][:] = np.array([[1.0, 1.0]])
        layer.params["B_d"][:] = np.array([[2.0], [0.0]])
        out = layer.lora_forward(np.array([1.0, 2.0]))
        assert np.array_equal(out.reshape(-1), [6.0, 0.0])

    def test_shape_mismatch_rejected(self):
        layer = fresh_layer()
        with pytest.raises(ValueError):
            layer.lora_forward(np.array([1.0, 2.0, 3.0]))


class TestGdvForward:
    def test_unit_vectors_reduce_to_plain_lora(self):
        layer = fresh_layer(4, 4, rank=2, seed=2)
        rng = np.random.default_rng(3)
        layer.params["B_d"][:] = rng.normal(size=(4, 2))
        x = rng.normal(size=4)
        gated = layer.gated_forward(gate_from_input(3), x)
        plain = layer.lora_forward(x, branch="d")
        assert np.array_equal(dn.value(gated), dn.value(plain))

    def test_gate_exclusivity_bit_exact(self):
        layer = fresh_layer(4, 4, rank=2, seed=4)
        rng = np.random.default_rng(5)
        for name in ("A_d", "B_d", "A_m", "B_m"):
            layer.params[name][:] = rng.normal(size=layer.params[name].shape)
        x = rng.normal(size=4)
        gate = gate_from_input(3)  # depth branch active
        base = dn.value(layer.gated_forward(gate, x))
        for name in ("A_m", "B_m", "U_m", "V_m"):
            layer.params[name][:] += rng.normal(size=layer.params[name].shape)
            assert np.array_equal(dn.value(layer.gated_forward(gate, x)), base), name

    def test_diagonal_scaled_identity_chain(self):
        layer = fresh_layer(2, 2, 2, seed=6)
        layer.params["w0"][:] = 0.0
        layer.params["A_d"][:] = np.eye(2)
        layer.params["B_d"][:] = np.eye(2)
        layer.params["U_d"][:] = [2.0, 3.0]
        layer.params["V_d"][:] = [1.0, -1.0]
        out = layer.gated_forward(gate_from_input(3), np.array([1.0, 1.0]))
        assert np.array_equal(dn.value(out).reshape(-1), [2.0, -3.0])

    def test_zero_b_neutrality_for_both_gates(self):
        layer = fresh_layer(4, 4, rank=2, seed=7)
        x = np.random.default_rng(8).normal(size=4)
        expected = layer.params["w0"] @ x
        for channels in (3, 6):
            out = dn.value(layer.gated_forward(gate_from_input(channels), x))
            assert np.array_equal(out.reshape(-1), expected)

    def test_gate_exclusivity_gradients_exactly_zero(self):
        layer = fresh_layer(3, 3, rank=2, seed=9)
        rng = np.random.default_rng(10)
        layer.params["B_d"][:] = rng.normal(size=(3, 2))
        layer.params["B_m"][:] = rng.normal(size=(3, 2))
        x = rng.normal(size=3)
        tape = dn.Tape()
        bound = {name: tape.leaf(arr, trainable=True) for name, arr in layer.params.items()
                 if name != "w0"}
        out = dn.asum(layer.gated_forward(gate_from_input(3), x, bound))
        grads = tape.backward(out)
        for name in ("A_m", "B_m", "U_m", "V_m"):
            g = grads[bound[name]]
            assert np.count_nonzero(g) == 0, name
        assert np.count_nonzero(grads[bound["A_d"]]) > 0


class TestGate:
    def test_channel_routing(self):
        assert gate_from_input(3).depth_active
        assert not gate_from_input(6).depth_active

    def test_other_channel_counts_rejected(self):
        for channels in (1, 2, 4, 5, 7):
            with pytest.raises(ValueError):
                gate_from_input(channels)


class TestSchedule:
    def test_phase_boundary(self):
        s = TrainSchedule()
        assert s.warmup_steps == 5000
        assert s.phase == Phase.WARM_UP
        s.step = 4999
        assert s.phase == Phase.WARM_UP
        s.step = 5000
        assert s.phase == Phase.VECTOR_TUNE

    def test_trainable_sets_per_phase(self):
        layer = fresh_layer()
        warm = set(layer.trainable_suffixes(Phase.WARM_UP))
        tune = set(layer.trainable_suffixes(Phase.VECTOR_TUNE))
        assert warm == {"A_d", "B_d", "A_m", "B_m"}
        assert tune == {"U_d", "V_d", "U_m", "V_m"}

    def test_frozen_set_never_updated_across_a_step(self):
        backbone = ToyBackbone(width=16, height=16, patch=8, channels=8, n_blocks=1,
                               rank=2, seed=11)
        rng = np.random.default_rng(12)
        image = rng.uniform(0.2, 0.8, size=16 * 16 * 3)
        for phase in (Phase.WARM_UP, Phase.VECTOR_TUNE):
            train = backbone.lora_param_names(phase)
            frozen = [n for n in backbone.lora_param_names(
                Phase.VECTOR_TUNE if phase == Phase.WARM_UP else Phase.WARM_UP)]
            before = {n: backbone.params[n].copy() for n in frozen}
            tape = dn.Tape()
            bound = bind_trainable(tape, backbone, train)
            loss = dn.mean(backbone.forward_depth(image, bound))
            grads = tape.backward(loss)
            named = {n: grads[v] for n, v in bound.items() if v in grads}
            AdamW(lr=1e-2).step(backbone.params, named)
            for n in frozen:
                assert np.array_equal(backbone.params[n], before[n]), n

    def test_trainable_parameter_count(self):
        layer = GatedLoraLayer(16, 16, 4, np.random.default_rng(0))
        assert layer.trainable_parameter_count(Phase.WARM_UP) == 2 * 4 * (16 + 16)
        assert layer.trainable_parameter_count(Phase.VECTOR_TUNE) == 2 * (4 + 16)


class TestConvNeck:
    def test_zero_kernels_are_identity(self):
        neck = ConvNeck(4, np.random.default_rng(13))
        for i in range(3):
            neck.params[f"conv{i}"][:] = 0.0
        tokens = np.random.default_rng(14).normal(size=(4, 6))
        out = dn.value(neck.forward(tokens, 2, 3))
        assert np.array_equal(out, tokens)

    def test_shape_preserved_for_random_kernels(self):
        neck = ConvNeck(5, np.random.default_rng(15))
        tokens = np.random.default_rng(16).normal(size=(5, 12))
        assert dn.value(neck.forward(tokens, 3, 4)).shape == (5, 12)

    def test_bad_grid_rejected(self):
        neck = ConvNeck(4, np.random.default_rng(17))
        with pytest.raises(ValueError):
            neck.forward(np.zeros((4, 7)), 2, 3)

    def test_gradient_through_block(self):
        neck = ConvNeck(3, np.random.default_rng(18))
        tokens = np.random.default_rng(19).normal(size=(3, 4))

        def f(v):
            bound = {k: v[k] for k in v}
            return dn.mean(dn.smooth_abs(neck.forward(tokens, 2, 2, bound)))

        inputs = {name: (arr, True) for name, arr in neck.params.items()}
        report = dn.finite_diff_check(f, inputs)
        assert report.max_rel_error < 1e-4


class TestHeads:
    def test_zero_feature_decodes(self):
        backbone = ToyBackbone(width=16, height=16, patch=8, channels=8, n_blocks=1,
                               rank=2, seed=20, d_min=20.0, d_max=150.0)
        img = np.random.default_rng(21).uniform(0.2, 0.8, size=16 * 16 * 3)
        depth = dn.value(backbone.forward_depth(img))
        # zero head weights force sigma = 0.5: the disparity-space midpoint
        expected = 1.0 / (0.5 * (1 / 20.0 - 1 / 150.0) + 1 / 150.0)
        assert np.allclose(depth, expected, atol=1e-12)

        r, t, intr = backbone.forward_pose_intrinsics(img, img)
        assert np.array_equal(dn.value(r), np.zeros(3))
        assert np.array_equal(dn.value(t), np.zeros(3))
        fx, fy, cx, cy = (float(dn.value(v)) for v in intr)
        assert fx == pytest.approx(0.5 * 16, abs=1e-12)
        assert fy == pytest.approx(0.5 * 16, abs=1e-12)
        assert cx == pytest.approx(8.0, abs=1e-12)
        assert cy == pytest.approx(8.0, abs=1e-12)

    def test_random_heads_keep_invariants(self):
        backbone = ToyBackbone(width=16, height=16, patch=4, channels=8, n_blocks=1,
                               rank=2, seed=22)
        rng = np.random.default_rng(23)
        for name in backbone.head_param_names():
            backbone.params[name][:] = rng.normal(scale=2.0, size=backbone.params[name].shape)
        img_a = rng.uniform(size=16 * 16 * 3)
        img_b = rng.uniform(size=16 * 16 * 3)
        depth = dn.value(backbone.forward_depth(img_a))
        assert np.all(depth > 0)
        assert np.all(depth >= backbone.d_min - 1e-9)
        assert np.all(depth <= backbone.d_max + 1e-9)
        _, _, intr = backbone.forward_pose_intrinsics(img_a, img_b)
        fx, fy, cx, cy = (float(dn.value(v)) for v in intr)
        assert fx > 0 and fy > 0
        assert 0 < cx < 16 and 0 < cy < 16

    def test_softplus_half_bias(self):
        assert np.log1p(np.exp(SOFTPLUS_HALF_BIAS)) == pytest.approx(0.5, abs=1e-15)


class TestFullPipelineGradients:
    def test_both_phases_with_conv_neck(self):
        # 2 blocks + 1 conv neck on an 8x8 input
        backbone = ToyBackbone(width=8, height=8, patch=4, channels=6, n_blocks=2,
                               rank=2, conv_neck_after=(0,), seed=24)
        rng = np.random.default_rng(25)
        # move heads and B off their zero init so gradients flow everywhere
        for name, arr in backbone.params.items():
            if name.endswith(("B_d", "B_m")) or name.startswith("head_"):
                arr[:] = rng.normal(scale=0.05, size=arr.shape)
        image = rng.uniform(0.1, 0.9, size=8 * 8 * 3)
        for phase in (Phase.WARM_UP, Phase.VECTOR_TUNE):
            names = backbone.trainable_names(phase, include_heads=True)
            inputs = {n: (backbone.params[n], True) for n in names}

            def f(v):
                return dn.mean(backbone.forward_depth(image, dict(v)))

            report = dn.finite_diff_check(f, inputs)
            assert report.max_rel_error < 1e-4, (phase, report)

    def test_pose_branch_gradients(self):
        backbone = ToyBackbone(width=8, height=8, patch=4, channels=6, n_blocks=1,
                               rank=2, seed=26)
        rng = np.random.default_rng(27)
        img_a = rng.uniform(size=8 * 8 * 3)
        img_b = rng.uniform(size=8 * 8 * 3)
        names = backbone.lora_param_names(Phase.WARM_UP) + ["proj_pair_w", "head_pose_w"]
        inputs = {n: (backbone.params[n], True) for n in names}

        def f(v):
            r, t, (fx, fy, cx, cy) = backbone.forward_pose_intrinsics(img_a, img_b, dict(v))
            s = dn.add(dn.asum(dn.mul(r, r)), dn.asum(dn.mul(t, t)))
            return dn.add(s, dn.add(dn.add(fx, fy), dn.add(cx, cy)))

        report = dn.finite_diff_check(f, inputs)
        assert report.max_rel_error < 1e-4


class TestCheckpoint:
    def test_bit_exact_round_trip(self, tmp_path):
        backbone = ToyBackbone(width=16, height=16, patch=8, channels=8, n_blocks=2,
                               conv_neck_after=(1,), rank=4, seed=28)
        rng = np.random.default_rng(29)
        for arr in backbone.params.values():
            arr[:] = rng.normal(size=arr.shape)
        schedule = TrainSchedule(warmup_steps=123, step=77)
        path = tmp_path / "ckpt.npz"
        save_checkpoint(path, backbone, schedule)

        clone = ToyBackbone(width=16, height=16, patch=8, channels=8, n_blocks=2,
                            conv_neck_after=(1,), rank=4, seed=999)
        restored = load_checkpoint(path, clone)
        assert restored == schedule
        for name, arr in backbone.params.items():
            assert np.array_equal(clone.params[name], arr), name
