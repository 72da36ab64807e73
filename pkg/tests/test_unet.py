import numpy as np
import pytest

from glaciermap.errors import ConfigurationError, FormatError, ShapeError
from glaciermap.pipeline import make_rng
from glaciermap.unet import (
    TaskSpec,
    TrainConfig,
    TrainingAbort,
    UNetConfig,
    build_unet,
    count_params,
    dice_loss,
    dice_loss_grad,
    evaluate,
    fit,
    forward,
    history_to_csv,
    l1_penalty,
    load_checkpoint,
    parameter_count,
    predict_tile,
    preprocess_window,
    save_checkpoint,
    training_objective,
)

from conftest import make_tile


def toy_config(in_channels=3, out_classes=1, depth=2, base=4, dropout=0.0):
    return UNetConfig(
        in_channels=in_channels,
        out_classes=out_classes,
        depth=depth,
        base_channels=base,
        spatial_dropout_rate=dropout,
    )


def toy_blob_data(rng, n=12, size=16, channels=3):
    """Learnable toy set: plane 0 bright inside a random square blob."""
    x = rng.random((n, channels, size, size)).astype(np.float32)
    masks = np.zeros((n, 2, size, size), dtype=np.uint8)
    for i in range(n):
        r0, c0 = rng.integers(1, size - 9, size=2)
        masks[i, 0, r0 : r0 + 8, c0 : c0 + 8] = 1
        x[i, 0] += masks[i, 0] * 2.0
    return x, masks


class TestBuildUNet:
    def test_default_widths_and_bottleneck(self):
        cfg = UNetConfig(in_channels=15, out_classes=3)
        assert cfg.encoder_widths == [16, 32, 64, 128, 256]
        assert cfg.bottleneck_width == 512
        params = build_unet(cfg, seed=0)
        for i, width in enumerate(cfg.encoder_widths, start=1):
            assert params[f"enc{i}.conv1.w"].shape[0] == width
        assert params["bottleneck.conv2.w"].shape[0] == 512

    def test_depth_one_base_eight(self):
        cfg = UNetConfig(in_channels=3, out_classes=1, depth=1, base_channels=8)
        assert cfg.encoder_widths == [8]
        assert cfg.bottleneck_width == 16

    def test_same_seed_bitwise_identical(self):
        cfg = toy_config()
        a = build_unet(cfg, seed=42)
        b = build_unet(cfg, seed=42)
        assert sorted(a) == sorted(b)
        for k in a:
            np.testing.assert_array_equal(a[k].view(np.uint32), b[k].view(np.uint32))

    def test_all_parameters_finite(self):
        params = build_unet(UNetConfig(in_channels=4, out_classes=2), seed=7)
        assert all(np.isfinite(v).all() for v in params.values())

    def test_parameter_count_formula(self):
        for c, k in [(15, 3), (5, 1), (3, 2), (1, 1)]:
            cfg = UNetConfig(in_channels=c, out_classes=k)
            built = count_params(build_unet(cfg, 0))
            assert parameter_count(cfg) == built
            assert built == 144 * c + 17 * k + 7_775_152
        small = toy_config(in_channels=2, out_classes=3)
        assert parameter_count(small) == count_params(build_unet(small, 0))


class TestForward:
    def test_output_shape_and_softmax_sum(self, rng):
        cfg = UNetConfig(in_channels=15, out_classes=3)
        params = build_unet(cfg, seed=0)
        x = rng.random((15, 64, 64)).astype(np.float32)
        probs = forward(params, cfg, x)
        assert probs.shape == (3, 64, 64)
        np.testing.assert_allclose(probs.sum(axis=0), 1.0, atol=1e-5)

    def test_indivisible_input_rejected(self, rng):
        cfg = UNetConfig(in_channels=2, out_classes=1)
        params = build_unet(cfg, seed=0)
        with pytest.raises(ShapeError, match="not divisible by 32"):
            forward(params, cfg, rng.random((2, 500, 500)).astype(np.float32))

    def test_channel_mismatch_names_layer(self, rng):
        cfg = toy_config(in_channels=3)
        params = build_unet(cfg, seed=0)
        with pytest.raises(ShapeError, match="enc1.conv1"):
            forward(params, cfg, rng.random((5, 16, 16)).astype(np.float32))

    def test_eval_mode_deterministic(self, rng):
        cfg = toy_config(dropout=0.3)
        params = build_unet(cfg, seed=0)
        x = rng.random((3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(forward(params, cfg, x), forward(params, cfg, x))

    def test_sigmoid_output_in_open_interval(self, rng):
        cfg = toy_config(out_classes=1)
        params = build_unet(cfg, seed=0)
        probs = forward(params, cfg, rng.random((3, 16, 16)).astype(np.float32))
        assert ((probs > 0) & (probs < 1)).all()

    def test_dropout_only_in_train_mode(self, rng):
        cfg = toy_config(dropout=0.5)
        params = build_unet(cfg, seed=0)
        x = rng.random((3, 16, 16)).astype(np.float32)
        eval_out = forward(params, cfg, x)
        train_out = forward(params, cfg, x, train_mode=True, rng=make_rng(0))
        assert not np.array_equal(eval_out, train_out)


class TestDiceLoss:
    def test_perfect_match_zero(self, rng):
        truth = (rng.random((1, 8, 8)) > 0.5).astype(np.float64)
        assert truth.sum() > 0
        assert dice_loss(truth, truth) == 0.0

    def test_hand_case_uniform_half(self):
        truth = np.array([[[1.0, 1.0], [0.0, 0.0]]])
        pred = np.full((1, 2, 2), 0.5)
        assert abs(dice_loss(pred, truth) - 0.4) < 1e-9

    def test_complement_limit(self):
        for n in (4, 64, 1024):
            truth = np.zeros((1, n, 1))
            truth[0, : n // 2, 0] = 1.0
            pred = 1.0 - truth
            assert abs(dice_loss(pred, truth) - (1.0 - 1.0 / (n + 1.0))) < 1e-12

    def test_range_and_permutation_invariance(self, rng):
        for _ in range(100):
            pred = rng.random((2, 4, 4))
            truth = (rng.random((2, 4, 4)) > 0.5).astype(float)
            loss = dice_loss(pred, truth)
            assert 0.0 <= loss < 1.0
            perm = rng.permutation(pred.size)
            loss_p = dice_loss(
                pred.reshape(-1)[perm].reshape(pred.shape),
                truth.reshape(-1)[perm].reshape(truth.shape),
            )
            assert abs(loss - loss_p) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice_loss(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))

    def test_grad_matches_finite_difference(self, rng):
        pred = rng.random((1, 4, 4))
        truth = (rng.random((1, 4, 4)) > 0.5).astype(float)
        grad = dice_loss_grad(pred, truth)
        h = 1e-7
        for _ in range(10):
            i, j = rng.integers(0, 4, size=2)
            p2 = pred.copy()
            p2[0, i, j] += h
            num = (dice_loss(p2, truth) - dice_loss(pred, truth)) / h
            assert abs(num - grad[0, i, j]) < 1e-5


class TestTrainingObjective:
    def test_lambda_zero_equals_mean_dice(self, rng):
        cfg = toy_config()
        params = build_unet(cfg, seed=0)
        x = rng.random((3, 3, 16, 16)).astype(np.float32)
        y = (rng.random((3, 1, 16, 16)) > 0.5).astype(np.float32)
        obj = training_objective(params, (x, y), cfg, TrainConfig(l1_lambda=0.0))
        probs = forward(params, cfg, x)
        expected = np.mean([dice_loss(probs[i], y[i]) for i in range(3)])
        assert obj == pytest.approx(expected, abs=1e-12)

    def test_zero_weights_zero_penalty(self):
        assert l1_penalty({"a.w": np.zeros(5), "a.b": np.ones(5)}, 5e-4) == 0.0

    def test_hand_penalty(self):
        assert l1_penalty({"x.w": np.array([-2.0, 3.0])}, 0.1) == pytest.approx(0.5)

    def test_biases_excluded(self):
        params = {"x.w": np.array([1.0]), "x.b": np.array([100.0])}
        assert l1_penalty(params, 1.0) == 1.0

    def test_empty_batch_rejected(self):
        cfg = toy_config()
        params = build_unet(cfg, seed=0)
        with pytest.raises(ConfigurationError):
            training_objective(
                params,
                (np.zeros((0, 3, 16, 16), np.float32), np.zeros((0, 1, 16, 16), np.float32)),
                cfg,
                TrainConfig(),
            )


class TestGradientCheck:
    def test_small_model_gradients(self, rng):
        cfg = UNetConfig(
            in_channels=2, out_classes=1, depth=1, base_channels=3, spatial_dropout_rate=0.0
        )
        params = build_unet(cfg, seed=3, dtype=np.float64)
        x = rng.random((2, 2, 8, 8))
        y = (rng.random((2, 1, 8, 8)) > 0.6).astype(np.float64)
        tc = TrainConfig(l1_lambda=5e-4)
        _, grads, _, _ = training_objective(params, (x, y), cfg, tc, return_grads=True)
        h = 1e-6
        worst = 0.0
        for name in sorted(params):
            flat = params[name].reshape(-1)
            for idx in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[idx]
                flat[idx] = old + h
                fp = training_objective(params, (x, y), cfg, tc)
                flat[idx] = old - h
                fm = training_objective(params, (x, y), cfg, tc)
                flat[idx] = old
                num = (fp - fm) / (2 * h)
                ana = grads[name].reshape(-1)[idx]
                worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-10))
        assert worst < 1e-4


class TestFit:
    def test_zero_learning_rate_keeps_params_bitwise(self, rng):
        cfg = toy_config()
        params = build_unet(cfg, seed=0)
        before = {k: v.copy() for k, v in params.items()}
        x, m = toy_blob_data(rng, n=2)
        out, history = fit(
            params, cfg, TaskSpec("binary_union"), (x, m), None,
            TrainConfig(epochs=1, batch_size=2, learning_rate=0.0, seed=0),
        )
        for k in before:
            np.testing.assert_array_equal(
                params[k].view(np.uint32), before[k].view(np.uint32)
            )
        assert len(history) == 2

    def test_loss_descends_on_toy_problem(self, rng):
        cfg = toy_config(dropout=0.0)
        params = build_unet(cfg, seed=1)
        x, m = toy_blob_data(rng, n=8)
        _, history = fit(
            params, cfg, TaskSpec("binary_union"), (x, m), None,
            TrainConfig(epochs=30, batch_size=4, learning_rate=3e-3, l1_lambda=0.0, seed=0),
        )
        train_rows = [r for r in history if r["split"] == "train"]
        assert train_rows[-1]["dice_loss"] < train_rows[0]["dice_loss"]

    def test_fixed_seed_identical_history(self, rng):
        x, m = toy_blob_data(rng, n=4)
        histories = []
        for _ in range(2):
            cfg = toy_config(dropout=0.3)
            params = build_unet(cfg, seed=5)
            _, h = fit(
                params, cfg, TaskSpec("binary_union"), (x, m), (x[:2], m[:2]),
                TrainConfig(epochs=3, batch_size=2, learning_rate=1e-3, seed=9),
            )
            histories.append(h)
        assert histories[0] == histories[1]

    def test_best_dev_checkpoint_retained(self, rng):
        cfg = toy_config(dropout=0.0)
        params = build_unet(cfg, seed=2)
        x, m = toy_blob_data(rng, n=6)
        best, history = fit(
            params, cfg, TaskSpec("binary_union"), (x[:4], m[:4]), (x[4:], m[4:]),
            TrainConfig(epochs=5, batch_size=2, learning_rate=3e-3, seed=1),
        )
        dev_rows = [r for r in history if r["split"] == "dev"]
        best_iou = max(r["iou"] for r in dev_rows)
        got = evaluate(best, cfg, TaskSpec("binary_union"), x[4:], m[4:])
        assert got["iou"] == pytest.approx(best_iou, abs=1e-12)

    def test_nan_abort_names_epoch_and_batch(self, rng):
        cfg = toy_config(dropout=0.0)
        params = build_unet(cfg, seed=0)
        params["head.w"][:] = np.nan
        x, m = toy_blob_data(rng, n=2)
        with pytest.raises(TrainingAbort, match="epoch 0 batch 0"):
            fit(
                params, cfg, TaskSpec("binary_union"), (x, m), None,
                TrainConfig(epochs=1, batch_size=2, seed=0),
            )

    def test_history_csv_columns(self, rng):
        cfg = toy_config(dropout=0.0)
        params = build_unet(cfg, seed=0)
        x, m = toy_blob_data(rng, n=2)
        _, history = fit(
            params, cfg, TaskSpec("binary_union"), (x, m), None,
            TrainConfig(epochs=2, batch_size=2, seed=0),
        )
        csv = history_to_csv(history)
        lines = csv.strip().split("\n")
        assert lines[0] == "epoch,split,dice_loss,iou"
        assert len(lines) == 1 + 2 * 2


class TestTaskSpec:
    def test_plane_counts_and_activation(self):
        assert TaskSpec("binary_union").n_planes == 1
        assert TaskSpec("multiclass_3").n_planes == 3
        assert TaskSpec("multiclass_3").activation == "softmax"
        assert TaskSpec("binary_debris").activation == "sigmoid"

    def test_multiclass_planes_exclusive_exhaustive(self, rng):
        masks = np.zeros((2, 2, 8, 8), dtype=np.uint8)
        masks[0, 0, :4] = 1
        masks[1, 1, 2:6] = 1
        planes = TaskSpec("multiclass_3").target_planes(masks)
        assert planes.shape == (2, 3, 8, 8)
        np.testing.assert_array_equal(planes.sum(axis=1), np.ones((2, 8, 8)))

    def test_binary_union_is_union(self):
        masks = np.zeros((2, 4, 4), dtype=np.uint8)
        masks[0, 0, 0] = 1
        masks[1, 3, 3] = 1
        planes = TaskSpec("binary_union").target_planes(masks)
        assert planes.shape == (1, 4, 4)
        assert planes[0, 0, 0] == 1 and planes[0, 3, 3] == 1

    def test_unknown_mode_rejected(self):
        with pytest.raises(ConfigurationError):
            TaskSpec("quadclass")

    def test_binarize_multiclass_argmax(self):
        probs = np.zeros((3, 2, 2))
        probs[:, 0, 0] = [0.6, 0.3, 0.1]
        probs[:, 0, 1] = [0.1, 0.8, 0.1]
        probs[:, 1, 1] = [0.2, 0.2, 0.6]
        planes = TaskSpec("multiclass_3").binarize(probs)
        assert planes["clean_ice"][0, 0] and planes["debris"][0, 1]
        assert not planes["glacier"][1, 1]


class TestPredictTile:
    def test_single_window_matches_forward(self, rng):
        cfg = toy_config(in_channels=2, dropout=0.0, depth=2)
        params = build_unet(cfg, seed=0)
        tile = make_tile(rng.random((2, 64, 64)))
        out = predict_tile(params, cfg, tile, ["B1", "B2"], window=64, overlap=16)
        direct = forward(params, cfg, preprocess_window(tile.data))
        np.testing.assert_allclose(out, direct, atol=1e-6)

    def test_constant_tile_periodic_interior(self):
        # constant input is translation invariant modulo the 2^depth lattice:
        # transpose-conv taps differ within each upsampling cell, so the
        # interior repeats with period 2^depth instead of being pointwise flat
        cfg = toy_config(in_channels=1, dropout=0.0, depth=2)
        params = build_unet(cfg, seed=1)
        tile = make_tile(np.full((1, 64, 64), 3.7, np.float32))
        out = predict_tile(params, cfg, tile, ["B1"], window=64, overlap=16)
        period = 2**cfg.depth
        interior = out[:, 24 : 36, 24 : 36]  # beyond the ~20px conv border halo
        shifted = out[:, 24 + period : 36 + period, 24 + period : 36 + period]
        np.testing.assert_allclose(interior, shifted, atol=1e-5)
        assert float(interior.max() - interior.min()) < 0.05  # no spatial structure

    def test_two_window_overlap_average(self, rng):
        cfg = toy_config(in_channels=2, dropout=0.0, depth=2)
        params = build_unet(cfg, seed=2)
        data = rng.random((2, 96, 64)).astype(np.float32)
        tile = make_tile(data)
        out = predict_tile(params, cfg, tile, ["B1", "B2"], window=64, overlap=32)
        win_a = forward(params, cfg, preprocess_window(data[:, :64, :]))
        win_b = forward(params, cfg, preprocess_window(data[:, 32:, :]))
        np.testing.assert_allclose(out[:, :32], win_a[:, :32], atol=1e-6)
        np.testing.assert_allclose(out[:, 64:], win_b[:, 32:], atol=1e-6)
        np.testing.assert_allclose(
            out[:, 32:64], (win_a[:, 32:] + win_b[:, :32]) / 2.0, atol=1e-6
        )

    def test_spec_window_positions(self):
        from glaciermap.unet import _window_positions

        assert _window_positions(576, 512, 512 - 64) == [0, 64]
        assert _window_positions(512, 512, 448) == [0]
        assert _window_positions(300, 512, 448) == [0]

    def test_missing_channel_errors(self, rng):
        cfg = toy_config(in_channels=2, dropout=0.0)
        params = build_unet(cfg, seed=0)
        tile = make_tile(rng.random((2, 64, 64)))
        with pytest.raises(ConfigurationError):
            predict_tile(params, cfg, tile, ["B1", "B9"], window=64)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path, rng):
        cfg = toy_config(in_channels=3, out_classes=2)
        params = build_unet(cfg, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(
            path, params, cfg, epoch=7, metrics={"dev_iou": 0.5},
            task=TaskSpec("multiclass_3") if cfg.out_classes == 3 else TaskSpec("binary_union"),
        )
        back, cfg2, header = load_checkpoint(path)
        assert cfg2 == cfg
        assert header["epoch"] == 7
        assert header["metrics"]["dev_iou"] == 0.5
        assert sorted(back) == sorted(params)
        for k in params:
            np.testing.assert_array_equal(
                back[k].view(np.uint32), params[k].view(np.uint32)
            )

    def test_truncated_checkpoint_rejected(self, tmp_path):
        cfg = toy_config()
        params = build_unet(cfg, seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, params, cfg)
        blob = open(path, "rb").read()
        open(path, "wb").write(blob[:-100])
        with pytest.raises(FormatError):
            load_checkpoint(path)
