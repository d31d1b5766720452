"""Losses, Adam, the training loop and frozen-NL adaptation."""

import numpy as np
import pytest

from multikernel.core import Rng
from multikernel.errors import ConfigError, NumericalError, ShapeError, ZeroEnergyError
from multikernel.models import build_model, parse_model, segment_frames, segment_targets
from multikernel.optim import (
    AdamState,
    TrainConfig,
    adam_step,
    adapt_test,
    least_squares_fir,
    mse_loss,
    nmse_db,
    per_plant_nmse_db,
    train,
    write_curve_csv,
)
from multikernel.plants import linear_dataset, make_dataset


class TestLosses:
    def test_mse_examples(self):
        assert mse_loss(np.ones(3), np.ones(3))[0] == 0.0
        loss, grad = mse_loss(np.zeros(2), np.array([1.0, 2.0]))
        assert loss == 5.0
        np.testing.assert_array_equal(grad, [-2.0, -4.0])

    def test_mse_loop_oracle(self):
        r = np.random.default_rng(0)
        a, b = r.normal(size=(3, 2, 1, 5)), r.normal(size=(3, 2, 1, 5))
        ref = 0.0
        for v, w in zip(a.ravel(), b.ravel()):
            ref += (v - w) ** 2
        assert mse_loss(a, b)[0] == pytest.approx(ref, abs=1e-12)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mse_loss(np.zeros(2), np.zeros(3))

    def test_nmse_examples(self):
        y = np.array([1.0, -2.0, 3.0])
        assert nmse_db(np.zeros(3), y) == pytest.approx(0.0)
        assert nmse_db(y, y) == -160.0
        e = np.sqrt(1e-7 * np.sum(y**2) / 3)
        assert nmse_db(y + e, y) == pytest.approx(-70.0, abs=1e-9)

    def test_nmse_zero_target(self):
        with pytest.raises(ZeroEnergyError):
            nmse_db(np.ones(3), np.zeros(3))

    def test_nmse_complex(self):
        y = np.array([1 + 1j, 2 - 1j])
        assert nmse_db(y * 0, y) == pytest.approx(0.0)

    def test_per_plant(self):
        y = np.ones((2, 3, 1, 4))
        pred = y.copy()
        pred[:, 1] = 0.0
        assert per_plant_nmse_db(pred, y) == [-160.0, pytest.approx(0.0), -160.0]


class TestAdam:
    def test_first_step(self):
        theta = np.zeros(1)
        st = AdamState.zeros_like([theta])
        adam_step([theta], [np.ones(1)], st)
        assert theta[0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
        assert st.step == 1

    def test_zero_gradient(self):
        theta = np.arange(4.0)
        st = AdamState.zeros_like([theta])
        for _ in range(5):
            adam_step([theta], [np.zeros(4)], st)
        np.testing.assert_array_equal(theta, np.arange(4.0))

    def test_quadratic_convergence(self):
        theta = np.zeros(1)
        st = AdamState.zeros_like([theta])
        for _ in range(2000):
            adam_step([theta], [2 * (theta - 3.0)], st)
        assert abs(theta[0] - 3.0) < 1e-3

    def test_second_moment_nonnegative(self):
        theta = np.zeros(3)
        st = AdamState.zeros_like([theta])
        r = np.random.default_rng(1)
        for _ in range(20):
            adam_step([theta], [r.normal(size=3)], st)
            assert np.all(st.v[0] >= 0)

    def test_non_finite_names_parameter_and_epoch(self):
        theta = np.zeros(2)
        st = AdamState.zeros_like([theta])
        with pytest.raises(NumericalError, match=r"stage1_fir\.w.*epoch 7"):
            adam_step([theta], [np.array([1.0, np.nan])], st, names=["stage1_fir.w"], epoch=7)

    def test_skip_leaves_parameter(self):
        a, b = np.zeros(2), np.zeros(2)
        st = AdamState.zeros_like([a, b])
        adam_step([a, b], [np.ones(2), np.ones(2)], st, skip=[True, False])
        assert np.all(a == 0) and np.all(b != 0)


def _linear_frames(K=2, N=2000, L=8, mode="multikernel", seed=0):
    ps = linear_dataset(K, N=N, rng=seed, L_h=L)
    spec = parse_model("FIR", plants=K, kernel_lens=[L], kernel_mode=mode)
    model = build_model(spec, seed + 1)
    return model, segment_frames(ps.x, model.frame), segment_targets(ps.y, model.frame)


class TestTrain:
    def test_linear_multikernel_converges(self):
        model, X, Y = _linear_frames()
        res = train(model, X, Y, TrainConfig(epochs=500))
        assert res.best_nmse_db <= -60.0

    def test_single_kernel_fails_on_multiplant(self):
        # one shared kernel can only fit the plant-average response
        model, X, Y = _linear_frames(K=4, L=32, mode="single_kernel")
        res = train(model, X, Y, TrainConfig(epochs=300))
        assert res.best_nmse_db >= -3.0

    def test_best_so_far_monotone_and_restored(self):
        model, X, Y = _linear_frames()
        res = train(model, X, Y, TrainConfig(epochs=60))
        assert np.all(np.diff(res.best_so_far) <= 0)
        assert res.best_nmse_db == min(p.nmse_db for p in res.curve)
        assert nmse_db(model.forward(X), Y) == pytest.approx(res.best_nmse_db, abs=1e-9)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model, X, Y = _linear_frames()
            runs.append([p.nmse_db for p in train(model, X, Y, TrainConfig(epochs=30)).curve])
        assert runs[0] == runs[1]

    def test_chunked_gradients_match_full_batch(self):
        m1, X, Y = _linear_frames()
        m2, _, _ = _linear_frames()
        c1 = train(m1, X, Y, TrainConfig(epochs=10)).curve
        c2 = train(m2, X, Y, TrainConfig(epochs=10, chunk_frames=7)).curve
        np.testing.assert_allclose([p.loss for p in c1], [p.loss for p in c2], rtol=1e-10)

    def test_zero_target(self):
        model, X, Y = _linear_frames()
        with pytest.raises(ZeroEnergyError):
            train(model, X, np.zeros_like(Y), TrainConfig(epochs=2))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        model, X, Y = _linear_frames()
        with pytest.raises(ConfigError):
            train(model, X, Y, TrainConfig(epochs=2, freeze={3}))

    def test_plant_mismatch(self):
        model, X, Y = _linear_frames()
        with pytest.raises(ShapeError):
            train(model, X[:, :1], Y[:, :1], TrainConfig(epochs=2))

    def test_non_finite_loss_reports_epoch(self):
        model, X, Y = _linear_frames()
        model.blocks[0].params["w"][...] = 1e200
        with pytest.raises(NumericalError, match="epoch 1"):
            with np.errstate(over="ignore", invalid="ignore"):
                train(model, X, Y, TrainConfig(epochs=3))

    def test_lr_halving(self):
        model, X, Y = _linear_frames()
        res = train(model, X, 0 * Y + 1.0, TrainConfig(epochs=80, lr=5.0, lr_halving_patience=5))
        assert res.curve[-1].lr < 5.0

    def test_curve_csv(self, tmp_path):
        model, X, Y = _linear_frames()
        res = train(model, X, Y, TrainConfig(epochs=3))
        write_curve_csv(tmp_path / "c.csv", res.curve)
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "epoch,nmse_db,loss,lr" and len(lines) == 4


def _hammerstein_frames(K, seed, N=2000):
    ps = make_dataset("hammerstein", K, "var", "inv", N=N, rng=seed, L_h=8, n_ref=20000)
    spec = parse_model("NL2FIR", plants=K, kernel_lens=[8], nl_widths=[4, 4])
    return ps, spec


class TestAdapt:
    def test_freeze_contract_and_self_consistency(self):
        ps, spec = _hammerstein_frames(2, 0)
        model = build_model(spec, 1)
        X, Y = segment_frames(ps.x, model.frame), segment_targets(ps.y, model.frame)
        trained = train(model, X, Y, TrainConfig(epochs=300))
        nl_before = {k: v.copy() for k, v in model.blocks[0].params.items()}
        ad = adapt_test(model, X, Y, TrainConfig(epochs=300), rng=5)
        assert ad.frozen_stages == [0]
        for k, v in ad.model.blocks[0].params.items():
            np.testing.assert_array_equal(v, nl_before[k])
        assert abs(ad.result.best_nmse_db - trained.best_nmse_db) <= 3.0
        assert len(ad.per_plant_nmse_db) == 2

    def test_different_plant_count(self):
        ps, spec = _hammerstein_frames(2, 0)
        model = build_model(spec, 1)
        test_ps, _ = _hammerstein_frames(3, 9)
        X = segment_frames(test_ps.x, model.frame)
        Y = segment_targets(test_ps.y, model.frame)
        ad = adapt_test(model, X, Y, TrainConfig(epochs=5), rng=2)
        assert ad.model.spec.plants == 3
        assert ad.model.blocks[1].params["w"].shape[1] == 3

    def test_nl_dimension_mismatch(self):
        ps, spec = _hammerstein_frames(2, 0)
        model = build_model(spec, 1)
        model.spec.nl_widths = [5, 5]
        X = segment_frames(ps.x, model.frame)
        Y = segment_targets(ps.y, model.frame)
        with pytest.raises(ConfigError):
            adapt_test(model, X, Y, TrainConfig(epochs=2))


class TestLeastSquaresFir:
    @pytest.mark.parametrize("mode", ["multikernel", "single_kernel"])
    def test_exact_on_linear_data(self, mode):
        ps = linear_dataset(3, N=1500, rng=0, L_h=16, h_flag="inv" if mode == "single_kernel" else "var")
        model = build_model(parse_model("FIR", 3, [16], mode), 1)
        X, Y = segment_frames(ps.x, model.frame), segment_targets(ps.y, model.frame)
        least_squares_fir(model, X, Y)
        assert nmse_db(model.forward(X), Y) <= -120.0
        np.testing.assert_allclose(model.blocks[0].params["w"][:, 0, 0, 0], ps.h[0], atol=1e-9)

    def test_residual_orthogonal_to_kernel_gradient(self):
        # at the LS optimum the loss gradient w.r.t. the last kernel vanishes
        ps, spec = _hammerstein_frames(2, 0)
        model = build_model(spec, 1)
        X, Y = segment_frames(ps.x, model.frame), segment_targets(ps.y, model.frame)
        least_squares_fir(model, X, Y)
        _, g = mse_loss(model.forward(X), Y)
        model.backward(g)
        gw = model.blocks[-1].grads["w"]
        assert np.max(np.abs(gw)) <= 1e-8 * np.sum(Y**2)

    def test_adapt_start_beats_random(self):
        ps, spec = _hammerstein_frames(2, 0)
        model = build_model(spec, 1)
        X, Y = segment_frames(ps.x, model.frame), segment_targets(ps.y, model.frame)
        train(model, X, Y, TrainConfig(epochs=200))
        test_ps, _ = _hammerstein_frames(2, 9)
        Xt, Yt = segment_frames(test_ps.x, model.frame), segment_targets(test_ps.y, model.frame)
        cfg = TrainConfig(epochs=20)
        ls = adapt_test(model, Xt, Yt, cfg, rng=2, fir_init="least_squares")
        rnd = adapt_test(model, Xt, Yt, cfg, rng=2)
        assert ls.result.best_nmse_db < rnd.result.best_nmse_db
        assert ls.frozen_stages == [0]

    def test_rejects_unsupported_models(self):
        ps, _ = _hammerstein_frames(2, 0)
        wiener = build_model(parse_model("FIR1NL", 2, [8]), 1)
        X, Y = segment_frames(ps.x, wiener.frame), segment_targets(ps.y, wiener.frame)
        with pytest.raises(ConfigError):
            least_squares_fir(wiener, X, Y)
        with pytest.raises(ConfigError):
            adapt_test(wiener, X, Y, TrainConfig(epochs=2), fir_init="newton")
        # the leading FIR would stay trainable, so the last kernel is not a linear problem
        two_fir = build_model(parse_model("FIR1NL1FIR", 2, [8, 1]), 1)
        X, Y = segment_frames(ps.x, two_fir.frame), segment_targets(ps.y, two_fir.frame)
        with pytest.raises(ConfigError, match="frozen"):
            adapt_test(two_fir, X, Y, TrainConfig(epochs=2), fir_init="least_squares")
