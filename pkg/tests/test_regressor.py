import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relvar.data import Dataset, SynthSpec, synth_generate
from relvar.errors import (
    ConfigError,
    DimensionMismatchError,
    LengthMismatchError,
    ModelFormatError,
    NonFiniteValueError,
    TooFewRowsError,
    ZeroVarianceError,
)
from relvar.regressor import (
    MlpModel,
    NormStats,
    TrainConfig,
    dumps_model,
    forward,
    load_model,
    loads_model,
    network_output,
    output_jacobian,
    predict,
    rms_error,
    save_model,
    split_dataset,
    split_indices,
    train_lm,
)


def random_model(rng, n, h, norm=None):
    return MlpModel(
        rng.normal(size=(h, n)),
        rng.normal(size=h),
        rng.normal(size=h),
        float(rng.normal()),
        norm or NormStats.identity(n),
    )


def fd_jacobian(model, X, step=1e-6):
    """Central finite differences of network_output w.r.t. each parameter."""
    theta = model.params()
    J = np.empty((X.shape[0], theta.size))
    for k in range(theta.size):
        up, dn = theta.copy(), theta.copy()
        up[k] += step
        dn[k] -= step
        J[:, k] = (network_output(model.with_params(up), X) - network_output(model.with_params(dn), X)) / (2 * step)
    return J


@pytest.fixture(scope="module")
def linear_data():
    return synth_generate(SynthSpec(n_features=1, relevant={1}, generator="2*x1+1", n_rows=500, seed=21))


@pytest.fixture(scope="module")
def linear_fit(linear_data):
    cfg = TrainConfig(hidden_dim=8, seed=4)
    model, trace = train_lm(linear_data, "target", ["x1"], cfg)
    return cfg, model, trace


class TestSplit:
    @pytest.mark.parametrize("n,sizes", [(100, (80, 10, 10)), (103, (83, 10, 10)), (10, (8, 1, 1)), (19, (17, 1, 1))])
    def test_sizes(self, n, sizes):
        for seed in (0, 1, 2**63):
            tr, va, te = split_indices(n, TrainConfig(seed=seed))
            assert (len(tr), len(va), len(te)) == sizes
            assert sorted(np.concatenate([tr, va, te]).tolist()) == list(range(n))

    def test_deterministic(self):
        a = split_indices(500, TrainConfig(seed=9))
        b = split_indices(500, TrainConfig(seed=9))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_depends_only_on_seed_and_n(self):
        a = split_indices(300, TrainConfig(seed=5, hidden_dim=3, patience=2))
        b = split_indices(300, TrainConfig(seed=5, hidden_dim=40, max_epochs=7))
        c = split_indices(300, TrainConfig(seed=6))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)
        assert not np.array_equal(a[0], c[0])

    def test_too_few_rows(self):
        with pytest.raises(TooFewRowsError):
            split_indices(9, TrainConfig())

    def test_split_dataset(self):
        d = Dataset({"a": np.arange(50.0)})
        tr, va, te = split_dataset(d, TrainConfig(seed=1))
        assert (tr.row_count, va.row_count, te.row_count) == (40, 5, 5)
        allv = np.sort(np.concatenate([tr.column("a"), va.column("a"), te.column("a")]))
        np.testing.assert_array_equal(allv, np.arange(50.0))

    @pytest.mark.parametrize(
        "kw", [{"split": (0.8, 0.1, 0.2)}, {"split": (0.9, 0.1, 0.0)}, {"hidden_dim": 0}, {"seed": -1}, {"lm_lambda_factor": 1.0}, {"patience": 0}]
    )
    def test_config_validation(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)


class TestForward:
    def test_zero_network(self):
        m = MlpModel(np.zeros((4, 3)), np.zeros(4), np.zeros(4), 0.0, NormStats.identity(3))
        assert forward(m, [1.0, -2.0, 5.0]) == 0.0

    def test_constant_path(self):
        m = MlpModel([[0.0]], [0.0], [3.5], -1.25, NormStats.identity(1))
        for x in (-10.0, 0.0, 7.0):
            assert forward(m, [x]) == -1.25

    def test_destandardizes_output(self):
        norm = NormStats(np.zeros(1), np.ones(1), 10.0, 2.0)
        m = MlpModel([[0.0]], [0.0], [1.0], 0.5, norm)
        assert forward(m, [3.0]) == pytest.approx(0.5 * 2.0 + 10.0)

    def test_dimension_mismatch(self):
        m = random_model(np.random.default_rng(0), 3, 2)
        with pytest.raises(DimensionMismatchError):
            forward(m, [1.0, 2.0])

    def test_inconsistent_shapes_rejected(self):
        with pytest.raises(DimensionMismatchError):
            MlpModel(np.zeros((2, 3)), np.zeros(3), np.zeros(2), 0.0, NormStats.identity(3))

    def test_nonfinite_weights_rejected(self):
        with pytest.raises(NonFiniteValueError):
            MlpModel([[np.nan]], [0.0], [1.0], 0.0, NormStats.identity(1))


class TestJacobian:
    def test_matches_finite_differences_50_networks(self):
        rng = np.random.default_rng(2024)
        for _ in range(50):
            n = int(rng.integers(1, 4))
            h = int(rng.integers(1, (20 - 1) // (n + 2) + 1))  # at most 20 weights
            model = random_model(rng, n, h)
            assert model.n_params <= 20
            X = rng.normal(size=(7, n))
            J = output_jacobian(model, X)
            Jfd = fd_jacobian(model, X)
            assert np.linalg.norm(J - Jfd) <= 1e-5 * np.linalg.norm(Jfd)

    def test_forward_derivative_in_target_units(self):
        rng = np.random.default_rng(1)
        norm = NormStats(np.zeros(2), np.ones(2), 3.0, 0.25)
        model = random_model(rng, 2, 3, norm)
        x = rng.normal(size=2)
        theta = model.params()
        step = 1e-6
        for k in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[k] += step
            dn[k] -= step
            fd = (forward(model.with_params(up), x) - forward(model.with_params(dn), x)) / (2 * step)
            analytic = 0.25 * output_jacobian(model, x[None, :])[0, k]
            assert fd == pytest.approx(analytic, rel=1e-5, abs=1e-9)


class TestRms:
    def test_identical(self):
        assert rms_error([1.0, 2.0], [1.0, 2.0]) == 0.0

    def test_hand(self):
        assert rms_error([1, 1], [0, 2]) == 1.0

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30), st.floats(-100, 100))
    def test_offset(self, obs, c):
        obs = np.array(obs)
        assert rms_error(obs + c, obs) == pytest.approx(abs(c), rel=1e-9, abs=1e-9)

    def test_mismatch(self):
        with pytest.raises(LengthMismatchError):
            rms_error([1.0], [1.0, 2.0])


class TestNormStats:
    @given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=50))
    def test_round_trip(self, ys):
        y = np.array(ys)
        if y.std() == 0:
            return
        norm = NormStats.fit(np.c_[np.arange(y.size, dtype=float)], y)
        back = norm.destandardize_y(norm.standardize_y(y))
        assert np.all(np.abs(back - y) <= 1e-12 * np.maximum(1.0, np.abs(y).max()))

    def test_zero_variance(self):
        with pytest.raises(ZeroVarianceError):
            NormStats.fit(np.ones((5, 1)), np.arange(5.0))


class TestTraining:
    def test_linear_target(self, linear_data, linear_fit):
        cfg, model, _ = linear_fit
        _, _, te = split_indices(linear_data.row_count, cfg)
        pred = predict(model, linear_data)
        assert rms_error(pred[te], linear_data.column("target")[te]) <= 0.02

    def test_linear_train_split_predictions(self, linear_data, linear_fit):
        cfg, model, _ = linear_fit
        tr, _, _ = split_indices(linear_data.row_count, cfg)
        pred = predict(model, linear_data)
        assert rms_error(pred[tr], linear_data.column("target")[tr]) <= 0.02

    def test_noisy_nonlinear(self):
        d = synth_generate(SynthSpec(2, {1, 2}, "sin(3*x1)*x2", noise_sigma=0.05, n_rows=2000, seed=8))
        cfg = TrainConfig(hidden_dim=16, seed=2)
        model, _ = train_lm(d, "target", ["x1", "x2"], cfg)
        _, _, te = split_indices(d.row_count, cfg)
        assert rms_error(predict(model, d)[te], d.column("target")[te]) <= 0.10

    def test_bitwise_deterministic(self, linear_data):
        cfg = TrainConfig(hidden_dim=5, seed=77)
        a, ta = train_lm(linear_data, "target", ["x1"], cfg)
        b, tb = train_lm(linear_data, "target", ["x1"], cfg)
        assert dumps_model(a) == dumps_model(b)
        assert ta == tb

    def test_accepted_train_mse_strictly_decreasing(self, linear_fit):
        _, _, trace = linear_fit
        seq = [trace.initial_train_rms] + trace.train_rms
        assert all(b < a for a, b in zip(seq, seq[1:]))
        assert trace.stop_reason in ("patience_exhausted", "lambda_overflow", "max_epochs")
        assert len(trace.val_rms) == len(trace.lam) == trace.epochs

    def test_best_snapshot_returned(self, linear_data, linear_fit):
        cfg, model, trace = linear_fit
        _, va, _ = split_indices(linear_data.row_count, cfg)
        val = rms_error(predict(model, linear_data)[va], linear_data.column("target")[va])
        assert val == pytest.approx(trace.best_val_rms, rel=1e-9)
        assert trace.best_val_rms == min([trace.initial_val_rms] + trace.val_rms)

    def test_best_snapshot_with_early_stop(self):
        # overparameterized fit on noise: validation RMS must bottom out early
        d = synth_generate(SynthSpec(3, {1}, "x1", noise_sigma=0.5, n_rows=60, seed=3))
        cfg = TrainConfig(hidden_dim=10, seed=1, patience=3)
        model, trace = train_lm(d, "target", ["x1", "x2", "x3"], cfg)
        _, va, _ = split_indices(d.row_count, cfg)
        val = rms_error(predict(model, d)[va], d.column("target")[va])
        assert val == pytest.approx(trace.best_val_rms, rel=1e-9)

    def test_max_epochs_stop(self, linear_data):
        _, trace = train_lm(linear_data, "target", ["x1"], TrainConfig(hidden_dim=4, max_epochs=2, patience=50))
        assert trace.epochs == 2
        assert trace.stop_reason == "max_epochs"

    def test_init_key_changes_weights_not_split(self, linear_data):
        cfg = TrainConfig(hidden_dim=4, seed=3, max_epochs=1)
        a, _ = train_lm(linear_data, "target", ["x1"], cfg, init_key=1)
        b, _ = train_lm(linear_data, "target", ["x1"], cfg, init_key=2)
        assert not np.array_equal(a.w1, b.w1)
        # normalization comes from the train split, which must be shared
        np.testing.assert_array_equal(a.norm.x_mean, b.norm.x_mean)

    def test_empty_subset(self, linear_data):
        with pytest.raises(ConfigError):
            train_lm(linear_data, "target", [], TrainConfig())

    def test_unclean_data(self):
        d = Dataset({"x": [np.nan] + list(range(20)), "y": list(range(21))})
        with pytest.raises(NonFiniteValueError):
            train_lm(d, "y", ["x"], TrainConfig(hidden_dim=2))

    def test_constant_feature(self):
        d = Dataset({"x": np.ones(30), "y": np.arange(30.0)})
        with pytest.raises(ZeroVarianceError):
            train_lm(d, "y", ["x"], TrainConfig(hidden_dim=2))


class TestPredict:
    def test_single_row(self, linear_fit):
        _, model, _ = linear_fit
        d = Dataset({"x1": [0.3], "target": [0.0]})
        p = predict(model, d)
        assert p.shape == (1,)
        x_std = model.norm.standardize_x(np.array([0.3]))
        assert p[0] == pytest.approx(forward(model, x_std), rel=1e-15)

    def test_row_permutation(self, linear_data, linear_fit):
        _, model, _ = linear_fit
        perm = np.random.default_rng(0).permutation(linear_data.row_count)
        np.testing.assert_array_equal(predict(model, linear_data.take(perm)), predict(model, linear_data)[perm])

    def test_dimension_mismatch(self, linear_data, linear_fit):
        _, model, _ = linear_fit
        with pytest.raises(DimensionMismatchError):
            predict(model, linear_data, ["x1", "target"])


class TestSerialization:
    def test_round_trip(self, tmp_path, linear_fit):
        _, model, _ = linear_fit
        save_model(model, tmp_path / "m.bin")
        back = load_model(tmp_path / "m.bin")
        assert dumps_model(back) == dumps_model(model)
        np.testing.assert_array_equal(back.w1, model.w1)
        assert back.feature_names == ("x1",)
        assert back.target_name == "target"

    def test_layout(self, linear_fit):
        _, model, _ = linear_fit
        blob = dumps_model(model)
        first, header, payload = blob.split(b"\n", 2)
        assert first == b"RELVAR-MLP 1"
        n, h = model.input_dim, model.hidden_dim
        assert len(payload) == 8 * (2 * n + 2 + h * n + 2 * h + 1)
        # w1 sits after x_mean, x_std, y_mean, y_std; little-endian row-major
        off = 8 * (2 * n + 2)
        w1 = np.frombuffer(payload[off : off + 8 * h * n], dtype="<f8").reshape(h, n)
        np.testing.assert_array_equal(w1, model.w1)

    def test_bad_magic(self):
        with pytest.raises(ModelFormatError):
            loads_model(b"NOPE 1\n{}\n")

    def test_truncated(self, linear_fit):
        _, model, _ = linear_fit
        with pytest.raises(ModelFormatError):
            loads_model(dumps_model(model)[:-8])
