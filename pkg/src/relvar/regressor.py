"""One-hidden-layer tanh network trained by Levenberg-Marquardt.

Training protocol: rows are shuffled once by a seeded permutation and cut
80/10/10 into train/validation/test. Inputs and target are z-scored with
train-split statistics. Each epoch takes one accepted LM step on the train
split, then measures validation RMS; training stops when validation RMS has
not improved for ``patience`` epochs, when the damping overflows, or at
``max_epochs``. The returned model is the best-validation snapshot.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .data import Dataset
from .errors import (
    ConfigError,
    DimensionMismatchError,
    LengthMismatchError,
    ModelFormatError,
    NonFiniteLossError,
    NonFiniteValueError,
    SingularNormalEquationsError,
    TooFewRowsError,
    ZeroVarianceError,
)

STOP_PATIENCE = "patience_exhausted"
STOP_LAMBDA = "lambda_overflow"
STOP_MAX_EPOCHS = "max_epochs"

MODEL_MAGIC = b"RELVAR-MLP"
MODEL_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 200
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    lm_lambda_init: float = 1e-3
    lm_lambda_factor: float = 10.0
    max_epochs: int = 200
    patience: int = 6
    lambda_max: float = 1e10

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(s) for s in self.split))
        if len(self.split) != 3 or any(not (s > 0) for s in self.split):
            raise ConfigError(f"split must be three positive fractions, got {self.split}")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ConfigError(f"split must sum to 1, got {sum(self.split)}")
        for name in ("hidden_dim", "max_epochs", "patience"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v}")
        if int(self.seed) != self.seed or not 0 <= self.seed < 2**64:
            raise ConfigError(f"seed must be an integer in [0, 2**64), got {self.seed}")
        if not (self.lm_lambda_init > 0 and self.lambda_max > self.lm_lambda_init):
            raise ConfigError("need 0 < lm_lambda_init < lambda_max")
        if not self.lm_lambda_factor > 1:
            raise ConfigError("lm_lambda_factor must be > 1")

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["split"] = list(self.split)
        return d


@dataclass(frozen=True)
class NormStats:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: float
    y_std: float

    @classmethod
    def fit(cls, X: np.ndarray, y: np.ndarray) -> "NormStats":
        x_std = X.std(axis=0)
        y_std = float(y.std())
        if np.any(x_std == 0):
            raise ZeroVarianceError("constant input column in the training split")
        if y_std == 0:
            raise ZeroVarianceError("constant target in the training split")
        return cls(X.mean(axis=0), x_std, float(y.mean()), y_std)

    @classmethod
    def identity(cls, n: int) -> "NormStats":
        return cls(np.zeros(n), np.ones(n), 0.0, 1.0)

    def standardize_x(self, X):
        return (np.asarray(X, dtype=np.float64) - self.x_mean) / self.x_std

    def standardize_y(self, y):
        return (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_std

    def destandardize_y(self, z):
        return np.asarray(z, dtype=np.float64) * self.y_std + self.y_mean


@dataclass(frozen=True)
class MlpModel:
    """``y = w2 . tanh(W1 x + b1) + b2`` on standardized inputs, de-standardized output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    norm: NormStats
    feature_names: tuple = ()
    target_name: str = ""
    hidden_transfer: str = "tanh"

    def __post_init__(self):
        if self.hidden_transfer != "tanh":
            raise ConfigError(f"unsupported hidden transfer {self.hidden_transfer!r}")
        w1 = np.array(self.w1, dtype=np.float64, ndmin=2)
        h, n = w1.shape
        b1 = np.array(self.b1, dtype=np.float64).reshape(-1)
        w2 = np.array(self.w2, dtype=np.float64).reshape(-1)
        if b1.shape != (h,) or w2.shape != (h,):
            raise DimensionMismatchError(f"inconsistent layer sizes: w1 {w1.shape}, b1 {b1.shape}, w2 {w2.shape}")
        if np.shape(self.norm.x_mean) != (n,) or np.shape(self.norm.x_std) != (n,):
            raise DimensionMismatchError("normalization stats do not match input_dim")
        if self.feature_names and len(self.feature_names) != n:
            raise DimensionMismatchError("feature_names do not match input_dim")
        if not (np.all(np.isfinite(w1)) and np.all(np.isfinite(b1)) and np.all(np.isfinite(w2)) and math.isfinite(self.b2)):
            raise NonFiniteValueError("model weights must be finite")
        for arr in (w1, b1, w2):
            arr.flags.writeable = False
        object.__setattr__(self, "w1", w1)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "w2", w2)
        object.__setattr__(self, "b2", float(self.b2))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))

    @property
    def input_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def n_params(self) -> int:
        return self.hidden_dim * (self.input_dim + 2) + 1

    def params(self) -> np.ndarray:
        return pack(self.w1, self.b1, self.w2, self.b2)

    def with_params(self, theta) -> "MlpModel":
        w1, b1, w2, b2 = unpack(theta, self.input_dim, self.hidden_dim)
        return replace(self, w1=w1, b1=b1, w2=w2, b2=b2)


# Parameter vector layout: W1 row-major (h*n), b1 (h), w2 (h), b2 (1).
def pack(w1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([np.ravel(w1), np.ravel(b1), np.ravel(w2), [float(b2)]])


def unpack(theta, n: int, h: int):
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size != h * (n + 2) + 1:
        raise DimensionMismatchError(f"expected {h * (n + 2) + 1} parameters, got {theta.size}")
    w1 = theta[: h * n].reshape(h, n)
    b1 = theta[h * n : h * n + h]
    w2 = theta[h * n + h : h * n + 2 * h]
    return w1, b1, w2, float(theta[-1])


def _net(theta, X, n, h):
    w1, b1, w2, b2 = unpack(theta, n, h)
    A = np.tanh(X @ w1.T + b1)
    return A @ w2 + b2, A


def _jacobian(theta, X, A, n, h):
    # d out / d theta for each row, in the packed parameter order
    _, _, w2, _ = unpack(theta, n, h)
    m = X.shape[0]
    D = (1.0 - A * A) * w2  # m x h
    J = np.empty((m, h * (n + 2) + 1))
    J[:, : h * n] = (D[:, :, None] * X[:, None, :]).reshape(m, h * n)
    J[:, h * n : h * n + h] = D
    J[:, h * n + h : h * n + 2 * h] = A
    J[:, -1] = 1.0
    return J


def network_output(model: MlpModel, X_std) -> np.ndarray:
    """Standardized-scale outputs for rows of standardized inputs."""
    X_std = np.atleast_2d(np.asarray(X_std, dtype=np.float64))
    if X_std.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"expected {model.input_dim} inputs, got {X_std.shape[1]}")
    out, _ = _net(model.params(), X_std, model.input_dim, model.hidden_dim)
    return out


def output_jacobian(model: MlpModel, X_std) -> np.ndarray:
    """Analytic Jacobian of :func:`network_output` w.r.t. the packed parameters (rows x params)."""
    X_std = np.atleast_2d(np.asarray(X_std, dtype=np.float64))
    if X_std.shape[1] != model.input_dim:
        raise DimensionMismatchError(f"expected {model.input_dim} inputs, got {X_std.shape[1]}")
    theta = model.params()
    _, A = _net(theta, X_std, model.input_dim, model.hidden_dim)
    return _jacobian(theta, X_std, A, model.input_dim, model.hidden_dim)


def forward(model: MlpModel, x) -> float:
    """Prediction in target units for one standardized feature vector."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != model.input_dim:
        raise DimensionMismatchError(f"expected {model.input_dim} inputs, got {x.size}")
    out = network_output(model, x[None, :])
    return float(model.norm.destandardize_y(out)[0])


def predict(model: MlpModel, data: Dataset, features: Sequence[str] | None = None) -> np.ndarray:
    names = list(model.feature_names if features is None else features)
    if len(names) != model.input_dim:
        raise DimensionMismatchError(f"model takes {model.input_dim} features, got {len(names)}")
    X = model.norm.standardize_x(data.matrix(names))
    return model.norm.destandardize_y(network_output(model, X))


def rms_error(pred, obs) -> float:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    obs = np.asarray(obs, dtype=np.float64).reshape(-1)
    if pred.shape != obs.shape:
        raise LengthMismatchError(f"length mismatch: {pred.size} vs {obs.size}")
    if pred.size == 0:
        raise LengthMismatchError("rms of an empty series")
    d = pred - obs
    return math.sqrt(float(np.mean(d * d)))


# -- data split -------------------------------------------------------------


def split_sizes(n: int, cfg: TrainConfig) -> tuple[int, int, int]:
    if n < 10:
        raise TooFewRowsError(f"need at least 10 rows to split, got {n}")
    # small epsilon guards products like 0.1 * 70 landing just under an integer
    n_val = int(math.floor(n * cfg.split[1] + 1e-9))
    n_test = int(math.floor(n * cfg.split[2] + 1e-9))
    return n - n_val - n_test, n_val, n_test


def split_indices(n: int, cfg: TrainConfig):
    """Train/val/test row indices; depends only on ``(cfg.seed, n)``."""
    n_train, n_val, _ = split_sizes(n, cfg)
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0,)))
    perm = rng.permutation(n)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split_dataset(data: Dataset, cfg: TrainConfig) -> tuple[Dataset, Dataset, Dataset]:
    tr, va, te = split_indices(data.row_count, cfg)
    return data.take(tr), data.take(va), data.take(te)


# -- training ---------------------------------------------------------------


@dataclass
class TrainTrace:
    train_rms: list = field(default_factory=list)
    val_rms: list = field(default_factory=list)
    lam: list = field(default_factory=list)
    stop_reason: str = ""
    initial_train_rms: float = math.nan
    initial_val_rms: float = math.nan
    best_epoch: int = 0  # 0 means the initial weights were never beaten

    @property
    def epochs(self) -> int:
        return len(self.train_rms)

    @property
    def best_val_rms(self) -> float:
        return min([self.initial_val_rms] + list(self.val_rms))

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("epoch,train_rms,val_rms,lambda\n")
            fh.write(f"0,{self.initial_train_rms!r},{self.initial_val_rms!r},\n")
            for i, (t, v, l) in enumerate(zip(self.train_rms, self.val_rms, self.lam), start=1):
                fh.write(f"{i},{t!r},{v!r},{l!r}\n")


def init_params(n: int, h: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-1/sqrt(fan_in) per layer."""
    a1 = 1.0 / math.sqrt(n)
    a2 = 1.0 / math.sqrt(h)
    w1 = rng.uniform(-a1, a1, size=(h, n))
    b1 = rng.uniform(-a1, a1, size=h)
    w2 = rng.uniform(-a2, a2, size=h)
    b2 = rng.uniform(-a2, a2)
    return pack(w1, b1, w2, b2)


def train_lm(
    data: Dataset,
    target_col: str,
    features: Sequence[str],
    cfg: TrainConfig,
    init_key: int = 0,
) -> tuple[MlpModel, TrainTrace]:
    """Fit an :class:`MlpModel` to ``target_col`` from ``features``.

    ``init_key`` selects the weight-initialization stream; the row split
    does not depend on it, so every feature subset sees the same rows.
    """
    names = list(features)
    if not names:
        raise ConfigError("feature subset is empty")
    data.require(names + [target_col])
    tr, va, _ = split_indices(data.row_count, cfg)
    X = data.matrix(names)
    y = data.column(target_col)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise NonFiniteValueError("training data contains NaN/Inf; clean it first")

    norm = NormStats.fit(X[tr], y[tr])
    Xt, yt = norm.standardize_x(X[tr]), norm.standardize_y(y[tr])
    Xv, yv = norm.standardize_x(X[va]), norm.standardize_y(y[va])
    n, h = len(names), cfg.hidden_dim
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(1, int(init_key))))
    theta = init_params(n, h, rng)
    P = theta.size

    def val_rms(th):
        out, _ = _net(th, Xv, n, h)
        return math.sqrt(float(np.mean((yv - out) ** 2))) * norm.y_std

    out, A = _net(theta, Xt, n, h)
    err = yt - out
    mse = float(np.mean(err * err))
    if not math.isfinite(mse):
        raise NonFiniteLossError("initial training loss is not finite")

    trace = TrainTrace(initial_train_rms=math.sqrt(mse) * norm.y_std, initial_val_rms=val_rms(theta))
    best_theta, best_val, since_best = theta, trace.initial_val_rms, 0
    lam = cfg.lm_lambda_init
    eye = np.eye(P)
    stop = STOP_MAX_EPOCHS

    for _ in range(cfg.max_epochs):
        J = _jacobian(theta, Xt, A, n, h)
        H = J.T @ J
        g = J.T @ err
        accepted = False
        while lam <= cfg.lambda_max:
            try:
                step = linalg.cho_solve(linalg.cho_factor(H + lam * eye), g)
            except (linalg.LinAlgError, ValueError):
                step = None
            if step is not None and np.all(np.isfinite(step)):
                cand = theta + step
                c_out, c_A = _net(cand, Xt, n, h)
                c_err = yt - c_out
                c_mse = float(np.mean(c_err * c_err))
                if math.isfinite(c_mse) and c_mse < mse:
                    theta, A, err, mse = cand, c_A, c_err, c_mse
                    lam /= cfg.lm_lambda_factor
                    accepted = True
                    break
            elif not np.all(np.isfinite(H)):
                raise SingularNormalEquationsError("normal equations contain non-finite entries")
            lam *= cfg.lm_lambda_factor
        if not accepted:
            stop = STOP_LAMBDA
            break
        v = val_rms(theta)
        trace.train_rms.append(math.sqrt(mse) * norm.y_std)
        trace.val_rms.append(v)
        trace.lam.append(lam)
        if v < best_val:
            best_theta, best_val, since_best = theta, v, 0
            trace.best_epoch = trace.epochs
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stop = STOP_PATIENCE
                break

    trace.stop_reason = stop
    w1, b1, w2, b2 = unpack(best_theta, n, h)
    model = MlpModel(w1, b1, w2, b2, norm, tuple(names), target_col)
    return model, trace


# -- serialization ----------------------------------------------------------

_ARRAYS = ("x_mean", "x_std", "y_mean", "y_std", "w1", "b1", "w2", "b2")


def _model_arrays(model: MlpModel) -> dict:
    return {
        "x_mean": np.asarray(model.norm.x_mean),
        "x_std": np.asarray(model.norm.x_std),
        "y_mean": np.asarray(model.norm.y_mean),
        "y_std": np.asarray(model.norm.y_std),
        "w1": model.w1,
        "b1": model.b1,
        "w2": model.w2,
        "b2": np.asarray(model.b2),
    }


def dumps_model(model: MlpModel) -> bytes:
    """Flat file: magic + version line, one JSON header line, then raw '<f8' arrays in header order."""
    arrays = _model_arrays(model)
    header = {
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "hidden_transfer": model.hidden_transfer,
        "output_transfer": "linear",
        "feature_names": list(model.feature_names),
        "target_name": model.target_name,
        "dtype": "<f8",
        "order": "C",
        "arrays": [[name, list(arrays[name].shape)] for name in _ARRAYS],
    }
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC + b" " + str(MODEL_VERSION).encode() + b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for name in _ARRAYS:
        buf.write(np.ascontiguousarray(arrays[name], dtype="<f8").tobytes())
    return buf.getvalue()


def loads_model(blob: bytes) -> MlpModel:
    try:
        first, rest = blob.split(b"\n", 1)
        magic, version = first.split(b" ")
        header_line, payload = rest.split(b"\n", 1)
        header = json.loads(header_line)
    except ValueError as exc:
        raise ModelFormatError(f"not a model file: {exc}") from None
    if magic != MODEL_MAGIC:
        raise ModelFormatError("bad magic")
    if int(version) != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {int(version)}")
    arrays = {}
    offset = 0
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise ModelFormatError("truncated model payload")
        arrays[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(payload):
        raise ModelFormatError("trailing bytes after model payload")
    norm = NormStats(arrays["x_mean"], arrays["x_std"], float(arrays["y_mean"]), float(arrays["y_std"]))
    model = MlpModel(
        arrays["w1"],
        arrays["b1"],
        arrays["w2"],
        float(arrays["b2"]),
        norm,
        tuple(header.get("feature_names", ())),
        header.get("target_name", ""),
        header.get("hidden_transfer", "tanh"),
    )
    if model.input_dim != header["input_dim"] or model.hidden_dim != header["hidden_dim"]:
        raise ModelFormatError("header dims disagree with arrays")
    return model


def save_model(model: MlpModel, path) -> None:
    Path(path).write_bytes(dumps_model(model))


def load_model(path) -> MlpModel:
    return loads_model(Path(path).read_bytes())
