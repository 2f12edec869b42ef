"""Tabular data: CSV ingest, fill-value cleaning, synthetic generation, bias histograms."""
from __future__ import annotations

import ast
import csv
import hashlib
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AllRowsDroppedError,
    ConfigError,
    EmptyFileError,
    LengthMismatchError,
    MissingColumnError,
    UnparsableCellError,
)

# MODIS Aqua-Land regressors in their canonical order; 1-based position is
# the index used in subset strings such as "2,3,4".
MODIS_REGRESSORS = (
    "AOD0550",
    "AOD0470",
    "AOD0660",
    "mref0470",
    "mref0550",
    "surfre0660",
    "surfre0470",
    "surfre2100",
    "cfrac",
    "QAavg",
    "SolarZenith",
    "SolarAzimuth",
    "SensorZenith",
    "SensorAzimuth",
    "ScatteringAngle",
)
TARGET = "AERONET_AOD"
MODIS_SCHEMA = MODIS_REGRESSORS + (TARGET,)
DEFAULT_FILL_VALUES = (-9999.0, -999.0)


@dataclass(frozen=True)
class Dataset:
    """Column-labelled numeric table. Arrays are read-only once constructed."""

    columns: Mapping[str, np.ndarray]
    provenance: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        cols = {}
        n = None
        for name, values in self.columns.items():
            arr = np.array(values, dtype=np.float64).reshape(-1)
            arr.flags.writeable = False
            if n is None:
                n = arr.size
            elif arr.size != n:
                raise LengthMismatchError(f"column {name!r} has {arr.size} rows, expected {n}")
            cols[name] = arr
        object.__setattr__(self, "columns", cols)
        object.__setattr__(self, "provenance", dict(self.provenance))

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    @property
    def row_count(self) -> int:
        for arr in self.columns.values():
            return arr.size
        return 0

    def column(self, name: str) -> np.ndarray:
        try:
            return self.columns[name]
        except KeyError:
            raise MissingColumnError(name) from None

    def require(self, names: Iterable[str]) -> None:
        for name in names:
            if name not in self.columns:
                raise MissingColumnError(name)

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        """Rows x len(names) float64 array of the requested columns."""
        names = list(names)
        self.require(names)
        if not names:
            return np.empty((self.row_count, 0))
        return np.column_stack([self.columns[n] for n in names])

    def take(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset({k: v[rows] for k, v in self.columns.items()}, self.provenance)

    def content_hash(self) -> str:
        """SHA-256 over column names and little-endian float64 bytes."""
        h = hashlib.sha256()
        for name, arr in self.columns.items():
            h.update(name.encode("utf-8"))
            h.update(b"\0")
            h.update(arr.astype("<f8").tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> None:
        # repr() gives the shortest string that round-trips to the same double
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.names)
            cols = [self.columns[n] for n in self.names]
            for i in range(self.row_count):
                writer.writerow([repr(float(c[i])) for c in cols])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.names == other.names and all(
            np.array_equal(self.columns[n], other.columns[n], equal_nan=True) for n in self.names
        )

    __hash__ = None


def _parse_cell(text: str, row: int, col: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        return float(text)
    except ValueError:
        raise UnparsableCellError(row, col, text) from None


def load_csv(path, schema: Sequence[str] = MODIS_SCHEMA) -> Dataset:
    """Read a headed, comma-separated numeric table.

    Every column, including ones outside ``schema``, must be numeric. Empty
    cells become NaN so that :func:`clean` can drop them. Row numbers in
    errors are 1-based data rows (the header is row 0).
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyFileError(f"{path}: file is empty") from None
        if not any(header):
            raise EmptyFileError(f"{path}: header row is empty")
        if len(set(header)) != len(header):
            dup = sorted({h for h in header if header.count(h) > 1})
            raise ConfigError(f"{path}: duplicate column names {dup}")
        for name in schema:
            if name not in header:
                raise MissingColumnError(name)
        rows = []
        for i, record in enumerate(reader, start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise UnparsableCellError(i, "<row>", f"{len(record)} fields, expected {len(header)}")
            rows.append([_parse_cell(c, i, header[j]) for j, c in enumerate(record)])
    if not rows:
        raise EmptyFileError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    return Dataset(
        {name: table[:, j] for j, name in enumerate(header)},
        {"source": str(path), "rows_read": len(rows)},
    )


@dataclass(frozen=True)
class CleanReport:
    input_rows: int
    dropped_nan: int
    dropped_inf: int
    dropped_sentinel: int
    dropped_total: int

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def clean(
    data: Dataset,
    fill_values: Iterable[float] = DEFAULT_FILL_VALUES,
    columns: Sequence[str] | None = None,
) -> tuple[Dataset, CleanReport]:
    """Drop rows with NaN, Inf or a fill sentinel in any of ``columns``.

    ``columns`` defaults to every column. Per-reason counts count a row once
    per reason it matched, so they can add up to more than ``dropped_total``.
    """
    names = data.names if columns is None else list(columns)
    data.require(names)
    fills = np.array(sorted(set(float(v) for v in fill_values)), dtype=np.float64)
    n = data.row_count
    nan = np.zeros(n, dtype=bool)
    inf = np.zeros(n, dtype=bool)
    sentinel = np.zeros(n, dtype=bool)
    for name in names:
        col = data.columns[name]
        nan |= np.isnan(col)
        inf |= np.isinf(col)
        if fills.size:
            sentinel |= np.isin(col, fills)
    bad = nan | inf | sentinel
    report = CleanReport(
        input_rows=n,
        dropped_nan=int(nan.sum()),
        dropped_inf=int(inf.sum()),
        dropped_sentinel=int(sentinel.sum()),
        dropped_total=int(bad.sum()),
    )
    if n > 0 and report.dropped_total == n:
        raise AllRowsDroppedError(f"all {n} rows contain NaN, Inf or fill values")
    keep = np.flatnonzero(~bad)
    prov = dict(data.provenance)
    prov["cleaning"] = list(prov.get("cleaning", [])) + [report.as_dict()]
    return Dataset({k: v[keep] for k, v in data.columns.items()}, prov), report


# -- synthetic data ---------------------------------------------------------

_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "tan": np.tan,
    "exp": np.exp,
    "log": np.log,
    "sqrt": np.sqrt,
    "abs": np.abs,
    "tanh": np.tanh,
}
_CONSTS = {"pi": math.pi, "e": math.e}
_FEATURE = re.compile(r"^x([1-9][0-9]*)$")
_ALLOWED_NODES = (
    ast.Expression,
    ast.BinOp,
    ast.UnaryOp,
    ast.Call,
    ast.Name,
    ast.Load,
    ast.Constant,
    ast.Add,
    ast.Sub,
    ast.Mult,
    ast.Div,
    ast.Pow,
    ast.USub,
    ast.UAdd,
)


def _compile_generator(expr: str):
    """Parse a target expression in x1..xn; return (code, referenced feature indices)."""
    try:
        tree = ast.parse(expr, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"cannot parse generator {expr!r}: {exc.msg}") from None
    used = set()
    for node in ast.walk(tree):
        if not isinstance(node, _ALLOWED_NODES):
            raise ConfigError(f"generator {expr!r}: {type(node).__name__} not allowed")
        if isinstance(node, ast.Constant) and not isinstance(node.value, (int, float)):
            raise ConfigError(f"generator {expr!r}: only numeric constants allowed")
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
                raise ConfigError(f"generator {expr!r}: unsupported call")
        if isinstance(node, ast.Name) and node.id not in _FUNCS and node.id not in _CONSTS:
            m = _FEATURE.match(node.id)
            if not m:
                raise ConfigError(f"generator {expr!r}: unknown name {node.id!r}")
            used.add(int(m.group(1)))
    return compile(tree, "<generator>", "eval"), used


@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic regression table with a known relevant feature set.

    ``generator`` is an arithmetic expression over ``x1 .. xn`` (1-based) and
    the functions sin, cos, tan, exp, log, sqrt, abs, tanh. It may only
    reference features listed in ``relevant``.
    """

    n_features: int
    relevant: frozenset
    generator: str
    noise_sigma: float = 0.0
    n_rows: int = 1000
    seed: int = 0
    feature_names: tuple | None = None
    target_name: str = "target"

    def __post_init__(self):
        object.__setattr__(self, "relevant", frozenset(int(i) for i in self.relevant))
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.n_rows < 1:
            raise ConfigError("n_rows must be >= 1")
        if not (self.noise_sigma >= 0):
            raise ConfigError("noise_sigma must be >= 0")
        if not self.relevant <= set(range(1, self.n_features + 1)):
            raise ConfigError(f"relevant {sorted(self.relevant)} not within 1..{self.n_features}")
        _, used = _compile_generator(self.generator)
        if not used <= self.relevant:
            raise ConfigError(
                f"generator references x{sorted(used - self.relevant)} outside the relevant set"
            )
        if self.feature_names is not None:
            names = tuple(self.feature_names)
            if len(names) != self.n_features or len(set(names)) != len(names):
                raise ConfigError("feature_names must be n_features unique names")
            if self.target_name in names:
                raise ConfigError("target_name collides with a feature name")
            object.__setattr__(self, "feature_names", names)

    def names(self) -> tuple:
        if self.feature_names is not None:
            return self.feature_names
        return tuple(f"x{i}" for i in range(1, self.n_features + 1))


def synth_generate(spec: SynthSpec) -> Dataset:
    """Features iid U[0, 1); target = generator(relevant features) + N(0, sigma^2) noise."""
    rng = np.random.default_rng(spec.seed)
    features = rng.random((spec.n_rows, spec.n_features))
    noise = rng.normal(0.0, 1.0, spec.n_rows) * spec.noise_sigma
    code, _ = _compile_generator(spec.generator)
    env = dict(_FUNCS)
    env.update(_CONSTS)
    env.update({f"x{i}": features[:, i - 1] for i in sorted(spec.relevant)})
    with np.errstate(all="ignore"):
        signal = eval(code, {"__builtins__": {}}, env)
    signal = np.broadcast_to(np.asarray(signal, dtype=np.float64), (spec.n_rows,))
    if spec.noise_sigma > 0:
        target = signal + noise
    else:
        target = signal.copy()
    cols = {name: features[:, j] for j, name in enumerate(spec.names())}
    cols[spec.target_name] = target
    prov = {
        "source": "synthetic",
        "spec": {
            "n_features": spec.n_features,
            "relevant": sorted(spec.relevant),
            "generator": spec.generator,
            "noise_sigma": spec.noise_sigma,
            "n_rows": spec.n_rows,
            "seed": spec.seed,
        },
    }
    return Dataset(cols, prov)


# -- bias histogram ---------------------------------------------------------


@dataclass(frozen=True)
class Histogram:
    bin_edges: np.ndarray
    counts: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_left_edge", "count"])
            for edge, count in zip(self.bin_edges[:-1], self.counts):
                writer.writerow([repr(float(edge)), int(count)])


def bias_histogram(data: Dataset, col_a: str, col_b: str, n_bins: int = 50) -> Histogram:
    """Equal-width histogram of ``col_a - col_b`` over the finite differences.

    Bins are left-closed except the last, which is closed on both sides.
    """
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    diff = data.column(col_a) - data.column(col_b)
    diff = diff[np.isfinite(diff)]
    counts, edges = np.histogram(diff, bins=n_bins)
    return Histogram(bin_edges=edges, counts=counts)
