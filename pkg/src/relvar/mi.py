"""Dependence measures between two scalar series.

The mutual information estimator works on ranks: both series are mapped to
(rank - 0.5) / N so their marginals are uniform on the unit square, and the
square is then split recursively into quadrants at the within-cell marginal
medians. A split is kept only while a chi-square test rejects uniformity of
the cell; the terminal cells form a variable-bin-width histogram from which
the plug-in MI is computed.

All logarithms are natural, so MI is in nats and the normalized dependence
``sqrt(1 - exp(-2 I))`` equals ``|rho|`` for a bivariate Gaussian.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DegenerateCorrelationError,
    LengthMismatchError,
    NegativeMiError,
    NonFiniteValueError,
    TooFewSamplesError,
    ZeroVarianceError,
)

__all__ = [
    "MiConfig",
    "DependenceScore",
    "PartitionCell",
    "as_series",
    "pearson_correlation",
    "rank_transform",
    "partition",
    "terminal_cells",
    "mutual_information",
    "normalized_dependence",
    "gaussian_mi",
]


@dataclass(frozen=True)
class MiConfig:
    """Parameters of the adaptive-partition estimator.

    ``chi2_threshold`` defaults to the 95% quantile of chi-square with 3
    degrees of freedom (four cells, one constraint on the total).
    """

    chi2_threshold: float = 7.815
    min_cell_count: int = 8
    clamp_negative: bool = True

    def __post_init__(self):
        if not (self.chi2_threshold > 0 and math.isfinite(self.chi2_threshold)):
            raise ConfigError(f"chi2_threshold must be positive, got {self.chi2_threshold}")
        if int(self.min_cell_count) != self.min_cell_count or self.min_cell_count < 4:
            raise ConfigError(f"min_cell_count must be an integer >= 4, got {self.min_cell_count}")


@dataclass(frozen=True)
class DependenceScore:
    mi_nats: float
    raw_mi: float
    pearson: float
    delta: float
    n: int = 0


@dataclass(frozen=True)
class PartitionCell:
    """A cell of the rank-space partition.

    Ranges are half-open intervals of integer ranks ``[lo, hi)`` with
    ranks in ``0..N-1``; the cell's width on the unit square is
    ``(hi - lo) / N``.
    """

    x_range: tuple[int, int]
    y_range: tuple[int, int]
    count: int
    children: tuple["PartitionCell", ...] = field(default=())

    @property
    def is_terminal(self) -> bool:
        return not self.children

    def area(self, n_total: int) -> float:
        return (self.x_range[1] - self.x_range[0]) * (self.y_range[1] - self.y_range[0]) / n_total**2


def as_series(values, name: str = "series") -> np.ndarray:
    """Coerce to a read-only 1-D float64 array, rejecting NaN/Inf."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim != 1:
        arr = arr.ravel()
    if not np.all(np.isfinite(arr)):
        raise NonFiniteValueError(f"{name} contains NaN or Inf")
    arr.flags.writeable = False
    return arr


def _pair(x, y, min_len: int = 2):
    x = as_series(x, "x")
    y = as_series(y, "y")
    if x.shape != y.shape:
        raise LengthMismatchError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < min_len:
        raise TooFewSamplesError(f"need at least {min_len} samples, got {x.size}")
    return x, y


def pearson_correlation(x, y) -> float:
    """Pearson correlation with population (1/N) moments, clamped to [-1, 1]."""
    x, y = _pair(x, y)
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(np.mean(dx * dx))
    sy = math.sqrt(np.mean(dy * dy))
    if sx == 0.0 or sy == 0.0:
        raise ZeroVarianceError("correlation undefined for a constant series")
    rho = float(np.mean(dx * dy)) / (sx * sy)
    return min(1.0, max(-1.0, rho))


def _ranks(x: np.ndarray) -> np.ndarray:
    # 0-based ranks, ties broken by original index
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.int64)
    ranks[order] = np.arange(x.size)
    return ranks


def rank_transform(x) -> np.ndarray:
    """Map each value to ``(rank - 0.5) / N`` with ranks in ``1..N``."""
    x = as_series(x, "x")
    if x.size < 2:
        raise TooFewSamplesError("rank transform needs at least 2 samples")
    return (_ranks(x) + 0.5) / x.size


def _chi2(counts, areas, n, total_area):
    # sum (n_i - e_i)^2 / e_i with e_i = n * a_i / A, each term from exact
    # integers and summed with fsum: the value does not depend on quadrant
    # order, so swapping x and y reproduces it bit-for-bit
    return math.fsum(
        (c * total_area - n * a) ** 2 / (n * a * total_area) for c, a in zip(counts, areas)
    )


def _split_cell(idx, xr, yr, xlo, xhi, ylo, yhi, cfg):
    """Return the four child cells of a cell, or None if it is terminal.

    Children are always cut at the within-cell marginal medians. The cut is
    kept when either of two chi-square statistics reaches the threshold:

    * counts in the four median quadrants against n/4 each (dependence
      inside the cell);
    * counts in the four geometric quadrants of the cell's rank rectangle
      against their area shares (mass piled toward one side or corner,
      which median quadrants cannot see because they are equiprobable by
      construction).
    """
    n = idx.size
    if n < cfg.min_cell_count:
        return None
    xs = xr[idx]
    ys = yr[idx]
    k = n // 2
    mx = int(np.partition(xs, k)[k])
    my = int(np.partition(ys, k)[k])
    left = xs < mx
    low = ys < my
    quads = (
        (left & low, (xlo, mx), (ylo, my)),
        (left & ~low, (xlo, mx), (my, yhi)),
        (~left & low, (mx, xhi), (ylo, my)),
        (~left & ~low, (mx, xhi), (my, yhi)),
    )
    counts = [int(np.count_nonzero(m)) for m, _, _ in quads]
    split = _chi2(counts, (1, 1, 1, 1), n, 4) >= cfg.chi2_threshold
    if not split:
        gx = (xlo + xhi) // 2
        gy = (ylo + yhi) // 2
        gl = xs < gx
        gd = ys < gy
        geo = ((gl & gd), (gl & ~gd), (~gl & gd), (~gl & ~gd))
        areas = (
            (gx - xlo) * (gy - ylo),
            (gx - xlo) * (yhi - gy),
            (xhi - gx) * (gy - ylo),
            (xhi - gx) * (yhi - gy),
        )
        gcounts = [int(np.count_nonzero(m)) for m in geo]
        split = _chi2(gcounts, areas, n, (xhi - xlo) * (yhi - ylo)) >= cfg.chi2_threshold
    if not split:
        return None
    return [(idx[m], xrng, yrng) for m, xrng, yrng in quads]


def _build(xr: np.ndarray, yr: np.ndarray, cfg: MiConfig) -> PartitionCell:
    n = xr.size

    def grow(idx, xrng, yrng):
        parts = _split_cell(idx, xr, yr, xrng[0], xrng[1], yrng[0], yrng[1], cfg)
        if parts is None:
            return PartitionCell((int(xrng[0]), int(xrng[1])), (int(yrng[0]), int(yrng[1])), int(idx.size))
        children = tuple(grow(*p) for p in parts)
        return PartitionCell((int(xrng[0]), int(xrng[1])), (int(yrng[0]), int(yrng[1])), int(idx.size), children)

    return grow(np.arange(n), (0, n), (0, n))


def partition(x, y, cfg: MiConfig | None = None) -> PartitionCell:
    """Adaptive rank-space partition of the pair ``(x, y)``; returns the root cell."""
    cfg = cfg or MiConfig()
    x, y = _pair(x, y)
    return _build(_ranks(x), _ranks(y), cfg)


def terminal_cells(root: PartitionCell) -> list[PartitionCell]:
    out = []
    stack = [root]
    while stack:
        cell = stack.pop()
        if cell.children:
            stack.extend(cell.children)
        else:
            out.append(cell)
    return out


def _partition_mi(xr: np.ndarray, yr: np.ndarray, cfg: MiConfig) -> float:
    n = xr.size
    terms = []
    stack = [(np.arange(n), (0, n), (0, n))]
    while stack:
        idx, xrng, yrng = stack.pop()
        parts = _split_cell(idx, xr, yr, xrng[0], xrng[1], yrng[0], yrng[1], cfg)
        if parts is not None:
            stack.extend(parts)
            continue
        nc = idx.size
        if nc == 0:
            continue
        area = int(xrng[1] - xrng[0]) * int(yrng[1] - yrng[0])
        # p_c * ln(p_c / (w_x w_y)) with p_c = nc/N, w = width/N
        terms.append((nc / n) * math.log(nc * n / area))
    # fsum is exactly rounded, hence order-free
    return math.fsum(terms)


def normalized_dependence(mi_nats: float) -> float:
    """Map MI in nats onto ``[0, 1)`` via ``sqrt(1 - exp(-2 I))``."""
    if mi_nats < 0 or math.isnan(mi_nats):
        raise NegativeMiError(f"mutual information must be >= 0, got {mi_nats}")
    return math.sqrt(-math.expm1(-2.0 * mi_nats))


def gaussian_mi(rho: float) -> float:
    """Exact MI of a bivariate normal with correlation ``rho``, in nats."""
    if not abs(rho) < 1:
        raise DegenerateCorrelationError(f"|rho| must be < 1, got {rho}")
    return -0.5 * math.log1p(-rho * rho)


def mutual_information(x, y, cfg: MiConfig | None = None) -> DependenceScore:
    """Estimate MI between two series by adaptive rank-space partitioning.

    Parameters
    ----------
    x, y : array_like
        Equal-length finite series with at least ``4 * cfg.min_cell_count``
        samples.
    cfg : MiConfig, optional

    Returns
    -------
    DependenceScore
        ``mi_nats`` is the (optionally clamped) estimate, ``raw_mi`` the
        unclamped one; ``pearson`` is computed on the original values.
    """
    cfg = cfg or MiConfig()
    x, y = _pair(x, y, min_len=2)
    if x.size < 4 * cfg.min_cell_count:
        raise TooFewSamplesError(
            f"need at least {4 * cfg.min_cell_count} samples, got {x.size}"
        )
    rho = pearson_correlation(x, y)
    raw = _partition_mi(_ranks(x), _ranks(y), cfg)
    mi = max(raw, 0.0) if cfg.clamp_negative else raw
    delta = normalized_dependence(max(mi, 0.0))
    return DependenceScore(mi_nats=mi, raw_mi=raw, pearson=rho, delta=delta, n=int(x.size))
