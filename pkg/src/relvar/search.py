"""Exhaustive feature-subset search.

Every non-empty subset of the candidate columns (optionally restricted by
size) is trained, used to predict the target, and scored by the mutual
information between predicted and observed values. Jobs run in a process
pool; the coordinator streams each finished job to an append-only checkpoint
so an interrupted search can resume, and the final ranking is independent of
worker count and completion order.
"""
from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import time
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .data import Dataset
from .errors import CheckpointCorruptError, ConfigError, EmptyUniverseError, RelvarError
from .mi import DependenceScore, MiConfig, mutual_information
from .regressor import TrainConfig, predict, rms_error, split_indices, train_lm

log = logging.getLogger(__name__)

EVAL_ALL = "all"
EVAL_TEST = "test"
EVAL_SCOPES = (EVAL_ALL, EVAL_TEST)

RESULTS_FORMAT = "relvar-results"
RESULTS_FORMAT_VERSION = 1

TABLE_HEADER = "Combination | Mutual Information (MI) | Corr coeff (rho)"


@dataclass(frozen=True)
class FeatureSubset:
    """A non-empty selection over an ordered universe of column names.

    Bit ``i`` of ``mask`` selects ``universe[i]``, shown as 1-based index
    ``i + 1`` in the canonical string.
    """

    universe: tuple
    mask: int

    def __post_init__(self):
        object.__setattr__(self, "universe", tuple(self.universe))
        if not self.universe:
            raise EmptyUniverseError("universe is empty")
        if not 0 < self.mask < (1 << len(self.universe)):
            raise ConfigError(f"mask {self.mask} is empty or outside a {len(self.universe)}-column universe")

    @classmethod
    def from_indices(cls, universe: Sequence[str], indices: Iterable[int]) -> "FeatureSubset":
        mask = 0
        for i in indices:
            if not 1 <= i <= len(universe):
                raise ConfigError(f"feature index {i} outside 1..{len(universe)}")
            mask |= 1 << (i - 1)
        return cls(tuple(universe), mask)

    @classmethod
    def from_canonical(cls, universe: Sequence[str], text: str) -> "FeatureSubset":
        try:
            indices = [int(t) for t in text.split(",")]
        except ValueError:
            raise ConfigError(f"bad subset string {text!r}") from None
        subset = cls.from_indices(universe, indices)
        if subset.canonical != text:
            raise ConfigError(f"subset string {text!r} is not canonical")
        return subset

    @classmethod
    def from_names(cls, universe: Sequence[str], names: Iterable[str]) -> "FeatureSubset":
        pos = {n: i + 1 for i, n in enumerate(universe)}
        try:
            return cls.from_indices(universe, [pos[n] for n in names])
        except KeyError as exc:
            raise ConfigError(f"{exc.args[0]!r} is not in the universe") from None

    @property
    def indices(self) -> tuple:
        return tuple(i + 1 for i in range(len(self.universe)) if self.mask >> i & 1)

    @property
    def names(self) -> tuple:
        return tuple(self.universe[i - 1] for i in self.indices)

    @property
    def canonical(self) -> str:
        return ",".join(str(i) for i in self.indices)

    def __iter__(self):
        return iter(self.names)

    def __len__(self):
        return bin(self.mask).count("1")

    def __str__(self):
        return self.canonical


def _size_bounds(n: int, min_size: int, max_size: int | None) -> tuple[int, int]:
    if n == 0:
        raise EmptyUniverseError("universe is empty")
    max_size = n if max_size is None else max_size
    if not 1 <= min_size <= max_size <= n:
        raise ConfigError(f"need 1 <= min_size ({min_size}) <= max_size ({max_size}) <= {n}")
    return min_size, max_size


def count_subsets(n: int, min_size: int = 1, max_size: int | None = None) -> int:
    lo, hi = _size_bounds(n, min_size, max_size)
    return sum(comb(n, k) for k in range(lo, hi + 1))


def enumerate_subsets(
    universe: Sequence[str], min_size: int = 1, max_size: int | None = None
) -> list[FeatureSubset]:
    """All subsets with ``min_size <= size <= max_size``, in ascending mask order."""
    universe = tuple(universe)
    lo, hi = _size_bounds(len(universe), min_size, max_size)
    return [
        FeatureSubset(universe, mask)
        for mask in range(1, 1 << len(universe))
        if lo <= bin(mask).count("1") <= hi
    ]


# -- results ----------------------------------------------------------------


@dataclass(frozen=True)
class SearchResult:
    subset: FeatureSubset
    score: DependenceScore | None
    test_rms: float | None
    epochs: int
    stop_reason: str
    wall_time: float | None
    status: str = "ok"
    reason: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_record(self, with_time: bool = True) -> dict:
        s = self.score
        return {
            "subset": self.subset.canonical,
            "raw_mi": s.raw_mi if s else None,
            "mi_nats": s.mi_nats if s else None,
            "pearson": s.pearson if s else None,
            "delta": s.delta if s else None,
            "test_rms": self.test_rms,
            "epochs": self.epochs,
            "stop_reason": self.stop_reason,
            "wall_time": self.wall_time if with_time else None,
            "status": self.status,
            "reason": self.reason,
        }

    @classmethod
    def from_record(cls, universe: Sequence[str], rec: dict) -> "SearchResult":
        subset = FeatureSubset.from_canonical(universe, rec["subset"])
        score = None
        if rec["status"] == "ok":
            score = DependenceScore(
                mi_nats=rec["mi_nats"], raw_mi=rec["raw_mi"], pearson=rec["pearson"], delta=rec["delta"]
            )
        return cls(
            subset=subset,
            score=score,
            test_rms=rec["test_rms"],
            epochs=int(rec["epochs"]),
            stop_reason=rec["stop_reason"],
            wall_time=rec["wall_time"],
            status=rec["status"],
            reason=rec.get("reason", ""),
        )


def ranking_key(result: SearchResult):
    # MI desc, then rho desc, then canonical string asc; failures last
    if not result.ok:
        return (1, 0.0, 0.0, result.subset.canonical)
    return (0, -result.score.mi_nats, -result.score.pearson, result.subset.canonical)


def _dump(obj) -> str:
    return json.dumps(obj, allow_nan=False)


@dataclass
class RankingTable:
    results: list
    manifest: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: Iterable[SearchResult], manifest: dict) -> "RankingTable":
        return cls(sorted(results, key=ranking_key), dict(manifest))

    def __len__(self):
        return len(self.results)

    @property
    def n_failed(self) -> int:
        return sum(not r.ok for r in self.results)

    def dumps(self) -> str:
        """Header line plus one record per subset, in rank order.

        Wall-clock times are written as null so that the file is a pure
        function of data and configuration; the checkpoint keeps them.
        """
        lines = [_dump({"kind": "ranking", **self.manifest})]
        lines += [_dump(r.to_record(with_time=False)) for r in self.results]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RankingTable":
        with open(path, encoding="utf-8") as fh:
            try:
                header = json.loads(fh.readline())
                universe = header["universe"]
                results = [SearchResult.from_record(universe, json.loads(line)) for line in fh if line.strip()]
            except (ValueError, KeyError, TypeError) as exc:
                raise CheckpointCorruptError(f"{path}: unreadable results file ({exc})") from None
        header.pop("kind", None)
        return cls.from_results(results, header)


def report_table(table: RankingTable, top_n: int = 15) -> str:
    """Three-column text table (combination, MI, rho) of the ``top_n`` best rows."""
    if top_n < 1:
        raise ConfigError("top_n must be >= 1")
    lines = [TABLE_HEADER]
    for r in table.results[:top_n]:
        if r.ok:
            lines.append(f"{r.subset.canonical} | {r.score.mi_nats:.3f} | {r.score.pearson:.3f}")
        else:
            lines.append(f"{r.subset.canonical} | failed | failed")
    return "\n".join(lines) + "\n"


# -- evaluation -------------------------------------------------------------


def evaluate_subset(
    subset: FeatureSubset,
    data: Dataset,
    target_col: str,
    cfg: TrainConfig,
    eval_scope: str = EVAL_ALL,
    mi_cfg: MiConfig | None = None,
) -> SearchResult:
    """Train on ``subset``, predict, and score predicted vs observed target.

    Failures inside training or scoring are returned as a result with
    ``status == "failed"`` rather than raised.
    """
    if eval_scope not in EVAL_SCOPES:
        raise ConfigError(f"eval_scope must be one of {EVAL_SCOPES}, got {eval_scope!r}")
    start = time.perf_counter()
    epochs, stop = 0, ""
    try:
        model, trace = train_lm(data, target_col, subset.names, cfg, init_key=subset.mask)
        epochs, stop = trace.epochs, trace.stop_reason
        pred = predict(model, data)
        obs = data.column(target_col)
        _, _, test = split_indices(data.row_count, cfg)
        test_rms = rms_error(pred[test], obs[test])
        rows = test if eval_scope == EVAL_TEST else slice(None)
        score = mutual_information(pred[rows], obs[rows], mi_cfg)
    except (RelvarError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return SearchResult(
            subset, None, None, epochs, stop, time.perf_counter() - start,
            status="failed", reason=f"{type(exc).__name__}: {exc}",
        )
    return SearchResult(subset, score, test_rms, epochs, stop, time.perf_counter() - start)


# Worker-process state, installed once per process by _init_worker.
_JOB: dict = {}


def _init_worker(data, target_col, cfg, eval_scope, mi_cfg, universe):
    _JOB.update(
        data=data, target=target_col, cfg=cfg, scope=eval_scope, mi_cfg=mi_cfg, universe=universe,
        limits=threadpool_limits(1),
    )


def _work(mask: int) -> dict:
    subset = FeatureSubset(_JOB["universe"], mask)
    res = evaluate_subset(subset, _JOB["data"], _JOB["target"], _JOB["cfg"], _JOB["scope"], _JOB["mi_cfg"])
    return res.to_record()


# -- checkpoint -------------------------------------------------------------


def search_manifest(
    data: Dataset,
    target_col: str,
    cfg: TrainConfig,
    universe: Sequence[str],
    min_size: int,
    max_size: int,
    eval_scope: str,
    mi_cfg: MiConfig,
) -> dict:
    return {
        "format": RESULTS_FORMAT,
        "format_version": RESULTS_FORMAT_VERSION,
        "tool_version": __version__,
        "dataset_hash": data.content_hash(),
        "rows": data.row_count,
        "target": target_col,
        "universe": list(universe),
        "min_size": min_size,
        "max_size": max_size,
        "eval_scope": eval_scope,
        "seed": cfg.seed,
        "train_config": cfg.as_dict(),
        "mi_config": dict(mi_cfg.__dict__),
    }


def read_checkpoint(path, manifest: dict, valid_masks: set) -> dict:
    """Load completed results from a checkpoint written for ``manifest``.

    A final line without a trailing newline (a write cut short by an
    interrupt) is discarded and truncated away. Any other inconsistency
    raises :class:`CheckpointCorruptError`.
    """
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        raise CheckpointCorruptError(f"{path}: empty checkpoint")
    body_end = raw.rfind(b"\n") + 1
    if body_end < len(raw):
        log.warning("%s: discarding truncated final record", path)
        with open(path, "r+b") as fh:
            fh.truncate(body_end)
        raw = raw[:body_end]
    lines = raw.decode("utf-8").splitlines()
    try:
        header = json.loads(lines[0])
    except (ValueError, IndexError) as exc:
        raise CheckpointCorruptError(f"{path}: bad header ({exc})") from None
    if header.get("kind") != "checkpoint":
        raise CheckpointCorruptError(f"{path}: not a checkpoint file")
    header.pop("kind")
    diff = sorted(k for k in set(header) | set(manifest) if header.get(k) != manifest.get(k))
    if diff:
        raise CheckpointCorruptError(f"{path}: checkpoint was written for a different search ({', '.join(diff)} differ)")
    universe = manifest["universe"]
    done = {}
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            res = SearchResult.from_record(universe, json.loads(line))
        except (ValueError, KeyError, TypeError, RelvarError) as exc:
            raise CheckpointCorruptError(f"{path}:{lineno}: bad record ({exc})") from None
        if res.subset.mask not in valid_masks:
            raise CheckpointCorruptError(f"{path}:{lineno}: subset {res.subset} is not part of this search")
        if res.subset.mask in done:
            raise CheckpointCorruptError(f"{path}:{lineno}: duplicate subset {res.subset}")
        done[res.subset.mask] = res
    return done


ProgressFn = Callable[[int, int, SearchResult], None]


def run_search(
    data: Dataset,
    target_col: str,
    cfg: TrainConfig,
    *,
    universe: Sequence[str] | None = None,
    min_size: int = 1,
    max_size: int | None = None,
    workers: int = 1,
    checkpoint_path=None,
    resume: bool = False,
    eval_scope: str = EVAL_ALL,
    mi_cfg: MiConfig | None = None,
    progress: ProgressFn | None = None,
) -> RankingTable:
    """Evaluate every subset of ``universe`` and return the ranked table.

    Parameters
    ----------
    universe
        Candidate columns; defaults to every column except the target.
    workers
        Number of worker processes; 1 runs in-process.
    checkpoint_path
        If given, each finished job is appended to this file. With
        ``resume=True`` an existing file is loaded first and finished subsets
        are skipped; without it the file is overwritten.
    progress
        Called as ``progress(done, total, result)`` after each job.
    """
    if workers < 1:
        raise ConfigError("workers must be >= 1")
    if eval_scope not in EVAL_SCOPES:
        raise ConfigError(f"eval_scope must be one of {EVAL_SCOPES}, got {eval_scope!r}")
    mi_cfg = mi_cfg or MiConfig()
    universe = tuple(universe) if universe is not None else tuple(n for n in data.names if n != target_col)
    data.require(list(universe) + [target_col])
    if target_col in universe:
        raise ConfigError("target column cannot be a candidate feature")
    subsets = enumerate_subsets(universe, min_size, max_size)
    lo, hi = _size_bounds(len(universe), min_size, max_size)
    manifest = search_manifest(data, target_col, cfg, universe, lo, hi, eval_scope, mi_cfg)

    done: dict = {}
    if checkpoint_path is not None and resume and Path(checkpoint_path).exists():
        done = read_checkpoint(checkpoint_path, manifest, {s.mask for s in subsets})
        log.info("resuming: %d of %d subsets already done", len(done), len(subsets))
    pending = [s.mask for s in subsets if s.mask not in done]
    total = len(subsets)

    ckpt = None
    if checkpoint_path is not None:
        if done:
            ckpt = open(checkpoint_path, "a", encoding="utf-8")
        else:
            ckpt = open(checkpoint_path, "w", encoding="utf-8")
            ckpt.write(_dump({"kind": "checkpoint", **manifest}) + "\n")
            ckpt.flush()

    def record(rec: dict):
        res = SearchResult.from_record(universe, rec)
        done[res.subset.mask] = res
        if ckpt is not None:
            ckpt.write(_dump(rec) + "\n")
            ckpt.flush()
        if progress is not None:
            progress(len(done), total, res)

    try:
        if workers == 1 or len(pending) <= 1:
            with threadpool_limits(1):
                for mask in pending:
                    res = evaluate_subset(FeatureSubset(universe, mask), data, target_col, cfg, eval_scope, mi_cfg)
                    record(res.to_record())
        else:
            ctx = mp.get_context("fork" if "fork" in mp.get_all_start_methods() else "spawn")
            chunk = max(1, min(16, len(pending) // (workers * 8)))
            with ctx.Pool(
                processes=workers,
                initializer=_init_worker,
                initargs=(data, target_col, cfg, eval_scope, mi_cfg, universe),
            ) as pool:
                for rec in pool.imap_unordered(_work, pending, chunksize=chunk):
                    record(rec)
    finally:
        if ckpt is not None:
            ckpt.close()

    return RankingTable.from_results(done.values(), manifest)


def default_workers() -> int:
    env = os.environ.get("RELVAR_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"RELVAR_WORKERS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1
