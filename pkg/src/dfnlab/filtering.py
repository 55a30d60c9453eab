"""Filtering-network scorers, threshold calibration, and the sharded filter pipeline.

A scorer maps a record to a quality score, pointwise and pure. Filtering
keeps records whose score strictly exceeds a threshold; the threshold is
either fixed or calibrated so a target fraction of the pool survives.
Shards are scored and rewritten independently (optionally across a process
pool); a single-threaded finalizer assembles the output manifest in input
shard order, so results never depend on the worker count.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import DegenerateEmbeddingError, TwoTowerModel, encode_image, encode_text
from .records import Record, RecordBatch
from .seeding import STREAM_BATCH_ORDER, STREAM_RESERVOIR, digest64, make_rng
from .shards import MANIFEST_NAME, ShardInfo, ShardSet, read_shard, write_manifest, write_shard
from .train import NonFiniteLossError, TrainConfig, lr_at

DEFAULT_KEEP_FRACTION = 0.15
DEFAULT_RESERVOIR_CAPACITY = 100_000


class ScoringError(RuntimeError):
    """Scoring failed for a specific record; the message names its id."""


def _one_record_batch(record: Record) -> RecordBatch:
    return RecordBatch(
        ids=np.array([record.id], dtype=np.uint64),
        image=record.image_features[None, :],
        text=record.text_features[None, :],
        labels=np.array([0xFFFFFFFF], dtype=np.uint32),
        aligned=np.array([0xFF], dtype=np.uint8),
    )


@dataclass(frozen=True)
class ClipScorer:
    """Cosine similarity between the two tower embeddings, in [-1, 1]."""

    model: TwoTowerModel

    def score_batch(self, batch: RecordBatch) -> np.ndarray:
        try:
            ie = encode_image(self.model, batch.image)
        except DegenerateEmbeddingError as exc:
            raise ScoringError(
                f"record {int(batch.ids[exc.rows[0]])}: degenerate image embedding"
            ) from exc
        try:
            te = encode_text(self.model, batch.text)
        except DegenerateEmbeddingError as exc:
            raise ScoringError(
                f"record {int(batch.ids[exc.rows[0]])}: degenerate text embedding"
            ) from exc
        return np.clip((ie * te).sum(axis=1), -1.0, 1.0).astype(np.float32)

    def score(self, record: Record) -> float:
        return float(self.score_batch(_one_record_batch(record))[0])


@dataclass(frozen=True)
class BinaryScorer:
    """Logistic classifier probability-of-positive over record features."""

    weights: np.ndarray          # (d,) float32
    bias: float
    features: str = "image"      # "image" or "image_text"

    def _inputs(self, batch: RecordBatch) -> np.ndarray:
        if self.features == "image":
            return batch.image
        if self.features == "image_text":
            return np.concatenate([batch.image, batch.text], axis=1)
        raise ValueError(f"unknown feature mode {self.features!r}")

    def score_batch(self, batch: RecordBatch) -> np.ndarray:
        x = self._inputs(batch)
        if x.shape[1] != self.weights.shape[0]:
            raise ScoringError(
                f"record {int(batch.ids[0])}: feature dimension {x.shape[1]} does not "
                f"match classifier {self.weights.shape[0]}"
            )
        logits = x @ self.weights.astype(np.float32) + np.float32(self.bias)
        return (1.0 / (1.0 + np.exp(-logits))).astype(np.float32)

    def score(self, record: Record) -> float:
        return float(self.score_batch(_one_record_batch(record))[0])


@dataclass(frozen=True)
class ConstantScorer:
    """Fixed score for every record; handy for all-pass / all-drop baselines."""

    value: float

    def score_batch(self, batch: RecordBatch) -> np.ndarray:
        return np.full(len(batch), self.value, dtype=np.float32)

    def score(self, record: Record) -> float:
        return float(np.float32(self.value))


Scorer = ClipScorer | BinaryScorer | ConstantScorer


def score_alignment(scorer: Scorer, record: Record) -> float:
    """Pointwise quality score of one record under the given scorer."""
    return scorer.score(record)


def clip_filter(scorer: Scorer, record: Record, threshold: float = 0.3) -> bool:
    """Keep iff score strictly exceeds the threshold; ties are dropped.

    The comparison happens on 32-bit values, the same representation the
    batch pipeline stores, so pointwise and sharded filtering never disagree
    on borderline records.
    """
    return bool(np.float32(score_alignment(scorer, record)) > np.float32(threshold))


class ReservoirSampler:
    """Uniform reservoir (Algorithm R) over a stream of float32 scores."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._rng = make_rng(seed, STREAM_RESERVOIR)
        self._box = np.empty(capacity, dtype=np.float32)
        self._seen = 0

    def extend(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float32).ravel()
        i = 0
        n = values.size
        if self._seen < self.capacity:
            take = min(self.capacity - self._seen, n)
            self._box[self._seen:self._seen + take] = values[:take]
            self._seen += take
            i = take
        if i >= n:
            return
        positions = np.arange(self._seen, self._seen + (n - i), dtype=np.int64)
        draws = self._rng.integers(0, positions + 1)
        hits = np.flatnonzero(draws < self.capacity)
        for h in hits:
            self._box[draws[h]] = values[i + h]
        self._seen += n - i

    def values(self) -> np.ndarray:
        return self._box[:min(self._seen, self.capacity)].copy()


def _order_statistic_threshold(scores: np.ndarray, keep_fraction: float) -> float:
    """Smallest observed score leaving at most keep_fraction strictly above it."""
    n = scores.size
    # Small nudge so exact decimal fractions (0.3 * 10 -> 2.9999...) round true.
    k = int(np.floor(keep_fraction * n + 1e-9))
    if k >= n:
        low = np.float32(scores.min())
        return float(np.nextafter(low, np.float32(-np.inf)))
    ordered = np.sort(scores)
    return float(ordered[n - k - 1])


def calibrate_threshold(
    scores,
    keep_fraction: float,
    mode: str = "exact",
    capacity: int = DEFAULT_RESERVOIR_CAPACITY,
    seed: int = 0,
) -> float:
    """Threshold such that strictly-greater filtering keeps ~keep_fraction.

    Exact mode takes the (1 - keep_fraction) order statistic of the stream;
    reservoir mode computes the same statistic on a uniform sample of the
    given capacity. Scores are handled as the stored 32-bit values.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    if mode == "exact":
        arr = np.fromiter(scores, dtype=np.float32) if not isinstance(scores, np.ndarray) \
            else scores.astype(np.float32, copy=False)
        if arr.size == 0:
            raise ValueError("cannot calibrate on an empty score stream")
        return _order_statistic_threshold(arr, keep_fraction)
    if mode == "reservoir":
        sampler = ReservoirSampler(capacity, seed=seed)
        if isinstance(scores, np.ndarray):
            sampler.extend(scores)
        else:
            chunk: list[float] = []
            for s in scores:
                chunk.append(s)
                if len(chunk) >= 65536:
                    sampler.extend(np.asarray(chunk, dtype=np.float32))
                    chunk.clear()
            if chunk:
                sampler.extend(np.asarray(chunk, dtype=np.float32))
        sample = sampler.values()
        if sample.size == 0:
            raise ValueError("cannot calibrate on an empty score stream")
        return _order_statistic_threshold(sample, keep_fraction)
    raise ValueError(f"unknown calibration mode {mode!r}")


@dataclass(frozen=True)
class FilterConfig:
    """Either a fixed threshold or a keep-fraction target (not both)."""

    threshold: float | None = None
    keep_fraction: float | None = None
    mode: str = "exact"                      # calibration: "exact" | "reservoir"
    reservoir_capacity: int = DEFAULT_RESERVOIR_CAPACITY
    seed: int = 0

    def validate(self) -> None:
        if self.threshold is not None and self.keep_fraction is not None:
            raise ValueError("set either threshold or keep_fraction, not both")
        kf = self.effective_keep_fraction
        if self.threshold is None and not 0.0 < kf <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")
        if self.mode not in ("exact", "reservoir"):
            raise ValueError(f"unknown calibration mode {self.mode!r}")

    @property
    def effective_keep_fraction(self) -> float:
        if self.keep_fraction is not None:
            return self.keep_fraction
        return DEFAULT_KEEP_FRACTION if self.threshold is None else float("nan")


@dataclass
class ShardFilterStats:
    path: str
    input_count: int
    kept_count: int
    seconds: float = 0.0


@dataclass
class FilterReport:
    input_count: int
    kept_count: int
    threshold: float
    keep_fraction: float | None
    mode: str
    shards: list[ShardFilterStats] = field(default_factory=list)

    def to_dict(self) -> dict:
        # Wall-clock stays in memory only; serialized reports must be
        # byte-identical across re-runs.
        return {
            "input_count": self.input_count,
            "kept_count": self.kept_count,
            "threshold": self.threshold,
            "keep_fraction": self.keep_fraction,
            "mode": self.mode,
            "shards": [
                {"path": s.path, "input_count": s.input_count, "kept_count": s.kept_count}
                for s in self.shards
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _score_shard_task(args) -> tuple[int, np.ndarray]:
    index, path, dims, scorer = args
    batch = read_shard(path, expect_dims=dims)
    return index, scorer.score_batch(batch)


def _filter_shard_task(args) -> tuple[int, ShardInfo, ShardFilterStats]:
    index, path, dims, scorer, threshold, out_path = args
    started = time.perf_counter()
    batch = read_shard(path, expect_dims=dims)
    scores = scorer.score_batch(batch)
    kept = batch.take(np.flatnonzero(scores > np.float32(threshold)))
    sha = write_shard(kept, out_path)
    stats = ShardFilterStats(
        path=Path(out_path).name,
        input_count=len(batch),
        kept_count=len(kept),
        seconds=time.perf_counter() - started,
    )
    return index, ShardInfo(path=Path(out_path), record_count=len(kept), sha256=sha), stats


def _run_tasks(task_fn, tasks, workers: int):
    # Thread workers: every heavy step (file reads/writes, numpy kernels,
    # sha256) releases the GIL, and threads avoid re-pickling shard batches.
    if workers <= 1 or len(tasks) <= 1:
        return [task_fn(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(task_fn, tasks))


def apply_dfn(
    scorer: Scorer,
    config: FilterConfig,
    pool: ShardSet,
    out_dir: Path | str,
    workers: int = 1,
) -> tuple[ShardSet, FilterReport]:
    """Filter a sharded pool, preserving record order and shard order.

    Output shard i holds exactly the surviving records of input shard i, so
    the result is byte-identical for any worker count. In keep-fraction
    mode a calibration pass over all scores runs first (exact or reservoir
    per the config).
    """
    config.validate()
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dims = (pool.d_img, pool.d_txt)

    if config.threshold is not None:
        threshold = float(config.threshold)
        mode = "fixed"
        keep_fraction = None
    else:
        score_tasks = [
            (i, info.path, dims, scorer) for i, info in enumerate(pool.shards)
        ]
        results = _run_tasks(_score_shard_task, score_tasks, workers)
        results.sort(key=lambda r: r[0])
        keep_fraction = config.effective_keep_fraction
        mode = config.mode
        if config.mode == "reservoir":
            sampler = ReservoirSampler(config.reservoir_capacity, seed=config.seed)
            for _, scores in results:
                sampler.extend(scores)
            threshold = _order_statistic_threshold(sampler.values(), keep_fraction)
        else:
            all_scores = np.concatenate([scores for _, scores in results]) \
                if results else np.empty(0, dtype=np.float32)
            if all_scores.size == 0:
                raise ValueError("cannot calibrate on an empty pool")
            threshold = _order_statistic_threshold(all_scores, keep_fraction)

    filter_tasks = [
        (i, info.path, dims, scorer, threshold, out_dir / f"filtered-{i:05d}.dfns")
        for i, info in enumerate(pool.shards)
    ]
    outcomes = _run_tasks(_filter_shard_task, filter_tasks, workers)
    outcomes.sort(key=lambda r: r[0])

    infos = [info for _, info, _ in outcomes]
    stats = [s for _, _, s in outcomes]
    filtered = ShardSet(shards=infos, d_img=pool.d_img, d_txt=pool.d_txt)
    write_manifest(filtered, out_dir / MANIFEST_NAME)
    report = FilterReport(
        input_count=pool.total_records,
        kept_count=sum(s.kept_count for s in stats),
        threshold=threshold,
        keep_fraction=keep_fraction,
        mode=mode,
        shards=stats,
    )
    return filtered, report


def train_binary_filter(
    positives: ShardSet | RecordBatch,
    negatives: ShardSet | RecordBatch,
    config: TrainConfig,
    features: str = "image",
) -> BinaryScorer:
    """Logistic regression separating two pools; deterministic given the seed."""
    config.validate()

    def inputs(p) -> RecordBatch:
        return p.load() if isinstance(p, ShardSet) else p

    pos, neg = inputs(positives), inputs(negatives)
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("both pools must be nonempty")

    def features_of(b: RecordBatch) -> np.ndarray:
        if features == "image":
            return b.image
        if features == "image_text":
            return np.concatenate([b.image, b.text], axis=1)
        raise ValueError(f"unknown feature mode {features!r}")

    x = np.concatenate([features_of(pos), features_of(neg)]).astype(np.float32)
    y = np.concatenate([
        np.ones(len(pos), dtype=np.float32), np.zeros(len(neg), dtype=np.float32)
    ])
    digest = digest64(x.tobytes())
    rng = make_rng(config.seed, STREAM_BATCH_ORDER, digest)
    n, d = x.shape
    w = np.zeros(d, dtype=np.float32)
    b = 0.0
    m_w = np.zeros(d, dtype=np.float32)
    v_w = np.zeros(d, dtype=np.float32)
    m_b = v_b = 0.0
    steps = max(1, config.samples_seen // config.batch_size)
    for step in range(steps):
        idx = rng.integers(0, n, config.batch_size)
        xb, yb = x[idx], y[idx]
        logits = xb @ w + np.float32(b)
        p = 1.0 / (1.0 + np.exp(-logits))
        loss = float(np.mean(
            np.logaddexp(0.0, logits) - yb * logits
        ))
        if not np.isfinite(loss):
            raise NonFiniteLossError(step, loss)
        err = (p - yb) / config.batch_size
        g_w = xb.T @ err + np.float32(config.weight_decay) * w
        g_b = float(err.sum())
        lr = float(lr_at(step, steps, config.learning_rate, config.warmup_steps))
        t = step + 1
        bias1 = 1.0 - config.beta1 ** t
        bias2 = 1.0 - config.beta2 ** t
        m_w = config.beta1 * m_w + (1 - config.beta1) * g_w
        v_w = config.beta2 * v_w + (1 - config.beta2) * g_w * g_w
        w -= np.float32(lr) * (m_w / bias1) / (np.sqrt(v_w / bias2) + config.adam_eps)
        m_b = config.beta1 * m_b + (1 - config.beta1) * g_b
        v_b = config.beta2 * v_b + (1 - config.beta2) * g_b * g_b
        b -= lr * (m_b / bias1) / (np.sqrt(v_b / bias2) + config.adam_eps)
    return BinaryScorer(weights=w, bias=float(b), features=features)
