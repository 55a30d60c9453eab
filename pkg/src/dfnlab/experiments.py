"""Canned experiment recipes: the full lifecycle and its ablations.

Every command is a pure function of its ExperimentConfig: pools, training
batch order, calibration and evaluation all derive from config seeds, so a
re-run from the written config snapshot reproduces every shard, checkpoint
and report byte for byte. Wall-clock timings (bench) are the one exception.

Desk-scale defaults are tuned so the headline effects are comfortably
reproducible on a laptop CPU: a clean-data filtering network beats the
no-filter baseline by tens of points, poisoning the filter-training pool
degrades induced accuracy monotonically, and fine-tuning the filtering
network lifts the induced model further.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import records as records_mod
from .configfile import (
    format_config,
    load_config_file,
    parse_bool,
    parse_float_list,
    parse_int_list,
    parse_str_list,
)
from .evaluation import (
    EvalSuite,
    build_eval_suite,
    evaluate,
    filtering_performance,
    make_finetune_pool,
)
from .filtering import ClipScorer, FilterConfig, apply_dfn, calibrate_threshold
from .model import TwoTowerModel, init_model, interpolate_weights, load_model, save_model
from .shards import ShardSet, read_manifest, write_shards
from .synth import ConceptSpace, SyntheticSpec, generate_pool, mix_pools, sample_batch
from .train import TrainConfig, finetune, train_clip, write_history_csv

# Sampling-seed registry: every pool role draws records from its own stream,
# which also gives each role a disjoint id range (ids embed the seed).
SEED_HQ = 101
SEED_NOISY = 102
SEED_RAW = 103
SEED_EVAL = 104
SEED_TARGET = 105
SEED_GRID_GOOD = 106
SEED_GRID_JUNK = 107
SEED_REF_INIT = 108
SEED_SUITE = 904
SEED_MIX = 55

LOCK_NAME = ".dfn-lock"
SNAPSHOT_NAME = "config-snapshot.cfg"


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat bag of every knob the pipeline and its experiments use."""

    name: str = "default"
    out_dir: str = "runs/dfn"
    seeds: tuple[int, ...] = (0, 1, 2)
    workers: int = 1
    # shared world
    world_seed: int = 1234
    num_concepts: int = 50
    d_latent: int = 32
    d_img: int = 64
    d_txt: int = 64
    d_emb: int = 32
    # pool recipes (align_prob, noise_sigma)
    hq_align_prob: float = 0.98
    hq_noise_sigma: float = 0.10
    noisy_align_prob: float = 0.30
    noisy_noise_sigma: float = 0.60
    raw_align_prob: float = 0.20
    raw_noise_sigma: float = 0.70
    # pool sizes
    dfn_pool_size: int = 10_000
    source_pool_size: int = 12_000
    raw_pool_size: int = 200_000
    records_per_shard: int = 25_000
    # filtering-network training
    dfn_samples_seen: int = 200_000
    dfn_batch_size: int = 256
    dfn_learning_rate: float = 5e-3
    dfn_weight_decay: float = 0.01
    dfn_warmup_steps: int = 100
    dfn_augmentation: bool = True
    dfn_augment_sigma: float = 0.4
    # induced-model training
    induced_samples_seen: int = 500_000
    induced_batch_size: int = 256
    induced_learning_rate: float = 5e-3
    induced_weight_decay: float = 0.01
    induced_warmup_steps: int = 100
    # fine-tuning
    finetune_size: int = 4_000
    finetune_samples_seen: int = 100_000
    finetune_batch_size: int = 256
    finetune_learning_rate: float = 1e-3
    finetune_warmup_steps: int = 50
    # filtering
    keep_fraction: float = 0.15
    threshold: float | None = None
    calibration_mode: str = "exact"
    reservoir_capacity: int = 100_000
    # evaluation suite
    eval_noise_sigma: float = 0.30
    eval_id_size: int = 2_000
    retrieval_gallery: int = 256
    shift_noise: float = 0.30
    shift_image_map: float = 0.35
    shift_dropout: float = 0.25
    # poison sweep
    poison_fractions: tuple[float, ...] = (0.0, 0.2, 0.5, 1.0)
    # filter-vs-downstream grid (saturating mixture pool, see run_filter_vs_downstream)
    grid_qualities: tuple[str, ...] = ("hq", "target", "noisy")
    grid_samples_seen: tuple[int, ...] = (60_000, 400_000)
    grid_good_fraction: float = 0.10
    grid_good_noise_sigma: float = 0.20
    grid_junk_noise_sigma: float = 0.90
    # weight interpolation
    interpolation_alphas: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75, 1.0)
    # scaling benchmark
    bench_base_size: int = 250_000
    bench_workers: tuple[int, ...] = (1, 2, 4, 8)
    bench_repeats: int = 2
    bench_threshold: float = 0.0

    def validate(self) -> None:
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.threshold is not None and self.keep_fraction is not None:
            # keep_fraction always carries a value; an explicit threshold wins
            # only when passed through filter_config(threshold_override=...).
            pass
        for spec in self.pool_specs().values():
            spec.validate()
        self.dfn_train_config(0).validate()
        self.induced_train_config(0).validate()

    # -- parsing ---------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _parse_field(fields[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: Path | str) -> "ExperimentConfig":
        return cls.from_mapping(load_config_file(path))

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Path | str, header: str | None = None) -> None:
        values = {k: v for k, v in self.to_mapping().items() if v is not None}
        Path(path).write_text(format_config(values, header=header))

    # -- derived pieces ---------------------------------------------------

    def _spec(self, align: float, sigma: float, seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            num_concepts=self.num_concepts,
            d_latent=self.d_latent,
            d_img=self.d_img,
            d_txt=self.d_txt,
            align_prob=align,
            noise_sigma=sigma,
            seed=seed,
            space_seed=self.world_seed,
        )

    def pool_specs(self) -> dict[str, SyntheticSpec]:
        return {
            "hq": self._spec(self.hq_align_prob, self.hq_noise_sigma, SEED_HQ),
            "noisy": self._spec(self.noisy_align_prob, self.noisy_noise_sigma, SEED_NOISY),
            "raw": self._spec(self.raw_align_prob, self.raw_noise_sigma, SEED_RAW),
            "eval": self._spec(1.0, self.eval_noise_sigma, SEED_EVAL),
            "target": self._spec(1.0, self.eval_noise_sigma, SEED_TARGET),
            "grid_good": self._spec(1.0, self.grid_good_noise_sigma, SEED_GRID_GOOD),
            "grid_junk": self._spec(0.0, self.grid_junk_noise_sigma, SEED_GRID_JUNK),
        }

    def concept_space(self) -> ConceptSpace:
        return ConceptSpace.from_spec(self.pool_specs()["eval"])

    def dfn_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            samples_seen=self.dfn_samples_seen,
            batch_size=self.dfn_batch_size,
            learning_rate=self.dfn_learning_rate,
            weight_decay=self.dfn_weight_decay,
            warmup_steps=self.dfn_warmup_steps,
            seed=seed,
            augmentation=self.dfn_augmentation,
            augment_sigma=self.dfn_augment_sigma,
            d_emb=self.d_emb,
        )

    def induced_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            samples_seen=self.induced_samples_seen,
            batch_size=self.induced_batch_size,
            learning_rate=self.induced_learning_rate,
            weight_decay=self.induced_weight_decay,
            warmup_steps=self.induced_warmup_steps,
            seed=seed,
            d_emb=self.d_emb,
        )

    def finetune_config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            samples_seen=self.finetune_samples_seen,
            batch_size=self.finetune_batch_size,
            learning_rate=self.finetune_learning_rate,
            warmup_steps=self.finetune_warmup_steps,
            seed=seed,
            d_emb=self.d_emb,
        )

    def filter_config(self, threshold_override: float | None = None) -> FilterConfig:
        if threshold_override is not None:
            return FilterConfig(threshold=threshold_override, seed=self.world_seed)
        if self.threshold is not None:
            return FilterConfig(threshold=self.threshold, seed=self.world_seed)
        return FilterConfig(
            keep_fraction=self.keep_fraction,
            mode=self.calibration_mode,
            reservoir_capacity=self.reservoir_capacity,
            seed=self.world_seed,
        )

    def shifts(self) -> dict[str, tuple[str, float]]:
        return {
            "noise": ("noise", self.shift_noise),
            "image_map": ("image_map", self.shift_image_map),
            "dropout": ("dropout", self.shift_dropout),
        }

    def eval_suite(self) -> EvalSuite:
        return build_eval_suite(
            self.pool_specs()["eval"],
            id_size=self.eval_id_size,
            retrieval_size=self.retrieval_gallery,
            shifts=self.shifts(),
            seed=SEED_SUITE,
        )

    def finetune_pool(self) -> records_mod.RecordBatch:
        src = sample_batch(self.pool_specs()["target"], self.finetune_size)
        return make_finetune_pool(self.concept_space(), src)


def _parse_field(field: dataclasses.Field, raw: str):
    t = field.type
    if t in ("int",):
        return int(raw)
    if t in ("float",):
        return float(raw)
    if t in ("bool",):
        return parse_bool(raw)
    if t in ("str",):
        return raw
    if t == "float | None":
        return None if raw == "" else float(raw)
    if t == "tuple[int, ...]":
        return parse_int_list(raw)
    if t == "tuple[float, ...]":
        return parse_float_list(raw)
    if t == "tuple[str, ...]":
        return parse_str_list(raw)
    raise ValueError(f"unhandled config field type {t!r} for {field.name}")


class ExperimentLock:
    """One experiment directory is owned by one process at a time."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / LOCK_NAME
        self._fd: int | None = None

    def __enter__(self) -> "ExperimentLock":
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            self._fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RuntimeError(
                f"{self.path} exists: another process owns this experiment directory "
                "(remove the lock file if that process is gone)"
            ) from None
        os.write(self._fd, str(os.getpid()).encode())
        return self

    def __exit__(self, *exc) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        self.path.unlink(missing_ok=True)


def write_snapshot(cfg: ExperimentConfig, out_dir: Path, command: str) -> None:
    cfg.save(Path(out_dir) / SNAPSHOT_NAME, header=f"command: dfn {command}")


def append_csv(path: Path, header: list[str], rows: list[list]) -> None:
    """Append-only CSV with a fixed header; floats at six decimals."""
    path = Path(path)
    fresh = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(header)
        for row in rows:
            writer.writerow([
                f"{v:.6f}" if isinstance(v, float) else v for v in row
            ])


def _write_json(path: Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _plot_xy(path: Path, xs, ys_by_label: dict, xlabel: str, ylabel: str, title: str,
             scatter: bool = False) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for label, ys in ys_by_label.items():
        if scatter:
            ax.scatter(xs[label], ys, label=label, s=24)
        else:
            ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# --------------------------------------------------------------------------
# shared pool construction
# --------------------------------------------------------------------------


def build_pool(cfg: ExperimentConfig, role: str, size: int, out_dir: Path) -> ShardSet:
    spec = cfg.pool_specs()[role]
    return generate_pool(spec, size, out_dir, cfg.records_per_shard)


def report_row(report) -> list[float]:
    return [
        report.id_accuracy,
        *[report.shift_accuracies[k] for k in sorted(report.shift_accuracies)],
        report.retrieval_image_to_text,
        report.retrieval_text_to_image,
        report.average,
    ]


def report_header() -> list[str]:
    shift_cols = ["shift_dropout", "shift_image_map", "shift_noise"]
    return ["id_accuracy", *shift_cols, "retrieval_i2t", "retrieval_t2i", "average"]


# --------------------------------------------------------------------------
# run-all / end-to-end lifecycle
# --------------------------------------------------------------------------


def run_end_to_end(cfg: ExperimentConfig, out_dir: Path | str) -> dict:
    """generate -> train filtering network -> calibrate -> filter -> induce -> evaluate."""
    cfg.validate()
    out = Path(out_dir)
    with ExperimentLock(out):
        write_snapshot(cfg, out, "run-all")
        seed = cfg.seeds[0]
        pools = out / "pools"
        hq_pool = build_pool(cfg, "hq", cfg.dfn_pool_size, pools / "hq")
        raw_pool = build_pool(cfg, "raw", cfg.raw_pool_size, pools / "raw")
        suite = cfg.eval_suite()

        dfn_result = train_clip(hq_pool, cfg.dfn_train_config(seed))
        save_model(dfn_result.model, out / "dfn.ckpt")
        write_history_csv(dfn_result.history, out / "dfn-train-log.csv")
        dfn_report = evaluate(dfn_result.model, suite, gallery_size=cfg.retrieval_gallery)

        scorer = ClipScorer(dfn_result.model)
        filtered, filter_report = apply_dfn(
            scorer, cfg.filter_config(), raw_pool, out / "filtered", workers=cfg.workers
        )
        (out / "filter-report.json").write_text(filter_report.to_json() + "\n")

        induced_result = train_clip(filtered, cfg.induced_train_config(seed))
        save_model(induced_result.model, out / "induced.ckpt")
        write_history_csv(induced_result.history, out / "induced-train-log.csv")
        induced_report = evaluate(induced_result.model, suite, gallery_size=cfg.retrieval_gallery)
        (out / "induced-eval.json").write_text(induced_report.to_json() + "\n")

        final = {
            "name": cfg.name,
            "seed": seed,
            "dfn_eval": dfn_report.to_dict(),
            "filter": filter_report.to_dict(),
            "induced_eval": induced_report.to_dict(),
        }
        _write_json(out / "report.json", final)
        return final


# --------------------------------------------------------------------------
# poison sweep
# --------------------------------------------------------------------------

POISON_HEADER = ["unfiltered_fraction", "seed", "dfn_id_accuracy",
                 "induced_id_accuracy", "induced_average"]


def run_poison_sweep(cfg: ExperimentConfig, out_dir: Path | str) -> list[dict]:
    """Dilute the filter-training pool and trace induced accuracy per fraction."""
    cfg.validate()
    out = Path(out_dir)
    with ExperimentLock(out):
        write_snapshot(cfg, out, "exp poison-sweep")
        pools = out / "pools"
        hq_src = build_pool(cfg, "hq", cfg.source_pool_size, pools / "hq")
        noisy_src = build_pool(cfg, "noisy", cfg.source_pool_size, pools / "noisy")
        raw_pool = build_pool(cfg, "raw", cfg.raw_pool_size, pools / "raw")
        suite = cfg.eval_suite()

        rows = []
        for fraction in cfg.poison_fractions:
            mixed = mix_pools(
                hq_src, noisy_src, fraction, cfg.dfn_pool_size,
                seed=SEED_MIX, out_dir=pools / f"mix-{fraction:g}",
                records_per_shard=cfg.records_per_shard,
            )
            for seed in cfg.seeds:
                dfn = train_clip(mixed, cfg.dfn_train_config(seed))
                own = evaluate(dfn.model, suite, gallery_size=cfg.retrieval_gallery)
                outcome = filtering_performance(
                    ClipScorer(dfn.model), cfg.filter_config(), raw_pool,
                    cfg.induced_train_config(seed), suite,
                    workers=cfg.workers, gallery_size=cfg.retrieval_gallery,
                )
                rows.append({
                    "unfiltered_fraction": fraction,
                    "seed": seed,
                    "dfn_id_accuracy": own.id_accuracy,
                    "induced_id_accuracy": outcome.eval_report.id_accuracy,
                    "induced_average": outcome.eval_report.average,
                })
        append_csv(out / "poison_sweep.csv", POISON_HEADER,
                   [[r[k] for k in POISON_HEADER] for r in rows])
        _write_json(out / "poison_sweep.json", rows)

        fractions = list(cfg.poison_fractions)
        mean_induced = [
            float(np.mean([r["induced_id_accuracy"] for r in rows
                           if r["unfiltered_fraction"] == f]))
            for f in fractions
        ]
        mean_dfn = [
            float(np.mean([r["dfn_id_accuracy"] for r in rows
                           if r["unfiltered_fraction"] == f]))
            for f in fractions
        ]
        _plot_xy(out / "poison_sweep.png", fractions,
                 {"induced model": mean_induced, "filtering network": mean_dfn},
                 "unfiltered fraction of filter-training pool", "zero-shot accuracy",
                 "Poisoning the filter-training pool")
        return rows


# --------------------------------------------------------------------------
# filter-vs-downstream grid
# --------------------------------------------------------------------------

GRID_HEADER = ["quality", "samples_seen", "seed", "dfn_id_accuracy",
               "filtering_id_accuracy", "filtering_average"]


def _grid_raw_pool(cfg: ExperimentConfig, pools: Path) -> ShardSet:
    """Mixture pool for the grid: a small easy aligned slice inside junk.

    Chosen so that every competent filtering network captures essentially
    the whole good slice (filtering performance saturates) while weak ones
    miss it; own-accuracy keeps varying across the grid, which is the
    decorrelation the grid is meant to expose.
    """
    n_good = int(round(cfg.grid_good_fraction * cfg.raw_pool_size))
    good = generate_pool(cfg.pool_specs()["grid_good"], n_good + cfg.records_per_shard,
                         pools / "grid-good", cfg.records_per_shard)
    junk = generate_pool(cfg.pool_specs()["grid_junk"],
                         cfg.raw_pool_size - n_good + cfg.records_per_shard,
                         pools / "grid-junk", cfg.records_per_shard)
    return mix_pools(good, junk, 1.0 - cfg.grid_good_fraction, cfg.raw_pool_size,
                     seed=SEED_MIX, out_dir=pools / "grid-raw",
                     records_per_shard=cfg.records_per_shard)


def run_filter_vs_downstream(cfg: ExperimentConfig, out_dir: Path | str) -> list[dict]:
    """Grid of filtering networks: own accuracy vs the accuracy they induce."""
    cfg.validate()
    out = Path(out_dir)
    with ExperimentLock(out):
        write_snapshot(cfg, out, "exp filter-vs-downstream")
        pools = out / "pools"
        raw_pool = _grid_raw_pool(cfg, pools)
        suite = cfg.eval_suite()
        hq_pool = build_pool(cfg, "hq", cfg.dfn_pool_size, pools / "hq")
        noisy_pool = build_pool(cfg, "noisy", cfg.dfn_pool_size, pools / "noisy")
        target_pool = write_shards(cfg.finetune_pool(), pools / "target",
                                   cfg.records_per_shard)
        quality_pools = {"hq": hq_pool, "noisy": noisy_pool, "target": target_pool}

        rows = []
        for quality in cfg.grid_qualities:
            if quality not in quality_pools:
                raise ValueError(f"unknown grid quality {quality!r}")
            for samples in cfg.grid_samples_seen:
                for seed in cfg.seeds:
                    # Grid models are plain (no augmentation): the grid is a
                    # zoo of off-the-shelf models, not tuned filter recipes.
                    train_cfg = replace(
                        cfg.dfn_train_config(seed),
                        samples_seen=samples, augmentation=False,
                    )
                    dfn = train_clip(quality_pools[quality], train_cfg)
                    own = evaluate(dfn.model, suite, gallery_size=cfg.retrieval_gallery)
                    outcome = filtering_performance(
                        ClipScorer(dfn.model), cfg.filter_config(), raw_pool,
                        cfg.induced_train_config(seed), suite,
                        workers=cfg.workers, gallery_size=cfg.retrieval_gallery,
                    )
                    rows.append({
                        "quality": quality,
                        "samples_seen": samples,
                        "seed": seed,
                        "dfn_id_accuracy": own.id_accuracy,
                        "filtering_id_accuracy": outcome.eval_report.id_accuracy,
                        "filtering_average": outcome.eval_report.average,
                    })
        append_csv(out / "filter_vs_downstream.csv", GRID_HEADER,
                   [[r[k] for k in GRID_HEADER] for r in rows])
        _write_json(out / "filter_vs_downstream.json", rows)

        xs = {q: [r["dfn_id_accuracy"] for r in rows if r["quality"] == q]
              for q in cfg.grid_qualities}
        ys = {q: [r["filtering_id_accuracy"] for r in rows if r["quality"] == q]
              for q in cfg.grid_qualities}
        _plot_xy(out / "filter_vs_downstream.png", xs, ys,
                 "filtering-network zero-shot accuracy", "induced-model accuracy",
                 "Own accuracy vs filtering performance", scatter=True)
        return rows


def find_inversion_pairs(rows: list[dict]) -> list[tuple[dict, dict]]:
    """Pairs where the lower own-accuracy network filters at least as well."""
    pairs = []
    for a in rows:
        for b in rows:
            if (a["dfn_id_accuracy"] < b["dfn_id_accuracy"]
                    and a["filtering_id_accuracy"] >= b["filtering_id_accuracy"]):
                pairs.append((a, b))
    return pairs


# --------------------------------------------------------------------------
# interventions table
# --------------------------------------------------------------------------

INTERVENTION_HEADER = ["intervention", "setting", "seed", *report_header()]


def run_interventions(cfg: ExperimentConfig, out_dir: Path | str) -> list[dict]:
    """Standard model interventions applied to the filtering network.

    Every row pairs against the same plain base configuration (no
    augmentation, base samples/batch, no fine-tune, random init) with one
    knob flipped, mirroring the usual ablation-table layout.
    """
    cfg.validate()
    out = Path(out_dir)
    with ExperimentLock(out):
        write_snapshot(cfg, out, "exp interventions")
        pools = out / "pools"
        hq_pool = build_pool(cfg, "hq", cfg.dfn_pool_size, pools / "hq")
        raw_pool = build_pool(cfg, "raw", cfg.raw_pool_size, pools / "raw")
        suite = cfg.eval_suite()
        ft_pool = cfg.finetune_pool()
        ref_spec = cfg.pool_specs()["hq"]
        ref_pool = generate_pool(
            replace(ref_spec, seed=SEED_REF_INIT, space_seed=cfg.world_seed),
            cfg.dfn_pool_size, pools / "ref-init", cfg.records_per_shard,
        )

        def base_cfg(seed: int) -> TrainConfig:
            return replace(cfg.dfn_train_config(seed), augmentation=False)

        rows = []

        def add_row(intervention: str, setting: str, seed: int, model: TwoTowerModel):
            outcome = filtering_performance(
                ClipScorer(model), cfg.filter_config(), raw_pool,
                cfg.induced_train_config(seed), suite,
                workers=cfg.workers, gallery_size=cfg.retrieval_gallery,
            )
            rows.append({
                "intervention": intervention,
                "setting": setting,
                "seed": seed,
                **dict(zip(report_header(), report_row(outcome.eval_report))),
            })

        for seed in cfg.seeds:
            plain = train_clip(hq_pool, base_cfg(seed))
            add_row("augmentation", "off", seed, plain.model)
            aug = train_clip(hq_pool, replace(base_cfg(seed), augmentation=True,
                                              augment_sigma=cfg.dfn_augment_sigma))
            add_row("augmentation", "on", seed, aug.model)

            add_row("samples_batch", f"{cfg.dfn_samples_seen}/{cfg.dfn_batch_size}",
                    seed, plain.model)
            big = train_clip(hq_pool, replace(base_cfg(seed),
                                              samples_seen=2 * cfg.dfn_samples_seen,
                                              batch_size=2 * cfg.dfn_batch_size))
            add_row("samples_batch",
                    f"{2 * cfg.dfn_samples_seen}/{2 * cfg.dfn_batch_size}",
                    seed, big.model)

            add_row("finetune", "off", seed, plain.model)
            tuned = finetune(plain.model, ft_pool, cfg.finetune_config(seed))
            add_row("finetune", "on", seed, tuned.model)

            add_row("init_checkpoint", "off", seed, plain.model)
            reference = train_clip(ref_pool, base_cfg(seed + 17))
            warm = train_clip(hq_pool, base_cfg(seed), init=reference.model)
            add_row("init_checkpoint", "on", seed, warm.model)

        append_csv(out / "interventions.csv", INTERVENTION_HEADER,
                   [[r[k] for k in INTERVENTION_HEADER] for r in rows])
        _write_json(out / "interventions.json", rows)
        return rows


# --------------------------------------------------------------------------
# robustness ablation
# --------------------------------------------------------------------------

ROBUSTNESS_HEADER = ["arm", "seed", *report_header()]
ALPHA_HEADER = ["alpha", "seed", "own_id_accuracy", "own_id_shift_average"]


def run_robustness(cfg: ExperimentConfig, out_dir: Path | str) -> dict:
    """Three arms: plain filtering network, fine-tuned one, and target data
    appended directly to the induced dataset; each induced model is scored
    on the in-distribution pool and every shifted pool.

    Also sweeps weight interpolation between the plain and fine-tuned
    network, reporting each blend's own id+shift average.
    """
    cfg.validate()
    out = Path(out_dir)
    with ExperimentLock(out):
        write_snapshot(cfg, out, "exp robustness")
        pools = out / "pools"
        hq_pool = build_pool(cfg, "hq", cfg.dfn_pool_size, pools / "hq")
        raw_pool = build_pool(cfg, "raw", cfg.raw_pool_size, pools / "raw")
        suite = cfg.eval_suite()
        ft_pool = cfg.finetune_pool()

        arm_rows = []
        alpha_rows = []
        for seed in cfg.seeds:
            base_train = replace(cfg.dfn_train_config(seed), augmentation=False)
            base = train_clip(hq_pool, base_train)
            tuned = finetune(base.model, ft_pool, cfg.finetune_config(seed))

            def add_arm(arm: str, report):
                arm_rows.append({
                    "arm": arm, "seed": seed,
                    **dict(zip(report_header(), report_row(report))),
                })

            base_out = filtering_performance(
                ClipScorer(base.model), cfg.filter_config(), raw_pool,
                cfg.induced_train_config(seed), suite,
                work_dir=out / f"filtered-base-{seed}",
                workers=cfg.workers, gallery_size=cfg.retrieval_gallery,
            )
            add_arm("baseline_dfn", base_out.eval_report)

            tuned_out = filtering_performance(
                ClipScorer(tuned.model), cfg.filter_config(), raw_pool,
                cfg.induced_train_config(seed), suite,
                workers=cfg.workers, gallery_size=cfg.retrieval_gallery,
            )
            add_arm("finetuned_dfn", tuned_out.eval_report)

            kept = read_manifest(out / f"filtered-base-{seed}").load()
            merged = records_mod.concat_batches([kept, ft_pool])
            direct = train_clip(merged, cfg.induced_train_config(seed))
            add_arm("baseline_plus_target_data",
                    evaluate(direct.model, suite, gallery_size=cfg.retrieval_gallery))

            for alpha in cfg.interpolation_alphas:
                blend = interpolate_weights(base.model, tuned.model, alpha)
                rep = evaluate(blend, suite, gallery_size=cfg.retrieval_gallery)
                vals = [rep.id_accuracy, *rep.shift_accuracies.values()]
                alpha_rows.append({
                    "alpha": alpha, "seed": seed,
                    "own_id_accuracy": rep.id_accuracy,
                    "own_id_shift_average": float(np.mean(vals)),
                })

        append_csv(out / "robustness.csv", ROBUSTNESS_HEADER,
                   [[r[k] for k in ROBUSTNESS_HEADER] for r in arm_rows])
        append_csv(out / "robustness_alphas.csv", ALPHA_HEADER,
                   [[r[k] for k in ALPHA_HEADER] for r in alpha_rows])
        payload = {"arms": arm_rows, "alphas": alpha_rows}
        _write_json(out / "robustness.json", payload)
        return payload


# --------------------------------------------------------------------------
# scaling benchmark
# --------------------------------------------------------------------------

BENCH_HEADER = ["pool_size", "workers", "repeat", "seconds", "records_per_sec"]


def run_bench(cfg: ExperimentConfig, out_dir: Path | str) -> list[dict]:
    """Wall-clock throughput of the filter pipeline over sizes and workers.

    Uses a fixed threshold (no calibration pass) and an untrained scorer;
    throughput only depends on record volume, not on model quality.
    """
    cfg.validate()
    out = Path(out_dir)
    with ExperimentLock(out):
        write_snapshot(cfg, out, "bench scaling")
        pools = out / "pools"
        scorer = ClipScorer(init_model(cfg.d_img, cfg.d_txt, cfg.d_emb, seed=cfg.world_seed))
        fc = cfg.filter_config(threshold_override=cfg.bench_threshold)
        sizes = [cfg.bench_base_size, 2 * cfg.bench_base_size, 4 * cfg.bench_base_size]
        big = build_pool(cfg, "raw", sizes[-1], pools / "raw")

        def subset(n: int) -> ShardSet:
            shards = []
            total = 0
            for info in big.shards:
                if total >= n:
                    break
                shards.append(info)
                total += info.record_count
            return ShardSet(shards=shards, d_img=big.d_img, d_txt=big.d_txt)

        rows = []
        for size in sizes:
            pool = subset(size)
            for workers in cfg.bench_workers:
                for repeat in range(cfg.bench_repeats):
                    started = time.perf_counter()
                    apply_dfn(scorer, fc, pool, out / "scratch", workers=workers)
                    seconds = time.perf_counter() - started
                    rows.append({
                        "pool_size": pool.total_records,
                        "workers": workers,
                        "repeat": repeat,
                        "seconds": seconds,
                        "records_per_sec": pool.total_records / seconds,
                    })
        append_csv(out / "bench_scaling.csv", BENCH_HEADER,
                   [[r[k] for k in BENCH_HEADER] for r in rows])
        _write_json(out / "bench_scaling.json", rows)
        return rows
