"""Evaluation suites and the metrics that define filtering performance.

A suite bundles clean per-concept text features (the zero-shot class
prototypes, encoded by whichever model is being evaluated), a labeled
in-distribution pool, named shifted pools drawn from perturbed generators,
and an aligned retrieval pool. `filtering_performance` closes the loop:
calibrate, filter, train on the survivors, evaluate the induced model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np

from .filtering import FilterConfig, FilterReport, Scorer, apply_dfn
from .model import TwoTowerModel, encode_image, encode_text, zero_shot_classify
from .records import RecordBatch
from .seeding import STREAM_SHIFT, make_rng
from .shards import ShardSet
from .synth import ConceptSpace, SyntheticSpec, sample_batch
from .train import TrainConfig, TrainResult, train_clip

DEFAULT_RETRIEVAL_GALLERY = 256


class EmptyFilteredPoolError(RuntimeError):
    pass


@dataclass
class EvalSuite:
    class_prototypes: np.ndarray                 # (K, d_txt) unit rows, clean text inputs
    id_eval: RecordBatch
    shifted_evals: dict[str, RecordBatch]
    retrieval_eval: RecordBatch

    def validate(self) -> None:
        if self.class_prototypes.shape[0] == 0:
            raise ValueError("suite has no class prototypes")
        norms = np.linalg.norm(self.class_prototypes, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ValueError("class prototypes must be unit-norm")
        if len(self.id_eval) == 0:
            raise ValueError("id eval pool is empty")
        if len(self.retrieval_eval) == 0:
            raise ValueError("retrieval eval pool is empty")

    def all_ids(self) -> np.ndarray:
        parts = [self.id_eval.ids, self.retrieval_eval.ids]
        parts.extend(b.ids for b in self.shifted_evals.values())
        return np.concatenate(parts)


@dataclass
class EvalReport:
    id_accuracy: float
    shift_accuracies: dict[str, float]
    retrieval_image_to_text: float
    retrieval_text_to_image: float
    average: float

    def components(self) -> list[float]:
        return [self.id_accuracy, *self.shift_accuracies.values(),
                self.retrieval_image_to_text, self.retrieval_text_to_image]

    @classmethod
    def build(cls, id_accuracy: float, shift_accuracies: dict[str, float],
              retrieval_image_to_text: float, retrieval_text_to_image: float) -> "EvalReport":
        values = [id_accuracy, *shift_accuracies.values(),
                  retrieval_image_to_text, retrieval_text_to_image]
        return cls(
            id_accuracy=id_accuracy,
            shift_accuracies=dict(shift_accuracies),
            retrieval_image_to_text=retrieval_image_to_text,
            retrieval_text_to_image=retrieval_text_to_image,
            average=float(np.mean(values)),
        )

    def to_dict(self) -> dict:
        return {
            "id_accuracy": self.id_accuracy,
            "shift_accuracies": dict(sorted(self.shift_accuracies.items())),
            "retrieval_image_to_text": self.retrieval_image_to_text,
            "retrieval_text_to_image": self.retrieval_text_to_image,
            "average": self.average,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def classification_accuracy(model: TwoTowerModel, prototype_embs: np.ndarray,
                            pool: RecordBatch) -> float:
    preds = zero_shot_classify(model, prototype_embs, pool.image)
    return float(np.mean(preds == pool.labels.astype(np.int64)))


def evaluate(model: TwoTowerModel, suite: EvalSuite,
             gallery_size: int = DEFAULT_RETRIEVAL_GALLERY) -> EvalReport:
    """Zero-shot accuracy on id and shifted pools plus recall@1 both ways."""
    suite.validate()
    protos = encode_text(model, suite.class_prototypes)
    id_acc = classification_accuracy(model, protos, suite.id_eval)
    shift_accs = {
        name: classification_accuracy(model, protos, pool)
        for name, pool in suite.shifted_evals.items()
    }
    gallery = suite.retrieval_eval
    g = min(gallery_size, len(gallery))
    ie = encode_image(model, gallery.image[:g])
    te = encode_text(model, gallery.text[:g])
    sims = ie @ te.T
    hits = np.arange(g)
    i2t = float(np.mean(np.argmax(sims, axis=1) == hits))
    t2i = float(np.mean(np.argmax(sims, axis=0) == hits))
    return EvalReport.build(id_acc, shift_accs, i2t, t2i)


def make_shifted_suite(
    base_spec: SyntheticSpec, kind: str, magnitude: float, seed: int, n: int
) -> RecordBatch:
    """Labeled pool from a perturbed generator.

    Kinds: "noise" adds magnitude to the generator's noise scale;
    "image_map" perturbs the image projection by a fixed random matrix of
    that scale; "dropout" zeroes each image feature with that probability.
    Magnitude zero is distributionally identical to the base generator.
    """
    if magnitude < 0:
        raise ValueError("magnitude must be >= 0")
    spec = base_spec.with_seed(seed)
    if kind == "noise":
        spec = replace(spec, noise_sigma=base_spec.noise_sigma + magnitude)
        return sample_batch(spec, n)
    if kind == "image_map":
        space = ConceptSpace.from_spec(spec)
        rng = make_rng(seed, STREAM_SHIFT, 1)
        bump = magnitude * rng.standard_normal(space.image_map.shape) / np.sqrt(space.image_map.shape[1])
        shifted = ConceptSpace(
            concepts=space.concepts,
            image_map=space.image_map + bump,
            text_map=space.text_map,
        )
        return sample_batch(spec, n, space=shifted)
    if kind == "dropout":
        batch = sample_batch(spec, n)
        if magnitude > 0:
            rng = make_rng(seed, STREAM_SHIFT, 2)
            mask = rng.random(batch.image.shape) < min(1.0, magnitude)
            image = batch.image.copy()
            image[mask] = 0.0
            batch.image = image
        return batch
    raise ValueError(f"unknown shift kind {kind!r}")


def build_eval_suite(
    eval_spec: SyntheticSpec,
    id_size: int,
    retrieval_size: int,
    shifts: dict[str, tuple[str, float]],
    seed: int,
) -> EvalSuite:
    """Assemble prototypes, id/shifted/retrieval pools from one world.

    eval_spec describes the in-distribution pool (typically align_prob=1
    and a small noise level). Derived sampling seeds keep every pool's id
    range distinct from the others and from any training pool seed.
    """
    space = ConceptSpace.from_spec(eval_spec)
    protos = space.clean_text_features()
    protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    id_pool = sample_batch(replace(eval_spec.with_seed(seed), align_prob=1.0), id_size)
    retrieval = sample_batch(replace(eval_spec.with_seed(seed + 1), align_prob=1.0),
                             retrieval_size)
    shifted = {
        name: make_shifted_suite(
            replace(eval_spec, align_prob=1.0), kind, magnitude, seed + 2 + i, id_size
        )
        for i, (name, (kind, magnitude)) in enumerate(shifts.items())
    }
    return EvalSuite(
        class_prototypes=protos.astype(np.float32),
        id_eval=id_pool,
        shifted_evals=shifted,
        retrieval_eval=retrieval,
    )


@dataclass
class FilteringOutcome:
    eval_report: EvalReport
    filter_report: FilterReport
    model: TwoTowerModel
    train_result: TrainResult


def check_disjoint(pool: ShardSet, suite: EvalSuite) -> None:
    overlap = np.intersect1d(pool.ids(), suite.all_ids())
    if overlap.size:
        raise ValueError(
            f"eval suite shares {overlap.size} record id(s) with the training pool "
            f"(first: {int(overlap[0])})"
        )


def filtering_performance(
    scorer: Scorer,
    filter_config: FilterConfig,
    raw_pool: ShardSet,
    train_config: TrainConfig,
    suite: EvalSuite,
    work_dir: Path | str | None = None,
    workers: int = 1,
    gallery_size: int = DEFAULT_RETRIEVAL_GALLERY,
) -> FilteringOutcome:
    """Calibrate, filter, train the induced model on the survivors, evaluate it."""
    check_disjoint(raw_pool, suite)
    if work_dir is None:
        with TemporaryDirectory(prefix="dfn-induced-") as tmp:
            return _run_filtering_performance(
                scorer, filter_config, raw_pool, train_config, suite,
                Path(tmp), workers, gallery_size,
            )
    return _run_filtering_performance(
        scorer, filter_config, raw_pool, train_config, suite,
        Path(work_dir), workers, gallery_size,
    )


def _run_filtering_performance(
    scorer, filter_config, raw_pool, train_config, suite, work_dir, workers, gallery_size
) -> FilteringOutcome:
    filtered, filter_report = apply_dfn(scorer, filter_config, raw_pool, work_dir, workers)
    if filtered.total_records == 0:
        raise EmptyFilteredPoolError(
            f"filter kept zero records (keep_fraction={filter_config.keep_fraction!r}, "
            f"threshold={filter_report.threshold!r})"
        )
    result = train_clip(filtered, train_config)
    report = evaluate(result.model, suite, gallery_size=gallery_size)
    return FilteringOutcome(
        eval_report=report,
        filter_report=filter_report,
        model=result.model,
        train_result=result,
    )


def oracle_model(space: ConceptSpace) -> TwoTowerModel:
    """Reference model built from the generator's projection maps.

    Pseudo-inverse towers recover the latent concept coordinates exactly on
    noiseless features, so this model classifies zero-noise pools perfectly.
    It is a test fixture, not a trained artifact.
    """
    return TwoTowerModel(
        w_img=np.linalg.pinv(space.image_map).astype(np.float32),
        b_img=np.zeros(space.image_map.shape[1], dtype=np.float32),
        w_txt=np.linalg.pinv(space.text_map).astype(np.float32),
        b_txt=np.zeros(space.text_map.shape[1], dtype=np.float32),
    )


def make_finetune_pool(space: ConceptSpace, batch: RecordBatch) -> RecordBatch:
    """Pair each labeled image with the clean prototype text of its concept.

    The synthetic analogue of fine-tuning on a classification set with
    template captions.
    """
    protos = space.clean_text_features()
    protos = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    labels = batch.labels.astype(np.int64)
    if (labels >= space.num_concepts).any():
        raise ValueError("finetune pool needs known concept labels")
    return RecordBatch(
        ids=batch.ids.copy(),
        image=batch.image.copy(),
        text=protos[labels].astype(np.float32),
        labels=batch.labels.copy(),
        aligned=np.ones(len(batch), dtype=np.uint8),
    )
