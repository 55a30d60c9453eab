"""Concept-based synthetic pool generation and pool mixing.

The generative model: K unit concept vectors live on the d_latent sphere,
and two fixed random linear maps project concepts into image and text
feature space. Each record picks a concept uniformly; its image is the
projected concept plus Gaussian noise, and its text either matches the
concept (aligned) or is drawn from a different concept (misaligned).

Pool quality is controlled entirely by (align_prob, noise_sigma), which is
how the high-quality vs unfiltered pool axis is realised here.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .records import ALIGNED_FALSE, ALIGNED_TRUE, RecordBatch, concat_batches
from .seeding import STREAM_CONCEPTS, STREAM_MIX, STREAM_RECORDS, make_rng
from .shards import DEFAULT_RECORDS_PER_SHARD, ShardSet, write_shards


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic pool.

    `seed` drives record sampling and the pool's id range. `space_seed`
    pins the concept vectors and projection maps; pools meant to live in
    the same "world" (so a model trained on one is meaningful on another)
    must share it. When omitted it defaults to `seed`.
    """

    num_concepts: int
    d_latent: int
    d_img: int
    d_txt: int
    align_prob: float
    noise_sigma: float
    seed: int
    space_seed: int | None = None

    def validate(self) -> None:
        if self.num_concepts < 2:
            raise ValueError("num_concepts must be >= 2")
        if min(self.d_latent, self.d_img, self.d_txt) < 1:
            raise ValueError("dimensions must be positive")
        if not 0.0 <= self.align_prob <= 1.0:
            raise ValueError("align_prob must lie in [0, 1]")
        if self.noise_sigma < 0.0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")

    @property
    def space_entropy(self) -> int:
        return self.seed if self.space_seed is None else self.space_seed

    def with_seed(self, seed: int) -> "SyntheticSpec":
        return replace(self, seed=seed, space_seed=self.space_entropy)


@dataclass(frozen=True)
class ConceptSpace:
    """Frozen world shared by every pool generated from one space seed."""

    concepts: np.ndarray   # (K, d_latent) unit rows
    image_map: np.ndarray  # (d_img, d_latent)
    text_map: np.ndarray   # (d_txt, d_latent)

    @classmethod
    def from_spec(cls, spec: SyntheticSpec) -> "ConceptSpace":
        rng = make_rng(spec.space_entropy, STREAM_CONCEPTS)
        c = rng.standard_normal((spec.num_concepts, spec.d_latent))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        a_img = rng.standard_normal((spec.d_img, spec.d_latent)) / np.sqrt(spec.d_latent)
        a_txt = rng.standard_normal((spec.d_txt, spec.d_latent)) / np.sqrt(spec.d_latent)
        return cls(concepts=c, image_map=a_img, text_map=a_txt)

    @property
    def num_concepts(self) -> int:
        return self.concepts.shape[0]

    def clean_image_features(self) -> np.ndarray:
        """(K, d_img) noiseless image features, one row per concept."""
        return (self.concepts @ self.image_map.T).astype(np.float32)

    def clean_text_features(self) -> np.ndarray:
        """(K, d_txt) noiseless text features, one row per concept."""
        return (self.concepts @ self.text_map.T).astype(np.float32)


def pool_id(seed: int, index: int) -> int:
    """Record id scheme: low 32 bits of the sampling seed above a 32-bit index.

    Pools with distinct sampling seeds therefore occupy disjoint id ranges,
    which is what mix-provenance accounting and train/eval disjointness
    checks rely on.
    """
    return ((seed & 0xFFFFFFFF) << 32) | index


def sample_batch(
    spec: SyntheticSpec,
    n: int,
    shard_index: int = 0,
    start_index: int = 0,
    space: ConceptSpace | None = None,
) -> RecordBatch:
    """Draw n records; deterministic in (spec, shard_index, start_index)."""
    spec.validate()
    if n < 0:
        raise ValueError("n must be >= 0")
    if start_index + n > 2**32:
        raise ValueError("pool too large for the 32-bit record index")
    if space is None:
        space = ConceptSpace.from_spec(spec)
    k_max = spec.num_concepts
    rng = make_rng(spec.seed, STREAM_RECORDS, shard_index)
    # Fixed draw order; reordering would silently change every pool.
    k_img = rng.integers(0, k_max, n)
    coin = rng.random(n)
    offset = rng.integers(1, k_max, n)
    img_eps = rng.standard_normal((n, spec.d_img))
    txt_eps = rng.standard_normal((n, spec.d_txt))

    is_aligned = coin < spec.align_prob
    k_txt = np.where(is_aligned, k_img, (k_img + offset) % k_max)
    image = space.concepts[k_img] @ space.image_map.T + spec.noise_sigma * img_eps
    text = space.concepts[k_txt] @ space.text_map.T + spec.noise_sigma * txt_eps
    ids = np.array([pool_id(spec.seed, start_index + i) for i in range(n)], dtype=np.uint64)
    return RecordBatch(
        ids=ids,
        image=image.astype(np.float32),
        text=text.astype(np.float32),
        labels=k_img.astype(np.uint32),
        aligned=np.where(is_aligned, ALIGNED_TRUE, ALIGNED_FALSE).astype(np.uint8),
    )


def generate_pool(
    spec: SyntheticSpec,
    n: int,
    out_dir: Path | str,
    records_per_shard: int = DEFAULT_RECORDS_PER_SHARD,
) -> ShardSet:
    """Generate a sharded pool on disk; a pure function of (spec, n, records_per_shard).

    Each shard draws from its own derived stream, so shards could be
    generated concurrently without changing a byte of output.
    """
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    if records_per_shard < 1:
        raise ValueError("records_per_shard must be >= 1")
    space = ConceptSpace.from_spec(spec)
    batches = []
    for j in range(-(-n // records_per_shard)):
        start = j * records_per_shard
        size = min(records_per_shard, n - start)
        batches.append(sample_batch(spec, size, shard_index=j, start_index=start, space=space))
    return write_shards(concat_batches(batches), out_dir, records_per_shard)


def mix_pools(
    high_quality: ShardSet,
    noisy: ShardSet,
    unfiltered_fraction: float,
    total: int,
    seed: int,
    out_dir: Path | str,
    records_per_shard: int = DEFAULT_RECORDS_PER_SHARD,
) -> ShardSet:
    """Blend two pools at a fixed total size, sampling each side without replacement.

    Exactly round((1 - unfiltered_fraction) * total) records come from the
    high-quality pool and the remainder from the noisy pool; the output is
    a seeded shuffle of the union, so constant pool size is preserved while
    the quality fraction sweeps.
    """
    if not 0.0 <= unfiltered_fraction <= 1.0:
        raise ValueError("unfiltered_fraction must lie in [0, 1]")
    if total < 1:
        raise ValueError("total must be >= 1")
    if (high_quality.d_img, high_quality.d_txt) != (noisy.d_img, noisy.d_txt):
        raise ValueError(
            "dimension mismatch between pools: "
            f"({high_quality.d_img},{high_quality.d_txt}) vs ({noisy.d_img},{noisy.d_txt})"
        )
    n_hq = int(round((1.0 - unfiltered_fraction) * total))
    n_noisy = total - n_hq
    if n_hq > high_quality.total_records:
        raise ValueError(
            f"insufficient records: need {n_hq} from high-quality pool of "
            f"{high_quality.total_records}"
        )
    if n_noisy > noisy.total_records:
        raise ValueError(
            f"insufficient records: need {n_noisy} from noisy pool of {noisy.total_records}"
        )
    rng = make_rng(seed, STREAM_MIX)
    hq_batch = high_quality.load()
    noisy_batch = noisy.load()
    picks = []
    if n_hq:
        picks.append(hq_batch.take(rng.choice(len(hq_batch), n_hq, replace=False)))
    if n_noisy:
        picks.append(noisy_batch.take(rng.choice(len(noisy_batch), n_noisy, replace=False)))
    mixed = concat_batches(picks)
    mixed = mixed.take(rng.permutation(len(mixed)))
    if np.unique(mixed.ids).size != len(mixed):
        raise ValueError("source pools share record ids; mixed pool would not be unique")
    return write_shards(mixed, out_dir, records_per_shard)
