"""Record and in-memory pool data model.

A record is one image-text pair held as pre-extracted feature vectors plus
synthetic ground-truth metadata. Pools are handled columnar (`RecordBatch`)
so scoring and training stay vectorized; `Record` is the single-row view
used by the pointwise filtering contract.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# On-disk sentinels for "ground truth unknown". In-memory code uses None.
UNKNOWN_LABEL = 0xFFFFFFFF
ALIGNED_FALSE = 0
ALIGNED_TRUE = 1
ALIGNED_UNKNOWN = 0xFF


@dataclass
class Record:
    """One image-text pair."""

    id: int
    image_features: np.ndarray
    text_features: np.ndarray
    concept_label: int | None = None
    aligned: bool | None = None


def _as_f32(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float32)


@dataclass
class RecordBatch:
    """Columnar pool of records.

    `labels` uses UNKNOWN_LABEL and `aligned` uses ALIGNED_UNKNOWN as the
    unknown sentinels, matching the shard encoding byte for byte.
    """

    ids: np.ndarray      # (n,) uint64
    image: np.ndarray    # (n, d_img) float32
    text: np.ndarray     # (n, d_txt) float32
    labels: np.ndarray   # (n,) uint32
    aligned: np.ndarray  # (n,) uint8

    def __post_init__(self) -> None:
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.image = _as_f32(self.image)
        self.text = _as_f32(self.text)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.aligned = np.ascontiguousarray(self.aligned, dtype=np.uint8)

    def __len__(self) -> int:
        return self.ids.shape[0]

    @property
    def d_img(self) -> int:
        return self.image.shape[1]

    @property
    def d_txt(self) -> int:
        return self.text.shape[1]

    def validate(self) -> None:
        """Raise ValueError on non-finite features or duplicate ids."""
        n = len(self)
        if self.image.shape[0] != n or self.text.shape[0] != n:
            raise ValueError("feature row counts do not match id count")
        if self.labels.shape[0] != n or self.aligned.shape[0] != n:
            raise ValueError("metadata row counts do not match id count")
        if not np.isfinite(self.image).all() or not np.isfinite(self.text).all():
            raise ValueError("record features must be finite (no NaN/Inf)")
        if np.unique(self.ids).size != n:
            raise ValueError("record ids must be unique within a pool")

    def record(self, i: int) -> Record:
        label = int(self.labels[i])
        flag = int(self.aligned[i])
        return Record(
            id=int(self.ids[i]),
            image_features=self.image[i].copy(),
            text_features=self.text[i].copy(),
            concept_label=None if label == UNKNOWN_LABEL else label,
            aligned=None if flag == ALIGNED_UNKNOWN else bool(flag),
        )

    def take(self, indices: np.ndarray) -> "RecordBatch":
        return RecordBatch(
            ids=self.ids[indices],
            image=self.image[indices],
            text=self.text[indices],
            labels=self.labels[indices],
            aligned=self.aligned[indices],
        )


def from_records(records: list[Record], d_img: int, d_txt: int) -> RecordBatch:
    n = len(records)
    batch = RecordBatch(
        ids=np.array([r.id for r in records], dtype=np.uint64),
        image=np.zeros((n, d_img), dtype=np.float32),
        text=np.zeros((n, d_txt), dtype=np.float32),
        labels=np.full(n, UNKNOWN_LABEL, dtype=np.uint32),
        aligned=np.full(n, ALIGNED_UNKNOWN, dtype=np.uint8),
    )
    for i, r in enumerate(records):
        batch.image[i] = r.image_features
        batch.text[i] = r.text_features
        if r.concept_label is not None:
            batch.labels[i] = r.concept_label
        if r.aligned is not None:
            batch.aligned[i] = ALIGNED_TRUE if r.aligned else ALIGNED_FALSE
    return batch


def concat_batches(batches: list[RecordBatch]) -> RecordBatch:
    if not batches:
        raise ValueError("cannot concatenate zero batches")
    return RecordBatch(
        ids=np.concatenate([b.ids for b in batches]),
        image=np.concatenate([b.image for b in batches]),
        text=np.concatenate([b.text for b in batches]),
        labels=np.concatenate([b.labels for b in batches]),
        aligned=np.concatenate([b.aligned for b in batches]),
    )
