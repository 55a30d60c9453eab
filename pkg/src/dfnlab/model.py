"""Miniature two-tower contrastive model.

Each tower is a single linear layer plus bias followed by L2 normalization,
which keeps every gradient in this module hand-derivable (and checkable
against finite differences). The temperature is stored as log_temperature;
similarity logits are S / exp(log_temperature), so the initial value below
gives a logit scale of 1/0.07 ~= 14.3. During training log_temperature is
clamped to [LOG_TEMPERATURE_MIN, LOG_TEMPERATURE_MAX] to prevent divergence.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .records import Record
from .seeding import STREAM_AUGMENT, make_rng

LOG_TEMPERATURE_INIT = float(np.log(0.07))
LOG_TEMPERATURE_MIN = float(np.log(0.01))   # logit scale capped at 100
LOG_TEMPERATURE_MAX = 0.0                   # temperature capped at 1

CHECKPOINT_MAGIC = b"DFNM"
CHECKPOINT_VERSION = 1

# Pre-normalization vectors with a norm at or below this are degenerate: the
# direction is numerically meaningless, so encoding refuses rather than
# silently dividing by ~zero.
DEGENERATE_NORM = 1e-12


class DegenerateEmbeddingError(ValueError):
    """Encoding refused: pre-normalization vector has (near-)zero norm."""

    def __init__(self, rows: np.ndarray):
        self.rows = np.atleast_1d(rows)
        super().__init__(
            f"zero-norm embedding for input row(s) {self.rows.tolist()}; refusing to normalize"
        )


class CheckpointError(Exception):
    pass


@dataclass
class TwoTowerModel:
    """Two linear towers and a learnable temperature."""

    w_img: np.ndarray  # (d_emb, d_img) float32
    b_img: np.ndarray  # (d_emb,) float32
    w_txt: np.ndarray  # (d_emb, d_txt) float32
    b_txt: np.ndarray  # (d_emb,) float32
    log_temperature: float = LOG_TEMPERATURE_INIT

    def __post_init__(self) -> None:
        self.w_img = np.ascontiguousarray(self.w_img, dtype=np.float32)
        self.b_img = np.ascontiguousarray(self.b_img, dtype=np.float32)
        self.w_txt = np.ascontiguousarray(self.w_txt, dtype=np.float32)
        self.b_txt = np.ascontiguousarray(self.b_txt, dtype=np.float32)
        self.log_temperature = float(self.log_temperature)

    @property
    def d_img(self) -> int:
        return self.w_img.shape[1]

    @property
    def d_txt(self) -> int:
        return self.w_txt.shape[1]

    @property
    def d_emb(self) -> int:
        return self.w_img.shape[0]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature))

    def copy(self) -> "TwoTowerModel":
        return TwoTowerModel(
            w_img=self.w_img.copy(),
            b_img=self.b_img.copy(),
            w_txt=self.w_txt.copy(),
            b_txt=self.b_txt.copy(),
            log_temperature=self.log_temperature,
        )

    def validate(self) -> None:
        for name, arr in (("w_img", self.w_img), ("b_img", self.b_img),
                          ("w_txt", self.w_txt), ("b_txt", self.b_txt)):
            if not np.isfinite(arr).all():
                raise ValueError(f"model parameter {name} contains non-finite values")
        if not np.isfinite(self.log_temperature):
            raise ValueError("log_temperature is non-finite")


def init_model(d_img: int, d_txt: int, d_emb: int, seed: int) -> TwoTowerModel:
    """Gaussian tower weights scaled by 1/sqrt(fan-in), zero biases."""
    rng = make_rng(seed, 0)
    return TwoTowerModel(
        w_img=(rng.standard_normal((d_emb, d_img)) / np.sqrt(d_img)).astype(np.float32),
        b_img=np.zeros(d_emb, dtype=np.float32),
        w_txt=(rng.standard_normal((d_emb, d_txt)) / np.sqrt(d_txt)).astype(np.float32),
        b_txt=np.zeros(d_emb, dtype=np.float32),
        log_temperature=LOG_TEMPERATURE_INIT,
    )


def _encode(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    single = x.ndim == 1
    xs = np.atleast_2d(np.asarray(x, dtype=w.dtype))
    if xs.shape[1] != w.shape[1]:
        raise ValueError(f"feature dimension {xs.shape[1]} does not match tower {w.shape[1]}")
    z = xs @ w.T + b
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms <= DEGENERATE_NORM)
    if bad.size:
        raise DegenerateEmbeddingError(bad)
    e = z / norms[:, None]
    return e[0] if single else e


def encode_image(model: TwoTowerModel, image_features: np.ndarray) -> np.ndarray:
    """L2-normalized image embedding(s); accepts one vector or a batch."""
    return _encode(model.w_img, model.b_img, image_features)


def encode_text(model: TwoTowerModel, text_features: np.ndarray) -> np.ndarray:
    """L2-normalized text embedding(s); accepts one vector or a batch."""
    return _encode(model.w_txt, model.b_txt, text_features)


@dataclass
class ContrastiveGrads:
    loss: float
    d_image: np.ndarray
    d_text: np.ndarray
    d_log_temperature: float


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def contrastive_loss(
    image_embs: np.ndarray, text_embs: np.ndarray, temperature: float
) -> ContrastiveGrads:
    """Symmetric InfoNCE over a batch of paired unit embeddings.

    loss = 1/2 [ mean_i CE(softmax(S[i,:]/tau), i) + mean_j CE(softmax(S[:,j]/tau), j) ]
    with S = image_embs @ text_embs.T. Returns the loss together with
    analytic gradients w.r.t. both embedding matrices and log(tau).
    """
    ie = np.asarray(image_embs)
    te = np.asarray(text_embs)
    if ie.shape != te.shape or ie.ndim != 2:
        raise ValueError("embedding matrices must share an (N, d) shape")
    if not (np.isfinite(ie).all() and np.isfinite(te).all()):
        raise ValueError("non-finite embeddings passed to contrastive_loss")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    n = ie.shape[0]
    if n < 1:
        raise ValueError("batch must contain at least one pair")
    s = ie @ te.T
    logits = s / temperature
    p = _softmax_rows(logits)
    q = _softmax_rows(logits.T).T
    diag = np.arange(n)
    row_lse = logits.max(axis=1) + np.log(np.exp(logits - logits.max(axis=1, keepdims=True)).sum(axis=1))
    col_lse = logits.max(axis=0) + np.log(np.exp(logits - logits.max(axis=0, keepdims=True)).sum(axis=0))
    loss = 0.5 * ((row_lse - logits[diag, diag]).mean() + (col_lse - logits[diag, diag]).mean())

    g = (p + q) / (2.0 * n)
    g[diag, diag] -= 1.0 / n
    d_image = (g @ te) / temperature
    d_text = (g.T @ ie) / temperature
    d_log_temperature = float(-(g * s).sum() / temperature)
    return ContrastiveGrads(
        loss=float(loss),
        d_image=d_image.astype(ie.dtype),
        d_text=d_text.astype(te.dtype),
        d_log_temperature=d_log_temperature,
    )


def interpolate_weights(base: TwoTowerModel, finetuned: TwoTowerModel, alpha: float) -> TwoTowerModel:
    """Per-parameter linear blend (1-alpha)*base + alpha*finetuned."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    pairs = (
        (base.w_img, finetuned.w_img),
        (base.b_img, finetuned.b_img),
        (base.w_txt, finetuned.w_txt),
        (base.b_txt, finetuned.b_txt),
    )
    for p, q in pairs:
        if p.shape != q.shape:
            raise ValueError(f"parameter shape mismatch: {p.shape} vs {q.shape}")
    a = np.float32(alpha)
    blend = lambda p, q: ((1 - a) * p + a * q).astype(np.float32)  # noqa: E731
    return TwoTowerModel(
        w_img=blend(base.w_img, finetuned.w_img),
        b_img=blend(base.b_img, finetuned.b_img),
        w_txt=blend(base.w_txt, finetuned.w_txt),
        b_txt=blend(base.b_txt, finetuned.b_txt),
        log_temperature=float((1 - float(a)) * base.log_temperature
                              + float(a) * finetuned.log_temperature),
    )


def zero_shot_classify(
    model: TwoTowerModel, prototype_embs: np.ndarray, image_features: np.ndarray
) -> np.ndarray | int:
    """Predict the concept whose prototype embedding is most cosine-similar.

    prototype_embs is (K, d_emb) with unit rows (typically the model's own
    encoding of clean per-concept text). Ties break toward the lowest index.
    """
    protos = np.atleast_2d(np.asarray(prototype_embs))
    if protos.shape[0] == 0:
        raise ValueError("prototype set must be nonempty")
    emb = encode_image(model, image_features)
    single = emb.ndim == 1
    sims = np.atleast_2d(emb) @ protos.T
    pred = np.argmax(sims, axis=1)
    return int(pred[0]) if single else pred


def augment(record: Record, noise_scale: float, seed: int) -> Record:
    """Seeded Gaussian noise on image features only; scale 0 is the identity."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    image = record.image_features
    if noise_scale > 0:
        rng = make_rng(seed, STREAM_AUGMENT)
        image = (image + noise_scale * rng.standard_normal(image.shape)).astype(image.dtype)
    else:
        image = image.copy()
    return Record(
        id=record.id,
        image_features=image,
        text_features=record.text_features.copy(),
        concept_label=record.concept_label,
        aligned=record.aligned,
    )


# --- checkpoint format -------------------------------------------------------
# magic "DFNM" | version u32 | d_img u32 | d_txt u32 | d_emb u32 |
# w_img row-major f32 | b_img f32 | w_txt row-major f32 | b_txt f32 |
# log_temperature f32, all little-endian.

_CKPT_HEADER = struct.Struct("<4sIIII")


def save_model(model: TwoTowerModel, path) -> None:
    header = _CKPT_HEADER.pack(
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.d_img, model.d_txt, model.d_emb
    )
    parts = [header]
    for arr in (model.w_img, model.b_img, model.w_txt, model.b_txt):
        parts.append(arr.astype("<f4").tobytes())
    parts.append(struct.pack("<f", model.log_temperature))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_model(path) -> TwoTowerModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: file too short for header")
    magic, version, d_img, d_txt, d_emb = _CKPT_HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    counts = [d_emb * d_img, d_emb, d_emb * d_txt, d_emb]
    expected = _CKPT_HEADER.size + 4 * (sum(counts) + 1)
    if len(data) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(data)}")
    flat = np.frombuffer(data, dtype="<f4", offset=_CKPT_HEADER.size)
    w_img, b_img, w_txt, b_txt = np.split(flat[:-1], np.cumsum(counts)[:-1])
    return TwoTowerModel(
        w_img=w_img.reshape(d_emb, d_img).copy(),
        b_img=b_img.copy(),
        w_txt=w_txt.reshape(d_emb, d_txt).copy(),
        b_txt=b_txt.copy(),
        log_temperature=float(flat[-1]),
    )
