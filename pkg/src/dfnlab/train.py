"""Contrastive training loop: AdamW with linear warmup and cosine decay.

Batch order is derived from (config.seed, pool content digest), so two pools
holding identical records train identically no matter how they were sharded
or produced. That is what makes an all-pass filter a true no-op end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .model import (
    LOG_TEMPERATURE_MAX,
    LOG_TEMPERATURE_MIN,
    TwoTowerModel,
    contrastive_loss,
    init_model,
)
from .records import RecordBatch
from .seeding import STREAM_AUGMENT, STREAM_BATCH_ORDER, STREAM_MODEL_INIT, digest64, make_rng
from .shards import ShardSet, batch_digest


class NonFiniteLossError(RuntimeError):
    """Training aborted because the loss left the finite range."""

    def __init__(self, step: int, value: float):
        self.step = step
        super().__init__(f"non-finite loss {value!r} at step {step}; aborting training")


@dataclass(frozen=True)
class TrainConfig:
    samples_seen: int
    batch_size: int = 256
    learning_rate: float = 5e-3
    weight_decay: float = 0.01
    warmup_steps: int = 50
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    augmentation: bool = False
    augment_sigma: float = 0.1
    d_emb: int = 32

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive loss needs negatives)")
        # samples_seen == 0 is the explicit "do not train" case used by finetune.
        if self.samples_seen != 0 and self.samples_seen < self.batch_size:
            raise ValueError("samples_seen must be >= batch_size (or exactly 0)")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be >= 0")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")
        if self.augment_sigma < 0:
            raise ValueError("augment_sigma must be >= 0")
        if self.d_emb < 1:
            raise ValueError("d_emb must be >= 1")

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=seed)


@dataclass
class TrainResult:
    model: TwoTowerModel
    history: list[tuple[int, float, float]]  # (step, loss, lr)


def lr_at(step: int, total_steps: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup to base_lr, then cosine decay to zero."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * progress))


def _pool_digest_int(pool: ShardSet | RecordBatch) -> int:
    digest = pool.content_digest() if isinstance(pool, ShardSet) else batch_digest(pool)
    return digest64(bytes.fromhex(digest))


def _load(pool: ShardSet | RecordBatch) -> RecordBatch:
    return pool.load() if isinstance(pool, ShardSet) else pool


def loss_and_param_grads(
    model: TwoTowerModel, x_img: np.ndarray, x_txt: np.ndarray
) -> tuple[float, dict[str, np.ndarray | float]]:
    """Contrastive loss and gradients w.r.t. every model parameter.

    Backpropagates through z = W x + b and e = z / ||z||:
    dL/dz = (g - (g . e) e) / ||z|| for g = dL/de.
    """
    zi = x_img @ model.w_img.T + model.b_img
    zt = x_txt @ model.w_txt.T + model.b_txt
    ni = np.linalg.norm(zi, axis=1, keepdims=True)
    nt = np.linalg.norm(zt, axis=1, keepdims=True)
    if (ni <= 0).any() or (nt <= 0).any():
        raise ValueError("zero-norm embedding during training")
    ei = zi / ni
    et = zt / nt
    grads = contrastive_loss(ei, et, float(np.exp(model.log_temperature)))

    dzi = (grads.d_image - (grads.d_image * ei).sum(axis=1, keepdims=True) * ei) / ni
    dzt = (grads.d_text - (grads.d_text * et).sum(axis=1, keepdims=True) * et) / nt
    return grads.loss, {
        "w_img": dzi.T @ x_img,
        "b_img": dzi.sum(axis=0),
        "w_txt": dzt.T @ x_txt,
        "b_txt": dzt.sum(axis=0),
        "log_temperature": grads.d_log_temperature,
    }


def train_clip(
    pool: ShardSet | RecordBatch,
    config: TrainConfig,
    init: TwoTowerModel | None = None,
) -> TrainResult:
    """Train a two-tower model on a pool; deterministic given (config, pool content)."""
    config.validate()
    batch = _load(pool)
    n = len(batch)
    if n == 0:
        raise ValueError("training pool is empty")
    if config.samples_seen == 0:
        base = init.copy() if init is not None else init_model(
            batch.d_img, batch.d_txt, config.d_emb, seed=config.seed + STREAM_MODEL_INIT
        )
        return TrainResult(model=base, history=[])

    digest = _pool_digest_int(pool)
    order_rng = make_rng(config.seed, STREAM_BATCH_ORDER, digest)
    aug_rng = make_rng(config.seed, STREAM_AUGMENT, digest)
    if init is not None:
        if (init.d_img, init.d_txt) != (batch.d_img, batch.d_txt):
            raise ValueError("init checkpoint dimensions do not match the pool")
        model = init.copy()
    else:
        model = init_model(batch.d_img, batch.d_txt, config.d_emb,
                           seed=config.seed + STREAM_MODEL_INIT)

    steps = config.samples_seen // config.batch_size
    params = {
        "w_img": model.w_img, "b_img": model.b_img,
        "w_txt": model.w_txt, "b_txt": model.b_txt,
    }
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    m_lt = 0.0
    v_lt = 0.0
    # Decoupled weight decay applies to tower weight matrices only.
    decayed = {"w_img", "w_txt"}

    history: list[tuple[int, float, float]] = []
    perm = order_rng.permutation(n)
    pos = 0
    for step in range(steps):
        if config.batch_size <= n:
            if pos + config.batch_size > n:
                perm = order_rng.permutation(n)
                pos = 0
            idx = perm[pos:pos + config.batch_size]
            pos += config.batch_size
        else:
            idx = order_rng.integers(0, n, config.batch_size)
        x_img = batch.image[idx]
        x_txt = batch.text[idx]
        if config.augmentation and config.augment_sigma > 0:
            noise = aug_rng.standard_normal(x_img.shape).astype(np.float32)
            x_img = x_img + config.augment_sigma * noise

        try:
            loss, grads = loss_and_param_grads(model, x_img, x_txt)
        except ValueError as exc:
            # diverged parameters surface as non-finite embeddings or norms
            raise NonFiniteLossError(step, float("nan")) from exc
        if not np.isfinite(loss):
            raise NonFiniteLossError(step, loss)
        lr = float(lr_at(step, steps, config.learning_rate, config.warmup_steps))
        t = step + 1
        bias1 = 1.0 - config.beta1 ** t
        bias2 = 1.0 - config.beta2 ** t
        for key, p in params.items():
            g = grads[key].astype(np.float32)
            m[key] = config.beta1 * m[key] + (1 - config.beta1) * g
            v[key] = config.beta2 * v[key] + (1 - config.beta2) * g * g
            update = (m[key] / bias1) / (np.sqrt(v[key] / bias2) + config.adam_eps)
            p -= np.float32(lr) * update
            if key in decayed and config.weight_decay > 0:
                p -= np.float32(lr * config.weight_decay) * p
        g_lt = float(grads["log_temperature"])
        m_lt = config.beta1 * m_lt + (1 - config.beta1) * g_lt
        v_lt = config.beta2 * v_lt + (1 - config.beta2) * g_lt * g_lt
        lt = model.log_temperature - lr * (m_lt / bias1) / (np.sqrt(v_lt / bias2) + config.adam_eps)
        model.log_temperature = float(np.clip(lt, LOG_TEMPERATURE_MIN, LOG_TEMPERATURE_MAX))
        history.append((step, loss, lr))

    model.validate()
    return TrainResult(model=model, history=history)


def finetune(
    model: TwoTowerModel, pool: ShardSet | RecordBatch, config: TrainConfig
) -> TrainResult:
    """Continue training from an existing model; zero samples_seen is a no-op."""
    config.validate()
    if config.samples_seen == 0:
        return TrainResult(model=model.copy(), history=[])
    return train_clip(pool, config, init=model)


def write_history_csv(history: list[tuple[int, float, float]], path) -> None:
    lines = ["step,loss,lr"]
    for step, loss, lr in history:
        lines.append(f"{step},{loss:.8f},{lr:.8g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
