from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dfnlab.model import (
    CheckpointError,
    DegenerateEmbeddingError,
    LOG_TEMPERATURE_INIT,
    TwoTowerModel,
    augment,
    contrastive_loss,
    encode_image,
    encode_text,
    init_model,
    interpolate_weights,
    load_model,
    save_model,
    zero_shot_classify,
)
from dfnlab.records import Record


def random_model(rng, d_img=10, d_txt=9, d_emb=6) -> TwoTowerModel:
    return TwoTowerModel(
        w_img=rng.standard_normal((d_emb, d_img)).astype(np.float32),
        b_img=rng.standard_normal(d_emb).astype(np.float32),
        w_txt=rng.standard_normal((d_emb, d_txt)).astype(np.float32),
        b_txt=rng.standard_normal(d_emb).astype(np.float32),
        log_temperature=float(np.log(0.2)),
    )


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# --- encoding ---------------------------------------------------------------


def test_encode_output_is_unit_norm(rng):
    model = random_model(rng)
    x = rng.standard_normal((40, 10)).astype(np.float32)
    emb = encode_image(model, x)
    assert np.abs(np.linalg.norm(emb, axis=1) - 1.0).max() <= 1e-5


def test_encode_identity_model_returns_input(rng):
    d = 6
    model = TwoTowerModel(
        w_img=np.eye(d, dtype=np.float32),
        b_img=np.zeros(d, dtype=np.float32),
        w_txt=np.eye(d, dtype=np.float32),
        b_txt=np.zeros(d, dtype=np.float32),
    )
    x = unit_rows(rng, 1, d)[0].astype(np.float32)
    assert np.allclose(encode_image(model, x), x, atol=1e-6)
    assert np.allclose(encode_text(model, x), x, atol=1e-6)


def test_encode_matches_manual_matmul(rng):
    # independent oracle: plain loops, no shared code path
    model = random_model(rng)
    x = rng.standard_normal(10).astype(np.float32)
    z = np.array([
        sum(float(model.w_img[i, j]) * float(x[j]) for j in range(10))
        + float(model.b_img[i])
        for i in range(6)
    ])
    expected = z / np.sqrt(sum(v * v for v in z))
    assert np.allclose(encode_image(model, x), expected, atol=1e-5)


def test_encode_degenerate_input_raises(rng):
    model = random_model(rng)
    model.b_img[:] = 0.0
    with pytest.raises(DegenerateEmbeddingError, match="row"):
        encode_image(model, np.zeros(10, dtype=np.float32))


def test_encode_dimension_mismatch(rng):
    model = random_model(rng)
    with pytest.raises(ValueError, match="dimension"):
        encode_image(model, np.zeros(7, dtype=np.float32))


# --- contrastive loss -------------------------------------------------------


def test_loss_single_pair_is_zero(rng):
    e = unit_rows(rng, 1, 8)
    out = contrastive_loss(e, e.copy(), temperature=0.5)
    assert out.loss == pytest.approx(0.0, abs=1e-12)


def test_loss_two_orthogonal_matched_pairs():
    # hand-computed 2x2 softmax cross-entropy at tau=1
    ie = np.eye(2, 4)
    te = np.eye(2, 4)
    out = contrastive_loss(ie, te, temperature=1.0)
    assert out.loss == pytest.approx(0.31326168751822286, rel=1e-12)


def test_loss_nonnegative(rng):
    for n in (2, 4, 8):
        out = contrastive_loss(unit_rows(rng, n, 8), unit_rows(rng, n, 8), 0.3)
        assert out.loss >= 0.0


def test_loss_rejects_nonfinite(rng):
    e = unit_rows(rng, 3, 4)
    bad = e.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        contrastive_loss(bad, e, 1.0)
    with pytest.raises(ValueError, match="temperature"):
        contrastive_loss(e, e, 0.0)


@given(st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_loss_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    ie = unit_rows(rng, n, 8)
    te = unit_rows(rng, n, 8)
    base = contrastive_loss(ie, te, 0.2).loss
    perm = rng.permutation(n)
    permuted = contrastive_loss(ie[perm], te[perm], 0.2).loss
    assert permuted == pytest.approx(base, rel=1e-10)


def finite_difference_check(n, d, temperature, seed, eps=1e-4):
    """Central-difference oracle in 64-bit; returns worst relative error."""
    rng = np.random.default_rng(seed)
    ie = unit_rows(rng, n, d)
    te = unit_rows(rng, n, d)
    out = contrastive_loss(ie, te, temperature)
    worst = 0.0
    for arr, grad in ((ie, out.d_image), (te, out.d_text)):
        for i in range(n):
            for j in range(d):
                orig = arr[i, j]
                arr[i, j] = orig + eps
                up = contrastive_loss(ie, te, temperature).loss
                arr[i, j] = orig - eps
                down = contrastive_loss(ie, te, temperature).loss
                arr[i, j] = orig
                fd = (up - down) / (2 * eps)
                scale = max(abs(fd), abs(grad[i, j]), 1e-6)
                worst = max(worst, abs(fd - grad[i, j]) / scale)
    log_t = np.log(temperature)
    up = contrastive_loss(ie, te, float(np.exp(log_t + eps))).loss
    down = contrastive_loss(ie, te, float(np.exp(log_t - eps))).loss
    fd = (up - down) / (2 * eps)
    scale = max(abs(fd), abs(out.d_log_temperature), 1e-6)
    worst = max(worst, abs(fd - out.d_log_temperature) / scale)
    return worst


@pytest.mark.parametrize("n,d", [(2, 8), (4, 8), (8, 16), (3, 16)])
def test_gradients_match_finite_differences(n, d):
    assert finite_difference_check(n, d, temperature=0.2, seed=n * 100 + d) <= 1e-4


# --- interpolation ----------------------------------------------------------


def test_interpolation_endpoints_exact(rng):
    a = random_model(rng)
    b = random_model(rng)
    at0 = interpolate_weights(a, b, 0.0)
    at1 = interpolate_weights(a, b, 1.0)
    for src, out in ((a, at0), (b, at1)):
        assert np.abs(out.w_img - src.w_img).max() <= 1e-7
        assert np.abs(out.b_img - src.b_img).max() <= 1e-7
        assert np.abs(out.w_txt - src.w_txt).max() <= 1e-7
        assert np.abs(out.b_txt - src.b_txt).max() <= 1e-7
        assert abs(out.log_temperature - src.log_temperature) <= 1e-7


def test_interpolation_midpoint_is_mean(rng):
    a = random_model(rng)
    b = random_model(rng)
    mid = interpolate_weights(a, b, 0.5)
    assert np.allclose(mid.w_img, (a.w_img + b.w_img) / 2, atol=1e-6)
    assert mid.log_temperature == pytest.approx(
        (a.log_temperature + b.log_temperature) / 2, abs=1e-9
    )


def test_interpolation_shape_mismatch(rng):
    a = random_model(rng)
    b = random_model(rng, d_img=11)
    with pytest.raises(ValueError, match="shape"):
        interpolate_weights(a, b, 0.5)


# --- zero-shot classification ------------------------------------------------


def test_zero_shot_single_prototype_always_class_zero(rng):
    model = random_model(rng)
    protos = unit_rows(rng, 1, 6)
    x = rng.standard_normal((5, 10)).astype(np.float32)
    assert (zero_shot_classify(model, protos, x) == 0).all()


def test_zero_shot_prototype_permutation_equivariance(rng):
    model = random_model(rng)
    protos = unit_rows(rng, 7, 6)
    x = rng.standard_normal((30, 10)).astype(np.float32)
    base = zero_shot_classify(model, protos, x)
    perm = rng.permutation(7)
    permuted = zero_shot_classify(model, protos[perm], x)
    assert (perm[permuted] == base).all()


def test_zero_shot_scale_invariant_without_bias(rng):
    model = random_model(rng)
    model.b_img[:] = 0.0
    protos = unit_rows(rng, 5, 6)
    x = rng.standard_normal((20, 10)).astype(np.float32)
    assert (zero_shot_classify(model, protos, 3.7 * x)
            == zero_shot_classify(model, protos, x)).all()


def test_zero_shot_requires_prototypes(rng):
    model = random_model(rng)
    with pytest.raises(ValueError, match="nonempty"):
        zero_shot_classify(model, np.zeros((0, 6)), np.zeros(10, dtype=np.float32))


def test_zero_shot_ties_break_low_index(rng):
    model = random_model(rng)
    protos = unit_rows(rng, 3, 6)
    protos[2] = protos[0]  # duplicate prototype: argmax must pick index 0
    x = rng.standard_normal((50, 10)).astype(np.float32)
    preds = zero_shot_classify(model, protos, x)
    assert not (preds == 2).any()


# --- augmentation -----------------------------------------------------------


def sample_record(rng) -> Record:
    return Record(
        id=42,
        image_features=rng.standard_normal(10).astype(np.float32),
        text_features=rng.standard_normal(9).astype(np.float32),
        concept_label=3,
        aligned=True,
    )


def test_augment_zero_scale_is_identity(rng):
    rec = sample_record(rng)
    out = augment(rec, 0.0, seed=5)
    assert (out.image_features == rec.image_features).all()
    assert (out.text_features == rec.text_features).all()


def test_augment_deterministic_and_text_untouched(rng):
    rec = sample_record(rng)
    a = augment(rec, 0.3, seed=5)
    b = augment(rec, 0.3, seed=5)
    c = augment(rec, 0.3, seed=6)
    assert (a.image_features == b.image_features).all()
    assert not (a.image_features == c.image_features).all()
    assert not (a.image_features == rec.image_features).all()
    assert (a.text_features == rec.text_features).all()


# --- checkpoints ------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    model = random_model(rng)
    path = tmp_path / "m.ckpt"
    save_model(model, path)
    loaded = load_model(path)
    assert (loaded.w_img == model.w_img).all()
    assert (loaded.b_txt == model.b_txt).all()
    assert loaded.log_temperature == pytest.approx(model.log_temperature, abs=1e-7)


def test_checkpoint_corruption_detected(tmp_path, rng):
    path = tmp_path / "m.ckpt"
    save_model(random_model(rng), path)
    data = bytearray(path.read_bytes())
    data[:4] = b"XXXX"
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="magic"):
        load_model(path)
    save_model(random_model(rng), path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(CheckpointError, match="bytes"):
        load_model(path)


def test_init_model_temperature():
    model = init_model(8, 8, 4, seed=0)
    assert model.log_temperature == pytest.approx(LOG_TEMPERATURE_INIT)
    assert model.temperature == pytest.approx(0.07)
