from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_spec
from dfnlab.filtering import (
    BinaryScorer,
    ClipScorer,
    ConstantScorer,
    FilterConfig,
    ReservoirSampler,
    ScoringError,
    apply_dfn,
    calibrate_threshold,
    clip_filter,
    score_alignment,
    train_binary_filter,
)
from dfnlab.model import TwoTowerModel, encode_image, encode_text, init_model
from dfnlab.records import Record
from dfnlab.synth import generate_pool, sample_batch
from dfnlab.train import TrainConfig


def model_for(spec) -> TwoTowerModel:
    return init_model(spec.d_img, spec.d_txt, 8, seed=5)


def sort_oracle(scores, keep_fraction):
    """Independent brute-force reference for the calibration order statistic."""
    ordered = sorted(float(np.float32(s)) for s in scores)
    n = len(ordered)
    k = int(np.floor(keep_fraction * n + 1e-9))
    if k >= n:
        return float(np.nextafter(np.float32(ordered[0]), np.float32(-np.inf)))
    return ordered[n - k - 1]


# --- scorers -----------------------------------------------------------------


def test_identical_embeddings_score_one():
    spec = tiny_spec(d_img=12, d_txt=12)
    model = TwoTowerModel(
        w_img=np.eye(12, dtype=np.float32), b_img=np.zeros(12, np.float32),
        w_txt=np.eye(12, dtype=np.float32), b_txt=np.zeros(12, np.float32),
    )
    rec = Record(id=1, image_features=np.ones(12, np.float32),
                 text_features=np.ones(12, np.float32))
    assert score_alignment(ClipScorer(model), rec) == pytest.approx(1.0, abs=1e-6)


def test_orthogonal_embeddings_score_zero():
    model = TwoTowerModel(
        w_img=np.eye(4, dtype=np.float32), b_img=np.zeros(4, np.float32),
        w_txt=np.eye(4, dtype=np.float32), b_txt=np.zeros(4, np.float32),
    )
    rec = Record(id=1, image_features=np.array([1, 0, 0, 0], np.float32),
                 text_features=np.array([0, 1, 0, 0], np.float32))
    assert score_alignment(ClipScorer(model), rec) == pytest.approx(0.0, abs=1e-7)


def test_clip_score_matches_manual_dot_product(rng):
    spec = tiny_spec()
    model = model_for(spec)
    batch = sample_batch(spec, 20)
    scores = ClipScorer(model).score_batch(batch)
    for i in range(20):
        ie = encode_image(model, batch.image[i])
        te = encode_text(model, batch.text[i])
        manual = float(sum(float(a) * float(b) for a, b in zip(ie, te)))
        assert scores[i] == pytest.approx(manual, abs=1e-6)


def test_clip_scores_in_range():
    spec = tiny_spec()
    scores = ClipScorer(model_for(spec)).score_batch(sample_batch(spec, 200))
    assert scores.dtype == np.float32
    assert (scores >= -1.0).all() and (scores <= 1.0).all()


def test_scoring_error_names_record():
    spec = tiny_spec()
    model = model_for(spec)
    model.b_img[:] = 0.0
    batch = sample_batch(spec, 4)
    batch.image[2] = 0.0
    with pytest.raises(ScoringError, match=str(int(batch.ids[2]))):
        ClipScorer(model).score_batch(batch)


def test_binary_scorer_probability_range(rng):
    spec = tiny_spec()
    batch = sample_batch(spec, 50)
    scorer = BinaryScorer(weights=rng.standard_normal(spec.d_img).astype(np.float32),
                          bias=0.1)
    scores = scorer.score_batch(batch)
    assert ((scores >= 0) & (scores <= 1)).all()


# --- clip_filter -------------------------------------------------------------


def test_filter_keeps_high_score_at_default_threshold():
    # threshold 0.3 with a perfectly aligned record (score 1.0)
    rec = Record(id=1, image_features=np.ones(4, np.float32),
                 text_features=np.ones(4, np.float32))
    eye = TwoTowerModel(w_img=np.eye(4, dtype=np.float32),
                        b_img=np.zeros(4, np.float32),
                        w_txt=np.eye(4, dtype=np.float32),
                        b_txt=np.zeros(4, np.float32))
    assert clip_filter(ClipScorer(eye), rec, threshold=0.3) is True


def test_filter_strict_inequality():
    scorer = ConstantScorer(0.3)
    rec = Record(id=1, image_features=np.ones(4, np.float32),
                 text_features=np.ones(4, np.float32))
    assert clip_filter(scorer, rec, threshold=0.3) is False
    assert clip_filter(ConstantScorer(0.0), rec, threshold=0.3) is False


# --- calibration -------------------------------------------------------------


def test_calibrate_decile_example():
    scores = np.array([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0], np.float32)
    t = calibrate_threshold(scores, 0.2)
    assert t == pytest.approx(np.float32(0.8))
    kept = scores[scores > np.float32(t)]
    assert sorted(kept.tolist()) == pytest.approx([0.9, 1.0])


def test_calibrate_keep_all():
    scores = np.array([0.4, 0.9, 0.2], np.float32)
    t = calibrate_threshold(scores, 1.0)
    assert t < 0.2
    assert (scores > t).all()


def test_calibrate_rejects_bad_input():
    with pytest.raises(ValueError):
        calibrate_threshold(np.array([], np.float32), 0.5)
    with pytest.raises(ValueError):
        calibrate_threshold(np.array([1.0], np.float32), 0.0)
    with pytest.raises(ValueError):
        calibrate_threshold(np.array([1.0], np.float32), 0.5, mode="weird")


@given(st.lists(st.floats(-1, 1, width=32), min_size=1, max_size=400),
       st.floats(0.01, 1.0))
def test_calibrate_matches_sort_oracle(values, keep_fraction):
    scores = np.array(values, dtype=np.float32)
    t = calibrate_threshold(scores, keep_fraction)
    assert t == pytest.approx(sort_oracle(scores, keep_fraction), abs=0)
    kept = int((scores > np.float32(t)).sum())
    assert kept <= int(np.floor(keep_fraction * len(scores) + 1e-9))


def test_calibrate_accepts_iterables():
    t = calibrate_threshold(iter([0.1, 0.5, 0.9, 0.7]), 0.5)
    assert t == pytest.approx(np.float32(0.5))


def test_reservoir_uniformity_and_determinism():
    rng = np.random.default_rng(0)
    stream = rng.random(100_000).astype(np.float32)
    a = ReservoirSampler(5_000, seed=1)
    a.extend(stream)
    b = ReservoirSampler(5_000, seed=1)
    for chunk in np.array_split(stream, 13):
        b.extend(chunk)
    assert (a.values() == b.values()).all()
    # sample quantile close to truth on a uniform stream
    t = calibrate_threshold(stream, 0.15, mode="reservoir", capacity=5_000, seed=1)
    kept = float((stream > np.float32(t)).mean())
    assert abs(kept - 0.15) <= 0.02


def test_reservoir_smaller_than_capacity_is_exact():
    scores = np.linspace(0, 1, 50, dtype=np.float32)
    exact = calibrate_threshold(scores, 0.3)
    sampled = calibrate_threshold(scores, 0.3, mode="reservoir", capacity=1_000, seed=0)
    assert exact == sampled


# --- apply_dfn ---------------------------------------------------------------


@pytest.fixture
def pool_on_disk(tmp_path):
    spec = tiny_spec(align_prob=0.5, noise_sigma=0.3, seed=31)
    return generate_pool(spec, 400, tmp_path / "pool", records_per_shard=64), spec


def brute_force_filter(scorer, pool, threshold):
    kept_ids = []
    for batch in pool.iter_batches():
        for i in range(len(batch)):
            if clip_filter(scorer, batch.record(i), threshold):
                kept_ids.append(int(batch.ids[i]))
    return kept_ids


def test_always_true_scorer_keeps_everything(tmp_path, pool_on_disk):
    pool, _ = pool_on_disk
    out, report = apply_dfn(ConstantScorer(1.0), FilterConfig(threshold=0.5),
                            pool, tmp_path / "out")
    assert report.kept_count == report.input_count == pool.total_records
    assert (out.load().ids == pool.load().ids).all()


def test_always_false_scorer_keeps_nothing(tmp_path, pool_on_disk):
    pool, _ = pool_on_disk
    out, report = apply_dfn(ConstantScorer(0.0), FilterConfig(threshold=0.5),
                            pool, tmp_path / "out")
    assert report.kept_count == 0
    assert out.total_records == 0


def test_apply_matches_brute_force_across_workers(tmp_path, pool_on_disk):
    pool, spec = pool_on_disk
    scorer = ClipScorer(model_for(spec))
    threshold = 0.1
    expected = brute_force_filter(scorer, pool, threshold)
    manifests = []
    for workers in (1, 2, 8):
        out, report = apply_dfn(scorer, FilterConfig(threshold=threshold), pool,
                                tmp_path / f"w{workers}", workers=workers)
        assert out.load().ids.tolist() == expected
        assert report.kept_count == len(expected)
        manifests.append((tmp_path / f"w{workers}" / "manifest.jsonl").read_bytes())
    assert manifests[0] == manifests[1] == manifests[2]


def test_apply_preserves_order_and_subset(tmp_path, pool_on_disk):
    pool, spec = pool_on_disk
    scorer = ClipScorer(model_for(spec))
    out, _ = apply_dfn(scorer, FilterConfig(keep_fraction=0.4), pool, tmp_path / "out")
    input_ids = pool.load().ids.tolist()
    kept_ids = out.load().ids.tolist()
    positions = [input_ids.index(i) for i in kept_ids]
    assert positions == sorted(positions)
    assert set(kept_ids) <= set(input_ids)


def test_apply_idempotent_for_fixed_threshold(tmp_path, pool_on_disk):
    pool, spec = pool_on_disk
    scorer = ClipScorer(model_for(spec))
    fc = FilterConfig(threshold=0.05)
    once, _ = apply_dfn(scorer, fc, pool, tmp_path / "a")
    twice, _ = apply_dfn(scorer, fc, once, tmp_path / "b")
    assert twice.load().ids.tolist() == once.load().ids.tolist()


def test_threshold_monotonicity(tmp_path, pool_on_disk):
    pool, spec = pool_on_disk
    scorer = ClipScorer(model_for(spec))
    kept = {}
    for t in (-0.2, 0.1, 0.4):
        out, _ = apply_dfn(scorer, FilterConfig(threshold=t), pool, tmp_path / f"t{t}")
        kept[t] = set(out.load().ids.tolist())
    assert kept[0.4] <= kept[0.1] <= kept[-0.2]


def test_keep_fraction_calibration_accuracy(tmp_path):
    spec = tiny_spec(align_prob=0.5, noise_sigma=0.4, seed=77)
    pool = generate_pool(spec, 2_000, tmp_path / "pool", records_per_shard=256)
    scorer = ClipScorer(model_for(spec))
    out, report = apply_dfn(scorer, FilterConfig(keep_fraction=0.15), pool,
                            tmp_path / "out")
    assert abs(report.kept_count / report.input_count - 0.15) <= 1 / 2_000 + 1e-9
    assert report.threshold is not None


def test_orthogonal_transform_leaves_kept_set_unchanged(tmp_path, pool_on_disk, rng):
    pool, spec = pool_on_disk
    model = model_for(spec)
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    rotated = TwoTowerModel(
        w_img=(q @ model.w_img).astype(np.float32),
        b_img=(q @ model.b_img).astype(np.float32),
        w_txt=(q @ model.w_txt).astype(np.float32),
        b_txt=(q @ model.b_txt).astype(np.float32),
        log_temperature=model.log_temperature,
    )
    s1 = ClipScorer(model).score_batch(pool.load())
    s2 = ClipScorer(rotated).score_batch(pool.load())
    assert np.abs(s1 - s2).max() <= 1e-5
    a, _ = apply_dfn(ClipScorer(model), FilterConfig(keep_fraction=0.3), pool,
                     tmp_path / "a")
    b, _ = apply_dfn(ClipScorer(rotated), FilterConfig(keep_fraction=0.3), pool,
                     tmp_path / "b")
    # ranks are preserved up to float jitter; allow one borderline record
    ids_a, ids_b = set(a.load().ids.tolist()), set(b.load().ids.tolist())
    assert len(ids_a ^ ids_b) <= 2


def test_report_json_field_names(tmp_path, pool_on_disk):
    pool, spec = pool_on_disk
    _, report = apply_dfn(ClipScorer(model_for(spec)), FilterConfig(keep_fraction=0.5),
                          pool, tmp_path / "out")
    payload = json.loads(report.to_json())
    assert set(payload) == {"input_count", "kept_count", "threshold",
                            "keep_fraction", "mode", "shards"}
    assert payload["mode"] == "exact"
    assert payload["keep_fraction"] == 0.5
    assert sum(s["kept_count"] for s in payload["shards"]) == payload["kept_count"]
    assert all(set(s) == {"path", "input_count", "kept_count"}
               for s in payload["shards"])


def test_filter_config_validation():
    with pytest.raises(ValueError, match="not both"):
        FilterConfig(threshold=0.3, keep_fraction=0.5).validate()
    FilterConfig().validate()
    assert FilterConfig().effective_keep_fraction == 0.15


# --- binary filter training --------------------------------------------------


def binary_train_config(**overrides) -> TrainConfig:
    base = dict(samples_seen=40_000, batch_size=128, learning_rate=0.05,
                warmup_steps=10, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def test_binary_filter_separates_disjoint_pools():
    pos = sample_batch(tiny_spec(seed=41, noise_sigma=0.05), 800)
    neg = sample_batch(tiny_spec(seed=42, noise_sigma=0.05), 800)
    # shift negatives far away so the pools are linearly separable
    neg.image = neg.image + 8.0
    scorer = train_binary_filter(pos, neg, binary_train_config())
    acc_pos = (scorer.score_batch(pos) > 0.5).mean()
    acc_neg = (scorer.score_batch(neg) <= 0.5).mean()
    assert (acc_pos + acc_neg) / 2 >= 0.99


def test_binary_filter_chance_on_identical_distributions():
    pos = sample_batch(tiny_spec(seed=43), 600)
    neg = sample_batch(tiny_spec(seed=44), 600)
    held_pos = sample_batch(tiny_spec(seed=45), 600)
    held_neg = sample_batch(tiny_spec(seed=46), 600)
    scorer = train_binary_filter(pos, neg, binary_train_config())
    acc = ((scorer.score_batch(held_pos) > 0.5).mean()
           + (scorer.score_batch(held_neg) <= 0.5).mean()) / 2
    assert abs(acc - 0.5) <= 0.05


def test_binary_filter_deterministic():
    pos = sample_batch(tiny_spec(seed=41), 300)
    neg = sample_batch(tiny_spec(seed=42), 300)
    a = train_binary_filter(pos, neg, binary_train_config())
    b = train_binary_filter(pos, neg, binary_train_config())
    assert (a.weights == b.weights).all() and a.bias == b.bias


def test_binary_filter_concatenated_features():
    pos = sample_batch(tiny_spec(seed=41), 300)
    neg = sample_batch(tiny_spec(seed=42), 300)
    scorer = train_binary_filter(pos, neg, binary_train_config(),
                                 features="image_text")
    assert scorer.weights.shape[0] == pos.d_img + pos.d_txt
    assert scorer.score(pos.record(0)) == pytest.approx(
        scorer.score_batch(pos)[0], abs=1e-7
    )
