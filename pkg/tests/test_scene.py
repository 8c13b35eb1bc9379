import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objstreams.scene import (
    BACKGROUND,
    BoundingBox,
    ClassUniverse,
    SceneObject,
    SceneSpec,
    SyntheticDetectorConfig,
    background_texture,
    generate_scene,
    run_synthetic_detector,
    street_scene,
)


def test_universe_labels_and_background():
    u = ClassUniverse(["car", "person"])
    assert u.id("person") == 1
    assert u.label("background") == BACKGROUND
    assert u.label_name(BACKGROUND) == "background"
    assert u.labels() == [0, 1, BACKGROUND]
    with pytest.raises(ValueError):
        ClassUniverse(["car", "car"])


def test_box_clip_keeps_valid_boxes():
    assert BoundingBox(-5, -5, 10, 10).clip(8, 8) == BoundingBox(0, 0, 8, 8)
    assert BoundingBox(20, 20, 30, 30).clip(8, 8) is None


def test_background_never_black():
    bg = background_texture(97, 53, seed=3)
    assert bg.min() >= 16
    assert not (bg == 0).all(axis=-1).any()


def test_generated_truth_matches_authored_objects():
    spec = SceneSpec(
        32,
        32,
        10,
        ["car", "person"],
        [
            SceneObject("car", -4, 2, 8, 6, vx=2, color=(250, 0, 0), track_id=7),
            SceneObject("person", 10, 10, 4, 8, spawn=3, despawn=6, color=(0, 250, 0), track_id=9),
        ],
    )
    frames, truth = generate_scene(spec)
    assert frames.shape == (10, 32, 32, 3)
    # car clipped at the left edge on frame 0
    first = truth.frames[0][0]
    assert first.box == BoundingBox(0, 2, 4, 8) and first.track_id == 7 and first.confidence == 1.0
    assert [len(f) for f in truth.frames] == [1, 1, 1, 2, 2, 2, 1, 1, 1, 1]
    assert (frames[4, 10:18, 10:14] == (0, 250, 0)).all()
    truth.validate()


def test_scene_spec_rejects_bad_objects():
    with pytest.raises(ValueError):
        SceneSpec(8, 8, 1, ["car"], [SceneObject("car", 0, 0, 0, 3)]).validate()
    with pytest.raises(ValueError):
        SceneSpec(8, 8, 1, ["car"], [SceneObject("car", 0, 0, 2, 2, color=(0, 0, 0))]).validate()
    with pytest.raises(ValueError):
        SceneSpec(8, 8, 1, ["car"], [SceneObject("unicorn", 0, 0, 2, 2)]).validate()


def test_scene_dict_round_trip():
    spec = street_scene(seed=3, n_frames=20)
    again = SceneSpec.from_dict(spec.to_dict())
    f1, t1 = generate_scene(spec)
    f2, t2 = generate_scene(again)
    assert np.array_equal(f1, f2)
    assert t1.frames == t2.frames


def test_scene_generation_is_deterministic():
    a = generate_scene(street_scene(seed=9, n_frames=12))
    b = generate_scene(street_scene(seed=9, n_frames=12))
    assert np.array_equal(a[0], b[0]) and a[1].frames == b[1].frames


def _many_truth(n_frames=400):
    spec = street_scene(seed=2, n_frames=n_frames, n_objects=20)
    return generate_scene(spec)[1]


def test_detector_rates_match_configuration():
    # Monte-Carlo oracle: observed rates within 4 binomial standard errors
    truth = _many_truth()
    cfg = SyntheticDetectorConfig(p_fn={"*": 0.3}, p_fp={"car": {"person": 0.2}}, seed=7)
    pred = run_synthetic_detector(truth, cfg)
    car = truth.classes.id("car")
    n_truth = sum(len(f) for f in truth.frames)
    n_kept = sum(len(f) for f in pred.frames)
    miss = 1 - n_kept / n_truth
    assert abs(miss - 0.3) < 4 * np.sqrt(0.3 * 0.7 / n_truth)

    kept_cars = [(g, p) for gf, pf in zip(truth.frames, pred.frames) for p in pf for g in gf if g.track_id == p.track_id and g.cls == car]
    relabelled = sum(p.cls != car for _, p in kept_cars) / len(kept_cars)
    assert abs(relabelled - 0.2) < 4 * np.sqrt(0.2 * 0.8 / len(kept_cars))
    for _, p in kept_cars:
        lo, hi = (0.7, 1.0) if p.cls == car else (0.3, 0.7)
        assert lo <= p.confidence <= hi


def test_detector_seed_reproducible_and_distinct():
    truth = _many_truth(60)
    cfg = SyntheticDetectorConfig(p_fn={"*": 0.5}, seed=7)
    a = run_synthetic_detector(truth, cfg)
    b = run_synthetic_detector(truth, cfg)
    c = run_synthetic_detector(truth, SyntheticDetectorConfig(p_fn={"*": 0.5}, seed=8))
    assert a.frames == b.frames
    assert a.frames != c.frames


def test_detector_identity_when_perfect():
    truth = _many_truth(30)
    pred = run_synthetic_detector(truth, SyntheticDetectorConfig())
    assert [[d.box for d in f] for f in pred.frames] == [[d.box for d in f] for f in truth.frames]


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.integers(0, 50), st.floats(0, 3))
def test_detector_boxes_stay_in_frame(p, seed, sigma):
    truth = _many_truth(10)
    pred = run_synthetic_detector(truth, SyntheticDetectorConfig(p_fn={"*": p}, sigma=sigma, seed=seed))
    pred.validate()


def test_detector_config_validation():
    with pytest.raises(ValueError):
        SyntheticDetectorConfig(p_fn={"*": 1.5}).validate()
    with pytest.raises(ValueError):
        SyntheticDetectorConfig(p_fp={"car": {"person": 0.7, "truck": 0.6}}).validate(ClassUniverse(["car", "person", "truck"]))
    with pytest.raises(ValueError):
        SyntheticDetectorConfig(p_fp={"car": {"car": 0.1}}).validate()
