import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from objstreams.metrics import (
    NO_OBJECTS,
    ConfusionTally,
    check_theorem1,
    compute_losses,
    emit_report,
    fuzz_theorem1,
    load_tally,
    match_and_tally,
    random_split,
    random_tally,
    save_tally,
)
from objstreams.scene import (
    BoundingBox,
    ClassUniverse,
    Detection,
    DetectionTrace,
    SyntheticDetectorConfig,
    generate_scene,
    run_synthetic_detector,
    street_scene,
)

U = ClassUniverse(["car", "person"])


def tally_from(tp, missed, fp):
    t = ConfusionTally.zeros(U)
    t.tp[:] = tp
    t.missed[:] = missed
    t.fp[:] = fp
    t.fn[:] = t.missed + t.fp.sum(axis=1)
    t.validate()
    return t


def test_hand_example_losses():
    # 10 people: 8 found, 1 missed, 1 labelled car
    t = tally_from([5, 8], [0, 1], [[0, 0], [1, 0]])
    r = compute_losses(t, ["car"], ["person"])
    assert r.p_wl == pytest.approx(0.1) and r.p_bl == pytest.approx(0.2)
    assert r.precision_beta == pytest.approx(8 / 9) and r.recall_beta == pytest.approx(0.8)
    assert r.u_wl == 0 and r.u_bl == 0
    v = check_theorem1(t, ["car"], ["person"])
    assert v.status == "holds" and v.strict


def test_three_object_frame_by_hand():
    truth = DetectionTrace(100, 20, U, [[
        Detection(0, BoundingBox(0, 0, 10, 10), 0),
        Detection(0, BoundingBox(20, 0, 30, 10), 1),
        Detection(0, BoundingBox(40, 0, 50, 10), 0),
    ]])
    pred = DetectionTrace(100, 20, U, [[
        Detection(0, BoundingBox(0, 0, 10, 10), 0),   # exact car
        Detection(0, BoundingBox(21, 0, 31, 10), 0),  # person called car, IoU 9/11
        Detection(0, BoundingBox(70, 0, 80, 10), 1),  # nothing there
    ]])
    t = match_and_tally(truth, pred)
    assert t.tp.tolist() == [1, 0]
    assert t.fp.tolist() == [[0, 0], [1, 0]]
    assert t.missed.tolist() == [1, 0]
    assert t.fn.tolist() == [1, 1]
    assert t.spurious.tolist() == [0, 1]
    # a stricter IoU turns the shifted box into a miss plus a spurious car
    strict = match_and_tally(truth, pred, iou_match=0.9)
    assert strict.fp.sum() == 0 and strict.missed.tolist() == [1, 1] and strict.spurious.tolist() == [1, 1]


def test_perfect_and_blind_detectors():
    spec = street_scene(seed=3, n_frames=20)
    _, truth = generate_scene(spec)
    perfect = compute_losses(match_and_tally(truth, truth), ["car"], ["person"])
    assert (perfect.p_wl, perfect.p_bl, perfect.u_wl, perfect.u_bl) == (0, 0, 0, 0)
    blind = run_synthetic_detector(truth, SyntheticDetectorConfig(p_fn={"*": 1.0}))
    r = compute_losses(match_and_tally(truth, blind), ["car"], ["person"])
    assert r.p_bl == 1.0 and r.u_wl == 1.0 and r.p_wl == 0.0 and r.precision_beta is None
    assert check_theorem1(match_and_tally(truth, blind), ["car"], ["person"]).status == "precondition unmet"


def test_precondition_unmet_when_recall_beats_precision():
    t = tally_from([5, 9], [0, 0], [[0, 0], [1, 0]])
    t.fp[1, 0] = 0
    t.fp[0, 1] = 4  # cars called person drag precision down
    t.fn[:] = t.missed + t.fp.sum(axis=1)
    v = check_theorem1(t, ["car"], ["person"])
    assert not v.precondition and v.holds is None


def test_no_objects_marker():
    t = tally_from([3, 0], [0, 0], [[0, 0], [0, 0]])
    row = compute_losses(t, ["car"], ["person"]).as_row()
    assert row["p_wl"] == NO_OBJECTS and row["p_bl"] == NO_OBJECTS and row["u_wl"] == "0.0"


def test_background_in_lists_is_ignored():
    t = tally_from([5, 8], [0, 1], [[0, 0], [1, 0]])
    r = compute_losses(t, ["car", "background"], ["person"])
    assert r.whitelist == ["car"] and r.p_wl == pytest.approx(0.1)


def test_overlap_is_reported():
    t = tally_from([5, 8], [0, 1], [[0, 0], [1, 0]])
    assert compute_losses(t, ["car", "person"], ["person"]).overlap == ["person"]


seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=300, deadline=None)
@given(seeds)
def test_whitelisting_never_leaks_more(seed):
    # fp[beta, omega] <= fp[beta, :] <= fn[beta], so P_WL <= P_BL and U_BL <= U_WL
    rng = np.random.default_rng(seed)
    t = random_tally(rng, n_classes=5)
    omega, beta = random_split(rng, t.classes.names)
    r = compute_losses(t, omega, beta)
    if r.p_wl is not None:
        assert r.p_wl <= r.p_bl
    if r.u_wl is not None:
        assert r.u_bl <= r.u_wl


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_shrinking_whitelist_never_raises_privacy_loss(seed):
    rng = np.random.default_rng(seed)
    t = random_tally(rng, n_classes=5)
    omega, beta = random_split(rng, t.classes.names)
    full = compute_losses(t, omega, beta).p_wl
    sub = compute_losses(t, omega[: max(1, len(omega) - 1)], beta).p_wl
    if full is not None:
        assert sub <= full


@settings(max_examples=100, deadline=None)
@given(seeds, st.floats(0, 0.9), st.floats(0, 0.5))
def test_tally_conservation(seed, p_fn, p_fp):
    _, truth = generate_scene(street_scene(seed=seed % 1000, n_frames=6, width=96, height=64, n_objects=6))
    det = SyntheticDetectorConfig(p_fn={"*": p_fn}, p_fp={"car": {"person": p_fp}}, seed=seed, sigma=1.0)
    pred = run_synthetic_detector(truth, det)
    t = match_and_tally(truth, pred)
    t.validate()
    n = len(t.classes)
    gt = np.bincount([d.cls for d in truth.detections()], minlength=n)
    pd = np.bincount([d.cls for d in pred.detections()], minlength=n)
    assert (t.tp + t.fn == gt).all()
    assert (t.tp + t.fp.sum(axis=0) + t.spurious == pd).all()


def test_privacy_loss_grows_with_miss_rate():
    _, truth = generate_scene(street_scene(seed=8, n_frames=24))
    means = []
    for p in (0.1, 0.4, 0.7):
        vals = []
        for seed in range(20):
            pred = run_synthetic_detector(truth, SyntheticDetectorConfig(p_fn={"person": p}, seed=seed))
            vals.append(compute_losses(match_and_tally(truth, pred), ["car"], ["person"]).p_bl)
        means.append(np.mean(vals))
    assert means[0] < means[1] < means[2]
    assert means[1] == pytest.approx(0.4, abs=0.05)


def test_fuzz_small_run():
    res = fuzz_theorem1(500, seed=1)
    assert res.cases == 500 and res.drawn >= 500 and res.counterexamples == []


def test_emit_report(tmp_path):
    t = tally_from([5, 8], [0, 1], [[0, 0], [1, 0]])
    r = compute_losses(t, ["car"], ["person"])
    text = emit_report([("s", f"d{i}", r) for i in range(6)], tmp_path / "r.csv")
    lines = text.splitlines()
    assert len(lines) == 7 and lines[0].startswith("scene,detector,whitelist,blacklist,p_wl")
    assert lines[1] == "s,d0,car,person,0.1,0.2,0.0,0.0,0.8888888888888888,0.8"
    assert (tmp_path / "r.csv").read_text() == text
    assert emit_report([], None).splitlines() == [lines[0]]
    assert emit_report([("s", "d0", r)]) == emit_report([("s", "d0", r)])


def test_tally_file_round_trip(tmp_path):
    t = random_tally(np.random.default_rng(0))
    save_tally(t, tmp_path / "t.json")
    back = load_tally(tmp_path / "t.json")
    assert back.to_json() == t.to_json()


def test_invalid_tallies():
    t = tally_from([1, 1], [0, 0], [[0, 0], [0, 0]])
    t.fn[0] = 3
    with pytest.raises(ValueError):
        t.validate()
    with pytest.raises(ValueError):
        t + ConfusionTally.zeros(ClassUniverse(["a", "b"]))
    with pytest.raises(ValueError):
        match_and_tally(DetectionTrace(4, 4, U, [[]]), DetectionTrace(4, 4, U, [[], []]))
