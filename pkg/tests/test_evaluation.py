import csv
import io
import json

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from ipmbev import evaluation as E
from ipmbev import training as T
from ipmbev.augment import ALL_SPECS, apply_to_points
from ipmbev.geometry import GridSpec
from ipmbev.network import BevNet
from ipmbev.synthworld import CorruptionSpec, VectorElement

VP = E.VectorPrediction


def seg(x0, y0, x1, y1):
    return np.array([[x0, y0], [x1, y1]], float)


def brute_ap(flags, n_gt):
    """Area under the upper precision envelope, from the full list of (recall, precision) points."""
    pts = []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += f
        pts.append((tp / n_gt, tp / k))
    area, prev = 0.0, 0.0
    for r, _ in pts:
        env = max(p for rr, p in pts if rr >= r)
        area += (r - prev) * env
        prev = r
    return area


# -- IoU ------------------------------------------------------------------------------

def test_iou_hand_cases():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[0, 1], [0, 1]])
    assert abs(E.iou(pred, gt) - 1 / 3) < 1e-12
    assert E.iou(gt, gt) == 1.0
    assert E.iou(np.eye(2), 1 - np.eye(2)) == 0.0
    assert E.iou(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0
    with pytest.raises(ValueError, match="shape mismatch"):
        E.iou(np.zeros((2, 2)), np.zeros((2, 3)))


def test_accumulator_sums_before_dividing():
    acc = E.IoUAccumulator()
    acc.update(np.array([[1, 1]]), np.array([[1, 0]]))      # divider 1/2
    acc.update(np.array([[1, 0, 0]]), np.array([[1, 0, 0]]))  # divider 1/1
    per = acc.per_class()
    assert per["divider"] == pytest.approx(2 / 3)
    assert per["pedestrian"] == 1.0 and per["boundary"] == 1.0  # absent everywhere
    assert acc.miou() == pytest.approx((2 / 3 + 2) / 3)
    with pytest.raises(ValueError, match="differ in shape"):
        acc.update(np.zeros((1, 2)), np.zeros((2, 1)))


def test_class_iou_mean_covers_foreground_only():
    gt = np.array([[0, 1, 2, 3]])
    pred = np.array([[1, 1, 2, 0]])
    per, m = E.class_iou(pred, gt)
    assert per == {"divider": 0.5, "pedestrian": 1.0, "boundary": 0.0}
    assert m == pytest.approx(0.5)


# -- Chamfer distance ------------------------------------------------------------------------

@given(st.floats(0.5, 50), st.floats(0.0, 10), st.floats(-20, 20), st.floats(-20, 20))
def test_parallel_offset_segments(length, d, x0, y0):
    a = seg(x0, y0, x0 + length, y0)
    b = seg(x0, y0 + d, x0 + length, y0 + d)
    assert abs(E.chamfer_distance(a, b) - d) < 1e-9
    assert E.chamfer_distance(a, a) == 0.0


@given(st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=6),
       st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10)), min_size=2, max_size=6))
def test_chamfer_symmetric(a, b):
    a, b = np.array(a), np.array(b)
    assume(np.linalg.norm(np.diff(a, axis=0), axis=1).sum() > 1e-3)
    assume(np.linalg.norm(np.diff(b, axis=0), axis=1).sum() > 1e-3)
    assert E.chamfer_distance(a, b) == pytest.approx(E.chamfer_distance(b, a), abs=1e-12)


def test_resampling_is_equal_arc_length():
    pts = np.array([[0, 0], [3, 0], [3, 4]], float)  # length 7
    r = E.resample_polyline(pts, 8)
    steps = np.linalg.norm(np.diff(r, axis=0), axis=1)
    assert np.allclose(steps, 1.0)
    assert np.array_equal(r[0], pts[0]) and np.allclose(r[-1], pts[-1])


def test_zero_length_polyline_rejected():
    with pytest.raises(ValueError, match="zero-length"):
        E.chamfer_distance(np.zeros((3, 2)), seg(0, 0, 1, 0))


def test_chamfer_converges_in_sample_count(rng):
    """Doubling the sample count moves CD by < 1% for smooth curves kept 4 sample spacings apart.

    Nearest-sample error is about h^2 / (8 d) for spacing h and separation d,
    so the bound needs d >= 4h; nearly coincident curves are not covered.
    """
    t = np.linspace(0, 1, 40)[:, None]
    for _ in range(200):
        length = rng.uniform(5, 30)
        theta = rng.uniform(0, 2 * np.pi)
        u = np.array([np.cos(theta), np.sin(theta)])
        n = np.array([-u[1], u[0]])
        a = t * length * u + (t ** 2 - t) * rng.normal(0, 0.1) * length * n
        wiggle = rng.uniform(0, 0.4) * (1 + np.sin(rng.uniform(1, 6) * t + rng.uniform(0, 6)))
        off = 4 * length / 99 + rng.uniform(0, 3) + wiggle
        b = a + off * n + rng.uniform(-2, 2) * u
        d1, d2 = E.chamfer_distance(a, b, 100), E.chamfer_distance(a, b, 200)
        assert abs(d2 - d1) < 0.01 * d2


# -- AP -----------------------------------------------------------------------------------

def test_perfect_predictions_score_one():
    gts = [VectorElement(1, seg(0, 0, 10, 0)), VectorElement(3, seg(0, 5, 10, 5))]
    preds = [VP(g.class_id, g.points, 1.0) for g in gts]
    res = E.average_precision(preds, gts)
    assert all(v == 1.0 for t in res.per_threshold.values() for v in t.values())
    assert res.mAP == 1.0


def test_no_predictions_score_zero():
    res = E.average_precision([], [VectorElement(1, seg(0, 0, 10, 0))], classes=(1,))
    assert res.mAP == 0.0


def test_brute_force_half():
    gts = [VectorElement(1, seg(0, 0, 10, 0)), VectorElement(1, seg(0, 8, 10, 8))]
    preds = [VP(1, seg(0, 0, 10, 0), 0.9), VP(1, seg(40, -20, 45, -20), 0.8)]
    area = E.average_precision(preds, gts, classes=(1,))
    assert all(abs(v - 0.5) < 1e-9 for v in area.per_threshold["divider"].values())
    pts101 = E.average_precision(preds, gts, classes=(1,), interpolation="101")
    assert pts101.mAP == pytest.approx(51 / 101, abs=1e-12)
    with pytest.raises(ValueError, match="interpolation"):
        E.average_precision(preds, gts, interpolation="11")


@given(st.lists(st.booleans(), min_size=1, max_size=12), st.integers(1, 12))
def test_area_ap_matches_brute_force(flags, extra):
    n_gt = max(sum(flags), 1) + extra % 3
    got = E._ap_from_flags(np.array(flags, float), n_gt, "area")
    assert got == pytest.approx(brute_ap(flags, n_gt), abs=1e-12)


instances = st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(0.5, 6), st.floats(0, 1)),
                     min_size=0, max_size=6)


def _segments(raw, conf=False):
    out = []
    for x, y, L, c in raw:
        p = seg(x, y, x + L, y)
        out.append(VP(1, p, c) if conf else VectorElement(1, p))
    return out


@given(instances, instances)
def test_ap_non_increasing_as_threshold_shrinks(gt_raw, pred_raw):
    gts, preds = _segments(gt_raw), _segments(pred_raw, conf=True)
    ts = (2.0, 1.5, 1.0, 0.5, 0.25)
    aps = [E.average_precision(preds, gts, thresholds=(t,), classes=(1,)).mAP for t in ts]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


@pytest.mark.parametrize("spec", ALL_SPECS[1:], ids=lambda s: s.to_str())
def test_ap_invariant_under_augmentation(spec, rng):
    grid = GridSpec()
    gts = [VectorElement(int(rng.integers(1, 4)), rng.uniform(-14, 14, (4, 2))) for _ in range(6)]
    preds = [VP(g.class_id, g.points + rng.normal(0, 0.4, g.points.shape), float(rng.random())) for g in gts]
    base = E.average_precision(preds, gts)
    moved = E.average_precision([VP(p.class_id, apply_to_points(spec, p.points, grid), p.confidence) for p in preds],
                                [VectorElement(g.class_id, apply_to_points(spec, g.points, grid)) for g in gts])
    assert moved.mAP == pytest.approx(base.mAP, abs=1e-12)
    assert moved.per_class == pytest.approx(base.per_class, abs=1e-12)


def test_multi_scene_matching_stays_within_scene():
    g = [VectorElement(1, seg(0, 0, 10, 0))]
    # the second scene's prediction would match scene one's map, but has no map of its own
    pairs = [([VP(1, seg(0, 0, 10, 0), 0.9)], g), ([VP(1, seg(0, 0, 10, 0), 0.95)], [])]
    res = E.average_precision_scenes(pairs, thresholds=(1.0,), classes=(1,))
    assert res.mAP == pytest.approx(0.5)


def test_absent_class_is_vacuous_agreement():
    res = E.average_precision([], [], classes=(2,))
    assert res.per_class == {"pedestrian": 1.0}
    res = E.average_precision([VP(2, seg(0, 0, 1, 0))], [], classes=(2,))
    assert res.per_class == {"pedestrian": 0.0}


def test_vector_prediction_validation():
    with pytest.raises(ValueError, match=">= 2"):
        VP(1, [[0, 0]])
    with pytest.raises(ValueError, match="non-finite"):
        VP(1, [[0, 0], [np.nan, 1]])
    with pytest.raises(ValueError, match="confidence"):
        VP(1, [[0, 0], [1, 1]], 1.5)


def test_vector_file_round_trip_and_errors(tmp_path):
    preds = [VP(1, seg(0, 0, 1, 2), 0.25), VP(3, [[0, 0], [1, 1], [2, 0]], 1.0)]
    E.save_vectors(tmp_path / "v.json", preds)
    back = E.load_vectors(tmp_path / "v.json")
    assert [(p.class_id, p.confidence) for p in back] == [(1, 0.25), (3, 1.0)]
    assert all(np.array_equal(a.points, b.points) for a, b in zip(back, preds))
    (tmp_path / "bad.json").write_text(json.dumps([{"class": 1, "points": [[0, 0], [1, 1]]}, {"class": 2}]))
    with pytest.raises(ValueError, match=r"vectors\[1\]"):
        E.load_vectors(tmp_path / "bad.json")
    (tmp_path / "obj.json").write_text("{}")
    with pytest.raises(ValueError, match="JSON list"):
        E.load_vectors(tmp_path / "obj.json")


# -- ratio and reports ------------------------------------------------------------------------

def test_generalization_ratio():
    assert abs(E.generalization_ratio(10.1, 40.4) - 0.25) < 1e-9
    assert round(100 * E.generalization_ratio(10.1, 40.4), 1) == 25.0
    assert E.generalization_ratio(0.0, 3.0) == 0.0
    assert E.generalization_ratio(7.5, 7.5) == 1.0
    with pytest.raises(ValueError, match="positive"):
        E.generalization_ratio(1.0, 0.0)


def test_report_serialization(tmp_path):
    rep = E.EvalReport({"divider": 0.5}, 0.5, {"divider": 0.25}, 0.25, 0.8, {"soft": 0.1},
                       [{"kind": "clean", "severity": 0.0, "mIoU": 0.5}])
    pj, pc = rep.save(tmp_path)
    assert json.loads(pj.read_text())["mAP"] == 0.25
    rows = list(csv.reader(io.StringIO(pc.read_text())))
    assert rows[0] == ["metric", "name", "value"]
    assert ["iou", "mean", "0.500000"] in rows and ["corruption", "clean@0.0", "0.500000"] in rows


# -- corruption sweep ------------------------------------------------------------------------

def test_sweep_table_shape_and_clean_row():
    calls = []

    def fn(spec):
        calls.append(spec)
        return {"mIoU": 0.5 if spec is None else 0.25}

    specs = E.corruption_specs(("brightness", "camera_crash"), (0.0, 1.0))
    rows = E.corruption_sweep(fn, specs)
    assert len(rows) == 2 * 2 + 1
    assert rows[0] == {"kind": "clean", "severity": 0.0, "mIoU": 0.5}
    assert calls[0] is None and calls[1:] == specs


def test_severity_zero_rows_equal_clean_evaluation():
    cfg = T.TrainConfig(model="tiny", rig="front", n_scenes=3, steps=1)
    data, luts = T.make_data(cfg)
    model = BevNet(data.cfg, 0)
    clean = T.evaluate(model, data, luts)
    for kind in ("brightness", "camera_crash", "frame_lost", "gaussian_noise"):
        assert T.evaluate(model, data, luts, CorruptionSpec(kind, 0.0, 3)) == clean
