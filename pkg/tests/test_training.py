import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ipmbev import training as T
from ipmbev.augment import AugSpec
from ipmbev.network import BevNet, ConfigError, build_luts, tiny_config
from ipmbev.tensorcore import Tensor

from fd_helpers import cover_rig, kink_aware_check, randomize_biases

finite = st.floats(0, 1e3, allow_nan=False)


def tiny_train_config(**kw):
    base = dict(model="tiny", rig="front", steps=4, n_scenes=6, batch=2, checkpoint_every=2)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return T.make_data(tiny_train_config())


def recomputed_total(r: T.LossReport, w: T.LossWeights) -> float:
    return w.a1 * r.loss_hd + w.a2 * r.loss_pv + w.a3 * r.loss_jl


# -- loss composition ---------------------------------------------------------------

def test_weighted_sum_hand_case():
    total, rep = T.total_loss({"loss_hd": 2.0, "loss_pv": 1.0, "loss_jl": 5.0}, T.SEMANTIC_WEIGHTS)
    assert float(total.data) == pytest.approx(3.5, abs=1e-12)
    assert rep.total == pytest.approx(3.5, abs=1e-12)
    zero, _ = T.total_loss(dict.fromkeys(T.TERMS, 0.0), T.SEMANTIC_WEIGHTS)
    assert float(zero.data) == 0.0


@given(finite, finite, finite, st.floats(0.01, 100))
def test_total_is_linear_in_weights(hd, pv, jl, k):
    comps = {"loss_hd": hd, "loss_pv": pv, "loss_jl": jl}
    w = T.LossWeights(1.3, 0.7, 0.2)
    one, _ = T.total_loss(comps, w)
    two, rep = T.total_loss(comps, w.scaled(2.0))
    assert float(two.data) == pytest.approx(2 * float(one.data), rel=1e-12, abs=1e-12)
    assert rep.total == pytest.approx(recomputed_total(rep, w.scaled(2.0)), rel=1e-12, abs=1e-12)


def test_nonfinite_term_is_named():
    with pytest.raises(FloatingPointError, match="loss_pv"):
        T.total_loss({"loss_hd": 1.0, "loss_pv": float("nan"), "loss_jl": 0.0}, T.SEMANTIC_WEIGHTS)
    with pytest.raises(KeyError, match="loss_jl"):
        T.total_loss({"loss_hd": 1.0, "loss_pv": 1.0}, T.SEMANTIC_WEIGHTS)


def test_gradient_flows_with_term_weights():
    parts = {k: Tensor(np.array(v), requires_grad=True) for k, v in zip(T.TERMS, (1.0, 2.0, 3.0))}
    total, _ = T.total_loss(parts, T.VECTOR_WEIGHTS)
    total.backward()
    assert [float(parts[k].grad) for k in T.TERMS] == [10.0, 10.0, 1.0]


def test_weight_presets_and_tie():
    assert T.SEMANTIC_WEIGHTS.to_dict() == {"a1": 1.0, "a2": 1.0, "a3": 0.1}
    assert T.VECTOR_WEIGHTS.to_dict() == {"a1": 10.0, "a2": 10.0, "a3": 1.0}
    assert T.LossWeights().a3 == pytest.approx(0.1)
    w = T.LossWeights().with_a1(4.0)
    assert (w.a1, w.a2, w.a3) == (4.0, 1.0, pytest.approx(0.4))
    with pytest.raises(ValueError, match="weights.a2"):
        T.LossWeights(1.0, -1.0)


# -- data ---------------------------------------------------------------------------

def test_epoch_order_is_a_function_of_seed_and_epoch(tiny_data):
    data, _ = tiny_data
    assert np.array_equal(data.epoch_order(3, 1), data.epoch_order(3, 1))
    assert sorted(data.epoch_order(3, 1)) == list(range(len(data)))
    assert not np.array_equal(data.epoch_order(3, 0), data.epoch_order(3, 1))
    # consecutive steps walk the epoch orders; every epoch visits each scene once
    seq = np.concatenate([data.batch_indices(3, s, 2) for s in range(6)])
    assert np.array_equal(seq[:6], data.epoch_order(3, 0))
    assert np.array_equal(seq[6:], data.epoch_order(3, 1))


def test_batch_indices_straddling_an_epoch(tiny_data):
    data, _ = tiny_data
    idx = data.batch_indices(0, 1, 4)  # positions 4..7 of a 6-scene set
    expected = np.concatenate([data.epoch_order(0, 0)[4:], data.epoch_order(0, 1)[:2]])
    assert np.array_equal(idx, expected)


def test_dataset_rejects_empty():
    with pytest.raises(ValueError, match="empty"):
        T.SceneDataset([], cover_rig(tiny_config()), tiny_config())


def test_scene_seeds_do_not_overlap():
    g = tiny_config().grid
    a = T.generate_scenes(3, 0, g)
    b = T.generate_scenes(3, 1, g)
    assert {s.seed for s in a}.isdisjoint(s.seed for s in b)


# -- training loop --------------------------------------------------------------------

def test_every_logged_report_satisfies_weighted_sum(tiny_data):
    data, luts = tiny_data
    cfg = tiny_train_config(weights=T.LossWeights(2.0, 0.5, 0.3))
    seen = []

    def watch(rep):
        seen.append(rep)

    state = T.train(data, luts, cfg, callback=watch)
    assert len(state.log) == cfg.steps and seen == state.log
    for r in state.log:
        assert abs(r.total - recomputed_total(r, cfg.weights)) < 1e-7
        assert np.isfinite(r.total)
    assert [r.step for r in state.log] == list(range(cfg.steps))


def test_logged_total_equals_differentiated_total(tiny_data):
    data, luts = tiny_data
    cfg = tiny_train_config()
    model = BevNet(data.cfg, 0)
    batch = data.batch([0, 1])
    comps = T.loss_components(model, batch, luts, cfg, [AugSpec(), AugSpec(hflip=True)])
    total, rep = T.total_loss(comps, cfg.weights)
    assert abs(float(total.data) - rep.total) < 1e-7


def test_two_runs_are_bitwise_identical(tiny_data):
    data, luts = tiny_data
    cfg = tiny_train_config()
    a = T.train(data, luts, cfg)
    b = T.train(data, luts, cfg)
    assert [r.total for r in a.log] == [r.total for r in b.log]
    pa, pb = a.model.parameters(), b.model.parameters()
    assert all(np.array_equal(pa[k].data, pb[k].data) for k in pa)


def test_resume_reproduces_uninterrupted_run(tiny_data, tmp_path):
    data, luts = tiny_data
    cfg = tiny_train_config()
    full = T.train(data, luts, cfg, out_dir=tmp_path / "full")
    T.train(data, luts, cfg, out_dir=tmp_path / "part", stop_at=2)
    ckpt = tmp_path / "part" / "ckpt_000002.npz"
    assert ckpt.exists()
    resumed = T.train(data, luts, cfg, out_dir=tmp_path / "part", resume=ckpt)
    assert resumed.step == full.step == cfg.steps
    assert [r.total for r in resumed.log] == [r.total for r in full.log]
    pf, pr = full.model.parameters(), resumed.model.parameters()
    assert all(np.array_equal(pf[k].data, pr[k].data) for k in pf)
    assert T.read_log(tmp_path / "part" / "log.csv") == T.read_log(tmp_path / "full" / "log.csv")


def test_divergence_aborts_with_diagnostic(tiny_data, monkeypatch):
    data, luts = tiny_data
    monkeypatch.setattr(T, "DIVERGENCE_LIMIT", 0.0)
    monkeypatch.setattr(T, "DIVERGENCE_PATIENCE", 3)
    with pytest.raises(T.TrainingDiverged, match=r"for 3 consecutive steps \(step 2: hd="):
        T.train(data, luts, tiny_train_config(steps=10))


def test_log_csv_round_trip(tmp_path):
    reps = [T.LossReport(0, 1e-3, 1.5, 0.25, 0.125, 1.7625), T.LossReport(1, 9.99e-4, 1 / 3, 0.1, 0.2, 0.1)]
    T.write_log(tmp_path / "log.csv", reps)
    assert T.read_log(tmp_path / "log.csv") == reps
    head = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert head == "step,lr,loss_hd,loss_pv,loss_jl,total"


# -- evaluation -------------------------------------------------------------------------

def test_ground_truth_as_prediction_scores_one(tiny_data):
    data, _ = tiny_data
    res = T.evaluate_predictions(data.labels, data)
    assert res["mIoU"] == 1.0
    assert set(res["per_class_iou"]) == {"divider", "pedestrian", "boundary"}


def test_evaluation_is_deterministic_and_reads_checkpoints(tiny_data, tmp_path):
    data, luts = tiny_data
    cfg = tiny_train_config(steps=2)
    state = T.train(data, luts, cfg, out_dir=tmp_path)
    a = T.evaluate(state.model, data, luts)
    b = T.evaluate(tmp_path / "last.npz", data, luts)
    assert a == b
    assert 0.0 <= a["mIoU"] <= 1.0
    assert set(a["cvml"]) == {"soft", "hard"}
    assert state.model.training


# -- config ---------------------------------------------------------------------------

def test_config_round_trip_and_errors(tmp_path):
    cfg = tiny_train_config(weights=T.VECTOR_WEIGHTS, cvml_stop_grad="pv")
    assert T.TrainConfig.from_dict(json.loads(cfg.to_json())) == cfg
    with pytest.raises(ConfigError, match="train.epochs: unknown field"):
        T.TrainConfig.from_dict({"epochs": 3})
    with pytest.raises(ConfigError, match="train.steps: expected an integer"):
        T.TrainConfig.from_dict({"steps": 2.5})
    with pytest.raises(ConfigError, match="train.lr: must be positive"):
        T.TrainConfig(lr=0.0)
    with pytest.raises(ConfigError, match="train.weights"):
        T.TrainConfig.from_dict({"weights": {"a1": -1}})
    bad = tmp_path / "bad.json"
    bad.write_text("{steps: 3")
    with pytest.raises(ConfigError, match="malformed JSON"):
        T.TrainConfig.load(bad)


def test_default_config_records_desk_batch():
    cfg = T.TrainConfig()
    assert cfg.batch == 4 and cfg.weights == T.SEMANTIC_WEIGHTS


# -- gradient of the whole objective ----------------------------------------------------

def test_training_objective_gradient():
    """Float64 finite differences of the weighted objective, including augmentation and the cross-view term.

    Some scan decay parameters carry gradients near 1e-7 against a loss of
    order 1, where central differences at step 1e-5 resolve only about 4e-11;
    the relative floor keeps those from being judged on round-off.
    """
    mcfg = tiny_config()
    rig = cover_rig(mcfg)
    data = T.SceneDataset(T.generate_scenes(2, 5, mcfg.grid), rig, mcfg)
    luts = build_luts(rig, mcfg)
    model = BevNet(mcfg, 0, np.float64)
    rng = np.random.default_rng(1)
    randomize_biases(model, rng)
    cfg = tiny_train_config()
    batch = data.batch([0, 1])
    augs = [AugSpec(hflip=True), AugSpec(vflip=True, rot180=True)]

    def loss():
        total, _ = T.total_loss(T.loss_components(model, batch, luts, cfg, augs), cfg.weights)
        return total

    worst, judged, skipped = kink_aware_check(loss, model.parameters(), rng, rel_floor=1e-4)
    assert skipped <= 0.1 * (judged + skipped), f"{skipped} coordinates skipped"
    assert worst < 1e-4, f"worst relative error {worst:.2e} over {judged} coordinates"
