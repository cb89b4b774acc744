import math

import numpy as np
import pytest

from rnnids import explain as ex
from rnnids import flowdata as fd
from rnnids import lstm
from rnnids.classifier import flow_accuracy, predict_flow
from tests import toys


def _constant_model(value=0.7):
    params = lstm.init_params(2, 3, fd.N_FEATURES, 0)
    params = params.with_flat(np.zeros(params.count()))
    params.head_b[0] = value
    return toys.identity_model(params)


def _tiny_flows(n=5, seed=0):
    rng = np.random.default_rng(seed)
    flows = []
    for k in range(n):
        T = int(rng.integers(1, 5))
        x = rng.normal(size=(T, fd.N_FEATURES))
        x[:, :3] = x[0, :3]
        flows.append(fd.Flow(("a", "b", 1, 2, 6), x, int(k % 2), "dos" if k % 2 else "benign", flow_id=f"f{k}"))
    return flows


def _random_model(seed=1):
    p = lstm.init_params(2, 4, fd.N_FEATURES, seed)
    rng = np.random.default_rng(seed)
    return toys.identity_model(p.with_flat(p.flat() + rng.normal(0, 0.7, p.count())))


# --- importance ------------------------------------------------------------------------


def test_weight_importance_by_hand():
    D, H = fd.N_FEATURES, 2
    W = np.zeros((D + H, 4 * H))
    W[fd.LENGTH] = 1.0  # 4 gates x 2 units
    W[fd.IAT, 0] = -3.0  # one gate, unit 0
    params = lstm.ModelParams([W], [np.zeros(4 * H)], np.array([0.5, -2.0]), np.zeros(1))
    t = ex.importance_weights(toys.identity_model(params))
    assert t.score("packet_length") == pytest.approx(4 * 0.5 + 4 * 2.0)
    assert t.score("iat") == pytest.approx(3 * 0.5)
    assert t.score("dst_port") == 0.0
    assert t.ranking()[:2] == ["packet_length", "iat"]


def test_weight_importance_chains_layers():
    p = _random_model().params
    t = ex.importance_weights(toys.identity_model(p))
    m0 = np.abs(p.weights[0][: fd.N_FEATURES]).reshape(fd.N_FEATURES, 4, 4).sum(1)
    m1 = np.abs(p.weights[1][:4]).reshape(4, 4, 4).sum(1)
    expected = m0 @ m1 @ np.abs(p.head_w)
    np.testing.assert_allclose(t.scores, expected)


def test_importance_covers_only_active_features():
    m = _random_model()
    m.schema = fd.FeatureSchema(active_mask=(True,) * 3 + (False, False) + (True,) * 10)
    assert "iat" not in ex.importance_weights(m).features
    assert len(ex.importance_perturbation(m, _tiny_flows()).features) == 13


def test_perturbation_on_constant_model_is_zero():
    t = ex.importance_perturbation(_constant_model(), _tiny_flows(8), seed=3)
    assert all(s == 0 for s in t.scores) and all(v == 0 for v in t.variances)
    assert t.base_accuracy == 0.5


def test_perturbation_is_seeded():
    flows = _tiny_flows(12)
    a = ex.importance_perturbation(_random_model(), flows, seed=5)
    b = ex.importance_perturbation(_random_model(), flows, seed=5)
    assert a.scores == b.scores and a.variances == b.variances


def test_perturbation_keeps_flow_constant_features_constant(monkeypatch):
    seen = []
    orig = ex._correct

    def spy(model, flows, labels, mask=None):
        seen.append(flows)
        return orig(model, flows, labels, mask)

    monkeypatch.setattr(ex, "_correct", spy)
    ex.importance_perturbation(_random_model(), _tiny_flows(10), seed=0)
    for perturbed in seen[1:4]:  # src_port, dst_port, protocol
        for f in perturbed:
            assert np.all(f.features[:, :3] == f.features[0, :3])


def test_dropout_analyses_need_dropout_model():
    m = _random_model()
    with pytest.raises(ValueError, match="dropout"):
        ex.importance_dropout(m, _tiny_flows())
    with pytest.raises(ValueError, match="dropout"):
        ex.shared_info_score(m, _tiny_flows(), "iat", "packet_length")


def test_dropout_importance_on_trained_model(small_dropout_model, small_split):
    t = ex.importance_dropout(small_dropout_model, small_split[1])
    assert len(t.features) == fd.N_FEATURES
    assert t.base_accuracy == flow_accuracy(small_dropout_model, small_split[1])
    s = ex.shared_info_score(small_dropout_model, small_split[1], "dst_port", "packet_length")
    assert s.base == t.base_accuracy
    assert s.acc_without_i == pytest.approx(t.base_accuracy - t.score("dst_port"))
    rows = ex.shared_info_table(small_dropout_model, small_split[1], ["dst_port", "iat", "src_port"])
    assert [(r.feature_i, r.feature_j) for r in rows] == [("dst_port", "iat"), ("dst_port", "src_port"), ("iat", "src_port")]
    assert ex.shared_info_csv(rows).count("\n") == 4
    with pytest.raises(ValueError):
        ex.shared_info_score(small_dropout_model, small_split[1], "iat", "iat")


# --- shared information ----------------------------------------------------------------


@pytest.mark.parametrize(
    "acc,expected",
    [
        ((0.9, 0.8, 0.8, 0.7), 1.0),
        ((0.9, 0.8, 0.8, 0.8), 0.5),
        ((0.9, 0.85, 0.75, 0.6), 1.5),
        ((1.0, 0.99, 1.0, 0.99), 1.0),
        ((0.9, 0.9, 0.9, 0.5), None),
        ((0.9, 0.90005, 0.90004, 0.8), None),
    ],
)
def test_shared_info_arithmetic(acc, expected):
    got = ex.shared_info_from_accuracies(*acc)
    assert got == (None if expected is None else pytest.approx(expected))


# --- mutual information ----------------------------------------------------------------


def test_mi_hand_computed_joint():
    # p = [[0.4, 0.1], [0.1, 0.4]]: 1 - H(0.2)
    h = -(0.2 * math.log2(0.2) + 0.8 * math.log2(0.8))
    assert ex.mutual_information_from_joint([[4, 1], [1, 4]]) == pytest.approx(1 - h, abs=1e-12)
    assert ex.mutual_information_from_joint([[1, 1], [1, 1]]) == 0.0


def test_mi_of_deterministic_and_independent_pairs():
    rng = np.random.default_rng(0)
    a = rng.integers(0, 2, 10_000)
    assert ex.discrete_mutual_information(a, 1 - a) == pytest.approx(1.0, abs=1e-3)
    assert ex.discrete_mutual_information(a, rng.integers(0, 2, 10_000)) < 0.01


def test_feature_prediction_mi():
    rng = np.random.default_rng(1)
    v = rng.normal(size=5000)
    # the median is a bin edge, so this label is a function of the bin
    assert ex.feature_prediction_mi(v, (v > np.median(v)).astype(float)) == pytest.approx(1.0, abs=1e-9)
    assert ex.feature_prediction_mi(v, rng.random(5000)) < 0.02
    with pytest.raises(ValueError, match="100"):
        ex.feature_prediction_mi(v[:99], v[:99])
    with pytest.raises(ValueError):
        ex.feature_prediction_mi(v, v[:10])


def test_quantile_bins_merge_ties():
    b = ex.quantile_bins(np.r_[np.zeros(90), np.arange(10)], bins=8)
    assert np.all(b[:90] == b[0]) and b.max() <= 7
    with pytest.raises(ValueError):
        ex.quantile_bins([1.0, 2.0], bins=1)


def test_mi_rejects_bad_joint():
    for bad in ([[-1, 1]], [[0, 0]], [1, 2]):
        with pytest.raises(ValueError):
            ex.mutual_information_from_joint(bad)


def test_sensitivity_table(small_model, small_split):
    t = ex.sensitivity_mutual_information(small_model, small_split[1])
    assert len(t.features) == fd.N_FEATURES and min(t.scores) >= 0


# --- partial dependence ----------------------------------------------------------------


def test_constant_model_gives_flat_curves():
    m, flows = _constant_model(), _tiny_flows()
    c = ex.conditional_pdp(m, flows, None, "dst_port", points=7)
    s = ex.sequential_pdp(m, flows, None, "iat", step=0, points=7)
    for curve in (c, s):
        assert len(set(curve.mean)) == 1 and curve.lower == curve.upper == curve.mean


def _confidence(model, x, step=-1):
    return predict_flow(model, fd.Flow(("a", "b", 1, 2, 6), x, 1)).confidences[step]


def test_conditional_pdp_matches_brute_force():
    m, flows = _random_model(), _tiny_flows(5)
    grid = [-1.0, 0.0, 0.5, 2.0]
    curve = ex.conditional_pdp(m, flows, "dos", "dst_port", grid=grid)
    members = [f for f in flows if f.attack_type == "dos"]
    for k, w in enumerate(grid):
        vals = []
        for f in members:
            x = f.features.copy()
            x[:, fd.DST_PORT] = w
            vals.append(_confidence(m, x))
        assert curve.mean[k] == pytest.approx(np.mean(vals), abs=1e-9)
        assert curve.lower[k] == pytest.approx(min(vals), abs=1e-9)
    assert curve.n_flows == len(members)


@pytest.mark.parametrize("step", [0, 1, 2])
def test_sequential_pdp_matches_brute_force(step):
    m, flows = _random_model(2), _tiny_flows(5, seed=4)
    grid = [-2.0, 0.1, 1.5]
    members = [f for f in flows if len(f) > step]
    curve = ex.sequential_pdp(m, flows, None, "packet_length", step, grid=grid)
    for k, w in enumerate(grid):
        vals = []
        for f in members:
            x = f.features.copy()
            x[step, fd.LENGTH] = w
            vals.append(_confidence(m, x, step))  # later packets cannot influence step
        assert curve.mean[k] == pytest.approx(np.mean(vals), abs=1e-9)
        assert curve.upper[k] == pytest.approx(max(vals), abs=1e-9)
    assert curve.step == step and len(curve.trajectories["original"]) == max(len(f) for f in members)


def test_pdp_argument_errors():
    m, flows = _random_model(), _tiny_flows()
    with pytest.raises(ValueError, match="sequential"):
        ex.conditional_pdp(m, flows, None, "iat")
    with pytest.raises(ValueError, match="increasing"):
        ex.conditional_pdp(m, flows, None, "dst_port", grid=[1.0, 1.0])
    with pytest.raises(fd.DataError):
        ex.sequential_pdp(m, flows, None, "iat", step=50)
    with pytest.raises(KeyError):
        ex.conditional_pdp(m, flows, None, "ttl")


def test_pdp_adversarial_overlay_and_export():
    m, flows = _random_model(), _tiny_flows()
    adv = [f.with_features(f.features + 1.0) for f in flows]
    c = ex.sequential_pdp(m, flows, "dos", "iat", 0, points=5, adversarial=adv)
    np.testing.assert_allclose(np.array(c.trajectories["adversarial"]) - c.trajectories["original"], 1.0)
    assert c.to_csv().splitlines()[0] == "feature,condition,step,value,mean,min,max,count"
    assert '"trajectories"' in c.to_json()


# --- profiles --------------------------------------------------------------------------


def test_profiles_by_hand():
    flows = _tiny_flows(5, seed=7)
    p = ex.feature_sequence_profile(flows, None, "iat")
    assert p.count[0] == 5 and all(b <= a for a, b in zip(p.count, p.count[1:]))
    assert p.mean[0] == pytest.approx(np.mean([f.features[0, fd.IAT] for f in flows]))
    assert p.name == "iat" and p.steps[0] == 1


def test_last_common_step():
    p = ex.StepProfile("c", "attack", [0.0] * 5, [0.0] * 5, [10, 8, 5, 4, 1])
    assert p.last_common_step() == 3 and p.last_common_step(0.1) == 5 and p.last_common_step(1.0) == 1


def test_confidence_profile_matches_predictions(small_model, small_split):
    p = ex.confidence_per_step(small_model, small_split[1], "attack")
    attacks = [f for f in small_split[1] if f.label == 1]
    first = [predict_flow(small_model, f).confidences[0] for f in attacks]
    assert p.mean[0] == pytest.approx(np.mean(first), abs=1e-12)
    assert p.to_csv().splitlines()[0] == "feature,condition,step,mean,std,count"
    with pytest.raises(fd.DataError):
        ex.confidence_per_step(small_model, small_split[1], "worm")
