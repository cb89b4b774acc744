import numpy as np
import pytest

from rnnids import attacks as atk
from rnnids import defenses as dfn
from rnnids import flowdata as fd
from rnnids.classifier import TrainConfig
from rnnids.robustness import ARSSchedule

TINY = TrainConfig(epochs=8, lr=1e-2, layers=1, hidden=6, seed=0)
QUICK_CW = atk.CWConfig(kappa=2.0, base_iterations=40, max_iterations=80, base_lr=0.05)


def test_reduce_features_modes():
    both = dfn.reduce_features(mode="both_directions")
    manip = np.array(both.manipulable_mask)
    assert not np.any(np.array(both.active_mask)[manip]) and sum(both.active_mask) == 13
    fwd = dfn.reduce_features(mode="attacker_direction_only")
    assert all(fwd.active_mask) and fwd.reduction == "attacker_direction_only"
    with pytest.raises(ValueError, match="already"):
        dfn.reduce_features(both, "both_directions")
    with pytest.raises(ValueError, match="mode"):
        dfn.reduce_features(mode="sideways")


@pytest.fixture(scope="module")
def reduced_models(small_split):
    train, _ = small_split
    return {mode: dfn.train_reduced(train, mode, TINY) for mode in dfn.MODES}


def test_reduced_models_ignore_removed_inputs(reduced_models, small_split):
    flow = next(f for f in small_split[1] if f.label == 1 and not f.fully_controlled and len(f) > 3)
    bumped = flow.with_features(flow.features + np.isin(np.arange(fd.N_FEATURES), [fd.LENGTH, fd.IAT]) * 5.0)
    m = reduced_models["both_directions"]
    np.testing.assert_array_equal(m.encode(flow), m.encode(bumped))
    m = reduced_models["attacker_direction_only"]
    fwd = flow.features[:, fd.DIRECTION] == fd.FORWARD
    diff = m.encode(bumped) - m.encode(flow)
    assert not diff[fwd].any() and diff[~fwd][:, [fd.LENGTH, fd.IAT]].all()


@pytest.mark.parametrize("method", atk.METHODS)
def test_reduced_models_against_attacks(reduced_models, small_split, method):
    attacks = [f for f in small_split[1] if f.label == 1]
    cfg = QUICK_CW if method == "cw" else atk.PGDConfig(1.0, iterations=10)
    both = atk.run_attack(reduced_models["both_directions"], attacks, method, cfg)
    assert not any(r.success and r.distance > 0 for r in both)
    assert all(r.constraints.n_editable == 0 for r in both)
    fwd = atk.run_attack(reduced_models["attacker_direction_only"], attacks, method, cfg)
    for r, f in zip(fwd, attacks):
        if not f.fully_controlled:
            assert r.distance in (0.0, float("inf")) and r.constraints.n_editable == 0
        else:
            assert r.constraints.n_editable > 0


def test_budget_rule_is_enforced():
    with pytest.raises(ValueError, match="budget"):
        dfn.AdvTrainConfig(cadence=10, iterations=5).validate()
    with pytest.raises(ValueError):
        dfn.AdvTrainConfig(cycles=0).validate()


@pytest.fixture(scope="module")
def adv_run(small_split):
    train, test = small_split
    cfg = dfn.AdvTrainConfig(
        train=TINY, cycles=2, cadence=2, iterations=2, cw=QUICK_CW,
        ars=ARSSchedule(kappa0=1.0, max_rounds=2, cw=QUICK_CW), held_out=6,
    )
    return cfg, dfn.adversarial_training(train, cfg, seed=4, evaluation=test)


def test_adversarial_training_bookkeeping(adv_run, small_split):
    _, res = adv_run
    train, _ = small_split
    assert [r.cycle for r in res.trajectory] == [0, 1, 2]
    assert res.trajectory[0].training_passes == 0
    assert all(r.training_passes == r.adversarial_passes == 2 for r in res.trajectory[1:])
    assert len(res.held_out_ids) == 6 and not set(res.held_out_ids) & set(res.attack_ids)
    n_attack = int(train.labels.sum())
    assert len(res.attack_ids) == n_attack - 6 == len(res.counterparts)
    assert res.augmented_size == len(train) - 6 + len(res.attack_ids)
    assert res.model.params.meta["adversarially_trained"] is True
    assert all(r.clean_accuracy is not None for r in res.trajectory)
    assert len(res.trajectory_csv().splitlines()) == 4


def test_counterparts_respect_constraints(adv_run, small_split):
    _, res = adv_run
    flows = {f.flow_id: f for f in small_split[0]}
    for fid, z in zip(res.attack_ids, res.counterparts):
        f = flows[fid]
        c = atk.derive_constraints(f, res.model.schema, fd.apply_normalizer(res.model.stats, f, res.model.schema))
        np.testing.assert_array_equal(atk.project_constraints(c.lower, z, c), z)


def test_adversarial_training_is_deterministic(adv_run, small_split):
    cfg, res = adv_run
    train, test = small_split
    again = dfn.adversarial_training(train, cfg, seed=4, evaluation=test)
    for a, b in zip(res.model.params.arrays(), again.model.params.arrays()):
        np.testing.assert_array_equal(a, b)
    assert [r.ars for r in again.trajectory] == [r.ars for r in res.trajectory]


def test_adversarial_training_needs_enough_attacks(small_split):
    train, _ = small_split
    benign = train.subset([f for f in train if f.label == 0])
    with pytest.raises(fd.DataError):
        dfn.adversarial_training(benign, dfn.AdvTrainConfig(train=TINY))
    with pytest.raises(fd.DataError):
        dfn.adversarial_training(train, dfn.AdvTrainConfig(train=TINY, held_out=10_000))
