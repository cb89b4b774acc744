"""Acceptance suite: one test per criterion, each logging a PASS/FAIL line.

Expensive shared work (the trained synthetic model, the kappa sweep) lives in
module-scoped fixtures so every criterion reuses it.
"""

import math
import time

import numpy as np
import pytest
from scipy.special import expit

from rnnids import attacks as atk
from rnnids import classifier as clf
from rnnids import defenses as dfn
from rnnids import explain as ex
from rnnids import flowdata as fd
from rnnids import lstm
from rnnids import robustness as rb
from rnnids import synth
from tests import reference, toys
from tests.test_cli import run_pipeline

SEED = 0
BENCH = clf.TrainConfig(epochs=20, lr=3e-3, layers=3, hidden=64, seed=SEED)
KAPPAS = (0.25, 0.5, 1.0, 2.0, 4.0)
ORDERING_KAPPA = 4.0


@pytest.fixture(scope="module")
def bench():
    ds = synth.synth_generate(seed=SEED)
    train, test = fd.split_dataset(ds, seed=SEED)
    t0 = time.perf_counter()
    model = clf.train(train, BENCH)
    return {"data": ds, "train": train, "test": test, "model": model, "train_seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def attack_flows(bench):
    return [f for f in bench["test"] if f.label == 1]


@pytest.fixture(scope="module")
def sweep(bench, attack_flows):
    """CW at every kappa, plus PGD and FGSM at the budget matched to the ordering kappa."""
    cw = {k: atk.cw_attack_many(bench["model"], attack_flows, atk.CWConfig(kappa=k)) for k in KAPPAS}
    eps = atk.mean_linf(cw[ORDERING_KAPPA])
    pgd = atk.pgd_attack_many(bench["model"], attack_flows, atk.PGDConfig(eps))
    fgsm = atk.fgsm_attack_many(bench["model"], attack_flows, eps)
    return {"cw": cw, "pgd": pgd, "fgsm": fgsm, "eps": eps}


def _ratio(results):
    return float(np.mean([r.success for r in results]))


# 1 ----------------------------------------------------------------------------------------


def test_gradients_match_finite_differences(record):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, failures = 0.0, 0
    for trial in range(100):
        L, H, T = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 11))
        rep = lstm.grad_check(seed=trial, layers=L, hidden=H, steps=T, max_param_coords=60)
        worst = max(worst, rep.param_max_rel_err, rep.input_max_rel_err)
        failures += not rep.passed
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and worst < 1e-4 and elapsed < 60
    record(1, ok, f"100 trials, worst rel err {worst:.2e}, {failures} failures, {elapsed:.1f}s")
    assert ok


# 2 ----------------------------------------------------------------------------------------


def test_classifier_accuracy_and_determinism(bench, record):
    acc = clf.flow_accuracy(bench["model"], bench["test"])
    again = clf.train(bench["train"], BENCH)
    same = all(np.array_equal(a, b) for a, b in zip(bench["model"].params.arrays(), again.params.arrays()))
    n_types = len(set(bench["data"].attack_types()) - {"benign"})
    ok = acc >= 0.95 and same and bench["train_seconds"] < 300 and len(bench["data"]) >= 1000 and n_types >= 3
    record(2, ok, f"flow accuracy {acc:.4f} after {BENCH.epochs} epochs, bitwise repeatable={same}, "
                  f"{bench['train_seconds']:.1f}s, {len(bench['data'])} flows, {n_types} attack types")
    assert ok


# 3 ----------------------------------------------------------------------------------------


def test_adversarial_flows_are_feasible(sweep, attack_flows, record):
    checked, bad = 0, 0
    for results in list(sweep["cw"].values()) + [sweep["pgd"], sweep["fgsm"]]:
        for r, f in zip(results, attack_flows):
            c = r.constraints
            idem = np.array_equal(atk.project_constraints(c.lower, r.normalized, c), r.normalized)
            raw = r.adversarial.features
            mask_ok = np.array_equal(raw[~c.editable], f.features[~c.editable])
            mono_ok = bool(np.all(raw >= f.features))
            checked += 1
            bad += not (idem and mask_ok and mono_ok)
    record(3, bad == 0, f"{checked - bad}/{checked} returned flows feasible (CW at 5 kappas, PGD, FGSM)")
    assert bad == 0


# 4 ----------------------------------------------------------------------------------------


def test_cw_successes_have_benign_margin(bench, sweep, record):
    worst, n = 1.0, 0
    for results in sweep["cw"].values():
        for r in results:
            if not r.success:
                continue
            recomputed = 1.0 - clf.predict_flow(bench["model"], r.adversarial).final_confidence
            worst = min(worst, r.benign_confidence, recomputed)
            n += 1
    ok = n > 0 and worst >= 0.5498
    record(4, ok, f"{n} CW successes, lowest benign confidence {worst:.5f}")
    assert ok


# 5 ----------------------------------------------------------------------------------------


def test_attack_ordering_at_matched_budget(sweep, attack_flows, record):
    cw, pgd, fgsm = _ratio(sweep["cw"][ORDERING_KAPPA]), _ratio(sweep["pgd"]), _ratio(sweep["fgsm"])
    n = len(attack_flows)
    ok = n >= 200 and cw >= pgd - 0.03 and pgd >= fgsm - 0.03
    record(5, ok, f"kappa={ORDERING_KAPPA:g}, eps={sweep['eps']:.3f}, n={n}: "
                  f"CW {cw:.3f} / PGD {pgd:.3f} / FGSM {fgsm:.3f}")
    assert ok


# 6 ----------------------------------------------------------------------------------------


def test_kappa_monotonicity(sweep, attack_flows, record):
    counts = [sum(r.success for r in sweep["cw"][k]) for k in KAPPAS]
    monotone = all(b >= a - 1 for a, b in zip(counts, counts[1:]))
    common = [i for i in range(len(attack_flows)) if all(sweep["cw"][k][i].success for k in KAPPAS)]
    means = [float(np.mean([sweep["cw"][k][i].distance for i in common])) for k in KAPPAS] if common else []
    spread = (max(means) - min(means)) / min(means) if means and min(means) > 0 else math.inf
    ok = monotone and bool(common) and spread <= 0.05
    record(6, ok, f"successes {counts}; common set {len(common)}, mean L1 "
                  f"{[round(m, 4) for m in means]}, spread {spread:.2%}")
    assert ok


# 7 ----------------------------------------------------------------------------------------


def test_ars_oracle_equivalence(record):
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        d = rng.exponential(2.0, n)
        d[rng.random(n) < rng.random()] = np.inf
        if rng.random() < 0.2:
            d = np.round(d, 1)  # ties
        mismatches += rb.ars_from_distances(d.tolist()) != reference.ars_oracle(d.tolist())

    model, flows, minimal = toys.ars_toy()
    for f, d in zip(flows[:3], minimal):
        assert toys.grid_min_distance(model.params, f.features[0], limit=0.5) == pytest.approx(d, abs=2e-3)
    cw = atk.CWConfig(base_lr=1e-3, base_iterations=4000, max_iterations=40000)
    got = rb.compute_ars(model, flows, rb.ARSSchedule(cw=cw)).ars
    want = reference.ars_oracle(minimal)
    ok = mismatches == 0 and abs(got - want) <= 0.05 * want
    record(7, ok, f"{1000 - mismatches}/1000 multisets exact; toy ARS {got:.5f} vs oracle {want:.5f}")
    assert ok


# 8 ----------------------------------------------------------------------------------------


def test_cw_is_near_optimal_on_toys(record):
    cases, seed = [], 0
    while len(cases) < 30:
        params, x0 = toys.random_one_packet_case(seed)
        seed += 1
        if toys.single_packet_logit(params, x0[None])[0] <= 0:
            continue
        if 0.1 <= toys.grid_min_distance(params, x0, step=1e-2) <= 2.0:
            cases.append((params, x0))
    cw = atk.CWConfig(base_lr=1e-3, base_iterations=4000, max_iterations=20000)
    schedule = rb.ARSSchedule(kappa0=1.0, max_rounds=8, cw=cw)
    good = 0
    for params, x0 in cases:
        best = toys.grid_min_distance(params, x0, step=1e-3)
        flow = toys.one_packet_flow({k: x0[k] for k in range(fd.N_FEATURES)}, "case")
        d = rb.compute_ars(toys.identity_model(params), [flow], schedule).distances[0]
        good += d <= 1.05 * best
    frac = good / len(cases)
    record(8, frac >= 0.9, f"{good}/{len(cases)} cases within 5% of the grid minimum")
    assert frac >= 0.9


# 9 ----------------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def dropout_model(bench):
    return clf.train_feature_dropout(bench["train"], BENCH)


def test_feature_dropout_validity(bench, dropout_model, record):
    test = bench["test"]
    regular = clf.flow_accuracy(bench["model"], test)
    table = ex.importance_dropout(dropout_model, test)
    gap = regular - table.base_accuracy
    sig, noise = table.score(synth.SIGNATURE_FEATURE), table.score(synth.NOISE_FEATURE)
    others = [s for f, s in zip(table.features, table.scores) if f != synth.SIGNATURE_FEATURE]
    ok = abs(gap) <= 0.01 and sig > max(others) and abs(noise) <= 0.01
    record(9, ok, f"no-mask accuracy {table.base_accuracy:.4f} vs regular {regular:.4f}; "
                  f"drop {synth.SIGNATURE_FEATURE} {sig:.4f} (next {max(others):.4f}), "
                  f"{synth.NOISE_FEATURE} {noise:+.4f}")
    assert ok


# 10 ---------------------------------------------------------------------------------------


def test_shared_information_score(record):
    exact = [
        ((0.9, 0.8, 0.8, 0.7), 1.0),
        ((0.9, 0.8, 0.7, 0.6), 0.3 / 0.3),
        ((0.95, 0.9, 0.85, 0.9), 0.05 / 0.15),
        ((1.0, 0.75, 0.5, 0.25), 0.75 / 0.75),
    ]
    exact_ok = all(ex.shared_info_from_accuracies(*acc) == pytest.approx(v, rel=1e-12) for acc, v in exact)
    exact_ok &= ex.shared_info_from_accuracies(0.9, 0.9, 0.9, 0.8) is None
    rng = np.random.default_rng(10)
    violations, tried = 0, 0
    while tried < 10_000:
        base = rng.uniform(0.5, 1.0)
        di, dj = rng.uniform(0.0, 0.3, 2)
        pair = rng.uniform(0.0, 0.6)
        if not (di > 0.005 and dj > 0.005 and pair >= max(di, dj)):
            continue
        tried += 1
        score = ex.shared_info_from_accuracies(base, base - di, base - dj, base - pair)
        violations += score is None or score < 0.5
    ok = exact_ok and violations == 0
    record(10, ok, f"hand-set tuples exact={exact_ok}; {tried} random tuples, {violations} below 0.5")
    assert ok


# 11 ---------------------------------------------------------------------------------------


def test_mutual_information_estimator(record):
    rng = np.random.default_rng(11)
    n = 10_000
    indep = ex.feature_prediction_mi(rng.normal(size=n), rng.random(n))
    v = rng.normal(size=n)
    dep = ex.feature_prediction_mi(v, (v > np.median(v)).astype(float))
    hand = ex.mutual_information_from_joint([[0.4, 0.1], [0.1, 0.4]])
    ok = indep <= 0.02 and abs(dep - 1.0) <= 0.05 and abs(hand - 0.2781) <= 1e-4
    record(11, ok, f"independent {indep:.4f} bits, deterministic {dep:.4f} bits, 2x2 joint {hand:.6f} bits")
    assert ok


# 12 ---------------------------------------------------------------------------------------


def _ref_confidence(model, x, upto=None):
    z = model.encode(x)
    logits = reference.lstm_logits(model.params, z if upto is None else z[: upto + 1])
    return expit(logits[-1])


def test_pdp_correctness(bench, record):
    rng = np.random.default_rng(12)
    model = bench["model"]
    flows = [f for f in bench["test"] if f.label == 1 and len(f) >= 3][:5]
    grid = np.sort(rng.uniform(0, 65535, 4))
    cond = ex.conditional_pdp(model, flows, "attack", "dst_port", grid=grid)
    cond_err = 0.0
    for k, w in enumerate(grid):
        vals = []
        for f in flows:
            x = f.features.copy()
            x[:, fd.DST_PORT] = w
            vals.append(_ref_confidence(model, x))
        cond_err = max(cond_err, abs(cond.mean[k] - np.mean(vals)))
    step = 2
    grid = np.array([0.0, 0.01, 0.5, 3.0])
    seq = ex.sequential_pdp(model, flows, "attack", "iat", step, grid=grid)
    seq_err = 0.0
    for k, w in enumerate(grid):
        vals = []
        for f in flows:
            x = f.features.copy()
            x[step, fd.IAT] = w
            vals.append(_ref_confidence(model, x, upto=step))
        seq_err = max(seq_err, abs(seq.mean[k] - np.mean(vals)))

    params = lstm.init_params(3, 8, fd.N_FEATURES, 0)
    const = toys.identity_model(params.with_flat(np.zeros(params.count())))
    flat = ex.conditional_pdp(const, flows, "attack", "dst_port", points=10)
    flat_seq = ex.sequential_pdp(const, flows, "attack", "packet_length", 1, points=10)
    constant = len(set(flat.mean)) == 1 and len(set(flat_seq.mean)) == 1
    ok = constant and cond_err <= 1e-9 and seq_err <= 1e-9
    record(12, ok, f"constant model flat={constant}; max |PDP - oracle| conditional {cond_err:.1e}, "
                   f"sequential {seq_err:.1e} on {len(flows)} flows")
    assert ok


# 13 ---------------------------------------------------------------------------------------


def test_confidence_rises_over_first_steps(bench, record):
    prof = ex.confidence_per_step(bench["model"], bench["test"], "attack")
    last = prof.last_common_step()
    counts_ok = all(b <= a for a, b in zip(prof.count, prof.count[1:]))
    rise = prof.mean[last - 1] > prof.mean[0]
    ok = counts_ok and rise
    record(13, ok, f"mean attack confidence step 1 {prof.mean[0]:.4f} -> step {last} {prof.mean[last - 1]:.4f}; "
                   f"survivors {prof.count[0]}..{prof.count[last - 1]} non-increasing={counts_ok}")
    assert ok


# 14 ---------------------------------------------------------------------------------------


def test_feature_reduction_defense(bench, attack_flows, record):
    cw_cfg = atk.CWConfig(kappa=1.0)
    lines, ok = [], True
    for mode in dfn.MODES:
        model = dfn.train_reduced(bench["train"], mode, BENCH)
        cw = atk.cw_attack_many(model, attack_flows, cw_cfg)
        eps = max(atk.mean_linf(cw), 1.0)
        runs = {"cw": cw, "pgd": atk.pgd_attack_many(model, attack_flows, atk.PGDConfig(eps)),
                "fgsm": atk.fgsm_attack_many(model, attack_flows, eps)}
        for method, results in runs.items():
            for group in ("partial", "full"):
                sub = [r for r, f in zip(results, attack_flows) if f.fully_controlled == (group == "full")]
                ratio = atk.summarize(sub)["evasion_ratio"]
                if mode == "both_directions" or group == "partial":
                    ok &= ratio == 0.0
                else:
                    ok &= ratio > 0.0
                lines.append(f"{mode[:4]}/{method}/{group}={ratio:.3f}")
    record(14, ok, "evasion ratios " + " ".join(lines))
    assert ok


# 15 ---------------------------------------------------------------------------------------


def test_adversarial_training_raises_ars(bench, record):
    cfg = dfn.AdvTrainConfig(
        train=BENCH, cycles=5, cadence=10, iterations=10, cw=atk.CWConfig(kappa=1.0),
        ars=rb.ARSSchedule(max_rounds=8, cw=atk.CWConfig(max_iterations=4000)), held_out=60,
    )
    t0 = time.perf_counter()
    res = dfn.adversarial_training(bench["train"], cfg, seed=SEED, evaluation=bench["test"])
    elapsed = time.perf_counter() - t0
    base, final = res.trajectory[0], res.trajectory[-1]
    gain = final.ars / base.ars - 1 if base.ars > 0 else math.inf
    acc_gap = abs(final.clean_accuracy - base.clean_accuracy)
    ok = final.ars > base.ars and gain >= 0.25 and acc_gap <= 0.01 and elapsed < 900
    record(15, ok, f"held-out ARS {base.ars:.4f} -> {final.ars:.4f} ({gain:+.1%}) over {cfg.cycles} cycles; "
                   f"adversarial ratio {base.adversarial_ratio:.3f} -> {final.adversarial_ratio:.3f}; "
                   f"accuracy {base.clean_accuracy:.4f} -> {final.clean_accuracy:.4f}; {elapsed:.0f}s")
    assert ok


# 16 ---------------------------------------------------------------------------------------


def test_cli_pipeline_is_reproducible(tmp_path, record):
    a, b = run_pipeline(tmp_path / "a"), run_pipeline(tmp_path / "b")
    names = sorted(p.name for p in a.iterdir() if not p.name.startswith("manifest_"))
    differing = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    ok = bool(names) and not differing
    record(16, ok, f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical across two runs")
    assert ok
