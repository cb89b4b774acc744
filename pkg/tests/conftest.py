import pytest

from rnnids import classifier, flowdata, synth

SMALL_COUNTS = {"benign": 60, "dos": 15, "scan": 10, "slow": 10, "botnet": 12, "backdoor": 12}


@pytest.fixture(scope="session")
def small_split():
    ds = synth.synth_generate(synth.SynthConfig(counts=SMALL_COUNTS, max_len=8), seed=11)
    return flowdata.split_dataset(ds, seed=11)


@pytest.fixture(scope="session")
def small_model(small_split):
    train, _ = small_split
    cfg = classifier.TrainConfig(epochs=15, lr=1e-2, layers=1, hidden=8, seed=3)
    return classifier.train(train, cfg)


@pytest.fixture(scope="session")
def small_dropout_model(small_split):
    train, _ = small_split
    cfg = classifier.TrainConfig(epochs=15, lr=1e-2, layers=1, hidden=8, seed=3)
    return classifier.train_feature_dropout(train, cfg)


# --- acceptance reporting ----------------------------------------------------------------

N_CRITERIA = 16
_acceptance: dict = {}


@pytest.fixture
def record():
    """``record(n, passed, detail)`` logs one acceptance criterion outcome."""

    def _record(n: int, passed: bool, detail: str) -> bool:
        _acceptance[n] = (bool(passed), detail)
        print(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n not in _acceptance:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN")
            continue
        passed, detail = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
