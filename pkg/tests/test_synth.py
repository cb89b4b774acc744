import numpy as np
import pytest

from rnnids import flowdata as fd
from rnnids import synth


@pytest.fixture(scope="module")
def ds():
    return synth.synth_generate(seed=0)


def test_default_dataset_shape(ds):
    assert len(ds) == sum(synth.DEFAULT_COUNTS.values()) >= 1000
    assert len(set(ds.attack_types()) - {"benign"}) >= 3
    assert ds.labels.sum() == len(ds) - synth.DEFAULT_COUNTS["benign"]


def test_generation_is_deterministic():
    cfg = synth.SynthConfig(counts={"benign": 20, "dos": 5, "botnet": 5})
    a = fd.dataset_to_bytes(synth.synth_generate(cfg, seed=7))
    b = fd.dataset_to_bytes(synth.synth_generate(cfg, seed=7))
    c = fd.dataset_to_bytes(synth.synth_generate(cfg, seed=8))
    assert a == b and a != c


def test_planted_signatures(ds):
    by = {}
    for f in ds:
        by.setdefault(f.attack_type, []).append(f)
    assert all(f.features[0, fd.DST_PORT] in synth.BACKDOOR_PORTS for f in by["backdoor"])
    assert all(len(f) == 1 and f.features[0, fd.LENGTH] == 44 for f in by["scan"])
    assert all(f.fully_controlled == (k in synth.FULLY_CONTROLLED) for k, fs in by.items() for f in fs)
    for f in by["botnet"]:
        fwd = f.features[2:][f.features[2:, fd.DIRECTION] == fd.FORWARD]
        assert np.all(fwd[:, fd.LENGTH] == 120)


def test_noise_feature_has_same_range_in_every_class(ds):
    for kind in synth.FLOW_TYPES:
        ports = np.array([f.features[0, fd.SRC_PORT] for f in ds if f.attack_type == kind])
        assert ports.min() >= 32768 and ports.max() <= 60999


def test_flows_are_valid(ds):
    for f in ds:
        x = f.features
        assert x[0, fd.IAT] == 0 and np.all(x[:, fd.IAT] >= 0) and np.all(x[:, fd.LENGTH] >= 0)
        assert np.all(x[:, :3] == x[0, :3])
        if x[0, fd.PROTOCOL] != fd.TCP:
            assert not x[:, 6:].any()


@pytest.mark.parametrize(
    "cfg",
    [
        synth.SynthConfig(counts={"worm": 3}),
        synth.SynthConfig(counts={"benign": -1}),
        synth.SynthConfig(counts={"benign": 0}),
        synth.SynthConfig(min_len=2),
        synth.SynthConfig(min_len=9, max_len=5),
    ],
)
def test_invalid_config(cfg):
    with pytest.raises(fd.DataError):
        synth.synth_generate(cfg)
