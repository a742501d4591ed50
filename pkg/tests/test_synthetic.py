import dataclasses

import numpy as np
import pytest

from stam.errors import ConfigError
from stam.synthetic import (
    MAGIC,
    NeedleTaskSpec,
    generate,
    load_dataset,
    make_prototypes,
    oracle_avg_accuracy,
    oracle_signal_accuracy,
    oracle_std_error,
    save_dataset,
)

DEFAULT = NeedleTaskSpec()
SMALL = NeedleTaskSpec(train_size=60, test_size=20, feature_dim=8, clip_count=5, seed=4)


def test_noiseless_single_needle():
    spec = dataclasses.replace(SMALL, noise_std=0.0, distractor_std=0.0, signal_strength=1.5)
    protos = make_prototypes(spec)
    for split in generate(spec):
        for sample in split:
            assert sample.signal_mask.sum() == 1
            j = int(np.flatnonzero(sample.signal_mask)[0])
            np.testing.assert_array_equal(sample.clips[j], 1.5 * protos[sample.label])
            others = np.delete(sample.clips, j, axis=0)
            assert np.all(others == 0.0)


def test_generation_is_deterministic():
    a_train, a_test = generate(SMALL)
    b_train, b_test = generate(SMALL)
    for a, b in ((a_train, b_train), (a_test, b_test)):
        np.testing.assert_array_equal(a.clips, b.clips)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.signal_masks, b.signal_masks)
    other, _ = generate(dataclasses.replace(SMALL, seed=5))
    assert not np.array_equal(other.clips, a_train.clips)


def test_train_and_test_are_distinct_draws():
    train, test = generate(dataclasses.replace(SMALL, train_size=20))
    assert not np.array_equal(train.clips, test.clips)


@pytest.mark.parametrize("split", [0, 1])
def test_default_spec_is_class_balanced(split):
    spec = dataclasses.replace(DEFAULT, train_size=2001, test_size=503)
    data = generate(spec)[split]
    counts = np.bincount(data.labels, minlength=spec.num_classes)
    target = len(data) / spec.num_classes
    assert np.all(np.abs(counts - target) <= 1)


def test_signal_count_and_positions():
    spec = dataclasses.replace(DEFAULT, signal_clip_count=2, train_size=6000, test_size=0)
    train, _ = generate(spec)
    assert np.all(train.signal_masks.sum(axis=1) == 2)
    # each position holds a needle with probability s / N, independent of class
    freq = train.signal_masks.mean(axis=0)
    np.testing.assert_allclose(freq, 2 / 6, atol=0.03)
    for c in range(spec.num_classes):
        np.testing.assert_allclose(train.signal_masks[train.labels == c].mean(axis=0), 2 / 6, atol=0.05)


def test_prototypes_unit_norm_and_separated():
    protos = make_prototypes(DEFAULT)
    np.testing.assert_allclose(np.linalg.norm(protos, axis=1), 1.0, atol=1e-12)
    gram = protos @ protos.T
    assert np.all(gram[~np.eye(4, dtype=bool)] < 0.5)


@pytest.mark.parametrize(
    "change",
    [
        dict(signal_clip_count=7),
        dict(signal_clip_count=0),
        dict(num_classes=1),
        dict(noise_std=-1.0),
        dict(num_classes=3, feature_dim=1),
    ],
)
def test_invalid_specs(change):
    with pytest.raises(ConfigError):
        generate(dataclasses.replace(DEFAULT, **change))


# -- oracles -------------------------------------------------------------------------


def test_oracle_noiseless_is_perfect():
    spec = dataclasses.replace(DEFAULT, noise_std=0.0)
    assert oracle_signal_accuracy(spec, draws=20_000) == 1.0


def test_oracle_without_signal_is_chance():
    spec = dataclasses.replace(DEFAULT, signal_strength=0.0)
    assert oracle_signal_accuracy(spec) == 0.25
    assert oracle_avg_accuracy(spec) == 0.25


def test_oracle_no_dilution_is_at_least_as_good():
    spec = dataclasses.replace(DEFAULT, signal_clip_count=6)
    draws = 100_000
    sig = oracle_signal_accuracy(spec, draws)
    avg = oracle_avg_accuracy(spec, draws)
    assert avg >= sig - 3 * oracle_std_error(sig, draws)


def test_default_oracle_gap():
    draws = 100_000
    sig = oracle_signal_accuracy(DEFAULT, draws)
    avg = oracle_avg_accuracy(DEFAULT, draws)
    assert sig - avg >= 0.15
    assert avg <= sig + 3 * np.hypot(oracle_std_error(sig, draws), oracle_std_error(avg, draws))


def test_zeroing_background_never_hurts():
    draws = 100_000
    quiet = dataclasses.replace(DEFAULT, distractor_std=0.0)
    noisy = oracle_avg_accuracy(DEFAULT, draws)
    clean = oracle_avg_accuracy(quiet, draws)
    assert clean >= noisy - 3 * oracle_std_error(noisy, draws)


def _nearest_prototype_accuracy(features, labels, protos):
    return float(np.mean(np.argmax(features @ protos.T, axis=1) == labels))


def test_oracles_agree_with_generated_data():
    # independent route: decode real generated samples instead of the closed-form mixtures
    spec = dataclasses.replace(DEFAULT, train_size=0, test_size=40_000, seed=9)
    _, test = generate(spec)
    protos = make_prototypes(spec)
    signal_clip = test.clips[test.signal_masks]
    draws = 200_000
    sig = oracle_signal_accuracy(spec, draws)
    avg = oracle_avg_accuracy(spec, draws)
    se_data = lambda p: np.sqrt(p * (1 - p) / len(test))  # noqa: E731
    emp_sig = _nearest_prototype_accuracy(signal_clip, test.labels, protos)
    emp_avg = _nearest_prototype_accuracy(test.clips.mean(axis=1), test.labels, protos)
    assert abs(emp_sig - sig) <= 4 * np.hypot(se_data(sig), oracle_std_error(sig, draws))
    assert abs(emp_avg - avg) <= 4 * np.hypot(se_data(avg), oracle_std_error(avg, draws))


# -- binary file ---------------------------------------------------------------------


def test_binary_round_trip(tmp_path):
    path = tmp_path / "ds.bin"
    train, test = generate(SMALL)
    save_dataset(path, SMALL, train, test)
    raw = path.read_bytes()
    assert raw[:7] == b"STAMDS1" and raw[:8] == MAGIC
    spec, train2, test2 = load_dataset(path)
    assert spec == SMALL
    for a, b in ((train, train2), (test, test2)):
        np.testing.assert_array_equal(a.clips, b.clips)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.signal_masks, b.signal_masks)


def test_binary_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTSTAM" + bytes(200))
    with pytest.raises(ConfigError):
        load_dataset(path)
    train, test = generate(SMALL)
    save_dataset(path, SMALL, train, test)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ConfigError, match="trailing"):
        load_dataset(path)
