"""
Synthetic paired data: generation, stratified split, co-registered augmentation and the CFTD format
"""

import struct
from dataclasses import replace

import numpy as np
import pytest

from errors import (AugmentError, BadMagicError, ConfigError, DatasetFormatError, SplitError, TruncatedFileError,
                    VersionMismatchError)
from synth_data import (CIDR_COUNTS, AugmentParams, PairedSample, SynthConfig, apply_augment, augment,
                        decode_dataset, draw_augment_params, encode_dataset, generate_dataset, generate_sample,
                        linear_probe_accuracy, load_dataset, save_dataset, stratified_split)


def test_generation_is_deterministic():
    cfg = SynthConfig(n_samples=100, seed=7)
    assert generate_dataset(cfg).equals(generate_dataset(cfg))
    assert not generate_dataset(cfg).equals(generate_dataset(replace(cfg, seed=8)))


def test_samples_are_valid_images(tiny_dataset):
    for s in tiny_dataset.samples:
        assert s.cfp.shape == s.ifp.shape == (16, 16, 1)
        assert s.cfp.dtype == s.ifp.dtype == np.float32
        for img in (s.cfp, s.ifp):
            assert img.min() >= 0.0 and img.max() <= 1.0


def test_multichannel_images():
    s = generate_sample(SynthConfig(H=16, W=16, C_in=3), 0, 2)
    assert s.cfp.shape == s.ifp.shape == (16, 16, 3)


def test_balanced_labels_and_histogram(tiny_dataset):
    np.testing.assert_array_equal(tiny_dataset.labels, np.arange(40) % 5)
    assert tiny_dataset.metadata["label_histogram"] == [8] * 5
    assert tiny_dataset.metadata["config"]["seed"] == 7


def test_cidr_distribution_follows_proportions():
    ds = generate_dataset(SynthConfig(n_samples=500, H=8, W=8, label_distribution="cidr"))
    counts = np.array(ds.label_histogram())
    assert counts.sum() == 500
    expected = np.array(CIDR_COUNTS) / sum(CIDR_COUNTS) * 500
    assert np.all(np.abs(counts - expected) < 1.0)
    assert ds.labels.tolist() != sorted(ds.labels.tolist())


@pytest.mark.parametrize("overrides,field", [
    ({"complementarity": 1.5}, "data.complementarity"),
    ({"k": 1}, "data.k"),
    ({"H": 0}, "data.H"),
    ({"label_distribution": "cidr", "k": 4}, "data.k"),
    ({"label_distribution": "skewed"}, "data.label_distribution"),
    ({"seed": -1}, "data.seed"),
])
def test_config_validation(overrides, field):
    with pytest.raises(ConfigError) as err:
        SynthConfig(**overrides).validate()
    assert err.value.field == field


def _clean(**overrides):
    return SynthConfig(H=16, W=16, noise=0.0, occlusion=0.0, **overrides)


def test_full_complementarity_hides_lesions_from_cfp():
    cfg = _clean(complementarity=1.0, cfp_exclusive_share=0.0)
    healthy, graded = generate_sample(cfg, 3, 0), generate_sample(cfg, 3, 4)
    np.testing.assert_array_equal(graded.cfp, healthy.cfp)
    assert np.abs(graded.ifp - healthy.ifp).max() > 0.05


def test_cfp_exclusive_lesions_skip_ifp():
    cfg = _clean(complementarity=1.0, cfp_exclusive_share=1.0)
    healthy, graded = generate_sample(cfg, 3, 0), generate_sample(cfg, 3, 4)
    np.testing.assert_array_equal(graded.ifp, healthy.ifp)
    assert np.abs(graded.cfp - healthy.cfp).max() > 0.05


def test_shared_lesions_show_in_both():
    cfg = _clean(complementarity=0.0)
    healthy, graded = generate_sample(cfg, 5, 0), generate_sample(cfg, 5, 3)
    assert np.abs(graded.cfp - healthy.cfp).max() > 0.05
    assert np.abs(graded.ifp - healthy.ifp).max() > 0.05


def test_haze_blurs_cfp():
    sharp = generate_sample(_clean(), 1, 0).cfp[..., 0]
    hazy = generate_sample(replace(_clean(), occlusion=3.0), 1, 0).cfp[..., 0]
    assert hazy[5:11, 5:11].std() < sharp[5:11, 5:11].std()


def _balanced(n=100, k=5):
    return generate_dataset(SynthConfig(n_samples=n, H=8, W=8, k=k, seed=1))


def test_split_is_proportional_and_disjoint():
    ds = _balanced()
    train, val = stratified_split(ds, 0.8, seed=0)
    assert (len(train), len(val)) == (80, 20)
    assert train.label_histogram() == [16] * 5
    assert val.label_histogram() == [4] * 5
    train_ids = {id(s) for s in train.samples}
    val_ids = {id(s) for s in val.samples}
    assert not train_ids & val_ids
    assert train_ids | val_ids == {id(s) for s in ds.samples}


def test_split_is_deterministic_per_seed():
    ds = _balanced()
    a, _ = stratified_split(ds, 0.8, seed=3)
    b, _ = stratified_split(ds, 0.8, seed=3)
    c, _ = stratified_split(ds, 0.8, seed=4)
    assert a.equals(b)
    assert not a.equals(c)


def test_split_keeps_one_validation_sample_per_class():
    _, val = stratified_split(_balanced(n=25), 0.99, seed=0)
    assert val.label_histogram() == [1] * 5


def test_split_errors():
    with pytest.raises(SplitError):
        stratified_split(_balanced(n=6), 0.8, seed=0)
    with pytest.raises(SplitError):
        stratified_split(_balanced(), 1.0, seed=0)
    with pytest.raises(SplitError):
        stratified_split(_balanced(), 0.0, seed=0)


def _pair(rng, H=16, W=16):
    return PairedSample(cfp=rng.random((H, W, 1)).astype(np.float32),
                        ifp=rng.random((H, W, 1)).astype(np.float32), label=2)


def test_identity_augmentation_is_a_no_op(rng):
    s = _pair(rng)
    out = apply_augment(s, AugmentParams.identity(16, 16))
    np.testing.assert_array_equal(out.cfp, s.cfp)
    np.testing.assert_array_equal(out.ifp, s.ifp)
    assert out.label == 2


def test_horizontal_flip_is_an_involution(rng):
    s = _pair(rng)
    flip = replace(AugmentParams.identity(16, 16), hflip=True)
    once = apply_augment(s, flip)
    np.testing.assert_array_equal(once.cfp[:, ::-1], s.cfp)
    twice = apply_augment(once, flip)
    np.testing.assert_array_equal(twice.cfp, s.cfp)
    np.testing.assert_array_equal(twice.ifp, s.ifp)


def test_augmentation_is_deterministic_per_seed(rng):
    s = _pair(rng)
    a = augment(s, np.random.default_rng(11))
    b = augment(s, np.random.default_rng(11))
    assert a.cfp.tobytes() == b.cfp.tobytes() and a.ifp.tobytes() == b.ifp.tobytes()


def test_geometry_is_shared_between_modalities():
    """A marker planted at the same pixel lands at the same place in both outputs"""
    marked = 0
    for seed in range(30):
        cfp = np.zeros((16, 16, 1), dtype=np.float32)
        ifp = np.full((16, 16, 1), 0.2, dtype=np.float32)
        cfp[6, 9] = ifp[6, 9] = 1.0
        params = draw_augment_params(np.random.default_rng(seed), 16, 16)
        params = replace(params, jitter_cf=(0.0, 1.0), jitter_if=(0.0, 1.0))
        out = apply_augment(PairedSample(cfp, ifp, 0), params)
        np.testing.assert_array_equal(out.cfp > 0.5, out.ifp > 0.5)
        marked += int((out.cfp > 0.5).any())
    assert marked > 0


def test_augmented_values_stay_in_unit_range(rng):
    for seed in range(10):
        out = augment(_pair(rng), np.random.default_rng(seed))
        for img in (out.cfp, out.ifp):
            assert img.min() >= 0.0 and img.max() <= 1.0 and img.dtype == np.float32


def test_oversized_crop_is_rejected(rng):
    params = replace(AugmentParams.identity(16, 16), crop_top=4, crop_h=14)
    with pytest.raises(AugmentError):
        apply_augment(_pair(rng), params)


def test_file_round_trip(tmp_path, tiny_dataset):
    path = tmp_path / "pairs.cftd"
    save_dataset(str(path), tiny_dataset)
    assert path.stat().st_size == 6 + 18 + 40 * (1 + 8 * 16 * 16)
    assert load_dataset(str(path)).equals(tiny_dataset)


def test_header_layout(tiny_dataset):
    blob = encode_dataset(tiny_dataset)
    assert blob[:4] == b"CFTD"
    assert struct.unpack_from("<H", blob, 4) == (1,)
    assert struct.unpack_from("<IIIIH", blob, 6) == (40, 16, 16, 1, 5)
    assert blob[24] == tiny_dataset.samples[0].label


def test_empty_dataset_round_trips():
    empty = generate_dataset(SynthConfig(n_samples=0, H=8, W=8))
    again = decode_dataset(encode_dataset(empty))
    assert len(again) == 0 and (again.H, again.W, again.k) == (8, 8, 5)


def test_decode_errors_are_distinct(tiny_dataset):
    blob = encode_dataset(tiny_dataset)
    with pytest.raises(BadMagicError):
        decode_dataset(b"XFTD" + blob[4:])
    with pytest.raises(TruncatedFileError):
        decode_dataset(blob[:-10])
    with pytest.raises(TruncatedFileError):
        decode_dataset(blob[:12])
    with pytest.raises(VersionMismatchError):
        decode_dataset(blob[:4] + struct.pack("<H", 2) + blob[6:])
    with pytest.raises(DatasetFormatError) as err:
        decode_dataset(blob + b"\x00")
    assert type(err.value) is DatasetFormatError


@pytest.mark.slow
def test_probe_on_either_modality_without_complementarity():
    cfg = SynthConfig(n_samples=1000, complementarity=0.0, occlusion=0.0, seed=3)
    train, val = stratified_split(generate_dataset(cfg), 0.8, seed=0)
    cfp = linear_probe_accuracy(train, val, "cfp")
    ifp = linear_probe_accuracy(train, val, "ifp")
    assert abs(cfp - ifp) <= 0.05


@pytest.mark.slow
def test_probe_on_hazy_cfp_falls_to_chance():
    cfg = SynthConfig(n_samples=1000, complementarity=1.0, cfp_exclusive_share=0.0, occlusion=4.0, seed=3)
    train, val = stratified_split(generate_dataset(cfg), 0.8, seed=0)
    cfp = linear_probe_accuracy(train, val, "cfp")
    ifp = linear_probe_accuracy(train, val, "ifp")
    assert cfp < 0.3
    assert ifp > cfp + 0.05


def test_labels_outside_the_class_range_are_rejected(tiny_dataset):
    small = tiny_dataset.subset([0, 1, 2, 3])
    blob = bytearray(encode_dataset(small))
    record = 1 + 8 * 16 * 16
    assert [blob[24 + i * record] for i in range(4)] == [0, 1, 2, 3]
    blob[24 + 2 * record] = 9
    with pytest.raises(DatasetFormatError) as err:
        decode_dataset(bytes(blob))
    assert "label 9" in str(err.value) and "[0, 5)" in str(err.value)
    blob[24 + 2 * record] = 4
    assert decode_dataset(bytes(blob)).label_histogram() == [1, 1, 0, 1, 1]
