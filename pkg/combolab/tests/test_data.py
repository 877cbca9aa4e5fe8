import hashlib
import struct

import numpy as np
import numpy.testing as npt
import pytest
from pydantic import ValidationError

from combolab.data import (
    AugmentConfig,
    Dataset,
    augment,
    kfold,
    load_binary,
    load_csv,
    load_dataset,
    split_60_40,
    synth_generate,
    synth_latent,
    write_binary,
    write_csv,
)
from combolab.errors import ContractError, FormatError, InputError, ParseError


def test_csv_three_rows(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,score,f0,f1\na,3.5,0.1,0.2\nb,1.0,-1,2\nc,5,0,0\n")
    ds = load_csv(path)
    assert len(ds) == 3
    assert ds.sample_shape == (2,)
    assert ds.ids == ("a", "b", "c")
    npt.assert_array_equal(ds.scores, [3.5, 1.0, 5.0])
    assert ds.provenance == "csv"


def test_csv_ragged_row_reports_line(tmp_path):
    path = tmp_path / "d.csv"
    path.write_text("id,score,f0,f1\na,3.5,0.1,0.2\nb,1.0,-1\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == 3


def test_csv_nan_score_and_bad_values(tmp_path):
    nan = tmp_path / "nan.csv"
    nan.write_text("id,score,f0\na,nan,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(nan)
    assert info.value.line == 2
    text = tmp_path / "text.csv"
    text.write_text("id,score,f0\na,2,abc\n")
    with pytest.raises(ParseError):
        load_csv(text)
    header = tmp_path / "header.csv"
    header.write_text("name,value,f0\na,2,1\n")
    with pytest.raises(ParseError) as info:
        load_csv(header)
    assert info.value.line == 1


def test_csv_without_rows(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("id,score,f0\n")
    with pytest.raises(ParseError):
        load_csv(path)


def test_csv_write_is_exact(tmp_path):
    ds = synth_generate(20, (4,), 0.2, seed=1)
    loaded = load_csv(write_csv(tmp_path / "s.csv", ds))
    assert np.array_equal(loaded.features, ds.features)
    assert np.array_equal(loaded.scores, ds.scores)
    assert loaded.ids == ds.ids


def test_binary_layout(tmp_path):
    ds = synth_generate(3, (2, 2), 0.0, seed=0)
    raw = write_binary(tmp_path / "d.bin", ds).read_bytes()
    assert raw[:4] == b"CLB1"
    assert struct.unpack_from("<IQQ", raw, 4) == (1, 3, 2)
    assert struct.unpack_from("<2Q", raw, 24) == (2, 2)
    assert len(raw) == 40 + 8 * 3 * (1 + 4)
    loaded = load_binary(tmp_path / "d.bin")
    assert np.array_equal(loaded.features, ds.features)
    assert np.array_equal(loaded.scores, ds.scores)
    assert loaded.provenance == "binary"


def test_binary_errors(tmp_path):
    ds = synth_generate(3, (2, 2), 0.0, seed=0)
    raw = write_binary(tmp_path / "d.bin", ds).read_bytes()

    def load(data):
        path = tmp_path / "x.bin"
        path.write_bytes(data)
        return load_binary(path)

    with pytest.raises(FormatError) as info:
        load(b"NOPE" + raw[4:])
    assert info.value.offset == 0
    with pytest.raises(FormatError):
        load(raw[:-8])
    zero = bytearray(raw)
    zero[8:16] = struct.pack("<Q", 0)
    with pytest.raises(FormatError) as info:
        load(bytes(zero))
    assert info.value.offset == 8
    wrong_shape = bytearray(raw)
    wrong_shape[24:32] = struct.pack("<Q", 3)
    with pytest.raises(FormatError):
        load(bytes(wrong_shape))


def test_load_dataset_dispatches_on_magic(tmp_path):
    ds = synth_generate(5, (3,), 0.0, seed=2)
    assert load_dataset(write_binary(tmp_path / "a.data", ds)).provenance == "binary"
    assert load_dataset(write_csv(tmp_path / "b.data", ds)).provenance == "csv"


def test_dataset_rejects_nan_scores():
    with pytest.raises(InputError):
        Dataset(np.zeros((2, 3)), [1.0, float("nan")], ("a", "b"), "csv")
    with pytest.raises(ContractError):
        Dataset(np.zeros((2, 3)), [1.0], ("a",), "csv")


def test_dataset_subset_and_read_only(small_dataset):
    sub = small_dataset.subset([3, 1])
    assert sub.ids == (small_dataset.ids[3], small_dataset.ids[1])
    npt.assert_array_equal(sub.scores, small_dataset.scores[[3, 1]])
    with pytest.raises(ValueError):
        small_dataset.scores[0] = 0.0


def test_synth_is_seeded_and_bounded():
    a = synth_generate(500, (16,), 0.0, seed=4)
    b = synth_generate(500, (16,), 0.0, seed=4)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.scores, b.scores)
    assert a.scores.min() > 1.0 and a.scores.max() < 5.0
    assert len(a) == 500
    c = synth_generate(500, (16,), 0.0, seed=5)
    assert not np.array_equal(a.scores, c.scores)


def test_synth_file_hash_is_stable(tmp_path):
    digests = []
    for name in ("one.csv", "two.csv"):
        path = write_csv(tmp_path / name, synth_generate(50, (4,), 0.1, seed=9))
        digests.append(hashlib.sha256(path.read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_synth_latent_oracle():
    ds = synth_generate(400, (8,), 0.0, seed=6)
    basis = np.tanh(synth_latent(ds.features))
    design = np.column_stack([basis, np.ones(len(ds))])
    coef, *_ = np.linalg.lstsq(design, ds.scores, rcond=None)
    fitted = design @ coef
    assert np.corrcoef(fitted, ds.scores)[0, 1] > 0.999
    npt.assert_allclose(coef, [2.0, 3.0], atol=1e-9)


def test_synth_rejects_bad_arguments():
    with pytest.raises(ContractError):
        synth_generate(0, (4,), 0.1, seed=0)
    with pytest.raises(ContractError):
        synth_generate(5, (4,), -1.0, seed=0)


def test_kfold_partitions_everything():
    plan = kfold(10, 3, seed=0)
    assert sorted(plan.sizes) == [3, 3, 4]
    seen = []
    for fold in range(3):
        train, test = plan.split(fold)
        assert set(train).isdisjoint(test)
        assert len(train) + len(test) == 10
        seen.extend(test.tolist())
    assert sorted(seen) == list(range(10))
    assert np.array_equal(kfold(10, 3, seed=0).assignments, plan.assignments)


def test_kfold_bounds():
    with pytest.raises(ContractError):
        kfold(3, 4, seed=0)
    with pytest.raises(ContractError):
        kfold(3, 0, seed=0)


def test_sixty_forty_split():
    train, test = split_60_40(500, seed=1)
    assert len(train) == 300 and len(test) == 200
    assert set(train).isdisjoint(test)
    a, _ = split_60_40(500, seed=1)
    assert np.array_equal(a, train)
    with pytest.raises(ContractError):
        split_60_40(1, seed=0)


def test_augment_identity_and_noise(rng):
    x = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(augment(x, AugmentConfig(), rng), x)
    noisy = augment(x, AugmentConfig(noise_sd=0.1, scale_jitter=0.2), np.random.default_rng(0))
    assert noisy.shape == x.shape
    assert not np.array_equal(noisy, x)
    with pytest.raises(ValidationError):
        AugmentConfig(scale_jitter=1.5)


def test_csv_invalid_utf8_is_a_parse_error(tmp_path):
    path = tmp_path / "latin.csv"
    path.write_bytes(b"id,score,f0\n\xff\xfe,3.0,1.0\n")
    with pytest.raises(ParseError) as info:
        load_csv(path)
    assert info.value.line == 2


def test_csv_oversized_field_is_a_parse_error(tmp_path):
    path = tmp_path / "huge.csv"
    path.write_text("id,score,f0\n" + "a" * 200_000 + ",3.0,1.0\n")
    with pytest.raises(ParseError):
        load_csv(path)


def test_augment_noise_stays_within_six_sd():
    x = np.random.default_rng(3).standard_normal((1000, 100))
    cfg = AugmentConfig(noise_sd=0.05)
    out = augment(x, cfg, np.random.default_rng(4))
    assert np.max(np.abs(out - x)) <= 6 * cfg.noise_sd
    again = augment(x, cfg, np.random.default_rng(4))
    assert np.array_equal(out, again)
