import struct

import numpy as np
import pytest

from data_io import (
    TASKS,
    Dataset,
    get_task,
    load_dataset,
    load_features_bin,
    load_targets_csv,
    parse_features_bin,
    save_features_bin,
    save_targets_csv,
    split,
    split_sizes,
    synth_generate,
    synth_generate_images,
)
from errors import (
    ConfigurationError,
    EmptyTensorError,
    FormatError,
    ParseError,
    SchemaError,
    TruncationError,
)


def _fpft(dims, values=None):
    raw = b"FPFT" + struct.pack("<I", len(dims)) + struct.pack(f"<{len(dims)}I", *dims)
    if values is not None:
        raw += np.asarray(values, dtype="<f4").tobytes()
    return raw


def _write_csv(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# synthetic data

def test_synthetic_targets_stay_in_range():
    spec = TASKS["MRD1"]
    data = synth_generate(spec, 10000, seed=0)
    assert np.all(data.targets >= 0.0) and np.all(data.targets <= 6.0)
    assert data.inputs.shape == (10000, 32)


@pytest.mark.parametrize("name", sorted(TASKS))
def test_synthetic_mean_matches_truncated_normal(name):
    spec = TASKS[name]
    data = synth_generate(spec, 10000, seed=3)
    se = spec.sd / np.sqrt(10000)
    assert abs(data.targets.mean() - spec.truncated_mean()) < 3 * se


def test_noise_free_features_are_linear_in_target():
    spec = TASKS["LF"]
    data = synth_generate(spec, 200, d=8, noise=0.0, seed=5)
    design = np.hstack([data.inputs, np.ones((200, 1))])
    coef, *_ = np.linalg.lstsq(design, data.targets, rcond=None)
    assert np.max(np.abs(design @ coef - data.targets)) < 1e-8


def test_synthetic_generation_is_seeded():
    spec = TASKS["MRD2"]
    a = synth_generate(spec, 50, seed=9)
    b = synth_generate(spec, 50, seed=9)
    assert np.array_equal(a.inputs, b.inputs) and np.array_equal(a.targets, b.targets)


def test_synthetic_images_band_tracks_target():
    spec = TASKS["MRD1"]
    data = synth_generate_images(spec, 30, size=16, noise=0.0, seed=1)
    assert data.is_image and data.inputs.shape == (30, 1, 16, 16)
    brightness = data.inputs.sum(axis=(1, 2, 3))
    assert np.corrcoef(brightness, data.targets[:, 0])[0, 1] > 0.99


def test_unknown_task():
    with pytest.raises(SchemaError):
        get_task("MRD3")


def test_dataset_rejects_mismatched_lengths():
    with pytest.raises(ConfigurationError):
        Dataset(np.ones((3, 2)), np.ones(4), "MRD1")


# ---------------------------------------------------------------------------
# splits

@pytest.mark.parametrize("n, train, val, test", [(822, 740 - 148, 148, 82), (685, 617 - 123, 123, 68)])
def test_split_sizes(n, train, val, test):
    sizes = split_sizes(n)
    assert sizes == {"train": train, "val": val, "test": test}


def test_splits_are_disjoint_and_cover():
    rng = np.random.default_rng(0)
    for n in rng.integers(10, 2000, size=100):
        parts = split(int(n), seed=int(n))
        joined = np.concatenate([parts.train, parts.val, parts.test])
        assert np.array_equal(np.sort(joined), np.arange(n))


def test_split_is_deterministic():
    a, b = split(300, seed=4), split(300, seed=4)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.test, b.test)
    assert not np.array_equal(split(300, seed=5).train, a.train)


def test_split_needs_ten_samples():
    with pytest.raises(ConfigurationError):
        split(9)


# ---------------------------------------------------------------------------
# target CSV

def test_csv_round_trip(tmp_path):
    values = np.random.default_rng(2).uniform(0.5, 5.5, size=25)
    path = save_targets_csv(str(tmp_path / "t.csv"), values, "MRD1")
    frame, rejected = load_targets_csv(path)
    assert rejected == []
    assert frame["id"].tolist() == list(range(1, 26))
    assert frame["value_mm"].tolist() == [float(f"{v:.9g}") for v in values]


def test_csv_accepts_and_rejects_rows(tmp_path):
    path = _write_csv(tmp_path / "t.csv", "id,task,value_mm\n7,MRD1,2.59\n8,MRD1,9.0\n")
    frame, rejected = load_targets_csv(path)
    assert frame[["id", "task", "value_mm"]].values.tolist() == [[7, "MRD1", 2.59]]
    assert len(rejected) == 1
    assert rejected[0]["id"] == 8 and rejected[0]["line"] == 3
    assert "outside" in rejected[0]["reason"]


def test_csv_parse_error_carries_line_number(tmp_path):
    path = _write_csv(tmp_path / "t.csv", "id,task,value_mm\n1,MRD1,2.0\n2,MRD1,abc\n")
    with pytest.raises(ParseError) as excinfo:
        load_targets_csv(path)
    assert excinfo.value.line == 3


def test_csv_missing_field(tmp_path):
    path = _write_csv(tmp_path / "t.csv", "id,task,value_mm\n1,MRD1\n")
    with pytest.raises(ParseError):
        load_targets_csv(path)


def test_csv_schema_errors(tmp_path):
    with pytest.raises(SchemaError):
        load_targets_csv(_write_csv(tmp_path / "a.csv", "id,value_mm,task\n1,2.0,MRD1\n"))
    with pytest.raises(SchemaError):
        load_targets_csv(_write_csv(tmp_path / "b.csv", "id,task,value_mm\n1,MRD9,2.0\n"))


# ---------------------------------------------------------------------------
# FPFT features

def test_parse_hand_built_file():
    raw = _fpft([2, 2], [1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(parse_features_bin(raw), np.array([[1.0, 2.0], [3.0, 4.0]]))


def test_bad_magic():
    with pytest.raises(FormatError):
        parse_features_bin(b"FPFX" + _fpft([1], [1.0])[4:])


def test_truncated_payload_and_header():
    with pytest.raises(TruncationError):
        parse_features_bin(_fpft([2, 2], [1.0, 2.0, 3.0]))
    with pytest.raises(TruncationError):
        parse_features_bin(b"FPFT" + struct.pack("<I", 3) + struct.pack("<I", 2))


def test_trailing_bytes():
    with pytest.raises(FormatError):
        parse_features_bin(_fpft([2], [1.0, 2.0]) + b"\x00")


def test_empty_tensors():
    with pytest.raises(EmptyTensorError):
        parse_features_bin(b"FPFT" + struct.pack("<I", 0))
    with pytest.raises(EmptyTensorError):
        parse_features_bin(_fpft([3, 0]))


def test_features_round_trip_as_float32(tmp_path, rng):
    values = rng.normal(size=(3, 4))
    path = save_features_bin(str(tmp_path / "f.bin"), values)
    loaded = load_features_bin(path)
    assert loaded.shape == (3, 4)
    assert np.array_equal(loaded.data, values.astype(np.float32).astype(np.float64))


def test_load_dataset_drops_rejected_rows(tmp_path, rng):
    csv_path = _write_csv(tmp_path / "t.csv", "id,task,value_mm\n1,MRD1,2.0\n2,MRD1,9.5\n3,MRD1,4.0\n")
    features = rng.normal(size=(3, 5))
    bin_path = save_features_bin(str(tmp_path / "f.bin"), features)
    data, rejected = load_dataset(csv_path, bin_path)
    assert len(data) == 2 and len(rejected) == 1
    expected = features.astype(np.float32).astype(np.float64)[[0, 2]]
    assert np.array_equal(data.inputs, expected)
    assert data.targets[:, 0].tolist() == [2.0, 4.0]


def test_load_dataset_row_count_mismatch(tmp_path, rng):
    csv_path = _write_csv(tmp_path / "t.csv", "id,task,value_mm\n1,MRD1,2.0\n")
    bin_path = save_features_bin(str(tmp_path / "f.bin"), rng.normal(size=(2, 5)))
    with pytest.raises(ConfigurationError):
        load_dataset(csv_path, bin_path)
