"""Dataset container round-trips and malformed-file handling."""

import numpy as np
import numpy.testing as npt
import pytest

from nap.dataio import read_dataset, write_dataset
from nap.errors import ParseError, UnsupportedVersionError
from nap.synth import (
    DEFAULT_INITIAL,
    DEFAULT_TRANSITION,
    Hypnodensity,
    PredictionSet,
    ReliabilityProfile,
    generate_base_predictions,
    generate_hypnogram,
)


@pytest.fixture
def two_recordings():
    sets = []
    for i, t_rec in enumerate((40, 57)):
        truth = generate_hypnogram(DEFAULT_TRANSITION, DEFAULT_INITIAL, t_rec, seed=(20, i))
        streams = {}
        for si, (mod, ch, pr) in enumerate(
            [("eeg", "c1", "p0"), ("eeg", "c1", "p1"), ("eeg", "c2", "p0"),
             ("eeg", "c2", "p1"), ("eog", "e1", "p0"), ("eog", "e1", "p1")]
        ):
            hd = generate_base_predictions(truth, ReliabilityProfile.diagonal(0.7),
                                           seed=(21, i, si))
            streams.setdefault(mod, {}).setdefault(ch, {})[pr] = hd
        sets.append(PredictionSet(f"rec{i:03d}", truth, streams))
    return sets


def test_round_trip_is_bit_exact(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    back = read_dataset(path)
    assert [ps.recording_id for ps in back] == [ps.recording_id for ps in two_recordings]
    for orig, loaded in zip(two_recordings, back):
        npt.assert_array_equal(orig.truth.stages, loaded.truth.stages)
        assert orig.layout() == loaded.layout()
        for mod, ch, pr, hd in orig.iter_streams():
            npt.assert_array_equal(hd.probs, loaded.stream(mod, ch, pr).probs)


def test_write_is_atomic(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    assert not list(tmp_path.glob("*.tmp"))


def test_truncated_file_is_a_parse_error(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    blob = path.read_bytes()
    for cut in (2, 5, 9, len(blob) // 2, len(blob) - 3):
        clipped = tmp_path / f"cut{cut}.napd"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(ParseError) as err:
            read_dataset(clipped)
        assert err.value.offset is not None


def test_bad_magic(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"XXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(ParseError):
        read_dataset(path)


def test_unsupported_version(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    blob = bytearray(path.read_bytes())
    blob[4:6] = (99).to_bytes(2, "little")
    path.write_bytes(bytes(blob))
    with pytest.raises(UnsupportedVersionError):
        read_dataset(path)


def test_trailing_garbage_rejected(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    path.write_bytes(path.read_bytes() + b"extra")
    with pytest.raises(ParseError):
        read_dataset(path)


def test_corrupt_header_json(tmp_path, two_recordings):
    path = tmp_path / "ds.napd"
    write_dataset(path, two_recordings)
    blob = bytearray(path.read_bytes())
    blob[10] = ord("!")  # first header byte: breaks the JSON
    path.write_bytes(bytes(blob))
    with pytest.raises(ParseError):
        read_dataset(path)


def test_duplicate_ids_rejected(tmp_path, two_recordings):
    dup = [two_recordings[0], two_recordings[0]]
    with pytest.raises(Exception):
        write_dataset(tmp_path / "dup.napd", dup)


def test_float32_storage_preserves_rows(tmp_path):
    rng = np.random.default_rng(22)
    probs = rng.dirichlet(np.ones(5), size=30)
    hd = Hypnodensity(probs)  # container casts to float32
    truth = generate_hypnogram(DEFAULT_TRANSITION, DEFAULT_INITIAL, 30, seed=23)
    ps = PredictionSet("r0", truth, {"eeg": {"c1": {"p0": hd}}})
    path = tmp_path / "f32.napd"
    write_dataset(path, [ps])
    loaded = read_dataset(path)[0].stream("eeg", "c1", "p0")
    assert loaded.probs.dtype == np.float32
    npt.assert_array_equal(loaded.probs, hd.probs)
