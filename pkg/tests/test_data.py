import gzip
import struct
from collections import Counter
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridad.data import (
    CLASS_NAMES,
    AugmentConfig,
    LabelMap,
    SliceSample,
    allocate_counts,
    allocate_table,
    augment,
    build_batches,
    extract_slices,
    hflip,
    iter_batches,
    load_slices,
    manifest_records,
    read_manifest,
    resize_bilinear,
    stratified_split,
    stratified_split_indices,
    write_manifest,
)
from hybridad.errors import (
    DataError,
    EmptyInputError,
    LabelError,
    NotNiftiError,
    ParameterError,
    StratificationError,
    TruncationError,
    UnsupportedFormatError,
)
from hybridad.nifti import (
    decode_volume,
    encode_volume,
    load_volume,
    parse_nifti_header,
    write_volume,
)


def hand_header(endian="<", datatype=16, bitpix=32, dims=(3, 2, 2, 2), magic=b"n+1\x00",
                vox_offset=352.0):
    """Header bytes assembled field by field from the NIfTI-1 layout."""
    buf = bytearray(352)
    struct.pack_into(endian + "i", buf, 0, 348)
    full = tuple(dims) + (1,) * (8 - len(dims))
    struct.pack_into(endian + "8h", buf, 40, *full)
    struct.pack_into(endian + "hh", buf, 70, datatype, bitpix)
    struct.pack_into(endian + "f", buf, 108, vox_offset)
    buf[344:348] = magic
    return bytes(buf)


# -- header parsing ---------------------------------------------------------

def test_parse_little_endian_float32():
    h = parse_nifti_header(hand_header())
    assert h.datatype_code == 16 and h.dtype == np.dtype("<f4") and h.shape == (2, 2, 2)


def test_byte_swapped_header_parses_identically():
    le, be = parse_nifti_header(hand_header("<")), parse_nifti_header(hand_header(">"))
    assert le.endian == "<" and be.endian == ">"
    assert (le.dims, le.datatype_code, le.bitpix, le.vox_offset) == \
        (be.dims, be.datatype_code, be.bitpix, be.vox_offset)


def test_rgb_datatype_unsupported():
    with pytest.raises(UnsupportedFormatError, match="128"):
        parse_nifti_header(hand_header(datatype=128, bitpix=24))


@pytest.mark.parametrize("kw", [
    dict(magic=b"abc\x00"),
    dict(vox_offset=100.0),
    dict(dims=(3, 2, 0, 2)),
])
def test_malformed_headers(kw):
    with pytest.raises(NotNiftiError):
        parse_nifti_header(hand_header(**kw))


def test_bitpix_must_match_datatype():
    with pytest.raises(UnsupportedFormatError):
        parse_nifti_header(hand_header(datatype=4, bitpix=8))


def test_not_a_header():
    with pytest.raises(NotNiftiError):
        parse_nifti_header(b"\x00" * 400)
    with pytest.raises(NotNiftiError):
        parse_nifti_header(b"short")


def test_truncated_payload_reports_sizes():
    data = encode_volume(np.zeros((4, 4, 4), dtype=np.float32))
    with pytest.raises(TruncationError, match="256.*found 200"):
        decode_volume(data[:352 + 200])


# -- volumes --------------------------------------------------------------------

def test_slope_and_intercept(tmp_path):
    path = write_volume(tmp_path / "v.nii", np.full((4, 4, 4), 7.0, dtype=np.float32), 2.0, 1.0)
    assert np.array_equal(load_volume(path).voxels, np.full((4, 4, 4), 15.0))


def test_zero_slope_passes_raw_values(tmp_path):
    arr = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    vol = load_volume(write_volume(tmp_path / "v.nii", arr, 0.0, 5.0))
    assert np.array_equal(vol.voxels, arr)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32, np.float64])
@pytest.mark.parametrize("endian", ["<", ">"])
def test_round_trip_bit_exact(tmp_path, dtype, endian):
    rng = np.random.default_rng(3)
    if np.dtype(dtype).kind in "iu":
        info = np.iinfo(dtype)
        arr = rng.integers(info.min, info.max, (5, 4, 3), endpoint=True).astype(dtype)
    else:
        arr = rng.standard_normal((5, 4, 3)).astype(dtype)
    vol = load_volume(write_volume(tmp_path / "v.nii", arr, endian=endian))
    assert np.array_equal(vol.raw, arr)
    assert vol.raw.tobytes() == arr.astype(vol.raw.dtype).tobytes()


def test_voxel_order_is_x_fastest():
    arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    payload = encode_volume(arr)[352:]
    assert np.array_equal(np.frombuffer(payload, "<f8"), arr.reshape(-1, order="F"))


def test_gzip_volume(tmp_path):
    arr = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    path = tmp_path / "v.nii.gz"
    path.write_bytes(gzip.compress(encode_volume(arr)))
    assert np.array_equal(load_volume(path).raw, arr)


def test_unsupported_array_dtype():
    with pytest.raises(UnsupportedFormatError):
        encode_volume(np.zeros((2, 2, 2), dtype=np.int32))


# -- slices ----------------------------------------------------------------------

def volume_of(arr):
    return decode_volume(encode_volume(np.asarray(arr, dtype=np.float32)), source="v.nii")


def test_protocol_gives_61_slices():
    vol = volume_of(np.random.default_rng(0).random((4, 4, 256)))
    slices = extract_slices(vol)
    assert len(slices) == 61
    assert [s.z_index for s in slices] == list(range(100, 161))
    assert all(0.0 <= s.image.min() and s.image.max() <= 1.0 for s in slices)
    assert 61 * 1417 == 5002 + 488 + 67222 + 13725 == 86437


def test_constant_volume_normalises_to_zero():
    slices = extract_slices(volume_of(np.full((3, 3, 200), 4.0)))
    assert all(np.array_equal(s.image, np.zeros((3, 3))) for s in slices)


def test_single_slice_range():
    slices = extract_slices(volume_of(np.zeros((2, 2, 256))), 128, 128)
    assert [s.z_index for s in slices] == [128]


def test_shallow_volume_rejected():
    with pytest.raises(DataError):
        extract_slices(volume_of(np.zeros((2, 2, 150))))


# -- resize ----------------------------------------------------------------------

def test_resize_identity():
    img = np.random.default_rng(0).random((5, 7))
    assert np.abs(resize_bilinear(img, 5, 7) - img).max() <= 1e-12


def test_resize_constant():
    assert np.array_equal(resize_bilinear(np.full((3, 5), 0.3), 8, 2), np.full((8, 2), 0.3))


def test_resize_hand_values():
    out = resize_bilinear(np.array([[0.0, 1.0], [0.0, 1.0]]), 2, 4)
    assert np.allclose(out, [[0, 0.25, 0.75, 1.0]] * 2, atol=1e-15)


# -- augmentation ------------------------------------------------------------------

def test_zero_augmentation_is_identity():
    img = np.random.default_rng(0).random((6, 6))
    out = augment(img, np.random.default_rng(1), AugmentConfig(0.0, 0.0, 0.0))
    assert np.array_equal(out, img)


def test_flip_involution():
    img = np.random.default_rng(0).random((4, 5))
    assert np.array_equal(hflip(hflip(img)), img)


def test_augment_deterministic_and_bounded():
    img = np.random.default_rng(0).random((8, 8))
    a = augment(img, np.random.default_rng(9))
    b = augment(img, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0


def test_augment_consumes_three_draws():
    rng, ref = np.random.default_rng(4), np.random.default_rng(4)
    augment(np.zeros((3, 3)), rng, AugmentConfig(0.0, 0.0, 0.0))
    ref.random(3)
    assert rng.random() == ref.random()


def test_augment_param_bounds():
    with pytest.raises(ParameterError):
        AugmentConfig(flip_prob=1.5).validate()


# -- splitting -------------------------------------------------------------------

def test_ten_samples_tie_goes_to_validation():
    assert allocate_counts(10, (0.7, 0.15, 0.15)) == [7, 2, 1]


def test_oasis_class_counts():
    labels = np.repeat(np.arange(4), [5002, 488, 67222, 13725])
    parts = stratified_split_indices(labels, (0.7, 0.15, 0.15), seed=0)
    sizes = [p.size for p in parts]
    assert abs(sizes[0] - 60505) <= 2 and abs(sizes[1] - 12966) <= 2 and abs(sizes[2] - 12966) <= 2
    for c, total in enumerate([5002, 488, 67222, 13725]):
        for part, r in zip(parts, (Fraction(7, 10), Fraction(3, 20), Fraction(3, 20))):
            assert abs((labels[part] == c).sum() - total * r) <= 1


@settings(max_examples=60, deadline=None)
@given(counts=st.lists(st.integers(3, 60), min_size=1, max_size=5),
       raw=st.tuples(st.integers(1, 20), st.integers(1, 20), st.integers(1, 20)),
       seed=st.integers(0, 10_000))
def test_split_properties(counts, raw, seed):
    ratios = tuple(r / sum(raw) for r in raw)
    ratios = (1.0 - ratios[1] - ratios[2], ratios[1], ratios[2])
    labels = np.repeat(np.arange(len(counts)), counts)
    parts = stratified_split_indices(labels, ratios, seed=seed)
    joined = np.concatenate(parts)
    assert sorted(joined.tolist()) == list(range(labels.size))
    for c, n in enumerate(counts):
        for part, r in zip(parts, ratios):
            assert abs((labels[part] == c).sum() - n * r) <= 1 + 1e-9
    assert [p.size for p in parts] == allocate_counts(labels.size, ratios)
    again = stratified_split_indices(labels, ratios, seed=seed)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_split_totals_follow_whole_set_rounding():
    # 4 x 122 slices: rounding each class alone would give 344/72/72
    table = allocate_table([122] * 4, (0.7, 0.15, 0.15))
    assert table.sum(axis=0).tolist() == [342, 73, 73]
    assert table.sum(axis=1).tolist() == [122] * 4


def test_tiny_class_named_in_error():
    samples = [SliceSample(np.zeros((2, 2)), lbl) for lbl in [0] * 5 + [1] * 2]
    with pytest.raises(StratificationError, match="Moderate Dementia"):
        stratified_split(samples, num_classes=2, class_names=CLASS_NAMES)


@pytest.mark.parametrize("ratios", [(0.5, 0.5, 0.5), (1.0, 0.0, 0.0), (0.7, 0.3)])
def test_bad_ratios(ratios):
    with pytest.raises(ParameterError):
        stratified_split_indices([0, 0, 0], ratios)


# -- batching --------------------------------------------------------------------

def samples(n, k=4):
    return [SliceSample(np.full((4, 4), i / n), i % k, "v", i) for i in range(n)]


def test_batch_sizes_keep_last():
    sizes = [len(y) for _, y in build_batches(samples(100), 32)]
    assert sizes == [32, 32, 32, 4]
    assert [len(y) for _, y in build_batches(samples(100), 32, drop_last=True)] == [32, 32, 32]


def test_shuffle_seed_controls_order():
    order = lambda seed: np.concatenate([x.data[:, 0, 0, 0] for x, _ in  # noqa: E731
                                         build_batches(samples(50), 8, seed)])
    assert np.array_equal(order(3), order(3))
    assert not np.array_equal(order(3), order(4))


def test_batches_conserve_labels():
    s = samples(37)
    labels = np.concatenate([y for _, y in build_batches(s, 5, shuffle_seed=1)])
    assert Counter(labels.tolist()) == Counter(x.label for x in s)


def test_batch_channels_replicated():
    x, _ = next(iter_batches(samples(3), 3, channels=3))
    assert x.shape == (3, 3, 4, 4)
    assert np.array_equal(x.data[:, 0], x.data[:, 2])


def test_empty_batching():
    with pytest.raises(EmptyInputError):
        build_batches([], 4)


# -- dataset trees and manifests ---------------------------------------------------

def write_tree(root, per_class=3, depth=170):
    rng = np.random.default_rng(0)
    for name in CLASS_NAMES:
        (root / name).mkdir(parents=True)
        for i in range(per_class):
            write_volume(root / name / f"s{i}.nii", rng.random((6, 5, depth)).astype(np.float32))


def test_tree_to_manifest_round_trip(tmp_path):
    write_tree(tmp_path / "data")
    loaded = load_slices(tmp_path / "data", image_size=(8, 8))
    assert len(loaded) == 4 * 3 * 61 and loaded[0].image.shape == (8, 8)
    split = stratified_split(loaded, seed=2, num_classes=4)
    records = manifest_records(split)
    path = write_manifest(tmp_path / "m.tsv", records)
    assert read_manifest(path) == records
    first = path.read_bytes()
    write_manifest(path, manifest_records(stratified_split(loaded, seed=2, num_classes=4)))
    assert path.read_bytes() == first


def test_unknown_class_directory(tmp_path):
    write_tree(tmp_path / "data", per_class=1)
    (tmp_path / "data" / "Severe").mkdir()
    with pytest.raises(LabelError, match="Severe"):
        load_slices(tmp_path / "data")


def test_label_map_round_trip():
    m = LabelMap()
    assert [m.decode(m.encode(n)) for n in CLASS_NAMES] == list(CLASS_NAMES)
    with pytest.raises(LabelError):
        m.decode(7)
