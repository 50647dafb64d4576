import struct

import numpy as np
import pytest

from unirep.domains import (
    Dataset,
    DomainDescriptor,
    SynthSpec,
    class_prototypes,
    generate_synthetic,
    load_binary,
    save_binary,
    split,
    whiten,
)
from unirep.errors import DegenerateChannelError, FormatError, GenerationError, LabelError


def _dataset(images, labels, k=2, flip=True):
    return Dataset(np.asarray(images, np.float32), np.asarray(labels), DomainDescriptor(1, "d", images.shape[:3], k, flip))


# --------------------------------------------------------------------------- whitening


def test_whiten_two_values_map_to_plus_minus_one():
    images = np.zeros((2, 2, 1, 2), np.float32)
    images[..., 1] = 2.0
    ds = _dataset(images, [0, 1])
    ds.assignment = np.zeros(2, np.uint8)
    out, (mean, std) = whiten(ds)
    assert mean[0] == 1.0 and std[0] == 1.0
    assert set(np.unique(out.images).tolist()) == {-1.0, 1.0}


def test_whiten_uses_training_statistics_and_is_idempotent(rng):
    ds = _dataset(rng.normal(5.0, 3.0, (4, 4, 3, 50)), rng.integers(0, 2, 50))
    ds.assignment = split(ds, 0.8, seed=0)
    out, _ = whiten(ds)
    train = out.images[..., out.indices("train")].astype(np.float64)
    np.testing.assert_allclose(train.mean(axis=(0, 1, 3)), 0.0, atol=1e-5)
    np.testing.assert_allclose(train.std(axis=(0, 1, 3)), 1.0, atol=1e-5)
    again, _ = whiten(out)
    np.testing.assert_allclose(again.images, out.images, atol=1e-5)


def test_whiten_rejects_constant_channel(rng):
    images = rng.standard_normal((4, 4, 3, 10))
    images[:, :, 1] = 7.0
    ds = _dataset(images, np.zeros(10, int))
    ds.assignment = np.zeros(10, np.uint8)
    with pytest.raises(DegenerateChannelError, match="channel 1"):
        whiten(ds)


# --------------------------------------------------------------------------- split


def test_split_counts_and_determinism():
    a = split(10, 0.8, seed=3)
    assert (a == 0).sum() == 8 and (a == 1).sum() == 2
    assert np.array_equal(a, split(10, 0.8, seed=3))
    different = [not np.array_equal(split(100, 0.8, seed=s), split(100, 0.8, seed=0)) for s in range(1, 6)]
    assert all(different)
    with pytest.raises(ValueError):
        split(10, 1.0)


def test_dataset_rejects_out_of_range_labels():
    with pytest.raises(LabelError) as info:
        _dataset(np.zeros((1, 1, 1, 3)), [0, 1, 2], k=2)
    assert info.value.index == 2


# --------------------------------------------------------------------------- synthetic


def test_noise_free_samples_equal_prototypes():
    spec = SynthSpec(num_classes=4, n_per_class=5, noise_std=0.0)
    ds = generate_synthetic(spec)
    protos = class_prototypes(spec)
    for i, y in enumerate(ds.labels):
        np.testing.assert_allclose(ds.images[..., i], protos[y], atol=1e-5)


def test_prototype_margin_holds():
    spec = SynthSpec(num_classes=10, margin=20.0, geometry_seed=4)
    flat = class_prototypes(spec).reshape(10, -1)
    dist = np.sqrt(((flat[:, None] - flat[None]) ** 2).sum(-1))
    assert dist[~np.eye(10, dtype=bool)].min() >= 20.0


def test_sample_seed_keeps_geometry():
    a = generate_synthetic(SynthSpec(num_classes=3, n_per_class=4, seed=1, geometry_seed=9))
    b = generate_synthetic(SynthSpec(num_classes=3, n_per_class=4, seed=2, geometry_seed=9))
    assert not np.array_equal(a.images, b.images)
    pa = class_prototypes(SynthSpec(num_classes=3, geometry_seed=9, seed=1))
    pb = class_prototypes(SynthSpec(num_classes=3, geometry_seed=9, seed=2))
    assert np.array_equal(pa, pb)
    assert not np.array_equal(pa, class_prototypes(SynthSpec(num_classes=3, geometry_seed=10)))


def test_generation_is_byte_deterministic():
    spec = SynthSpec(num_classes=3, n_per_class=10, seed=5, geometry_seed=6)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert a.images.tobytes() == b.images.tobytes() and a.labels.tobytes() == b.labels.tobytes()


def test_channel_shift_statistics():
    base = generate_synthetic(SynthSpec(num_classes=5, n_per_class=200, seed=1))
    shifted = generate_synthetic(SynthSpec(num_classes=5, n_per_class=200, seed=1, mean_offset=5.0, variance_scale=4.0))
    assert abs(shifted.images.mean() - 5.0) < 0.1
    np.testing.assert_allclose(shifted.images - 5.0, 2.0 * base.images, atol=1e-4)


def test_balanced_and_class_mixed():
    ds = generate_synthetic(SynthSpec(num_classes=4, n_per_class=25))
    assert np.bincount(ds.labels).tolist() == [25] * 4
    assert len(set(ds.labels[:16].tolist())) > 1


def test_infeasible_margin():
    with pytest.raises(GenerationError):
        class_prototypes(SynthSpec(image_size=4, channels=1, margin=100.0))
    with pytest.raises(GenerationError):
        class_prototypes(SynthSpec(num_classes=50, image_size=4, channels=1, margin=7.9, grid=2))


def test_glyph_style_disallows_flips_and_object_style_is_symmetric():
    glyph = generate_synthetic(SynthSpec(num_classes=2, n_per_class=2, style="glyph"))
    assert glyph.descriptor.flip_allowed is False
    protos = class_prototypes(SynthSpec(num_classes=2, style="object"))
    np.testing.assert_allclose(protos, protos[:, :, ::-1], atol=1e-6)


# --------------------------------------------------------------------------- UDRD


@pytest.fixture
def udrd(tmp_path):
    ds = generate_synthetic(SynthSpec(num_classes=3, n_per_class=4, image_size=8, channels=1, style="glyph"))
    path = tmp_path / "d.udrd"
    save_binary(ds, path)
    return ds, path


def test_udrd_round_trip(udrd):
    ds, path = udrd
    back = load_binary(path, domain_id=2, name="x")
    assert back.images.tobytes() == ds.images.tobytes()
    assert np.array_equal(back.labels, ds.labels)
    assert back.descriptor.flip_allowed is False and back.descriptor.num_classes == 3
    assert back.descriptor.id == 2 and back.descriptor.input_dims == (8, 8, 1)


def test_udrd_to_rgb_replicates_gray(udrd):
    _, path = udrd
    rgb = load_binary(path, to_rgb=True)
    assert rgb.images.shape[2] == 3
    assert np.array_equal(rgb.images[:, :, 0], rgb.images[:, :, 2])


def test_udrd_truncation_reports_offset(udrd):
    _, path = udrd
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as info:
        load_binary(path)
    assert info.value.offset == len(raw) - 5
    path.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="truncated header"):
        load_binary(path)


def test_udrd_bad_label_names_record(udrd):
    ds, path = udrd
    raw = bytearray(path.read_bytes())
    label_start = len(raw) - 4 * len(ds)
    struct.pack_into("<I", raw, label_start + 4 * 7, 3)
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError) as info:
        load_binary(path)
    assert info.value.record == 7 and info.value.offset == label_start + 28


@pytest.mark.parametrize("mutate,match", [
    (lambda r: b"XXXX" + r[4:], "magic"),
    (lambda r: r[:4] + struct.pack("<I", 9) + r[8:], "version"),
    (lambda r: r + b"\0", "trailing"),
])
def test_udrd_header_defects(udrd, mutate, match):
    _, path = udrd
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError, match=match):
        load_binary(path)
