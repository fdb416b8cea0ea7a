import dataclasses

import numpy as np
import pytest
from PIL import Image

from densetrf import synthdata as sd


@pytest.fixture(scope="module")
def small_bundle():
    return sd.make_shift_benchmark(sd.default_source_spec(0), sd.default_target_spec(1), (4, 5, 3))


def test_labeled_fraction_zero_gives_unlabeled():
    samples = sd.generate_domain(sd.default_source_spec(), 5, labeled_fraction=0.0)
    assert len(samples) == 5
    assert all(s.label is None and s.split == sd.TRAIN_UNLABELED for s in samples)


def test_labeled_fraction_split():
    samples = sd.generate_domain(sd.default_source_spec(), 10, labeled_fraction=0.3)
    assert sum(s.label is not None for s in samples) == 3
    with pytest.raises(ValueError):
        sd.generate_domain(sd.default_source_spec(), 0)
    with pytest.raises(ValueError):
        sd.generate_domain(sd.default_source_spec(), 3, labeled_fraction=1.5)


def test_generation_is_deterministic():
    a = sd.generate_domain(sd.default_target_spec(3), 4, 0.5)
    b = sd.generate_domain(sd.default_target_spec(3), 4, 0.5)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert (x.label is None and y.label is None) or x.label.tobytes() == y.label.tobytes()
    c = sd.generate_domain(sd.default_target_spec(4), 1)
    assert c[0].image.tobytes() != a[0].image.tobytes()


def test_sample_contract():
    s = sd.generate_domain(sd.default_source_spec(), 1, 1.0)[0]
    assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert s.label.shape == (64, 64, 2) and set(np.unique(s.label)) <= {0, 1}
    with pytest.raises(ValueError):
        sd.Sample(s.image, None, "x", sd.TEST)
    with pytest.raises(ValueError):
        sd.Sample(s.image, s.label, "x", sd.TRAIN_UNLABELED)


def test_default_class_count():
    spec = sd.default_source_spec()
    assert spec.num_classes == 2 and len(spec.textures) == 3


def test_degenerate_specs():
    tex = sd.DEFAULT_TEXTURES
    with pytest.raises(sd.DegenerateSpecError):
        sd.DomainSpec("d", (tex[0], tex[1], tex[1]))
    with pytest.raises(sd.DegenerateSpecError):
        sd.DomainSpec("d", (tex[0],))
    with pytest.raises(sd.DegenerateSpecError):
        sd.DomainSpec("d", tex, shape=sd.ShapeParams(coverage=0.0))


def test_incompatible_classes():
    src = sd.default_source_spec()
    tgt = dataclasses.replace(sd.default_target_spec(), textures=sd.DEFAULT_TEXTURES[:2])
    with pytest.raises(sd.IncompatibleClassesError):
        sd.make_shift_benchmark(src, tgt, (1, 1, 1))


def test_bundle_sizes():
    b = sd.make_shift_benchmark(sd.default_source_spec(0), sd.default_target_spec(1), (100, 500, 50))
    counts = {k: len(v) for k, v in b.pools().items()}
    assert counts == {"source_labeled": 100, "source_unlabeled": 500, "source_test": 50,
                      "target_unlabeled": 500, "target_test": 50}
    assert all(s.label is None for s in b.target_unlabeled)
    assert all(s.label is not None for s in b.target_test)


def test_manifest_round_trip_regenerates_pools(small_bundle):
    again = sd.bundle_from_manifest(small_bundle.manifest)
    for name, pool in small_bundle.pools().items():
        for x, y in zip(pool, again.pools()[name]):
            assert x.image.tobytes() == y.image.tobytes()


def test_spec_dict_round_trip():
    spec = sd.default_target_spec(9)
    assert sd.DomainSpec.from_dict(spec.to_dict()) == spec


def test_folder_round_trip(tmp_path, small_bundle):
    sd.write_benchmark(small_bundle, tmp_path)
    back = sd.load_benchmark_folder(tmp_path)
    for name, pool in small_bundle.pools().items():
        loaded = back.pools()[name]
        assert [s.sample_id for s in loaded] == [s.sample_id for s in pool]
        for x, y in zip(pool, loaded):
            assert np.abs(x.image - y.image).max() <= 0.5 / 255 + 1e-6
            if x.label is None:
                assert y.label is None
            else:
                assert np.array_equal(x.label, y.label)


def test_disk_layout(tmp_path, small_bundle):
    sd.write_benchmark(small_bundle, tmp_path)
    assert (tmp_path / "manifest.json").exists()
    assert len(list((tmp_path / "source" / "test" / "images").glob("*.png"))) == 3
    assert len(list((tmp_path / "target" / "test" / "masks" / "class2").glob("*.png"))) == 3
    assert not (tmp_path / "target" / "train_unlabeled" / "masks").exists()


def _write_images(folder, names, size=(16, 16)):
    folder.mkdir(parents=True, exist_ok=True)
    for n in names:
        Image.fromarray(np.full((*size, 3), 100, np.uint8)).save(folder / f"{n}.png")


def test_unlabeled_folder(tmp_path):
    _write_images(tmp_path / "imgs", ["a", "b", "c"])
    samples = sd.load_image_folder(tmp_path / "imgs")
    assert len(samples) == 3 and all(s.label is None for s in samples)


def test_missing_mask_names_file(tmp_path):
    _write_images(tmp_path / "imgs", ["a", "b"])
    (tmp_path / "masks" / "c1").mkdir(parents=True)
    Image.fromarray(np.zeros((16, 16), np.uint8)).save(tmp_path / "masks" / "c1" / "a.png")
    with pytest.raises(sd.MissingMaskError, match="b.png"):
        sd.load_image_folder(tmp_path / "imgs", tmp_path / "masks")


def test_folder_resize_and_crop_to_patch_multiple(tmp_path):
    _write_images(tmp_path / "imgs", ["a"], size=(21, 35))
    s = sd.load_image_folder(tmp_path / "imgs", patch_size=8)[0]
    assert s.image.shape == (16, 32, 3)
    s = sd.load_image_folder(tmp_path / "imgs", patch_size=8, size=40)[0]
    assert s.image.shape == (40, 40, 3)


def test_colour_coded_masks(tmp_path):
    _write_images(tmp_path / "imgs", ["a"], size=(8, 8))
    m = np.zeros((8, 8, 3), np.uint8)
    m[:4] = (255, 0, 0)
    m[4:, :2] = (0, 255, 0)
    (tmp_path / "masks").mkdir()
    Image.fromarray(m).save(tmp_path / "masks" / "a.png")
    s = sd.load_image_folder(tmp_path / "imgs", tmp_path / "masks",
                             color_map={"red": (255, 0, 0), "green": (0, 255, 0)})[0]
    assert s.label[..., 0].sum() == 32 and s.label[..., 1].sum() == 8


def test_unreadable_image(tmp_path):
    (tmp_path / "imgs").mkdir()
    (tmp_path / "imgs" / "bad.png").write_bytes(b"not an image")
    with pytest.raises(OSError, match="bad.png"):
        sd.load_image_folder(tmp_path / "imgs")


def test_texture_statistics_stable_while_shapes_shift():
    src = sd.generate_pool(sd.default_source_spec(0), 200, sd.TEST)
    tgt = sd.generate_pool(sd.default_target_spec(1), 200, sd.TEST)
    check = sd.check_shift(src, tgt)
    assert len(check.texture_divergence) == 3
    assert max(check.texture_divergence) < 0.10
    assert check.eccentricity_gap > 0.25
    assert check.passed


def test_shift_check_detects_texture_change():
    src = sd.generate_pool(sd.default_source_spec(0), 20, sd.TEST)
    tex = list(sd.DEFAULT_TEXTURES)
    tex[1] = dataclasses.replace(tex[1], frequency=tex[1].frequency * 2)
    other = dataclasses.replace(sd.default_source_spec(1), textures=tuple(tex))
    check = sd.check_shift(src, sd.generate_pool(other, 20, sd.TEST))
    assert check.texture_divergence[1] > 0.10 and not check.passed
