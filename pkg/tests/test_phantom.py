import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctsr import io
from ctsr.errors import ConfigError, FormatError, PreconditionError
from ctsr.phantom import (
    AIR_HU,
    HU_HI,
    HU_LO,
    ORGANS,
    AnatomyMeta,
    Dataset,
    SliceImage,
    build_dataset,
    clip_hu,
    generate_phantom,
    load_slice_raw,
    normalize,
    split_seeds,
    window,
    write_slice_raw,
)


def test_same_seed_gives_identical_bytes():
    a = generate_phantom(7, 128)
    b = generate_phantom(7, 128)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert a.meta == b.meta


def test_corners_are_air():
    for seed in range(5):
        px = generate_phantom(seed, 128).pixels
        for y, x in ((0, 0), (0, -1), (-1, 0), (-1, -1)):
            assert px[y, x] == pytest.approx(AIR_HU)


def test_organ_count_covers_two_to_six():
    counts = {len(generate_phantom(s, 64).meta.organs) for s in range(100)}
    assert counts == {2, 3, 4, 5, 6}


def test_organs_from_vocabulary_and_inside_body():
    for seed in range(30):
        meta = generate_phantom(seed, 128).meta
        assert meta.organs
        names = [o.name for o in meta.organs]
        assert len(set(names)) == len(names)
        assert set(names) <= set(ORGANS)
        for organ in meta.organs:
            assert meta.body.contains(organ.region.boundary()).all()


@pytest.mark.parametrize("size", [0, 100, 127, 512])
def test_invalid_size_rejected(size):
    with pytest.raises(ConfigError):
        generate_phantom(0, size)


@pytest.mark.parametrize("hu, expected", [(300.0, 215.0), (-500.0, -135.0), (0.0, 0.0)])
def test_clip_hu_examples(hu, expected):
    out = clip_hu(SliceImage(np.full((4, 4), hu, dtype=np.float32)))
    assert np.all(out.pixels == expected)


@pytest.mark.parametrize("hu, expected", [(-135.0, 0.0), (215.0, 1.0), (40.0, 0.5)])
def test_normalize_examples(hu, expected):
    out = normalize(SliceImage(np.full((2, 2), hu, dtype=np.float32)))
    assert np.allclose(out, expected, atol=1e-7)


def test_normalize_rejects_unclipped():
    with pytest.raises(PreconditionError):
        normalize(SliceImage(np.array([[300.0]], dtype=np.float32)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=64))
def test_window_always_in_unit_range(values):
    out = window(SliceImage(np.array(values, dtype=np.float32)[None]))
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_raw_rescale_examples(tmp_path):
    path = tmp_path / "s.raw"
    write_slice_raw(path, np.array([[1024, 0]], dtype=np.uint16))
    sl = load_slice_raw(path, width=2, height=1, slope=1.0, intercept=-1024.0)
    assert sl.pixels.tolist() == [[0.0, -1024.0]]


def test_raw_round_trip(tmp_path, rng):
    raw = rng.integers(0, 4096, size=(32, 48)).astype(np.uint16)
    path = tmp_path / "r.raw"
    write_slice_raw(path, raw)
    back = load_slice_raw(path, width=48, height=32, slope=1.0, intercept=0.0)
    assert np.array_equal(back.pixels, raw.astype(np.float32))


def test_raw_size_mismatch(tmp_path):
    path = tmp_path / "r.raw"
    write_slice_raw(path, np.zeros((4, 4), dtype=np.uint16))
    with pytest.raises(FormatError):
        load_slice_raw(path, width=5, height=4)


def test_split_seeds_disjoint():
    train, test = split_seeds(3, 512, 64)
    assert len(set(train)) == 512 and len(set(test)) == 64
    assert not set(train) & set(test)


def _data_cfg(**kw):
    cfg = {"train_count": 6, "test_count": 2, "size": 64, "seed": 1, "hu_lo": HU_LO, "hu_hi": HU_HI}
    cfg.update(kw)
    return cfg


def test_build_dataset_deterministic(tmp_path):
    a = build_dataset(tmp_path / "a", _data_cfg())
    b = build_dataset(tmp_path / "b", _data_cfg())
    assert io.hash_json(a) == io.hash_json(b)
    ds_a, ds_b = Dataset(tmp_path / "a"), Dataset(tmp_path / "b")
    assert ds_a.images("train").tobytes() == ds_b.images("train").tobytes()
    seeds = [it["seed"] for s in ("train", "test") for it in a[s]["items"]]
    assert len(set(seeds)) == len(seeds)


def test_build_dataset_file_count(tmp_path):
    build_dataset(tmp_path, _data_cfg(train_count=9, test_count=3))
    assert len(list(tmp_path.glob("*/*.ssrb"))) == 12
    ds = Dataset(tmp_path)
    imgs = ds.images("test")
    assert imgs.shape == (3, 64, 64) and imgs.min() >= 0 and imgs.max() <= 1
    assert all(m.organ_names() for m in ds.metas("test"))


def test_build_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        build_dataset(blocker / "sub", _data_cfg())


def test_meta_round_trip():
    meta = generate_phantom(11, 64).meta
    assert AnatomyMeta.from_dict(meta.to_dict()) == meta
