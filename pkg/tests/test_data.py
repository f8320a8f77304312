import numpy as np
import pytest

from vislex import data as ds
from vislex.errors import FormatError


def test_single_object_caption_valid():
    scene = ds.SceneSpec(objects=(ds.SceneObject("circle", "red", 1, 1),))
    assert ds.caption_is_true("a red circle", scene)
    assert not ds.caption_is_true("a blue circle", scene)
    assert "a red circle" in ds.true_captions(scene)


def test_relation_semantics_left_right():
    scene = ds.SceneSpec(
        objects=(
            ds.SceneObject("circle", "red", 0, 0),
            ds.SceneObject("square", "blue", 0, 3),
        )
    )
    assert ds.caption_is_true("a red circle left of a blue square", scene)
    assert not ds.caption_is_true("a red circle right of a blue square", scene)
    assert ds.caption_is_true("a blue square right of a red circle", scene)


def test_relation_above_below():
    scene = ds.SceneSpec(
        objects=(
            ds.SceneObject("triangle", "white", 0, 2),
            ds.SceneObject("circle", "green", 3, 2),
        )
    )
    assert ds.caption_is_true("a white triangle above a green circle", scene)
    assert ds.caption_is_true("a green circle below a white triangle", scene)
    assert not ds.caption_is_true("a white triangle left of a green circle", scene)


def test_relation_requires_distinct_objects():
    scene = ds.SceneSpec(objects=(ds.SceneObject("circle", "red", 0, 0),))
    assert not ds.caption_is_true("a red circle left of a red circle", scene)


def test_generated_captions_all_verified():
    items = ds.generate(np.random.default_rng(0), 1000)
    for item in items:
        for cap in item.captions:
            assert ds.caption_is_true(cap, item.scene), cap


def test_generation_deterministic_per_seed():
    a = ds.generate(np.random.default_rng(5), 20)
    b = ds.generate(np.random.default_rng(5), 20)
    for x, y in zip(a, b):
        assert x.captions == y.captions
        assert np.array_equal(x.pixels, y.pixels)


def test_color_shape_coverage():
    items = ds.generate(np.random.default_rng(1), 1000)
    seen = {(o.color, o.shape) for item in items for o in item.scene.objects}
    assert len(seen) == len(ds.COLORS) * len(ds.SHAPES)


def test_objects_occupy_distinct_cells():
    for item in ds.generate(np.random.default_rng(2), 200):
        cells = [(o.row, o.col) for o in item.scene.objects]
        assert len(cells) == len(set(cells))


def test_render_uses_exact_palette():
    scene = ds.SceneSpec(objects=(ds.SceneObject("square", "yellow", 2, 2),))
    img = ds.render(scene)
    flat = img.reshape(-1, 3)
    is_yellow = (flat == np.array(ds.COLORS["yellow"], dtype=np.uint8)).all(axis=1)
    assert is_yellow.sum() == 11 * 11  # square side 2r-1 at radius 6
    rest = flat[~is_yellow]
    # background is grayscale within the documented gradient band
    assert (rest[:, 0] == rest[:, 1]).all() and (rest[:, 1] == rest[:, 2]).all()
    assert rest[:, 0].min() >= ds.BG_LOW and rest[:, 0].max() <= ds.BG_HIGH


def test_ppm_round_trip_bitwise(tmp_path):
    img = ds.render(ds.sample_scene(np.random.default_rng(3)))
    path = tmp_path / "img.ppm"
    ds.write_ppm(path, img)
    back = ds.read_ppm(path)
    assert np.array_equal(img, back)


def test_ppm_fixture_bytes(tmp_path):
    # 2x2 all-red: header then 12 pixel bytes of (255, 0, 0)
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[..., 0] = 255
    path = tmp_path / "red.ppm"
    ds.write_ppm(path, img)
    raw = path.read_bytes()
    assert raw.startswith(b"P6\n2 2\n255\n")
    assert raw[len(b"P6\n2 2\n255\n"):] == bytes([255, 0, 0] * 4)


def test_ppm_bad_magic_offset_zero(tmp_path):
    path = tmp_path / "bad.ppm"
    path.write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 12)
    with pytest.raises(FormatError) as err:
        ds.read_ppm(path)
    assert err.value.offset == 0


def test_ppm_truncated_payload(tmp_path):
    path = tmp_path / "short.ppm"
    path.write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
    with pytest.raises(FormatError, match="truncated"):
        ds.read_ppm(path)


def test_dataset_save_load_round_trip(tmp_path):
    items = ds.generate(np.random.default_rng(4), 12)
    ds.save_dataset(items, tmp_path / "train")
    back = ds.load_dataset(tmp_path / "train")
    assert len(back) == 12
    for a, b in zip(items, back):
        assert a.image_id == b.image_id
        assert a.captions == b.captions
        assert a.scene == b.scene
        assert np.array_equal(a.pixels, b.pixels)


def test_dataset_size_under_30mb(tmp_path):
    items = ds.generate(np.random.default_rng(6), 1000)  # 2000 caption pairs
    ds.save_dataset(items, tmp_path / "d")
    total = sum(p.stat().st_size for p in (tmp_path / "d").rglob("*") if p.is_file())
    assert total < 30 * 1024 * 1024


def test_image_to_float_range():
    img = ds.render(ds.sample_scene(np.random.default_rng(7)))
    f = ds.image_to_float(img)
    assert f.shape == (3, 64, 64)
    assert f.min() >= 0.0 and f.max() <= 1.0
    assert f.dtype == np.float64
