"""Color transfer, exposure simulation, containers, and dataset indexing."""

import os

import numpy as np
import pytest

from exposura.errors import DataError
from exposura.imaging import (EV_DOMAIN, ImageBuffer, crop_to, ev_shift,
                              format_ev_tag, from_net_output, hflip_pair,
                              index_dataset, load_image, pad_to_multiple,
                              parse_ev_name, random_crop_pair, rec601_luma,
                              save_image, srgb_decode, srgb_decode_array,
                              srgb_encode, srgb_encode_array, to_net_input)

from conftest import build_pair_tree, checker_image


# ---------------------------------------------------------------------------
# sRGB transfer


def test_srgb_decode_midpoint_value():
    assert srgb_decode_array(np.array(0.5)) == pytest.approx(0.21404, abs=5e-6)


def test_srgb_transfer_round_trip():
    v = np.linspace(0.0, 1.0, 1001)
    back = srgb_encode_array(srgb_decode_array(v))
    np.testing.assert_allclose(back, v, atol=1e-12)


def test_srgb_transfer_fixed_points():
    assert srgb_decode_array(np.array(0.0)) == 0.0
    assert srgb_decode_array(np.array(1.0)) == pytest.approx(1.0, abs=1e-12)
    # linear segment below the knee
    assert srgb_decode_array(np.array(0.04)) == pytest.approx(0.04 / 12.92)


def test_srgb_buffer_wrappers_match_arrays():
    img = checker_image(16, 1)
    np.testing.assert_allclose(srgb_decode(img).data,
                               srgb_decode_array(img.data), atol=1e-7)
    np.testing.assert_allclose(srgb_encode(img).data,
                               srgb_encode_array(img.data), atol=1e-7)


# ---------------------------------------------------------------------------
# exposure shift


def test_ev_shift_zero_is_bitwise_identity():
    img = checker_image(16, 2)
    out = ev_shift(img, 0.0)
    assert out.data is not img.data
    np.testing.assert_array_equal(out.data, img.data)


def test_ev_shift_round_trip_when_unclipped():
    rng = np.random.default_rng(3)
    # keep linear light below 0.5 so +1 EV cannot clip
    img = ImageBuffer(rng.uniform(0.05, 0.70, (24, 24, 3)).astype(np.float32))
    back = ev_shift(ev_shift(img, 1.0), -1.0)
    assert float(np.abs(back.data - img.data).max()) <= 1e-4


def test_ev_shift_is_monotone_in_ev():
    img = checker_image(16, 4)
    up = ev_shift(img, 1.0)
    down = ev_shift(img, -1.0)
    assert np.all(up.data >= img.data - 1e-7)
    assert np.all(down.data <= img.data + 1e-7)
    assert up.data.mean() > img.data.mean() > down.data.mean()


def test_ev_shift_doubles_linear_light():
    img = ImageBuffer(np.full((4, 4, 3), 0.4, np.float32))
    lin0 = srgb_decode_array(img.data.astype(np.float64))
    lin1 = srgb_decode_array(ev_shift(img, 1.0).data.astype(np.float64))
    np.testing.assert_allclose(lin1, 2.0 * lin0, rtol=1e-5)


def test_ev_shift_clips_highlights():
    img = ImageBuffer(np.full((4, 4, 3), 0.9, np.float32))
    out = ev_shift(img, 2.0)
    np.testing.assert_allclose(out.data, 1.0, atol=1e-6)


def test_ev_shift_requires_rgb():
    with pytest.raises(ValueError, match="3-channel"):
        ev_shift(ImageBuffer(np.zeros((4, 4, 1), np.float32)), 1.0)


# ---------------------------------------------------------------------------
# exposure-tag grammar


@pytest.mark.parametrize("ev,tag", [
    (0.0, "0"), (1.0, "P1"), (-1.0, "N1"), (1.5, "P1.5"),
    (-2.5, "N2.5"), (2.0, "P2"),
])
def test_ev_tag_round_trip(ev, tag):
    assert format_ev_tag(ev) == tag
    stem, parsed = parse_ev_name(f"shot_{tag}")
    assert stem == "shot" and parsed == ev


def test_parse_ev_name_keeps_underscored_stems():
    stem, ev = parse_ev_name("a_b_c_N1.5")
    assert stem == "a_b_c" and ev == -1.5


@pytest.mark.parametrize("bad", ["shot", "shot_", "shot_X1", "shot_P",
                                 "shot_1", "shot_p1"])
def test_parse_ev_name_rejects_bad_tags(bad):
    with pytest.raises(DataError, match="exposure tag"):
        parse_ev_name(bad)


def test_ev_domain_contents():
    assert EV_DOMAIN == (-2.5, -2.0, -1.5, -1.0, 0.0, 1.0, 1.5, 2.0, 2.5)


# ---------------------------------------------------------------------------
# containers


def test_png_round_trip_quantization_bound(tmp_path):
    img = checker_image(20, 5)
    path = str(tmp_path / "x.png")
    save_image(img, path)
    back = load_image(path)
    assert back.data.shape == img.data.shape
    assert float(np.abs(back.data - img.data).max()) <= 0.5 / 255 + 1e-7


def test_png_preserves_exact_8bit_levels(tmp_path):
    levels = np.arange(256, dtype=np.float32) / 255.0
    img = ImageBuffer(np.stack([levels.reshape(16, 16)] * 3, axis=-1))
    path = str(tmp_path / "levels.png")
    save_image(img, path)
    np.testing.assert_array_equal(load_image(path).data, img.data)


def test_png_grayscale_round_trip(tmp_path):
    img = ImageBuffer((np.arange(64, dtype=np.float32) / 63.0).reshape(8, 8))
    path = str(tmp_path / "g.png")
    save_image(img, path)
    back = load_image(path)
    assert back.channels == 1
    assert float(np.abs(back.data - img.data).max()) <= 0.5 / 255 + 1e-7


def test_imgf_round_trip_is_bitwise(tmp_path):
    rng = np.random.default_rng(6)
    img = ImageBuffer(rng.uniform(0, 1, (11, 7, 3)).astype(np.float32))
    path = str(tmp_path / "x.imgf")
    save_image(img, path)
    np.testing.assert_array_equal(load_image(path).data, img.data)


def test_imgf_rejects_malformed_files(tmp_path):
    import struct
    p = tmp_path / "bad.imgf"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(DataError, match="bad magic"):
        load_image(str(p))
    p.write_bytes(b"IMGF" + b"\x00" * 4)
    with pytest.raises(DataError, match="truncated header"):
        load_image(str(p))
    p.write_bytes(b"IMGF" + struct.pack("<IIII", 7, 2, 2, 3) + b"\x00" * 48)
    with pytest.raises(DataError, match="version 7"):
        load_image(str(p))
    p.write_bytes(b"IMGF" + struct.pack("<IIII", 1, 2, 2, 2) + b"\x00" * 32)
    with pytest.raises(DataError, match="invalid dimensions"):
        load_image(str(p))
    p.write_bytes(b"IMGF" + struct.pack("<IIII", 1, 2, 2, 3) + b"\x00" * 10)
    with pytest.raises(DataError, match="payload"):
        load_image(str(p))


def test_load_image_rejects_unknown_extension_and_garbage(tmp_path):
    with pytest.raises(DataError, match="unsupported image extension"):
        load_image(str(tmp_path / "x.jpg"))
    with pytest.raises(DataError, match="unsupported image extension"):
        save_image(checker_image(4, 0), str(tmp_path / "x.bmp"))
    p = tmp_path / "junk.png"
    p.write_bytes(b"this is not a png")
    with pytest.raises(DataError, match="not a decodable image"):
        load_image(str(p))


def test_image_buffer_contract():
    b = ImageBuffer(np.zeros((4, 5)))
    assert (b.height, b.width, b.channels) == (4, 5, 1)
    clamped = ImageBuffer(np.array([[[-1.0, 0.5, 2.0]]]))
    np.testing.assert_array_equal(clamped.data.reshape(-1), [0.0, 0.5, 1.0])
    with pytest.raises(ValueError, match="HxWx1 or HxWx3"):
        ImageBuffer(np.zeros((4, 4, 2)))


# ---------------------------------------------------------------------------
# tensor bridge and padding


def test_net_input_round_trip():
    img = checker_image(16, 7)
    x = to_net_input(img)
    assert x.shape == (1, 3, 16, 16) and x.dtype == np.float32
    assert x.min() >= -1.0 and x.max() <= 1.0
    back = from_net_output(x)
    np.testing.assert_allclose(back.data, img.data, atol=1e-7)


def test_from_net_output_clips():
    x = np.full((1, 3, 2, 2), 1.5, np.float32)
    assert from_net_output(x).data.max() == 1.0
    with pytest.raises(ValueError, match="single NCHW"):
        from_net_output(np.zeros((2, 3, 2, 2), np.float32))


def test_pad_to_multiple_and_crop_back():
    rng = np.random.default_rng(8)
    img = ImageBuffer(rng.uniform(0, 1, (77, 100, 3)).astype(np.float32))
    padded, orig = pad_to_multiple(img, 32)
    assert (padded.height, padded.width) == (96, 128)
    assert orig == (77, 100)
    back = crop_to(padded, orig)
    np.testing.assert_array_equal(back.data, img.data)


def test_pad_to_multiple_no_op_on_aligned_input():
    img = checker_image(64, 9)
    padded, orig = pad_to_multiple(img, 32)
    assert padded is img and orig == (64, 64)


def test_pad_to_multiple_reflects_content():
    img = ImageBuffer(np.arange(40 * 40 * 3, dtype=np.float32
                                ).reshape(40, 40, 3) / (40 * 40 * 3))
    padded, _ = pad_to_multiple(img, 32)  # 40 -> 64, pad of 24 < 40
    np.testing.assert_array_equal(padded.data[40:, :40],
                                  img.data[38:14:-1, :])


def test_pad_to_multiple_handles_tiny_images():
    img = ImageBuffer(np.full((3, 5, 3), 0.25, np.float32))
    padded, orig = pad_to_multiple(img, 32)
    assert (padded.height, padded.width) == (32, 32)
    np.testing.assert_array_equal(padded.data, 0.25)


def test_random_crop_pair_takes_same_window():
    a = checker_image(48, 10)
    marked = a.data.copy()
    marked[30, 17] = [1.0, 0.0, 1.0]
    b = ImageBuffer(marked)
    rng = np.random.default_rng(11)
    for _ in range(20):
        ca, cb = random_crop_pair(a, b, 16, rng)
        diff = np.argwhere(np.any(ca.data != cb.data, axis=-1))
        if diff.size:  # marker landed inside the window
            assert len(diff) == 1
            np.testing.assert_array_equal(cb.data[tuple(diff[0])],
                                          [1.0, 0.0, 1.0])


def test_random_crop_pair_is_seed_deterministic():
    a = checker_image(40, 12)
    c1, _ = random_crop_pair(a, a, 8, np.random.default_rng(5))
    c2, _ = random_crop_pair(a, a, 8, np.random.default_rng(5))
    np.testing.assert_array_equal(c1.data, c2.data)


def test_random_crop_pair_validation():
    a = checker_image(16, 13)
    b = checker_image(32, 13)
    with pytest.raises(ValueError, match="dimensions differ"):
        random_crop_pair(a, b, 8, np.random.default_rng(0))
    with pytest.raises(ValueError, match="smaller than crop"):
        random_crop_pair(a, a, 64, np.random.default_rng(0))


def test_hflip_pair_flips_both_or_neither():
    a = checker_image(12, 14)
    b = checker_image(12, 15)
    flipped = 0
    for seed in range(40):
        fa, fb = hflip_pair(a, b, np.random.default_rng(seed))
        if not np.array_equal(fa.data, a.data):
            flipped += 1
            np.testing.assert_array_equal(fa.data, a.data[:, ::-1])
            np.testing.assert_array_equal(fb.data, b.data[:, ::-1])
        else:
            np.testing.assert_array_equal(fb.data, b.data)
    assert 10 <= flipped <= 30  # fair coin over 40 draws


def test_rec601_luma_weights():
    rgb = np.zeros((1, 3, 3), np.float32)
    rgb[0, 0] = [1, 0, 0]
    rgb[0, 1] = [0, 1, 0]
    rgb[0, 2] = [0, 0, 1]
    luma = rec601_luma(ImageBuffer(rgb))
    np.testing.assert_allclose(luma[0], [0.299, 0.587, 0.114], atol=1e-7)
    gray = ImageBuffer(np.full((2, 2, 1), 0.3, np.float32))
    np.testing.assert_allclose(rec601_luma(gray), 0.3, atol=1e-7)


# ---------------------------------------------------------------------------
# dataset indexing


def test_index_dataset_pairs_and_order(pair_tree):
    idx = index_dataset(pair_tree)
    assert len(idx) == 4  # 2 stems x 2 EVs
    names = [os.path.basename(r.input_path) for r in idx.records]
    assert names == sorted(names)
    for r in idx.records:
        stem, ev = parse_ev_name(os.path.splitext(
            os.path.basename(r.input_path))[0])
        assert r.ev == ev
        assert os.path.basename(r.target_path) == f"{stem}.png"


def test_index_dataset_same_index_regardless_of_creation_order(tmp_path):
    r1, r2 = str(tmp_path / "a"), str(tmp_path / "b")
    build_pair_tree(r1, n_stems=3)
    # same content, different write order
    build_pair_tree(r2, n_stems=3)
    i1, i2 = index_dataset(r1), index_dataset(r2)
    assert [os.path.basename(r.input_path) for r in i1.records] == \
           [os.path.basename(r.input_path) for r in i2.records]


def test_index_dataset_reports_all_problems_at_once(tmp_path, pair_tree):
    save_image(checker_image(8, 0),
               os.path.join(pair_tree, "input", "ghost_P1.png"))
    save_image(checker_image(8, 1),
               os.path.join(pair_tree, "input", "s0_X9.png"))
    save_image(checker_image(8, 2),
               os.path.join(pair_tree, "target", "lonely.png"))
    with pytest.raises(DataError) as ei:
        index_dataset(pair_tree)
    msg = str(ei.value)
    assert "ghost_P1.png" in msg      # input without target
    assert "s0_X9.png" in msg         # unparseable tag
    assert "lonely" in msg            # target never referenced


def test_index_dataset_rejects_out_of_domain_ev(pair_tree):
    save_image(checker_image(8, 3),
               os.path.join(pair_tree, "input", "s0_P3.png"))
    with pytest.raises(DataError, match="s0_P3.png"):
        index_dataset(pair_tree)


def test_index_dataset_requires_layout(tmp_path):
    with pytest.raises(DataError, match="lacks directory 'input'"):
        index_dataset(str(tmp_path))
    os.makedirs(tmp_path / "input")
    with pytest.raises(DataError, match="lacks directory 'target'"):
        index_dataset(str(tmp_path))
    os.makedirs(tmp_path / "target")
    with pytest.raises(DataError, match="no image pairs"):
        index_dataset(str(tmp_path))


def test_index_dataset_ignores_non_image_files(pair_tree):
    with open(os.path.join(pair_tree, "input", "notes.txt"), "w") as fh:
        fh.write("not an image")
    assert len(index_dataset(pair_tree)) == 4
