import os

import numpy as np
import pytest

from field_engine.scene import MaskImage
from services.dataset_service import (
    DatasetFormatError, decode_mask_png, decode_png, encode_mask_png, encode_png, load_dataset, read_pfm,
    save_dataset, write_pfm,
)


@pytest.fixture
def saved(scene, tmp_path):
    path = str(tmp_path / "object")
    save_dataset(scene["datasets"]["object"], path)
    return path


class TestImageCodecs:
    def test_rgb_png_quantises_to_8_bits(self):
        rgb = np.random.default_rng(0).random((5, 7, 3))
        decoded, alpha = decode_png(encode_png(rgb))
        assert alpha is None
        assert decoded.shape == (5, 7, 3)
        assert np.abs(decoded - rgb).max() <= 0.5 / 255 + 1e-12

    def test_rgba_png_keeps_alpha(self):
        rgb = np.full((2, 2, 3), 0.5)
        alpha = np.array([[0.0, 1.0], [1.0, 0.0]])
        _, decoded_alpha = decode_png(encode_png(rgb, alpha))
        np.testing.assert_array_equal(decoded_alpha, alpha)

    def test_mask_png(self):
        mask = MaskImage(np.array([[0, 1, 1], [1, 0, 0]], dtype=np.uint8))
        np.testing.assert_array_equal(decode_mask_png(encode_mask_png(mask)).data, mask.data)

    def test_pfm(self, tmp_path):
        depth = np.arange(12, dtype=np.float64).reshape(3, 4) / 7.0
        path = str(tmp_path / "d.pfm")
        write_pfm(path, depth)
        with open(path, "rb") as f:
            assert f.read(3) == b"Pf\n"
        np.testing.assert_allclose(read_pfm(path), depth.astype(np.float32))

    def test_pfm_rejects_colour(self, tmp_path):
        path = tmp_path / "c.pfm"
        path.write_bytes(b"PF\n1 1\n-1.0\n" + b"\x00" * 12)
        with pytest.raises(DatasetFormatError, match="greyscale"):
            read_pfm(str(path))


class TestSaveLoad:
    def test_layout(self, saved, scene):
        n = len(scene["datasets"]["object"])
        for sub in ("images", "masks", "depth"):
            assert len(os.listdir(os.path.join(saved, sub))) == n
        assert os.path.exists(os.path.join(saved, "cameras.json"))
        assert os.path.exists(os.path.join(saved, "meta.json"))

    def test_round_trip(self, saved, scene):
        original = scene["datasets"]["object"]
        loaded = load_dataset(saved)
        assert len(loaded) == len(original)
        assert loaded.near == original.near and loaded.far == original.far
        assert loaded.background is None and loaded.kind == "object"
        np.testing.assert_array_equal(loaded.bounds_min, original.bounds_min)
        for a, b in zip(loaded.views, original.views):
            np.testing.assert_allclose(a.camera.cam_to_world, b.camera.cam_to_world)
            assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255 + 1e-12
            assert np.abs(a.alpha - b.alpha).max() <= 0.5 / 255 + 1e-12
            np.testing.assert_array_equal(a.mask.data, b.mask.data)
            np.testing.assert_allclose(a.depth, b.depth, rtol=1e-6)

    def test_metadata_byte_identical_after_resave(self, saved, tmp_path):
        again = str(tmp_path / "again")
        save_dataset(load_dataset(saved), again)
        for name in ("cameras.json", "meta.json"):
            with open(os.path.join(saved, name), "rb") as a, open(os.path.join(again, name), "rb") as b:
                assert a.read() == b.read()

    def test_background_colour_kept(self, scene, tmp_path):
        path = str(tmp_path / "full")
        save_dataset(scene["datasets"]["full"], path)
        loaded = load_dataset(path)
        assert loaded.background == tuple(scene["spec"].sky)
        assert all(v.alpha is None for v in loaded.views)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(DatasetFormatError, match="not found"):
            load_dataset(str(tmp_path / "nope"))

    def test_missing_cameras(self, saved):
        os.remove(os.path.join(saved, "cameras.json"))
        with pytest.raises(DatasetFormatError, match="missing cameras.json"):
            load_dataset(saved)

    def test_missing_image(self, saved):
        os.remove(os.path.join(saved, "images", "000.png"))
        with pytest.raises(DatasetFormatError, match="images/000.png"):
            load_dataset(saved)

    def test_malformed_camera(self, saved):
        with open(os.path.join(saved, "cameras.json"), "w") as f:
            f.write('[{"fx": 1}]')
        with pytest.raises(DatasetFormatError, match="missing field"):
            load_dataset(saved)

    def test_camera_entry_not_an_object(self, saved):
        with open(os.path.join(saved, "cameras.json"), "w") as f:
            f.write("[5, 5, 5, 5]")
        with pytest.raises(DatasetFormatError, match=r"cameras.json\[0\].*must be an object"):
            load_dataset(saved)

    def test_cam_to_world_not_a_list(self, saved):
        with open(os.path.join(saved, "cameras.json"), "w") as f:
            f.write('[{"fx": 1, "fy": 1, "cx": 0, "cy": 0, "width": 2, "height": 2, "cam_to_world": 7}]')
        with pytest.raises(DatasetFormatError, match="cam_to_world"):
            load_dataset(saved)

    @pytest.mark.parametrize("folder", ["images", "masks"])
    def test_corrupt_png_names_file(self, saved, folder):
        with open(os.path.join(saved, folder, "001.png"), "wb") as f:
            f.write(b"garbage")
        with pytest.raises(DatasetFormatError, match=f"{folder}/001.png"):
            load_dataset(saved)

    def test_bad_pfm_scale(self, saved):
        path = os.path.join(saved, "depth", "000.pfm")
        with open(path, "wb") as f:
            f.write(b"Pf\n1 1\nnot-a-number\n" + b"\x00" * 4)
        with pytest.raises(DatasetFormatError, match="000.pfm"):
            load_dataset(saved)

    def test_meta_not_an_object(self, saved):
        with open(os.path.join(saved, "meta.json"), "w") as f:
            f.write("3")
        with pytest.raises(DatasetFormatError, match="meta.json"):
            load_dataset(saved)
