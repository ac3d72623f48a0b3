import numpy as np
import pytest
from PIL import Image

from camrefine.coretypes import IGNORE, LabelMap, ResponseMap, SaliencyMap
from camrefine.dataio import (VOC_CLASSES, load_dataset, load_response_map,
                              read_image, read_label_png, read_saliency_png,
                              save_response_map, voc_palette, write_label_png,
                              write_saliency_png)
from camrefine.errors import DataFormatError

from conftest import data_path

# first entries of the canonical VOC colormap
VOC_COLORS = [
    (0, 0, 0), (128, 0, 0), (0, 128, 0), (128, 128, 0), (0, 0, 128),
    (128, 0, 128), (0, 128, 128), (128, 128, 128), (64, 0, 0), (192, 0, 0),
    (64, 128, 0), (192, 128, 0), (64, 0, 128), (192, 0, 128), (64, 128, 128),
    (192, 128, 128), (0, 64, 0), (128, 64, 0), (0, 192, 0), (128, 192, 0),
    (0, 64, 128),
]


class TestPalette:
    def test_matches_canonical_voc_colors(self):
        palette = voc_palette()
        for idx, rgb in enumerate(VOC_COLORS):
            assert tuple(palette[idx * 3:idx * 3 + 3]) == rgb
        assert len(palette) == 768
        assert len(VOC_CLASSES) == 20


class TestLabelPng:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        data = rng.integers(0, 21, size=(16, 16)).astype(np.int32)
        data[0, :5] = IGNORE
        label = LabelMap(data=data, num_classes=20)
        path = str(tmp_path / "label.png")
        write_label_png(label, path)
        back = read_label_png(path)
        assert np.array_equal(back.data, label.data)

    def test_palette_written(self, tmp_path):
        label = LabelMap(data=np.zeros((4, 4), dtype=np.int32), num_classes=20)
        path = str(tmp_path / "label.png")
        write_label_png(label, path)
        with Image.open(path) as im:
            assert im.mode == "P"
            palette = im.getpalette()
        assert tuple(palette[3:6]) == (128, 0, 0)

    def test_out_of_range_index_named_in_error(self, tmp_path):
        arr = np.full((4, 4), 37, dtype=np.uint8)
        im = Image.fromarray(arr, mode="P")
        im.putpalette(voc_palette())
        path = str(tmp_path / "bad.png")
        im.save(path)
        with pytest.raises(DataFormatError, match="37"):
            read_label_png(path)

    def test_non_indexed_png_rejected(self, tmp_path):
        path = str(tmp_path / "rgb.png")
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(DataFormatError, match="palette"):
            read_label_png(path)

    def test_fixture_label_histogram(self, goldens):
        # class pixel counts must equal the painted blob areas
        spec = goldens["images"]["blob3a"]
        label = read_label_png(data_path("labels", "blob3a.png"), num_classes=3)
        for blob in spec["blobs"]:
            count = int((label.data == blob["class"]).sum())
            assert count == blob["rect"][2] * blob["rect"][3]


class TestSaliencyPng:
    def test_extremes(self, tmp_path):
        for value, expected in ((255, 1.0), (0, 0.0)):
            path = str(tmp_path / f"s{value}.png")
            Image.fromarray(np.full((4, 4), value, dtype=np.uint8), mode="L").save(path)
            sal = read_saliency_png(path)
            assert (sal.data == expected).all()

    def test_gradient_ramp_scaled_by_255(self, tmp_path):
        ramp = np.tile(np.arange(256, dtype=np.uint8), (2, 1))
        path = str(tmp_path / "ramp.png")
        Image.fromarray(ramp, mode="L").save(path)
        sal = read_saliency_png(path)
        assert np.abs(sal.data - ramp.astype(np.float64) / 255.0).max() < 1e-9

    def test_multichannel_rejected(self, tmp_path):
        path = str(tmp_path / "rgb.png")
        Image.fromarray(np.zeros((4, 4, 3), dtype=np.uint8), mode="RGB").save(path)
        with pytest.raises(DataFormatError, match="grayscale"):
            read_saliency_png(path)

    def test_write_read_round_trip(self, tmp_path):
        sal = SaliencyMap(data=(np.arange(16).reshape(4, 4) / 15).astype(np.float32))
        path = str(tmp_path / "out.png")
        write_saliency_png(sal, path)
        back = read_saliency_png(path)
        assert np.abs(back.data - sal.data).max() <= 1 / 255 / 2 + 1e-9


class TestResponseMapIo:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(1)
        m = ResponseMap(class_id=3, data=rng.random((9, 7)).astype(np.float32),
                        normalized=False)
        path = str(tmp_path / "map.npy")
        save_response_map(m, path, config_digest="abc123")
        back = load_response_map(path)
        assert np.array_equal(back.data, m.data)
        assert back.class_id == 3 and back.normalized == m.normalized
        meta = open(path + ".meta").read()
        assert "config_digest = abc123" in meta

    def test_truncated_file_is_corrupt_error(self, tmp_path):
        m = ResponseMap(class_id=0, data=np.ones((8, 8), dtype=np.float32))
        path = str(tmp_path / "map.npy")
        save_response_map(m, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:40])
        with pytest.raises(DataFormatError, match="corrupt"):
            load_response_map(path)

    def test_sidecar_shape_mismatch(self, tmp_path):
        m = ResponseMap(class_id=0, data=np.ones((4, 4), dtype=np.float32))
        path = str(tmp_path / "map.npy")
        save_response_map(m, path)
        meta = open(path + ".meta").read().replace("height = 4", "height = 9")
        open(path + ".meta", "w").write(meta)
        with pytest.raises(DataFormatError, match="sidecar"):
            load_response_map(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataFormatError, match="not found"):
            load_response_map(str(tmp_path / "nope.npy"))

    def test_npy_is_little_endian_float32(self, tmp_path):
        m = ResponseMap(class_id=0, data=np.ones((2, 2), dtype=np.float32))
        path = str(tmp_path / "map.npy")
        save_response_map(m, path)
        header = open(path, "rb").read(128)
        assert header[:6] == b"\x93NUMPY"
        assert b"<f4" in header


class TestLoadDataset:
    def test_fixture_dataset_sorted_and_complete(self, train_dataset):
        assert [e.image_id for e in train_dataset.entries] == \
            ["blob1a", "blob1b", "blob2a", "blob3a"]
        assert train_dataset.rejected == ()
        assert train_dataset.entries[2].class_ids == (1, 2)
        assert train_dataset.entries[3].class_ids == (1, 2, 3)

    def test_missing_image_rejected_others_kept(self, tmp_path):
        list_file = tmp_path / "list.txt"
        list_file.write_text("blob1a\nghost\n")
        ds = load_dataset(str(list_file), data_path("images"),
                          class_names=("red", "green", "blue"))
        assert [e.image_id for e in ds.entries] == ["blob1a"]
        assert len(ds.rejected) == 1 and ds.rejected[0][0] == "ghost"

    def test_unknown_class_name_fatal(self, tmp_path):
        list_file = tmp_path / "list.txt"
        list_file.write_text("blob1a\n")
        class_file = tmp_path / "classes.txt"
        class_file.write_text("blob1a dragon\n")
        with pytest.raises(DataFormatError, match="dragon"):
            load_dataset(str(list_file), data_path("images"), class_file=str(class_file),
                         class_names=("red", "green", "blue"))

    def test_duplicate_ids_rejected(self, tmp_path):
        list_file = tmp_path / "list.txt"
        list_file.write_text("blob1a\nblob1a\n")
        with pytest.raises(DataFormatError, match="duplicate"):
            load_dataset(str(list_file), data_path("images"))

    def test_unreadable_list_file(self, tmp_path):
        with pytest.raises(DataFormatError):
            load_dataset(str(tmp_path / "missing.txt"), data_path("images"))


class TestReadImage:
    def test_fixture_image_loads_in_unit_range(self):
        img = read_image(data_path("images", "blob1a.png"))
        assert img.data.shape == (128, 128, 3)
        assert 0.0 <= img.data.min() and img.data.max() <= 1.0

    def test_uint8_values_exact(self, tmp_path):
        arr = np.full((2, 2, 3), 51, dtype=np.uint8)
        path = str(tmp_path / "img.png")
        Image.fromarray(arr, mode="RGB").save(path)
        img = read_image(path)
        assert np.allclose(img.data, 51 / 255)
