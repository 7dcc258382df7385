"""Raster, image, sidecar and histogram file format tests."""

import numpy as np
import pytest

from neuralterrain.grids import NODATA, GridSpec, TerrainGrid
from neuralterrain.raster_io import (
    read_asc,
    read_image,
    read_sidecar,
    write_asc,
    write_histogram_csv,
    write_image,
    write_sidecar,
)


class TestAscRoundTrip:
    def test_bitwise_round_trip_with_nodata(self, tmp_path):
        rng = np.random.default_rng(42)
        spec = GridSpec(-1234.5678901234, 98.7654321, 3.3333333333333335, 17, 9)
        heights = rng.standard_normal(spec.shape) * 1e3
        valid = rng.uniform(size=spec.shape) > 0.2
        grid = TerrainGrid(spec, heights, valid)
        path = tmp_path / "dtm.asc"
        write_asc(path, grid)
        back = read_asc(path)
        assert back.spec == grid.spec
        np.testing.assert_array_equal(back.heights, grid.heights)
        np.testing.assert_array_equal(back.valid, grid.valid)

    def test_header_contents(self, tmp_path):
        grid = TerrainGrid(GridSpec(10.0, 20.0, 2.5, 3, 2), np.ones((2, 3)))
        path = tmp_path / "dtm.asc"
        write_asc(path, grid)
        text = path.read_text().splitlines()
        assert text[0] == "ncols 3"
        assert text[1] == "nrows 2"
        assert text[2] == "xllcorner 10"
        assert text[3] == "yllcorner 20"
        assert text[4] == "cellsize 2.5"
        assert text[5] == "NODATA_value -99999"

    def test_rows_written_north_to_south(self, tmp_path):
        # Memory row 0 is the south edge; the file starts at the north.
        grid = TerrainGrid(
            GridSpec(0.0, 0.0, 1.0, 2, 2), [[1.0, 2.0], [3.0, 4.0]]
        )
        path = tmp_path / "dtm.asc"
        write_asc(path, grid)
        body = path.read_text().splitlines()[6:]
        assert body == ["3 4", "1 2"]

    def test_reads_hand_written_raster(self, tmp_path):
        path = tmp_path / "ref.asc"
        path.write_text(
            "ncols 3\nnrows 2\nxllcorner 5\nyllcorner -5\ncellsize 10\n"
            "NODATA_value -1\n"
            "7 8 9\n1 -1 3\n"
        )
        grid = read_asc(path)
        np.testing.assert_array_equal(
            grid.heights, [[1.0, NODATA, 3.0], [7.0, 8.0, 9.0]]
        )
        np.testing.assert_array_equal(
            grid.valid, [[True, False, True], [True, True, True]]
        )

    def test_wrapped_rows_parse(self, tmp_path):
        path = tmp_path / "wrapped.asc"
        path.write_text(
            "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n"
            "1 2\n3\n4 5 6\n"
        )
        grid = read_asc(path)
        np.testing.assert_array_equal(grid.heights, [[4.0, 5.0, 6.0], [1.0, 2.0, 3.0]])

    def test_body_size_mismatch_rejected(self, tmp_path):
        path = tmp_path / "short.asc"
        path.write_text(
            "ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n"
        )
        with pytest.raises(ValueError, match="header promises"):
            read_asc(path)

    def test_missing_header_key_rejected(self, tmp_path):
        path = tmp_path / "bad.asc"
        path.write_text("ncols 2\nnrows 1\ncellsize 1\n1 2\n")
        with pytest.raises(ValueError, match="header lacks"):
            read_asc(path)


class TestImageRoundTrip:
    def test_rgb_quantized_round_trip(self, tmp_path):
        rng = np.random.default_rng(42)
        image = rng.uniform(size=(7, 5, 3))
        path = tmp_path / "view.ppm"
        write_image(path, image)
        back = read_image(path)
        expected = np.clip(np.rint(image * 255.0), 0, 255) / 255.0
        np.testing.assert_array_equal(back, expected)
        assert path.read_bytes()[:2] == b"P6"

    def test_gray_uses_pgm(self, tmp_path):
        image = np.linspace(0.0, 1.0, 12).reshape(3, 4)
        path = tmp_path / "view.pgm"
        write_image(path, image)
        assert path.read_bytes()[:2] == b"P5"
        back = read_image(path)
        assert back.shape == (3, 4, 1)

    def test_values_clipped_to_unit_range(self, tmp_path):
        path = tmp_path / "clip.pgm"
        write_image(path, np.array([[-0.5, 1.5]]))
        back = read_image(path)
        np.testing.assert_array_equal(back[..., 0], [[0.0, 1.0]])

    def test_comment_in_header(self, tmp_path):
        path = tmp_path / "comment.pgm"
        data = bytes([0, 128, 255, 64])
        path.write_bytes(b"P5\n# made by hand\n2 2\n255\n" + data)
        image = read_image(path)
        np.testing.assert_allclose(
            image[..., 0], np.array([[0, 128], [255, 64]]) / 255.0
        )

    def test_bad_inputs_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="image must be"):
            write_image(tmp_path / "x.ppm", np.zeros((2, 2, 4)))
        path = tmp_path / "deep.pgm"
        path.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
        with pytest.raises(ValueError, match="8-bit"):
            read_image(path)


class TestSidecarAndHistogram:
    def test_sidecar_round_trip(self, tmp_path):
        spec = GridSpec(-12.5, 7.25, 0.125, 40, 30)
        path = tmp_path / "texture.ppm.txt"
        write_sidecar(path, spec, metadata={"seed": 7, "tool": "neuralterrain"})
        pairs = read_sidecar(path)
        assert GridSpec.from_dict(
            {k: pairs[k] for k in spec.to_dict()}
        ) == spec
        assert pairs["seed"] == "7"
        assert pairs["tool"] == "neuralterrain"

    def test_sidecar_skips_comments_and_blanks(self, tmp_path):
        path = tmp_path / "meta.txt"
        path.write_text("# header\n\nkey = value\n")
        assert read_sidecar(path) == {"key": "value"}

    def test_histogram_csv(self, tmp_path):
        edges = np.array([-1.0, 0.0, 1.0, 2.0])
        counts = np.array([5, 0, 12])
        path = tmp_path / "hist.csv"
        write_histogram_csv(path, edges, counts)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "bin_left,bin_right,count"
        assert len(lines) == 4
        assert lines[1].split(",") == ["-1", "0", "5"]
        assert lines[3].split(",") == ["1", "2", "12"]

    def test_histogram_shape_mismatch(self, tmp_path):
        with pytest.raises(ValueError, match="one more edge"):
            write_histogram_csv(tmp_path / "h.csv", [0.0, 1.0], [1, 2])
