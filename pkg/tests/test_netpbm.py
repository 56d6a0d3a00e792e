import numpy as np
import pytest

from heatwarp.netpbm import flow_to_color, read_pgm, write_pgm, write_ppm
from heatwarp.util import ContractError


class TestPgm:
    def test_round_trip_quantized(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.uniform(0, 1, (12, 17))
        path = tmp_path / "img.pgm"
        write_pgm(path, image)
        back = read_pgm(path)
        assert back.shape == image.shape
        assert np.abs(back - image).max() <= 0.5 / 255 + 1e-12

    def test_second_round_trip_exact(self, tmp_path):
        rng = np.random.default_rng(1)
        image = rng.uniform(0, 1, (8, 8))
        write_pgm(tmp_path / "a.pgm", image)
        once = read_pgm(tmp_path / "a.pgm")
        write_pgm(tmp_path / "b.pgm", once)
        twice = read_pgm(tmp_path / "b.pgm")
        np.testing.assert_array_equal(once, twice)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.pgm"
        path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
        with pytest.raises(ContractError, match="magic"):
            read_pgm(path)

    def test_comment_in_header_ok(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 64, 128, 255]))
        img = read_pgm(path)
        assert img[1, 1] == pytest.approx(1.0)


class TestPpmAndFlow:
    def test_ppm_header_and_size(self, tmp_path):
        rgb = np.zeros((4, 6, 3))
        rgb[..., 0] = 1.0
        path = tmp_path / "img.ppm"
        write_ppm(path, rgb)
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n6 4\n255\n")
        assert len(raw) == len(b"P6\n6 4\n255\n") + 4 * 6 * 3

    def test_flow_color_zero_is_white(self):
        rgb = flow_to_color(np.zeros((2, 4, 4)), max_magnitude=1.0)
        np.testing.assert_allclose(rgb, 1.0)

    def test_flow_color_direction_dependent(self):
        flow = np.zeros((2, 1, 2))
        flow[1, 0, 0] = 1.0    # +x
        flow[0, 0, 1] = 1.0    # +y
        rgb = flow_to_color(flow, max_magnitude=1.0)
        assert not np.allclose(rgb[0, 0], rgb[0, 1])

    def test_flow_shape_validated(self):
        with pytest.raises(ContractError, match="flow"):
            flow_to_color(np.zeros((3, 4, 4)))
