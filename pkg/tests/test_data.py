import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbcc import data
from dbcc.errors import FormatError
from dbcc.tensor import Rng


class TestPPM:
    @pytest.mark.parametrize("maxval", [255, 65535])
    def test_round_trip_exact_on_grid(self, maxval):
        rng = np.random.default_rng(maxval)
        img = rng.integers(0, maxval + 1, size=(5, 7, 3)) / maxval
        back = data.decode_ppm(data.encode_ppm(img, maxval))
        assert back.shape == (5, 7, 3)
        np.testing.assert_array_equal(back, img)

    def test_quantization_error_bound(self):
        img = np.random.default_rng(0).random((4, 4, 3))
        back = data.decode_ppm(data.encode_ppm(img, 255))
        assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_sixteen_bit_is_big_endian(self):
        img = np.zeros((1, 1, 3))
        img[0, 0, 0] = 258 / 65535
        raw = data.encode_ppm(img)
        assert raw.endswith(b"\x01\x02\x00\x00\x00\x00")

    def test_header_comments(self):
        raw = b"P6\n# made by hand\n2 1\n# depth\n255\n" + bytes([255, 0, 0, 0, 255, 0])
        img = data.decode_ppm(raw)
        np.testing.assert_array_equal(img[0, 0], [1, 0, 0])
        np.testing.assert_array_equal(img[0, 1], [0, 1, 0])

    def test_rejects_ascii_ppm(self):
        with pytest.raises(FormatError):
            data.decode_ppm(b"P3\n1 1\n255\n0 0 0\n")

    def test_truncated(self):
        raw = data.encode_ppm(np.ones((3, 3, 3)), 255)
        with pytest.raises(FormatError):
            data.decode_ppm(raw[:-1])

    def test_file_round_trip(self, tmp_path):
        img = np.linspace(0, 1, 48).reshape(4, 4, 3)
        data.write_ppm(tmp_path / "x.ppm", img)
        np.testing.assert_allclose(data.read_ppm(tmp_path / "x.ppm"), img, atol=1e-5)


class TestFormation:
    def test_gamma_values(self):
        np.testing.assert_allclose(data.gamma(np.array([0.0, 1.0, 0.25]), 0.5), [0, 1, 0.5])

    def test_synthesize_grey(self):
        s = data.synthesize(np.full((2, 2, 3), 0.5), [0.5, 1.0, 0.25])
        np.testing.assert_allclose(s.image[0, 0], [0.25, 0.5, 0.125])
        np.testing.assert_allclose(s.gt, np.array([0.5, 1.0, 0.25]) / np.linalg.norm([0.5, 1.0, 0.25]))

    @given(st.lists(st.floats(0.1, 1.0), min_size=3, max_size=3), st.integers(0, 2**16))
    @settings(max_examples=50)
    def test_white_balance_inverts_synthesize(self, L, seed):
        base = np.random.default_rng(seed).random((4, 4, 3)) * 0.9
        s = data.synthesize(base, L)
        np.testing.assert_allclose(data.white_balance(s.image, L), base, atol=1e-12)
        # exposure of the illuminant estimate does not matter
        np.testing.assert_allclose(data.white_balance(s.image, 3.0 * np.array(L)), base, atol=1e-12)

    def test_zero_channel_rejected(self):
        with pytest.raises(ValueError):
            data.synthesize(np.ones((2, 2, 3)), [1, 0, 1])
        with pytest.raises(ValueError):
            data.white_balance(np.ones((2, 2, 3)), [1, 0, 1])

    def test_noise_needs_rng(self):
        with pytest.raises(ValueError):
            data.synthesize(np.ones((2, 2, 3)), [1, 1, 1], noise=0.01)
        s = data.synthesize(np.full((8, 8, 3), 0.5), [1, 1, 1], Rng(0), noise=0.01)
        assert 0 < np.std(s.image) < 0.02

    def test_masks(self):
        img = np.ones((4, 6, 3))
        out = data.apply_mask(img, [(1, 0, 2, 3)])
        assert out[:3, 1:3].sum() == 0 and out.sum() == 3 * (24 - 6)
        assert img.sum() == 72
        with pytest.raises(ValueError):
            data.check_rects([(5, 0, 2, 1)], 4, 6)


class TestManifest:
    def _write(self, root, text, images=("a.ppm",)):
        for name in images:
            data.write_ppm(root / name, np.full((8, 8, 3), 0.5))
        (root / "manifest.csv").write_text(text)
        return root / "manifest.csv"

    def test_parse(self, tmp_path):
        p = self._write(tmp_path, "file,gt_r,gt_g,gt_b\na.ppm,0.5,0.6,0.7,1,2,3,4\n")
        m = data.read_manifest(p)
        assert len(m) == 1 and m.entries[0].mask == [(1, 2, 3, 4)]
        assert m.gamma_applied is False
        s = m.samples()[0]
        assert abs(np.linalg.norm(s.gt) - 1) < 1e-12

    def test_gamma_comment(self, tmp_path):
        p = self._write(tmp_path, "# gamma_applied = true\nfile,gt_r,gt_g,gt_b\na.ppm,1,1,1\n")
        assert data.read_manifest(p).gamma_applied is True

    @pytest.mark.parametrize(
        "body",
        ["file,r,g,b\na.ppm,1,1,1\n", "file,gt_r,gt_g,gt_b\na.ppm,1,1\n", "file,gt_r,gt_g,gt_b\na.ppm,x,1,1\n",
         "file,gt_r,gt_g,gt_b\na.ppm,0,0,0\n", "file,gt_r,gt_g,gt_b\na.ppm,1,1,1,0,0,1\n"],
    )
    def test_malformed(self, tmp_path, body):
        with pytest.raises(FormatError):
            data.read_manifest(self._write(tmp_path, body))

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="manifest not found"):
            data.read_manifest(tmp_path / "nope.csv")
        p = self._write(tmp_path, "file,gt_r,gt_g,gt_b\nb.ppm,1,1,1\n")
        with pytest.raises(FileNotFoundError):
            data.read_manifest(p)

    def test_mask_outside_image(self, tmp_path):
        p = self._write(tmp_path, "file,gt_r,gt_g,gt_b\na.ppm,1,1,1,6,6,4,4\n")
        m = data.read_manifest(p)
        with pytest.raises(ValueError):
            m.samples()

    def test_write_read_round_trip(self, tmp_path):
        entries = [data.ManifestEntry("a.ppm", (0.1, 0.2, 0.3), [(0, 0, 2, 2)])]
        data.write_ppm(tmp_path / "a.ppm", np.ones((4, 4, 3)))
        data.write_manifest(tmp_path / "m.csv", entries, gamma_applied=True)
        m = data.read_manifest(tmp_path / "m.csv")
        assert m.entries == entries and m.gamma_applied


class TestSynthetic:
    def test_scene_range_and_neutral_patch(self):
        scene = data.random_scene(Rng(0), 64)
        assert scene.shape == (64, 64, 3)
        assert scene.min() >= 0 and scene.max() <= 0.9
        bright = scene.max(axis=2) >= 0.7
        assert bright.any()
        px = scene[bright]
        np.testing.assert_array_equal(px[:, 0], px[:, 1])

    def test_dataset_deterministic(self, tmp_path):
        a = data.generate_synthetic_dataset(4, tmp_path / "a", Rng(3), size=16)
        b = data.generate_synthetic_dataset(4, tmp_path / "b", Rng(3), size=16)
        for ea, eb in zip(a.entries, b.entries):
            assert ea == eb
            assert (tmp_path / "a" / ea.file).read_bytes() == (tmp_path / "b" / eb.file).read_bytes()
        c = data.generate_synthetic_dataset(4, tmp_path / "c", Rng(4), size=16)
        assert a.entries[0].gt != c.entries[0].gt

    def test_illuminant_box(self):
        rng = Rng(5)
        for _ in range(200):
            L = data.random_illuminant(rng)
            rel = L / L.max()
            assert abs(np.linalg.norm(L) - 1) < 1e-12 and rel.min() >= 0.4 - 1e-12
