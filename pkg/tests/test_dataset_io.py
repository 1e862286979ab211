import numpy as np
import pytest

from loft import PhasePattern, gen_tm
from loft.dataset_io import (
    ContainerFormatError,
    ContainerTruncationError,
    export_image,
    gen_dataset,
    load_dataset,
    load_named_tensors,
    load_tm,
    save_dataset,
    save_named_tensors,
    save_tm,
    verify_pairing,
)


@pytest.fixture(scope="module")
def small_tm():
    return gen_tm(16, 64, seed=21)


class TestGenDataset:
    def test_deterministic(self, small_tm):
        a = gen_dataset(small_tm, 100, seed=5)
        b = gen_dataset(small_tm, 100, seed=5)
        assert np.array_equal(a.phases, b.phases)
        assert np.array_equal(a.speckles, b.speckles)

    def test_shapes_and_range(self, small_tm):
        ds = gen_dataset(small_tm, 40, seed=1)
        assert ds.phases.shape == (40, 4, 4)
        assert ds.speckles.shape == (40, 8, 8)
        assert ds.phases.min() >= 0 and ds.phases.max() <= 1
        assert np.allclose(ds.speckles.max(axis=(1, 2)), 1.0)

    def test_quantization_grid(self, small_tm):
        ds = gen_dataset(small_tm, 30, seed=2, quantize_levels=32)
        scaled = ds.phases * 32
        assert np.allclose(scaled, np.round(scaled))
        assert ds.phases.max() <= 31 / 32

    def test_no_quantization(self, small_tm):
        ds = gen_dataset(small_tm, 30, seed=2, quantize_levels=None)
        scaled = ds.phases * 32
        assert not np.allclose(scaled, np.round(scaled))

    def test_single_mode_speckle_is_one(self):
        tm = gen_tm(1, 1, seed=3)
        ds = gen_dataset(tm, 1, seed=7, quantize_levels=None)
        assert np.allclose(ds.speckles, 1.0)

    def test_rejects_bad_levels(self, small_tm):
        with pytest.raises(ValueError):
            gen_dataset(small_tm, 5, seed=1, quantize_levels=1)

    def test_pairing_invariant(self, small_tm):
        ds = gen_dataset(small_tm, 50, seed=9)
        assert verify_pairing(ds, small_tm)

    def test_phase_histogram_uniform(self, small_tm):
        ds = gen_dataset(small_tm, 1000, seed=11, quantize_levels=32)
        counts = np.bincount((ds.phases * 32).astype(int).ravel(), minlength=32)
        n = counts.sum()
        expected = n / 32
        sigma = np.sqrt(n * (1 / 32) * (31 / 32))
        assert np.all(np.abs(counts - expected) <= 3 * sigma)

    @pytest.mark.slow
    def test_paper_scale(self):
        tm = gen_tm(1024, 4096, seed=30)
        ds = gen_dataset(tm, 12888, seed=31, quantize_levels=32)
        assert ds.phases.shape == (12888, 32, 32)
        assert ds.speckles.shape == (12888, 64, 64)


class TestContainerRoundTrip:
    def test_dataset_bit_exact(self, small_tm, tmp_path):
        ds = gen_dataset(small_tm, 100, seed=4)
        path = tmp_path / "d.loft"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert np.array_equal(back.phases, ds.phases)
        assert np.array_equal(back.speckles, ds.speckles)
        assert np.array_equal(back.norm_max, ds.norm_max)
        assert back.tm_seed == ds.tm_seed and back.levels == ds.levels

    def test_tm_round_trip(self, small_tm, tmp_path):
        path = tmp_path / "t.loft"
        save_tm(small_tm, path)
        back = load_tm(path)
        assert np.array_equal(back.entries, small_tm.entries)
        assert back.seed == small_tm.seed

    def test_named_tensors_mixed_dtypes(self, tmp_path):
        items = {
            "a": (np.arange(6, dtype="<f8").reshape(2, 3), {"k": "v"}),
            "b": (np.arange(4, dtype="<f4"), {}),
            "c": ((np.arange(3) + 1j * np.arange(3)).astype("<c16"), {}),
        }
        path = tmp_path / "n.loft"
        save_named_tensors(path, items)
        back = load_named_tensors(path)
        for name, (arr, meta) in items.items():
            assert np.array_equal(back[name][0], arr)
            assert back[name][1] == meta

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.loft"
        save_named_tensors(path, {"x": (np.zeros(2), {})})
        raw = bytearray(path.read_bytes())
        raw[5:9] = b"JUNK"  # magic sits after the u32 name length + name
        path.write_bytes(raw)
        with pytest.raises(ContainerFormatError, match="LOFT"):
            load_named_tensors(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "cut.loft"
        save_named_tensors(path, {"x": (np.zeros(100), {})})
        raw = path.read_bytes()
        path.write_bytes(raw[:-40])
        with pytest.raises(ContainerTruncationError):
            load_named_tensors(path)


class TestExportImage:
    def read_pgm(self, path):
        data = path.read_bytes()
        header, pixels = data.split(b"255\n", 1)
        dims = header.split(b"\n")[1].split()
        w, h = int(dims[0]), int(dims[1])
        return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)

    def test_all_zero_is_black(self, tmp_path):
        p = tmp_path / "z.pgm"
        export_image(np.zeros((4, 4)), p)
        assert (self.read_pgm(p) == 0).all()

    def test_all_one_is_white(self, tmp_path):
        p = tmp_path / "o.pgm"
        export_image(np.ones((4, 4)), p)
        assert (self.read_pgm(p) == 255).all()

    def test_half_rounds_up_to_128(self, tmp_path):
        p = tmp_path / "h.pgm"
        export_image(np.full((2, 2), 0.5), p)
        assert (self.read_pgm(p) == 128).all()

    def test_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            export_image(np.array([[1.5]]), tmp_path / "x.pgm")

    def test_accepts_patterns(self, tmp_path):
        export_image(PhasePattern(values=np.zeros((3, 3))), tmp_path / "p.pgm")
