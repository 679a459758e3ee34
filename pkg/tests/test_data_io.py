import struct

import numpy as np
import pytest

from resadapt.data_io import (Dataset, SyntheticDomainSpec, decode_checkpoint, encode_checkpoint,
                              encode_tensor, generate_domain, import_bitmap_dirs, load_checkpoint,
                              load_dataset, load_network, load_tensor, save_checkpoint,
                              save_dataset, save_network, save_tensor, subsample)
from resadapt.errors import BadMagicError, ConfigError, SizeMismatchError, VersionError
from resadapt.network import Network, NetworkConfig, PlacementConfig
from resadapt.rng import CounterRNG, derive_seed

SPLITMIX_1234567 = [6457827717110365317, 3203168211198807973, 9817491932198370423,
                    4593380528125082431, 16408922859458223821]


class TestRng:
    def test_published_vectors(self):
        assert [int(v) for v in CounterRNG(1234567).u64(5)] == SPLITMIX_1234567

    def test_counter_access(self):
        r = CounterRNG(1234567, counter=3)
        assert [int(v) for v in r.u64(2)] == SPLITMIX_1234567[3:]

    def test_split_draws_equal_joint_draw(self):
        a = CounterRNG(9)
        b = CounterRNG(9)
        np.testing.assert_array_equal(np.concatenate([a.u64(3), a.u64(4)]), b.u64(7))

    def test_uniform_and_normal_ranges(self):
        r = CounterRNG(5)
        u = r.uniform(10_000)
        assert u.min() >= 0 and u.max() < 1
        z = r.normal(20_001)
        assert abs(z.mean()) < 0.03 and abs(z.std() - 1) < 0.03

    def test_permutation(self):
        p = CounterRNG(2).permutation(100)
        assert sorted(p) == list(range(100))

    def test_derive_seed_distinct(self):
        seeds = {derive_seed(1, k) for k in range(100)}
        assert len(seeds) == 100


class TestTensorFile:
    def test_scalar_layout(self, tmp_path):
        raw = encode_tensor(np.array([42.0], np.float32))
        assert raw[:4] == b"MDTB"
        assert struct.unpack("<III", raw[4:16]) == (1, 1, 1)
        assert raw[16] == 0
        assert struct.unpack("<f", raw[17:]) == (42.0,)
        assert len(raw) == 21

    @pytest.mark.parametrize("dtype", [np.float32, np.float64, np.uint32])
    def test_round_trip_bitwise(self, tmp_path, rng, dtype):
        t = (rng.normal(size=(2, 3, 4, 5)) * 1000).astype(dtype)
        save_tensor(tmp_path / "t.mdtb", t)
        back = load_tensor(tmp_path / "t.mdtb")
        assert back.dtype == t.dtype and back.shape == t.shape
        assert back.tobytes() == t.tobytes()

    def test_truncated(self, tmp_path, rng):
        p = tmp_path / "t.mdtb"
        save_tensor(p, rng.normal(size=(3, 3)))
        p.write_bytes(p.read_bytes()[:-1])
        with pytest.raises(SizeMismatchError):
            load_tensor(p)

    def test_trailing_bytes(self, tmp_path):
        p = tmp_path / "t.mdtb"
        p.write_bytes(encode_tensor(np.ones(2)) + b"\0")
        with pytest.raises(SizeMismatchError):
            load_tensor(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.mdtb"
        p.write_bytes(b"XXXX" + encode_tensor(np.ones(2))[4:])
        with pytest.raises(BadMagicError):
            load_tensor(p)

    def test_bad_version(self, tmp_path):
        raw = bytearray(encode_tensor(np.ones(2)))
        raw[4:8] = struct.pack("<I", 2)
        p = tmp_path / "t.mdtb"
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            load_tensor(p)

    def test_rejects_rank5(self):
        with pytest.raises(ConfigError):
            encode_tensor(np.zeros((1, 1, 1, 1, 1)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        entries = {"universal/layer/0/filter": rng.normal(size=(3, 3, 2, 4)).astype(np.float32),
                   "domain/a/head/bias": rng.normal(size=5)}
        save_checkpoint(tmp_path / "c.mdck", entries)
        back = load_checkpoint(tmp_path / "c.mdck")
        assert list(back) == list(entries)
        for k in entries:
            assert back[k].tobytes() == entries[k].tobytes()

    def test_header(self):
        raw = encode_checkpoint({"x": np.ones(1)})
        assert raw[:4] == b"MDCK" and struct.unpack("<II", raw[4:12]) == (1, 1)
        assert struct.unpack("<H", raw[12:14]) == (1,) and raw[14:15] == b"x"

    def test_duplicate_names_rejected(self):
        one = encode_checkpoint({"x": np.ones(1)})
        body = one[12:]
        raw = one[:8] + struct.pack("<I", 2) + body + body
        with pytest.raises(ConfigError):
            decode_checkpoint(raw)

    def test_truncated(self):
        raw = encode_checkpoint({"x": np.ones(4)})
        with pytest.raises(SizeMismatchError):
            decode_checkpoint(raw[:-3])

    def test_network_round_trip_logits(self, tmp_path, rng):
        net = Network(NetworkConfig((4, 8, 8), 1, precision="double"))
        net.add_domain("base", 3, seed=1)
        net.add_domain("s", 4, PlacementConfig(("mid", "late"), "second", "series", 0.25),
                       copy_bn_from="base", seed=2)
        for n, v in net.params.items():
            if n.endswith("alpha"):
                v[:] = rng.normal(size=v.shape) * 0.1
        x = rng.normal(size=(2, 8, 8, 3))
        save_network(tmp_path / "n.mdck", net)
        back = load_network(tmp_path / "n.mdck")
        assert back.base_domain == "base"
        assert back.domains["s"] == net.domains["s"]
        for d in ("base", "s"):
            np.testing.assert_array_equal(back.forward(x, d), net.forward(x, d))


class TestSynthetic:
    def test_deterministic(self):
        spec = SyntheticDomainSpec(3, 4, 5, 8, noise_sigma=0.0)
        a, b = generate_domain(spec), generate_domain(spec)
        assert a.images.tobytes() == b.images.tobytes()
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_deterministic_with_noise(self):
        spec = SyntheticDomainSpec(3, 4, 5, 8, noise_sigma=0.3)
        assert generate_domain(spec).images.tobytes() == generate_domain(spec).images.tobytes()

    def test_labels_uniform(self):
        ds = generate_domain(SyntheticDomainSpec(1, 5, 7, 8))
        assert np.bincount(ds.labels).tolist() == [7] * 5

    @pytest.mark.parametrize("k,freq", [(2, 3.0), (5, 3.0), (10, 2.0)])
    def test_noise_free_nearest_centroid_perfect(self, k, freq):
        ds = generate_domain(SyntheticDomainSpec(11, k, 20, 16, texture_freq=freq, noise_sigma=0.0))
        X = ds.images.reshape(len(ds), -1).astype(np.float64)
        cents = np.stack([X[ds.labels == c].mean(axis=0) for c in range(k)])
        d = ((X[:, None, :] - cents[None]) ** 2).sum(-1)
        assert np.all(np.argmin(d, axis=1) == ds.labels)

    def test_palette_changes_channel_statistics(self):
        a = generate_domain(SyntheticDomainSpec(1, 4, 50, 16, palette_rotation=0.0, noise_sigma=0.1))
        b = generate_domain(SyntheticDomainSpec(1, 4, 50, 16, palette_rotation=np.pi, noise_sigma=0.1))
        # orientation is defined mod pi, so geometry is shared
        ma = a.images.mean(axis=(1, 2))
        mb = b.images.mean(axis=(1, 2))
        se = np.sqrt(ma.var(axis=0) / len(ma) + mb.var(axis=0) / len(mb))
        assert np.all(np.abs(ma.mean(axis=0) - mb.mean(axis=0)) > 3 * se)

    def test_needs_two_classes(self):
        with pytest.raises(ConfigError):
            generate_domain(SyntheticDomainSpec(1, 1))


class TestDatasets:
    def test_save_load(self, tmp_path):
        ds = generate_domain(SyntheticDomainSpec(1, 3, 4, 8, name="toy"))
        save_dataset(tmp_path / "d", ds)
        back = load_dataset(tmp_path / "d")
        assert back.name == "toy" and back.num_classes == 3
        assert back.images.tobytes() == ds.images.tobytes()
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_length_mismatch(self, tmp_path):
        save_tensor(tmp_path / "images.mdtb", np.zeros((3, 2, 2, 1), np.float32))
        save_tensor(tmp_path / "labels.mdtb", np.zeros(2, np.uint32))
        with pytest.raises(ConfigError):
            load_dataset(tmp_path)

    def test_fraction_one_identity(self):
        ds = generate_domain(SyntheticDomainSpec(1, 3, 10, 8))
        assert subsample(ds, 1.0, 5) is ds

    def test_half_is_stratified(self):
        ds = generate_domain(SyntheticDomainSpec(1, 4, 10, 8))
        sub = subsample(ds, 0.5, 5)
        assert np.bincount(sub.labels).tolist() == [5] * 4

    def test_seeds_change_indices_not_counts(self):
        ds = generate_domain(SyntheticDomainSpec(1, 4, 10, 8))
        ds.images = np.arange(len(ds), dtype=np.float32)[:, None, None, None] * np.ones((1, 1, 1, 1), np.float32)
        a, b = subsample(ds, 0.5, 1), subsample(ds, 0.5, 2)
        assert np.bincount(a.labels).tolist() == np.bincount(b.labels).tolist()
        assert set(a.images.ravel()) != set(b.images.ravel())
        assert subsample(ds, 0.5, 1).images.tobytes() == a.images.tobytes()

    def test_import_bitmaps(self, tmp_path):
        from PIL import Image
        for c, name in enumerate(["cat", "dog"]):
            (tmp_path / name).mkdir()
            for i in range(2):
                Image.fromarray(np.full((4, 4, 3), 50 * c + i, np.uint8)).save(tmp_path / name / f"{i}.bmp")
        ds = import_bitmap_dirs(tmp_path)
        assert ds.num_classes == 2 and ds.images.shape == (4, 4, 4, 3)
        assert ds.labels.tolist() == [0, 0, 1, 1]
        assert ds.images[3, 0, 0, 0] == pytest.approx(51 / 255)
