import math

import numpy as np
import pytest

from kinetic import __version__, storage
from kinetic.cache import TabulationCache, configure_cache, content_hash, tabulation_cache
from kinetic.errors import ConfigurationError
from kinetic.grid import Distribution, SpatialLattice, make_grid, maxwellian
from kinetic.kernel import CrossSection
from kinetic.solver import RunHistory, SolverConfig, kolmogorov_history, picard_solve, transform_to_g


class TestDistributionContainer:
    def test_header_layout_is_fixed(self):
        assert storage.HEADER.itemsize == 48
        assert storage.HEADER.names == ("dim", "n", "radius", "n_x", "length", "time_tag")

    def test_spatial_field_round_trip(self, tmp_path):
        grid = make_grid(8, 4.0, dim=2)
        lattice = SpatialLattice(n_x=3, length=2.5)
        values = np.random.default_rng(1).random((3, 8, 8))
        f = Distribution(grid=grid, values=values, time_tag=0.125, spatial=lattice)
        path = storage.write_distribution(tmp_path / "f.bin", f)
        assert path.stat().st_size == 48 + 8 * values.size
        back = storage.read_distribution(path)
        np.testing.assert_array_equal(back.values, values)
        assert back.grid == grid
        assert back.spatial == lattice
        assert back.time_tag == 0.125

    def test_truncated_file(self, tmp_path):
        grid = make_grid(8, 4.0, dim=2)
        path = storage.write_distribution(tmp_path / "f.bin", maxwellian(1.0, [0.0], 1.0, grid))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ConfigurationError):
            storage.read_distribution(path)
        path.write_bytes(b"\x00" * 10)
        with pytest.raises(ConfigurationError):
            storage.read_distribution(path)


class TestTables:
    def test_floats_keep_full_precision(self, tmp_path):
        value = 0.1 + 0.2
        path = storage.write_csv(tmp_path / "t.csv", ["a", "b"], [[value, math.nan]])
        assert path.read_text().splitlines()[1] == f"{value!r},nan"
        header, data = storage.read_csv(path)
        assert header == ["a", "b"]
        assert data[0, 0] == value
        assert math.isnan(data[0, 1])

    def test_series_puts_time_first(self, tmp_path):
        path = storage.write_series(tmp_path / "s.csv", [0.0, 0.5], {"mass": [1.0, 1.0], "energy": [2.0, 2.5]})
        header, data = storage.read_csv(path)
        assert header == ["time", "mass", "energy"]
        np.testing.assert_array_equal(data[:, 2], [2.0, 2.5])

    def test_slice_export(self, tmp_path):
        grid = make_grid(8, 4.0, dim=2)
        f = maxwellian(1.0, [0.0], 1.0, grid)
        header, data = storage.read_csv(storage.export_slice_csv(tmp_path / "cut.csv", f, axis=1))
        assert header == ["v2", "f"]
        np.testing.assert_array_equal(data[:, 0], grid.axis)
        np.testing.assert_allclose(data[:, 1], f.values[4, :])

    def test_json_handles_numpy(self, tmp_path):
        path = storage.write_json(tmp_path / "x.json", {"b": np.float64(1.5), "a": np.arange(3), "c": np.bool_(True)})
        assert storage.read_json(path) == {"a": [0, 1, 2], "b": 1.5, "c": True}
        assert path.read_text().index('"a"') < path.read_text().index('"b"')

    def test_manifest(self, tmp_path):
        storage.write_manifest(tmp_path, "solve", "abc", {"grid": "v2d"}, ["b.csv", "a.csv"], extra={"seed": 1})
        manifest = storage.read_json(tmp_path / "manifest.json")
        assert manifest["code_version"] == __version__
        assert manifest["artifacts"] == ["a.csv", "b.csv"]
        assert manifest["seed"] == 1
        assert "time" not in manifest


class TestHistoryPersistence:
    def test_picard_history_round_trip(self, tmp_path):
        grid = make_grid(8, 4.0, dim=2)
        cfg = SolverConfig(rho=0.25, kappa=0.05, eps=0.2, dt=0.05, horizon=0.1, n_theta=8, snapshot_every=1)
        g0 = transform_to_g(maxwellian(1.0, [0.0], 1.0, grid), 0.0, cfg)
        history = picard_solve(g0, cfg, CrossSection(s=0.3, K=0.2))
        written = history.save(tmp_path)
        assert (tmp_path / "picard.csv") in written
        back = RunHistory.load(tmp_path)
        assert back.kind == "g"
        assert back.eps_tag == 0.2
        np.testing.assert_array_equal(back.times, history.times)
        np.testing.assert_array_equal(back.norm_series["H0_0"], history.norm_series["H0_0"])
        np.testing.assert_array_equal(back.snapshots[-1].values, history.snapshots[-1].values)
        assert back.picard_differences == history.picard_differences
        assert back.picard_contraction == history.picard_contraction

    def test_kolmogorov_history_keeps_spatial_axis(self, tmp_path):
        grid = make_grid(8, 4.0, dim=2)
        lattice = SpatialLattice(n_x=4, length=1.0)
        base = maxwellian(1.0, [0.0], 1.0, grid).values
        f0 = Distribution(grid=grid, values=np.stack([base] * 4), spatial=lattice)
        kolmogorov_history(f0, 0.5, [0.0, 0.1]).save(tmp_path)
        back = RunHistory.load(tmp_path)
        assert back.spatial == lattice
        assert back.snapshots[0].values.shape == (4, 8, 8)


class TestTabulationCache:
    def setup_method(self):
        self.calls = 0

    def build(self):
        self.calls += 1
        return np.arange(4.0)

    def test_builds_once(self):
        cache = TabulationCache()
        first = cache.get_or_build({"n": 8, "s": 0.3}, self.build)
        second = cache.get_or_build({"s": 0.3, "n": 8}, self.build)
        assert self.calls == 1
        assert second is first
        assert not first.flags.writeable
        assert len(cache) == 1

    def test_disk_mirror_survives_a_new_process_cache(self, tmp_path):
        try:
            configure_cache(tmp_path)
            tabulation_cache().get_or_build({"k": 1}, self.build)
            assert len(list(tmp_path.glob("*.npy"))) == 1
            configure_cache(tmp_path)
            table = tabulation_cache().get_or_build({"k": 1}, self.build)
            assert self.calls == 1
            np.testing.assert_array_equal(table, np.arange(4.0))
        finally:
            configure_cache(None)

    def test_content_hash_is_canonical(self):
        assert content_hash({"a": 1, "b": [1.5]}) == content_hash({"b": [1.5], "a": 1})
        assert content_hash({"a": 1}) != content_hash({"a": 2})
