import numpy as np
from loguru import logger

from infra.log import configure_logging, release_file_sink
from infra.rng import make_rng, spawn_rngs
from infra.settings import Settings, get_settings
from kinetic.collision import make_scheme
from kinetic.grid import make_grid
from kinetic.kernel import CrossSection


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("LOG_LEVEL", raising=False)
        monkeypatch.delenv("CACHE_DIR", raising=False)
        s = Settings(_env_file=None)
        assert s.LOG_LEVEL == "INFO"
        assert s.CACHE_DIR == ""

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv("LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("CACHE_DIR", "/tmp/kinetic-cache")
        s = Settings(_env_file=None)
        assert s.LOG_LEVEL == "DEBUG"
        assert s.CACHE_DIR == "/tmp/kinetic-cache"


class TestSchemeChunking:
    def setup_method(self):
        get_settings.cache_clear()

    def teardown_method(self):
        get_settings.cache_clear()

    def test_default_block_size(self, monkeypatch):
        monkeypatch.delenv("SCHEME_CHUNK_POINTS", raising=False)
        assert Settings(_env_file=None).SCHEME_CHUNK_POINTS == 65536

    def test_environment_sets_collision_blocks(self, monkeypatch):
        monkeypatch.setenv("SCHEME_CHUNK_POINTS", "4096")
        scheme = make_scheme(CrossSection(s=0.3, eps_cutoff=0.2), make_grid(8, 4.0, dim=2), 4, 8)
        assert scheme.chunk_points == 4096
        assert scheme.replace(chunk_points=128).chunk_points == 128


class TestRandomStreams:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(make_rng(11).random(5), make_rng(11).random(5))
        assert not np.array_equal(make_rng(11).random(5), make_rng(12).random(5))

    def test_children_are_independent_and_reproducible(self):
        first = [rng.random(3) for rng in spawn_rngs(3, 4)]
        second = [rng.random(3) for rng in spawn_rngs(3, 4)]
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)
        assert not np.array_equal(first[0], first[1])

    def test_prefix_of_ensemble_is_stable(self):
        short = [rng.random(2) for rng in spawn_rngs(9, 2)]
        long = [rng.random(2) for rng in spawn_rngs(9, 5)]
        np.testing.assert_array_equal(short[1], long[1])


class TestLogging:
    def test_file_sink_collects_debug(self, tmp_path):
        configure_logging("WARNING", sink_dir=tmp_path)
        logger.debug("lattice ready")
        release_file_sink()
        logger.debug("after release")
        text = (tmp_path / "run.log").read_text()
        assert "lattice ready" in text
        assert "after release" not in text

    def test_release_without_sink(self):
        configure_logging("INFO")
        release_file_sink()
