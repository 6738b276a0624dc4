"""
Unit tests for experiment configuration loading and validation.
"""

import copy
import hashlib
from pathlib import Path

import pytest

from meanfield_lab.config import Experiment, load_config, parse_config
from meanfield_lab.errors import ConfigError
from meanfield_lab.model import ModelKind

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

PARTICLES = {
    "run": {"experiment": "particles", "seed": 1, "output_dir": "out"},
    "model": {"kind": "two_body"},
    "potential": {"name": "harmonic", "strength_rate2": 1.0},
    "law": {"name": "gaussian", "std_x_length": 1.0},
    "replicas": {"replicas": 2, "n_particles": 4},
    "integrator": {"dt_time": 0.01, "t_final_time": 0.1},
}


def with_changes(section, **values):
    data = copy.deepcopy(PARTICLES)
    data.setdefault(section, {}).update(values)
    return data


class TestShippedConfigs:
    """Tests for the example configurations."""

    @pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.toml")), ids=lambda p: p.stem)
    def test_config_is_valid(self, path):
        """Test that every shipped config validates."""
        cfg = load_config(path)
        assert cfg.experiment in Experiment
        assert cfg.source_hash == hashlib.sha256(path.read_bytes()).hexdigest()


class TestParseConfig:
    """Tests for parse_config."""

    def test_valid_particles_config(self):
        """Test that builders return the configured objects."""
        cfg = parse_config(copy.deepcopy(PARTICLES), "hash")
        assert cfg.experiment == Experiment.PARTICLES
        assert cfg.build_model().kind == ModelKind.TWO_BODY
        assert cfg.build_integrator().n_steps == 10
        assert cfg.build_replica_plan().n_particles == 4
        assert cfg.output.snapshot_times == [0.0]

    def test_unknown_key(self):
        """Test that keys outside the schema are rejected with their section."""
        with pytest.raises(ConfigError) as info:
            parse_config(with_changes("integrator", dt=0.1), "hash")
        assert info.value.section == "integrator"
        assert "dt" in str(info.value)

    def test_missing_required_key(self):
        """Test that required keys must be present."""
        data = copy.deepcopy(PARTICLES)
        del data["replicas"]["n_particles"]
        with pytest.raises(ConfigError) as info:
            parse_config(data, "hash")
        assert info.value.section == "replicas"

    def test_unknown_section(self):
        """Test that unknown top-level tables are rejected."""
        with pytest.raises(ConfigError):
            parse_config(with_changes("plotting", dpi=300), "hash")

    def test_missing_run_section(self):
        """Test that [run] is mandatory."""
        data = copy.deepcopy(PARTICLES)
        del data["run"]
        with pytest.raises(ConfigError) as info:
            parse_config(data, "hash")
        assert info.value.section == "run"

    def test_unknown_experiment(self):
        """Test that the experiment must be one of the recipes."""
        with pytest.raises(ConfigError):
            parse_config(with_changes("run", experiment="bifurcation"), "hash")

    def test_section_required_by_experiment(self):
        """Test that recipes declare the sections they need."""
        data = copy.deepcopy(PARTICLES)
        del data["integrator"]
        with pytest.raises(ConfigError) as info:
            parse_config(data, "hash")
        assert info.value.section == "integrator"

    @pytest.mark.parametrize("section,key,value", [
        ("run", "seed", "seven"),
        ("run", "seed", True),
        ("replicas", "replicas", 2.5),
        ("integrator", "dt_time", "fast"),
        ("model", "friction", 1),
    ])
    def test_wrong_types(self, section, key, value):
        """Test the type checks of scalar keys."""
        with pytest.raises(ConfigError):
            parse_config(with_changes(section, **{key: value}), "hash")

    def test_integer_accepted_for_float(self):
        """Test that an integer is a valid float value."""
        cfg = parse_config(with_changes("integrator", t_final_time=1), "hash")
        assert cfg.section("integrator").t_final_time == 1.0

    def test_negative_seed(self):
        """Test that seeds are unsigned."""
        with pytest.raises(ConfigError):
            parse_config(with_changes("run", seed=-1), "hash")

    def test_unknown_catalogue_entry(self):
        """Test that catalogue names are checked."""
        with pytest.raises(ConfigError) as info:
            parse_config(with_changes("potential", name="coulomb"), "hash")
        assert info.value.section == "potential"

    def test_key_of_other_catalogue_entry(self):
        """Test that keys must belong to the named entry."""
        with pytest.raises(ConfigError):
            parse_config(with_changes("potential", depth_energy=1.0), "hash")

    def test_model_errors_become_config_errors(self):
        """Test that invalid kernel parameters are reported against their section."""
        data = copy.deepcopy(PARTICLES)
        data["model"] = {"kind": "topological"}
        data["rank_kernel"] = {"name": "clamped_linear", "strength_rate": -1.0, "floor_rate": 2.0}
        del data["potential"]
        with pytest.raises(ConfigError) as info:
            parse_config(data, "hash")
        assert info.value.section == "model"

    def test_negative_snapshot_time(self):
        """Test that snapshot times are nonnegative."""
        with pytest.raises(ConfigError) as info:
            parse_config(with_changes("output", snapshot_times=[-1.0]), "hash")
        assert info.value.section == "output"

    def test_rate_study_needs_four_counts(self):
        """Test the minimum number of particle counts of a rate study."""
        data = with_changes("run", experiment="rate_study")
        data["grid"] = {"n_x": 16, "n_v": 16, "x_min_length": -1.0, "x_max_length": 1.0,
                        "v_min_speed": -1.0, "v_max_speed": 1.0, "dt_time": 0.01,
                        "t_final_time": 0.1}
        data["rate_study"] = {"n_values": [8, 16, 16, 32], "time": 0.1, "replicas": 10}
        with pytest.raises(ConfigError) as info:
            parse_config(data, "hash")
        assert info.value.section == "rate_study"

    def test_eps_scaling_range(self):
        """Test the (0, 1] range of the hydrodynamic eps."""
        data = with_changes("run", experiment="euler")
        data["hydro"] = {"n_x": 16, "x_min_length": -1.0, "x_max_length": 1.0, "dt_time": 0.01,
                         "t_final_time": 0.1, "eps_scaling": 0.0}
        with pytest.raises(ConfigError) as info:
            parse_config(data, "hash")
        assert info.value.section == "hydro"


class TestLoadConfig:
    """Tests for load_config."""

    def test_missing_file(self, tmp_path):
        """Test that an unreadable path is a configuration error."""
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.toml")

    def test_syntax_error(self, tmp_path):
        """Test that TOML syntax errors are configuration errors."""
        path = tmp_path / "broken.toml"
        path.write_text("[run\nexperiment = 'particles'\n")
        with pytest.raises(ConfigError) as info:
            load_config(path)
        assert info.value.section == "config"

    def test_hash_tracks_file_bytes(self, tmp_path):
        """Test that editing a comment changes the recorded config hash."""
        text = (CONFIG_DIR / "particles_harmonic.toml").read_text()
        first, second = tmp_path / "a.toml", tmp_path / "b.toml"
        first.write_text(text)
        second.write_text(text + "# tweak\n")
        assert load_config(first).source_hash != load_config(second).source_hash


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
