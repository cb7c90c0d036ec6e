"""Unit tests for run configuration loading and validation"""

import pytest
import yaml

from app.core.run_config import (
    MODEL_CHOICES,
    ConfigLoadError,
    RunConfig,
    RunConfigLoader,
    get_run_config_loader,
)
from app.services.fault_spec import FaultKind


class TestRunConfig:
    """Test RunConfig validation"""

    def test_defaults(self):
        """Test defaults: nodes [1, 2], all models, five seeds, full grids"""
        config = RunConfig(synthetic=True, master_seed=1)

        assert config.nodes == [1, 2]
        assert config.models == list(MODEL_CHOICES)
        assert config.seed_count == 5
        assert config.noise_grid == [0.5, 1.0, 1.5, 2.0, 2.5, 3.0]
        assert config.fixed_grid == [150.0, 300.0, 500.0]
        assert config.train.learning_rate == 0.01
        assert config.train.momentum == 0.9
        assert config.data_source == "synthetic"

    def test_seed_required(self):
        """Test a config without master_seed is rejected"""
        with pytest.raises(ValueError):
            RunConfig(synthetic=True)

    def test_source_required(self):
        """Test either a dataset path or synthetic mode is required"""
        with pytest.raises(ValueError):
            RunConfig(master_seed=1)

    def test_window_length_fixed(self):
        """Test only 64-sample windows are accepted"""
        with pytest.raises(ValueError):
            RunConfig(synthetic=True, master_seed=1, window_length=32)

    def test_invalid_models_and_nodes(self):
        """Test unknown models and repeated nodes are rejected"""
        with pytest.raises(ValueError):
            RunConfig(synthetic=True, master_seed=1, models=["M9"])
        with pytest.raises(ValueError):
            RunConfig(synthetic=True, master_seed=1, nodes=[1, 1])

    def test_cnn_models(self):
        """Test CART is excluded from the CNN list"""
        config = RunConfig(synthetic=True, master_seed=1, models=["M2", "CART"])
        assert config.cnn_models == ["M2"]

    def test_train_intensity_is_middle(self):
        """Test the mid grid value used in train-once mode"""
        config = RunConfig(synthetic=True, master_seed=1)
        assert config.train_intensity(FaultKind.FIXED) == 300.0
        assert config.train_intensity(FaultKind.NOISE) == 1.5
        assert config.train_intensity(FaultKind.SHORT) == 3.0

    def test_overrides(self):
        """Test flat and dotted overrides; None values are ignored"""
        config = RunConfig(synthetic=True, master_seed=1)
        changed = config.with_overrides(master_seed=9, jobs=None, **{"train.max_epochs": 3})

        assert changed.master_seed == 9
        assert changed.jobs == 1
        assert changed.train.max_epochs == 3

    def test_invalid_override(self):
        """Test an override that breaks validation raises ConfigLoadError"""
        with pytest.raises(ConfigLoadError):
            RunConfig(synthetic=True, master_seed=1).with_overrides(seed_count=0)

    def test_missing_dataset(self, tmp_path):
        """Test check_paths reports a missing dataset"""
        config = RunConfig(dataset_path=str(tmp_path / "nope.txt"), master_seed=1)
        with pytest.raises(ConfigLoadError):
            config.check_paths()


class TestRunConfigLoader:
    """Test loading configs from files"""

    def test_load_yaml(self, tmp_path):
        """Test a YAML file loads into a RunConfig"""
        (tmp_path / "tiny.yaml").write_text(yaml.safe_dump({
            "synthetic": True,
            "master_seed": 3,
            "models": ["M1"],
            "train": {"max_epochs": 2},
        }))
        loader = RunConfigLoader(configs_dir=tmp_path)

        config = loader.load("tiny")
        assert config.master_seed == 3
        assert config.train.max_epochs == 2
        assert loader.list_available_configs() == ["tiny"]

    def test_load_by_path_and_cache(self, tmp_path):
        """Test explicit paths load and repeat loads hit the cache"""
        path = tmp_path / "run.yaml"
        path.write_text("synthetic: true\nmaster_seed: 4\n")
        loader = RunConfigLoader(configs_dir=tmp_path / "empty")

        assert loader.load(str(path)) is loader.load(str(path))
        loader.clear_cache()
        assert loader.load(str(path)).master_seed == 4

    def test_missing_config(self, tmp_path):
        """Test an unknown name lists what is available"""
        with pytest.raises(ConfigLoadError, match="not found"):
            RunConfigLoader(configs_dir=tmp_path).load("ghost")

    def test_invalid_yaml(self, tmp_path):
        """Test malformed YAML and non-mapping content"""
        (tmp_path / "bad.yaml").write_text("synthetic: [unclosed\n")
        (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
        loader = RunConfigLoader(configs_dir=tmp_path)

        with pytest.raises(ConfigLoadError):
            loader.load("bad")
        with pytest.raises(ConfigLoadError):
            loader.load("list")

    def test_invalid_values(self, tmp_path):
        """Test schema violations become ConfigLoadError"""
        (tmp_path / "neg.yaml").write_text("synthetic: true\nmaster_seed: -1\n")
        with pytest.raises(ConfigLoadError):
            RunConfigLoader(configs_dir=tmp_path).load("neg")

    def test_shipped_configs_validate(self):
        """Test every config shipped in backend/configs loads"""
        loader = get_run_config_loader()
        names = loader.list_available_configs()

        assert {"reproduce", "smoke_synthetic"} <= set(names)
        for name in names:
            assert loader.load(name).master_seed >= 0

    def test_singleton(self):
        """Test the loader getter returns one instance"""
        assert get_run_config_loader() is get_run_config_loader()
