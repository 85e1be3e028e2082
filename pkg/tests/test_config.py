import json

import pytest

from src.experiment_planning.experiment_config import (ExperimentConfig, ModelConfig, SequenceSpec, TrainConfig,
                                                       config_from_dict, equal_group_boundaries, finetune_schedule,
                                                       lambda_ladder, load_experiment_config, save_experiment_config,
                                                       shifted_group_boundaries, validate_group_boundaries)
from src.utilities.exceptions import ConfigError


@pytest.fixture(autouse=True)
def no_seed_override(monkeypatch):
    monkeypatch.delenv('NLVC_SEED', raising=False)


class TestDefaults:
    def test_model(self):
        cfg = ModelConfig()
        assert cfg.channels == (8, 12, 16) and cfg.latent_channels == 16
        assert cfg.num_heads == 4 and cfg.context_mode == 'mnlc'

    def test_train_groups_from_count(self):
        cfg = TrainConfig(frames=55, num_groups=3)
        assert cfg.groups == [0, 19, 37, 55]
        assert TrainConfig().groups == [0, 6]

    def test_explicit_groups_set_count(self):
        assert TrainConfig(frames=6, groups=[0, 2, 6]).num_groups == 2

    def test_empty_plan(self):
        config = config_from_dict({})
        assert config == ExperimentConfig()


class TestValidation:
    @pytest.mark.parametrize('kwargs', [{'num_heads': 5}, {'context_mode': 'full'}, {'intra_quality': 8},
                                        {'channels': (8, 12)}])
    def test_model(self, kwargs):
        with pytest.raises(ConfigError):
            ModelConfig(**kwargs)

    @pytest.mark.parametrize('kwargs', [{'lmbda': -1.0}, {'strategy': 'sgd'}, {'frames': 3, 'groups': [0, 2]},
                                        {'frames': 3, 'num_groups': 4}, {'distortion': 'l1'}])
    def test_train(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs)

    def test_sequence(self):
        with pytest.raises(ConfigError):
            SequenceSpec(kind='file')
        with pytest.raises(ConfigError):
            SequenceSpec(kind='spiral')

    def test_unknown_keys(self):
        with pytest.raises(ConfigError):
            config_from_dict({'model': {'latent': 4}})
        with pytest.raises(ConfigError):
            config_from_dict({'optimizer': {}})


class TestGroupBoundaries:
    def test_equal_split(self):
        assert equal_group_boundaries(6, 1) == [0, 6]
        assert equal_group_boundaries(38, 2) == [0, 19, 38]
        assert equal_group_boundaries(7, 3) == [0, 3, 5, 7]

    def test_invalid(self):
        with pytest.raises(ConfigError):
            validate_group_boundaries([1, 6], 6)
        with pytest.raises(ConfigError):
            validate_group_boundaries([0, 3, 3, 6], 6)

    def test_shifted(self):
        assert shifted_group_boundaries([0, 19, 37, 55]) == [0, 28, 46, 55]
        assert shifted_group_boundaries([0, 6]) == [0, 6]

    def test_schedule_preset(self):
        assert finetune_schedule() == [(6, 1), (20, 1), (38, 2), (55, 3)]

    def test_lambda_ladder(self):
        assert lambda_ladder('mse') == (85.0, 170.0, 380.0, 840.0)
        with pytest.raises(ConfigError):
            lambda_ladder('l1')


class TestPlansFile:
    def test_round_trip(self, tmp_path):
        config = ExperimentConfig(model=ModelConfig(channels=(4, 8, 8), num_heads=2),
                                  train=TrainConfig(frames=6, num_groups=2))
        save_experiment_config(config, str(tmp_path / 'plans.json'))
        loaded = load_experiment_config(str(tmp_path / 'plans.json'))
        assert loaded == config
        assert loaded.config_hash() == config.config_hash()

    def test_hash_tracks_content(self):
        assert ExperimentConfig().config_hash() == ExperimentConfig().config_hash()
        assert ExperimentConfig(train=TrainConfig(lmbda=85.0)).config_hash() != ExperimentConfig().config_hash()

    def test_seed_override(self, tmp_path, monkeypatch):
        (tmp_path / 'plans.json').write_text(json.dumps({'train': {'seed': 1}}))
        monkeypatch.setenv('NLVC_SEED', '17')
        config = load_experiment_config(str(tmp_path / 'plans.json'))
        assert config.train.seed == 17 and config.model.seed == 17
        assert config.sequence.seed == 17
        monkeypatch.setenv('NLVC_SEED', 'abc')
        with pytest.raises(ConfigError):
            load_experiment_config(str(tmp_path / 'plans.json'))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment_config(str(tmp_path / 'missing.json'))

    def test_invalid_json(self, tmp_path):
        (tmp_path / 'plans.json').write_text('{not json')
        with pytest.raises(ConfigError):
            load_experiment_config(str(tmp_path / 'plans.json'))
