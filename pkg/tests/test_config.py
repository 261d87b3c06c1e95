"""Config file parsing, validation, overrides, hashing."""

import math

import pytest

from treesum.config import Config, load_config


class TestDefaults:
    def test_training_defaults(self):
        cfg = Config()
        assert cfg.learning_rate == 5e-3
        assert cfg.batch_size == 8
        assert cfg.dropout == 0.2
        assert cfg.kl_weight_increment == 2.5e-5
        assert cfg.gumbel_temperature_decay == 2.5e-5
        assert cfg.var_floor == pytest.approx(math.exp(0.5))

    def test_model_defaults(self):
        cfg = Config()
        assert cfg.embedding_dim == 200
        assert cfg.hidden_dim == 200
        assert cfg.latent_dim == 32
        assert cfg.tree_branching == [4, 4]

    def test_extraction_defaults(self):
        cfg = Config()
        assert cfg.nucleus_p == 0.4
        assert cfg.max_summary_sentences == 6
        assert cfg.extraction_beam_width == 8
        assert cfg.redundancy_threshold == 0.6
        assert cfg.oracle_count == 4
        assert cfg.reviews_per_instance == 8
        assert cfg.min_count == 16


class TestLoadAndOverride:
    def test_roundtrip(self, tmp_path):
        cfg = Config(latent_dim=16, tree_branching=[3, 3], kl_anneal=False)
        path = tmp_path / "run.cfg"
        cfg.save(path)
        loaded = load_config(path)
        assert loaded == cfg
        assert loaded.hash() == cfg.hash()

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.cfg"
        path.write_text("learning_rate=0.01\nwombats=7\n")
        with pytest.raises(ValueError, match="unknown config key"):
            load_config(path)

    def test_overrides_and_comments(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\nbatch_size=4\n\ntree_branching=2,3\n")
        cfg = load_config(path, {"batch_size": "16", "no_attention": "true"})
        assert cfg.batch_size == 16
        assert cfg.tree_branching == [2, 3]
        assert cfg.no_attention is True

    def test_validation_catches_bad_values(self):
        with pytest.raises(ValueError, match="learning_rate"):
            Config(learning_rate=0.0).validate()
        with pytest.raises(ValueError, match="dropout"):
            Config(dropout=1.0).validate()
        with pytest.raises(ValueError, match="nucleus_p"):
            Config(nucleus_p=0.0).validate()
        with pytest.raises(ValueError, match="branching"):
            Config(tree_branching=[0]).validate()

    def test_hash_changes_with_values(self):
        assert Config().hash() != Config(seed=1).hash()

    def test_bad_line_reports_location(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("justakey\n")
        with pytest.raises(ValueError, match="c.cfg:1"):
            load_config(path)
