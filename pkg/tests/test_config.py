import pytest

from stalepipe.config import (
    ConfigParseError,
    RunConfig,
    load_config_file,
    parse_config_text,
    parse_layers,
    render_config,
)

SAMPLE = """
# a run config
model.layers = dense(12,16), relu, dense(16,4)
model.boundaries = 2
pipeline.p = 1,0
pipeline.m = 3,1
optimizer.rule = sum
optimizer.beta = 0.9
optimizer.lr = 0.05
data.source = teacher
data.teacher_dims = 12,8,4
data.n_train = 256
data.n_test = 64
data.batch_size = 32
train.epochs = 1
train.seed = 7
"""


class TestParsing:
    def test_parse_round_trip(self):
        cfg = parse_config_text(SAMPLE)
        assert cfg["pipeline.p"] == "1,0"
        text = render_config(cfg)
        assert parse_config_text(text) == cfg

    def test_comments_and_blanks_ignored(self):
        cfg = parse_config_text("# hi\n\na.b = 1\n")
        assert cfg == {"a.b": "1"}

    def test_missing_equals(self):
        with pytest.raises(ConfigParseError, match="line 1"):
            parse_config_text("not a pair")

    def test_value_may_contain_equals(self):
        cfg = parse_config_text("a.b = x=y")
        assert cfg["a.b"] == "x=y"

    def test_load_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text(SAMPLE)
        assert load_config_file(path) == parse_config_text(SAMPLE)


class TestLayerParsing:
    def test_layers(self):
        layers = parse_layers("dense(4,8), relu, dense(8, 2), tanh")
        assert [l.kind for l in layers] == ["dense", "relu", "dense", "tanh"]
        assert layers[0].in_dim == 4 and layers[2].out_dim == 2

    def test_dense_without_bias(self):
        layers = parse_layers("dense(4,8,false)")
        assert layers[0].bias is False

    def test_unknown_token(self):
        with pytest.raises(ConfigParseError):
            parse_layers("dense(4,8), sigmoid")

    def test_empty(self):
        with pytest.raises(ConfigParseError):
            parse_layers("  ")


class TestRunConfig:
    def cfg(self):
        return RunConfig(parse_config_text(SAMPLE))

    def test_typed_getters(self):
        cfg = self.cfg()
        assert cfg.get_int("train.epochs") == 1
        assert cfg.get_float("optimizer.beta") == 0.9
        assert cfg.get_ints("pipeline.m") == [3, 1]
        assert cfg.get_bool("pipeline.overlap_recompute", True) is True

    def test_missing_required(self):
        with pytest.raises(ConfigParseError, match="missing required"):
            RunConfig({}).get("model.layers")

    def test_bad_int(self):
        with pytest.raises(ConfigParseError, match="expected integer"):
            RunConfig({"a.b": "x"}).get_int("a.b")

    def test_build_model_and_pipeline(self):
        cfg = self.cfg()
        model = cfg.build_model()
        assert model.k == 2
        pipe = cfg.build_pipeline()
        assert pipe.q == (0, 1)

    def test_build_model_deterministic_in_seed(self):
        a = self.cfg().build_model().flat_params()
        b = self.cfg().build_model().flat_params()
        assert (a == b).all()

    def test_dataset_split_disjoint_and_deterministic(self):
        cfg = self.cfg()
        train = cfg.build_dataset("train")
        test = cfg.build_dataset("test")
        assert train.n == 256 and test.n == 64
        again = cfg.build_dataset("train")
        assert (train.inputs == again.inputs).all()
        # one stream: test inputs continue after train inputs, no overlap
        assert not (train.inputs[:1] == test.inputs[:1]).all()

    def test_schedule(self):
        cfg = RunConfig({"optimizer.lr": "0.1", "optimizer.lr_decay_steps": "10,20",
                         "optimizer.lr_decay_factor": "0.5"})
        sched = cfg.build_schedule()
        assert sched.base == 0.1
        assert sched.decays == ((10, 0.5), (20, 0.5))
