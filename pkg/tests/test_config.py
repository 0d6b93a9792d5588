import pytest

from sproad import config
from sproad.config import Config, ConfigError


def test_defaults():
    cfg = Config()
    assert (cfg.slic.rows, cfg.slic.cols, cfg.slic.m) == (11, 36, 35.0)
    assert cfg.crf.method == "none" and cfg.crf.beta is None
    assert (cfg.crf.w1, cfg.crf.w2, cfg.crf.sigma_alpha, cfg.crf.sigma_beta, cfg.crf.sigma_gamma) == (0.1, 3.0, 60.0, 10.0, 1.0)


def test_parse_overrides_and_comments():
    cfg = config.parse("# comment\nslic.rows = 6  # trailing\n\ncrf.method = icm\ncrf.beta = 2.5\ncrf.T = auto\n")
    assert cfg.slic.rows == 6 and cfg.slic.cols == 36
    assert cfg.crf.method == "icm" and cfg.crf.beta == 2.5 and cfg.crf.T is None


def test_round_trip():
    cfg = config.parse("cnn.lr = 0.003\ncrf.beta = 7\nio.model = m.bin\ncrf.method = bp\n")
    assert config.parse(config.dump(cfg)) == cfg
    assert config.parse(config.dump(Config())) == Config()


@pytest.mark.parametrize("text,needle", [
    ("slic.bogus = 1", "slic.bogus"),
    ("nosection = 1", "section.key"),
    ("slic.rows = many", "slic.rows"),
    ("crf.method = graphcut", "crf.method"),
    ("cnn.dropout = 1.0", "cnn.dropout"),
    ("slic.m = 0", "slic.m"),
])
def test_errors(text, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        config.parse(text)


def test_load_missing(tmp_path):
    with pytest.raises(OSError):
        config.load(tmp_path / "none.cfg")
