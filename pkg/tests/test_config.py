import pytest

from clat.config import DESK_LAYERS, RunConfig, load_config, parse_config
from clat.errors import ConfigError

GOOD = """\
# tiny run
[model]
layers = conv 4 k=3 pad=1 relu maxpool:2;
         dense 8 relu;
         dense 3
input_shape = 1,6,6
num_classes = 3

[data]
n_train = 60
size = 6

[train]
epochs = 3
pretrain_epochs = 2
lambda = 0.5
k = 1  # one critical layer

[attack]
epsilon = 0.05
alpha = 0.0125
"""


def test_parse_good_config():
    cfg = parse_config(GOOD)
    assert cfg.model.layers == ("conv 4 k=3 pad=1 relu maxpool:2", "dense 8 relu", "dense 3")
    assert cfg.model.input_shape == (1, 6, 6)
    assert cfg.train.lam == 0.5 and cfg.train.k == 1 and cfg.train.epochs == 3
    assert cfg.attack.epsilon == 0.05 and cfg.train.attack is cfg.attack
    assert cfg.data.n_train == 60 and cfg.data.n_test == 500


def test_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig(source="<string>")
    assert cfg.model.layers == DESK_LAYERS and cfg.train.k is None


def test_echo_round_trip():
    cfg = parse_config(GOOD)
    again = parse_config(cfg.to_text())
    assert again == cfg
    assert again.to_text() == cfg.to_text()


@pytest.mark.parametrize("text,line,fragment", [
    ("epochs = 3\n", 1, "section"),
    ("[model]\nnum_classes = 3\n\n[bogus]\nx = 1\n", 4, "unknown section"),
    ("[train]\nepochs = 3\nepoch = 4\n", 3, "unknown key"),
    ("[train]\nepochs = 3\nepochs = 4\n", 3, "duplicate"),
    ("[train]\n\nepochs = three\n", 3, "epochs"),
    ("[attack]\nnorm = l1\n", 2, "norm"),
    ("[train]\nfixed_layers = maybe\n", 2, "fixed_layers"),
    ("[model]\nlayers = conv 4 k=3 relu;\n  pool 2\n", 2, "layers"),
    ("[train]\nepochs = 2\npretrain_epochs = 5\n", 1, "pretrain_epochs"),
    ("[attack]\nalpha = 0\n", 1, "alpha"),
    ("[train]\njust some words\n", 2, "key = value"),
    ("[data]\nsource = idx\n", 1, "train_images"),
])
def test_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text, "run.cfg")
    assert info.value.line == line
    assert fragment in str(info.value)
    assert str(info.value).startswith(f"run.cfg:{line}:")


def test_load_config(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(GOOD)
    assert load_config(path).source == str(path)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")
