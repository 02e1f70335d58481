from pathlib import Path

import pytest

from fastadv.config import parse_config
from fastadv.trainers import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _write(tmp_path, text):
    p = tmp_path / "run.cfg"
    p.write_text(text)
    return p


def test_minimal_pco_config_uses_reference_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, "dataset.kind = blobs\ntrain.method = FGSM_PCO\n"))
    t = cfg.train
    assert (t.epsilon, t.alpha, t.gamma, t.beta) == (8 / 255, 8 / 255, 2.0, 10.0)
    assert (t.momentum, t.weight_decay, t.lr_base, t.lr_milestones) == (0.9, 5e-4, 0.1,
                                                                        (100, 105))
    assert t.epochs == 110 and t.projection_mode == "projected"
    assert cfg.eval_epsilon == t.epsilon


def test_fraction_list_and_none_values(tmp_path):
    cfg = parse_config(_write(tmp_path, "dataset.kind = blobs  # comment\n"
                                        "train.epsilon = 8/255\n"
                                        "model.hidden = 4, 5\n"
                                        "dataset.train_limit = none\n"
                                        "train.clamp_pixels = off\n"))
    assert cfg.train.epsilon == 8 / 255
    assert cfg.model.hidden == (4, 5)
    assert cfg.dataset.train_limit is None and cfg.train.clamp_pixels is False


def test_overrides_seed_and_out(tmp_path):
    cfg = parse_config(_write(tmp_path, "dataset.kind = blobs\n"),
                       ["train.beta=0", "detector.start_epoch = 4"], seed=7, out="elsewhere")
    assert cfg.train.beta == 0 and cfg.detector.start_epoch == 4
    assert cfg.train.seed == 7 and cfg.run.out_dir == "elsewhere"


@pytest.mark.parametrize("text,field", [
    ("dataset.kind = blobs\ntrain.gamma = 0.5\n", "train.gamma"),
    ("dataset.kind = blobs\ntrain.method = TRADES\n", "train.method"),
    ("dataset.kind = blobs\ntrain.bogus = 1\n", "train.bogus"),
    ("dataset.kind = blobs\nnosection = 1\n", "nosection"),
    ("train.method = FGSM_RS\n", "dataset.kind"),
    ("dataset.kind = blobs\ntrain.epochs = many\n", "train.epochs"),
    ("dataset.kind = blobs\neval.attacks = fgsm, cw\n", "eval.attacks"),
    ("dataset.kind = idx\ndataset.train_images = nope\n", "dataset.train_images"),
    ("dataset.kind = blobs\njust words\n", "run.cfg:2"),
])
def test_config_errors_name_the_field(tmp_path, text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(_write(tmp_path, text))
    assert str(info.value).startswith(field)


def test_unknown_method_lists_supported(tmp_path):
    with pytest.raises(ConfigError, match="FGSM_PCO"):
        parse_config(_write(tmp_path, "dataset.kind = blobs\ntrain.method = X\n"))


def test_missing_file():
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config("/nonexistent/run.cfg")


@pytest.mark.parametrize("name", ["blobs-smoke.cfg", "desk-mnist-co.cfg", "cifar-faithful.cfg"])
def test_shipped_configs_parse(name):
    cfg = parse_config(CONFIGS / name, check_paths=False)
    assert cfg.dataset.kind in ("blobs", "idx", "cifar10")


def test_to_dict_round_trips_through_overrides(tmp_path):
    cfg = parse_config(CONFIGS / "blobs-smoke.cfg")
    flat = [f"{sec}.{k}={','.join(map(str, v)) if isinstance(v, list) else v}"
            for sec, body in cfg.to_dict().items() for k, v in body.items()]
    assert parse_config(None, flat).to_dict() == cfg.to_dict()
