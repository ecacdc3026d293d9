import pytest

from spkdino.config import ConfigError, RunConfig


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert cfg.model_config().out_dim == 256
    assert cfg.segment_plan().n_views == 6


def test_text_round_trip_and_overrides():
    cfg = RunConfig().with_overrides(["train.epochs=3", "aug.pitch_cents=200", "dino.centering=false"])
    assert cfg.train.epochs == 3
    assert tuple(cfg.aug.pitch_cents) == (200.0,)
    assert cfg.dino.centering is False
    back = RunConfig.loads(cfg.dumps())
    assert back.dumps() == cfg.dumps()
    # overriding does not mutate the source
    assert RunConfig().train.epochs == 30


def test_comments_and_blank_lines():
    cfg = RunConfig.loads("# header\n\ntrain.seed = 4  # trailing\n")
    assert cfg.train.seed == 4


@pytest.mark.parametrize("text", [
    "train.nope = 1",
    "bogus.epochs = 1",
    "train.epochs = many",
    "dino.centering = maybe",
    "just words",
])
def test_bad_text_rejected(text):
    with pytest.raises(ConfigError):
        RunConfig.loads(text)


@pytest.mark.parametrize("override", [
    "train.epochs=0",
    "train.batch_size=0",
    "train.precision=float16",
    "finetune.label_fraction=0",
    "eval.nmi_average=median",
    "dino.center_momentum=1.0",
    "model.init_batch=1",
    "plan.n_long=0",
])
def test_invalid_values_rejected(override):
    with pytest.raises(ConfigError):
        RunConfig().with_overrides([override]).validate()


def test_collapse_setting_is_valid():
    RunConfig().with_overrides(["dino.centering=false", "dino.tau_t_start=0.1",
                                "dino.tau_t_end=0.1"]).validate()
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["dino.tau_t_start=0.1", "dino.tau_t_end=0.1"]).validate()
