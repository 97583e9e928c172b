import pytest
from hypothesis import given
from hypothesis import strategies as st

from dqrec.config import (STAGES, SYNTHETIC_PRESET, RunConfig, dump_config, load_config, parse_config_text,
                          save_config, synthetic_config)


def test_defaults_follow_reference_settings():
    c = RunConfig()
    assert (c.dim, c.layers, c.codebook_size, c.beta) == (64, 4, 128, 0.25)
    assert (c.neighbors, c.latent_neighbors, c.batch_size, c.lr, c.patience) == (30, 2, 1024, 1e-3, 3)
    assert c.semantic_dim == 16 and c.hidden == 128 and c.max_seq_len == 50


def test_preset_only_overrides():
    c = synthetic_config(seed=4)
    assert c.seed == 4
    for k, v in SYNTHETIC_PRESET.items():
        assert getattr(c, k) == v
    assert synthetic_config(codebook_size=8).codebook_size == 8


@pytest.mark.parametrize("changes", [dict(layers=5), dict(codebook_size=1), dict(epochs=0), dict(ks=()),
                                     dict(synth_p_in=1.5), dict(lr=0.0), dict(semantic_history="future")])
def test_invalid_values_rejected(changes):
    with pytest.raises(ValueError):
        RunConfig(**changes)


def test_text_roundtrip(tmp_path):
    c = RunConfig(delimiter="\t", item_attributes="a.csv", ks=(1, 7), user_linkage=False, lr=3e-4)
    save_config(c, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == c
    assert "delimiter = \\t" in dump_config(c)


@given(st.integers(1, 8), st.sampled_from([1, 2, 4, 8]), st.booleans(), st.floats(1e-5, 1.0))
def test_roundtrip_property(seed, layers, flag, lr):
    c = RunConfig(seed=seed, layers=layers, item_feature=flag, lr=lr)
    assert RunConfig(**parse_config_text(dump_config(c))) == c


def test_parse_comments_and_errors():
    vals = parse_config_text("# note\n\nneighbors = 7  # inline\nheader = yes\nuser_attributes =\n")
    assert vals == {"neighbors": 7, "header": True, "user_attributes": None}
    with pytest.raises(ValueError, match=r"cfg:2: unknown key 'nope'"):
        parse_config_text("seed = 1\nnope = 3\n", "cfg")
    with pytest.raises(ValueError, match=r"cfg:1:"):
        parse_config_text("epochs = many\n", "cfg")
    with pytest.raises(ValueError, match=r"cfg:1: expected"):
        parse_config_text("epochs 3\n", "cfg")
    with pytest.raises(ValueError, match="true or false"):
        parse_config_text("header = maybe\n")


def test_load_with_overrides(tmp_path):
    (tmp_path / "c.txt").write_text("neighbors = 7\n")
    c = load_config(tmp_path / "c.txt", synthetic_config(), seed=9)
    assert (c.neighbors, c.seed, c.codebook_size) == (7, 9, 16)


def test_fingerprints_chain():
    base = RunConfig()
    train_change = base.replace(epochs=7)
    for stage in STAGES[:STAGES.index("train")]:
        assert base.stage_fingerprint(stage) == train_change.stage_fingerprint(stage)
    for stage in ("train", "eval"):
        assert base.stage_fingerprint(stage) != train_change.stage_fingerprint(stage)
    seeded = base.replace(seed=1)
    assert all(base.stage_fingerprint(s) != seeded.stage_fingerprint(s) for s in STAGES)
    assert base.stage_fingerprint("prepare") != base.replace(synth_p_in=0.5).stage_fingerprint("prepare")
