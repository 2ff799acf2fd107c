import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speech2c.autodiff import AdamState, parameter
from speech2c.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from speech2c.config import Config, ConfigError, parse_config
from speech2c.errors import FormatError


# -- config -------------------------------------------------------------------------
def test_empty_file_gives_defaults(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("")
    assert parse_config(p) == Config()


def test_file_then_override_precedence(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nd_model = 32   # trailing\n\nbeam=2\n")
    cfg = parse_config(p, ["beam=7"])
    assert cfg.d_model == 32 and cfg.beam == 7


def test_unknown_key_names_key_and_line(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("beam = 2\nfoo = 1\n")
    with pytest.raises(ConfigError, match=r"c\.cfg:2.*'foo'"):
        parse_config(p)


def test_bad_value_names_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("pretrain_steps = many\n")
    with pytest.raises(ConfigError, match="pretrain_steps"):
        parse_config(p)
    with pytest.raises(ConfigError, match="w_mle"):
        parse_config(None, ["w_mle=heavy"])
    with pytest.raises(ConfigError):
        parse_config(None, ["beam"])


def test_codes_mode_checked():
    with pytest.raises(ConfigError):
        parse_config(None, ["codes_mode=both"])


def test_fingerprint_tracks_values():
    a, b = Config(), Config(beam=5)
    assert a.fingerprint() == Config().fingerprint() and a.fingerprint() != b.fingerprint()


def test_sub_seeds_are_distinct_streams():
    cfg = Config(seed=3)
    draws = {s: cfg.rng(s).random() for s in ("mask", "init", "kmeans")}
    assert len(set(draws.values())) == 3
    assert cfg.rng("init").random() == draws["init"]


def test_component_views():
    cfg = Config(n_codes=8, mask_prob=0.1, codes_mode="repeated")
    assert cfg.arch().C == 8 and cfg.arch().code_vocab == 11
    assert cfg.pretrain().mask.mask_prob == 0.1 and cfg.pretrain().codes_mode == "repeated"
    assert cfg.conv().hop == 320
    assert Config.grid("0, 0.5,1") == [0.0, 0.5, 1.0]


# -- checkpoint -------------------------------------------------------------------
def sample_params(seed=0):
    r = np.random.default_rng(seed)
    return {"b": parameter(r.standard_normal(3)), "a.W": parameter(r.standard_normal((2, 4))),
            "s": parameter(np.array(2.5))}


def test_round_trip_bit_exact(tmp_path):
    params = sample_params()
    opt = AdamState(step=7)
    opt.m["b"] = np.arange(3.0)
    opt.v["b"] = np.arange(3.0) ** 2
    save_checkpoint(tmp_path / "x.ckpt", params, 12, "abc", {"kind": "pretrain"}, opt)
    ck = load_checkpoint(tmp_path / "x.ckpt")
    assert ck.step == 12 and ck.fingerprint == "abc" and ck.meta == {"kind": "pretrain"}
    for k, v in params.items():
        assert ck.params[k].tobytes() == v.data.tobytes() and ck.params[k].shape == v.shape
    assert ck.opt.step == 7 and ck.opt.beta2 == 0.98
    np.testing.assert_array_equal(ck.opt.v["b"], opt.v["b"])


def test_resave_is_byte_identical(tmp_path):
    opt = AdamState(step=1, m={"s": np.array(1.0)}, v={"s": np.array(2.0)})
    save_checkpoint(tmp_path / "a.ckpt", sample_params(1), 3, "f", {"x": [1, 2]}, opt)
    ck = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", ck.params, ck.step, ck.fingerprint, ck.meta, ck.opt)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(allow_nan=False, width=64), min_size=1, max_size=20))
def test_any_finite_values_round_trip(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("ck") / "v.ckpt"
    save_checkpoint(path, {"v": np.array(values)})
    assert load_checkpoint(path).params["v"].tobytes() == np.array(values).tobytes()


def test_wrong_magic(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, sample_params())
    raw = bytearray(p.read_bytes())
    raw[:8] = b"NOTACKPT"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic.*offset 0"):
        load_checkpoint(p)


def test_truncation_reports_offset(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, sample_params())
    raw = p.read_bytes()
    p.write_bytes(raw[:-5])
    with pytest.raises(FormatError, match="byte offset"):
        load_checkpoint(p)
    p.write_bytes(raw[:10])
    with pytest.raises(FormatError, match="offset 0"):
        load_checkpoint(p)


def test_trailing_bytes_and_corrupt_header(tmp_path):
    p = tmp_path / "x.ckpt"
    save_checkpoint(p, sample_params())
    raw = p.read_bytes()
    p.write_bytes(raw + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(p)
    bad = bytearray(raw)
    bad[len(MAGIC) + 12] = ord("!")
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError, match="header at byte offset 20"):
        load_checkpoint(p)
