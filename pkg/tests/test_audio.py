import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from speech2c.audio import (
    ConvStackConfig, SynthSpec, Waveform, feature_encode, frame_count, init_prenet, load_wav,
    read_manifest, render, signature, synth_corpus, write_manifest, write_wav,
)
from speech2c.autodiff import conv1d, Tensor
from speech2c.errors import FormatError, InputTooShortError
from speech2c.quantizer import frame_features


def test_silence_file(tmp_path):
    write_wav(tmp_path / "s.wav", np.zeros(16000, dtype=np.int16))
    w = load_wav(tmp_path / "s.wav")
    assert w.sample_rate == 16000 and len(w) == 16000 and not w.samples.any()


def test_min_pcm_value_maps_to_minus_one(tmp_path):
    write_wav(tmp_path / "m.wav", np.array([-32768, 32767, 0], dtype=np.int16))
    w = load_wav(tmp_path / "m.wav")
    assert w.samples[0] == -1.0
    assert w.samples.max() < 1.0


def test_pcm_round_trip_bit_identical(tmp_path):
    pcm = np.random.default_rng(0).integers(-32768, 32768, 5000).astype(np.int16)
    write_wav(tmp_path / "r.wav", pcm, 8000)
    w = load_wav(tmp_path / "r.wav")
    assert w.sample_rate == 8000
    np.testing.assert_array_equal((w.samples * 32768).astype(np.int16), pcm)


@pytest.mark.parametrize("offset,value,field", [
    (20, (3).to_bytes(2, "little"), "audio_format"),
    (22, (2).to_bytes(2, "little"), "channels"),
    (34, (8).to_bytes(2, "little"), "bits_per_sample"),
    (0, b"RIFX", "RIFF"),
])
def test_malformed_header_names_field(tmp_path, offset, value, field):
    write_wav(tmp_path / "b.wav", np.zeros(10, dtype=np.int16))
    raw = bytearray((tmp_path / "b.wav").read_bytes())
    raw[offset:offset + len(value)] = value
    (tmp_path / "b.wav").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match=field):
        load_wav(tmp_path / "b.wav")


def test_manifest_round_trip(tmp_path):
    rows = [("wav/0.wav", "AB C"), ("wav/1.wav", "D'E")]
    write_manifest(tmp_path / "m.tsv", rows)
    assert read_manifest(tmp_path / "m.tsv") == rows


def test_synth_is_concatenation_of_signatures():
    (w, text), = synth_corpus(SynthSpec(transcripts=("AB",), seed=3))
    assert text == "AB"
    n = 1600
    np.testing.assert_array_equal(w.samples, np.concatenate([signature("A", n), signature("B", n)]))


def test_synth_deterministic():
    a = synth_corpus(SynthSpec(n_utts=5, seed=11))
    b = synth_corpus(SynthSpec(n_utts=5, seed=11))
    assert [t for _, t in a] == [t for _, t in b]
    for (wa, _), (wb, _) in zip(a, b):
        assert wa.samples.tobytes() == wb.samples.tobytes()


def test_synth_empty_vocab():
    with pytest.raises(ValueError):
        synth_corpus(SynthSpec(vocab=""))


def test_synth_amplitude_bounded():
    for w, _ in synth_corpus(SynthSpec(n_utts=5, seed=1)):
        assert np.abs(w.samples).max() <= 1.0


def test_synth_symbols_acoustically_separable():
    cfg = ConvStackConfig.desk()
    by_symbol = {}
    for w, text in synth_corpus(SynthSpec(n_utts=10, seed=2)):
        feats = frame_features(w, cfg)
        for s, ch in enumerate(text):
            # frames fully inside symbol s: start >= s*1600, end <= (s+1)*1600
            rows = [t for t in range(len(feats)) if t * 320 >= s * 1600 and t * 320 + 400 <= (s + 1) * 1600]
            by_symbol.setdefault(ch, []).extend(feats[rows])
    means = {k: np.mean(v, axis=0) for k, v in by_symbol.items()}
    within = np.mean([np.linalg.norm(np.array(v) - means[k], axis=1).mean() for k, v in by_symbol.items()])
    keys = sorted(means)
    across = np.mean([np.linalg.norm(means[a] - means[b]) for a in keys for b in keys if a < b])
    assert across > within


def test_frame_count_base_config():
    cfg = ConvStackConfig.base()
    assert frame_count(16000, cfg) == 49
    assert frame_count(16320, cfg) == 50
    assert frame_count(9, cfg) == 0
    assert cfg.hop == 320
    assert cfg.receptive_field == 400


def test_frame_count_layer_recurrence():
    t, lengths = 16000, []
    for k, s in zip((10, 3, 3, 3, 3, 2, 2), (5, 2, 2, 2, 2, 2, 2)):
        t = (t - k) // s + 1
        lengths.append(t)
    assert lengths == [3199, 1599, 799, 399, 199, 99, 49]


@settings(max_examples=30, deadline=None)
@given(st.integers(400, 4000))
def test_frame_count_matches_encoder_rows(n):
    cfg = ConvStackConfig.desk(channels=2)
    params = init_prenet(cfg, np.random.default_rng(0))
    x = np.random.default_rng(n).uniform(-1, 1, n)
    assert feature_encode(Waveform(x), cfg, params).shape == (frame_count(n, cfg), 2)
    assert frame_features(x, cfg).shape[0] == frame_count(n, cfg)


def test_feature_encode_too_short_reports_minimum():
    cfg = ConvStackConfig.desk(channels=2)
    with pytest.raises(InputTooShortError, match="400"):
        feature_encode(Waveform(np.zeros(300)), cfg, init_prenet(cfg, np.random.default_rng(0)))


def test_feature_encode_single_identity_layer():
    cfg = ConvStackConfig(((1, 1, 1),))
    params = {"prenet.conv0": Tensor(np.ones((1, 1, 1)))}
    x = np.linspace(-1, 1, 7)
    np.testing.assert_array_equal(feature_encode(Waveform(x), cfg, params).data[:, 0], x)


def test_feature_encode_deterministic_and_linear_first_layer():
    cfg = ConvStackConfig.desk(channels=4)
    params = init_prenet(cfg, np.random.default_rng(1))
    w = render("AB")
    a = feature_encode(w, cfg, params).data
    b = feature_encode(w, cfg, params).data
    assert a.tobytes() == b.tobytes()
    x = Tensor(w.samples.reshape(-1, 1))
    pre1 = conv1d(x, params["prenet.conv0"], 5).data
    pre2 = conv1d(Tensor(2 * w.samples.reshape(-1, 1)), params["prenet.conv0"], 5).data
    np.testing.assert_allclose(pre2, 2 * pre1, rtol=1e-13, atol=1e-15)
