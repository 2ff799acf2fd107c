import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ctc_prob, random_log_probs
from speech2c.audio import ConvStackConfig, Waveform
from speech2c.autodiff import AdamState, Tensor, add, mul, no_grad, parameter
from speech2c.autodiff.gradcheck import check_directional, check_entrywise
from speech2c.errors import IncompatibleConfigError, InfeasibleAlignmentError, NonFiniteLossError
from speech2c.finetune import (
    ASRModel, CharVocab, FinetuneConfig, asr_losses, ctc_loss, ctc_min_frames, finetune, finetune_step,
    init_from_pretrained, is_frozen, lr_schedule_tristage, normalize_transcript,
)
from speech2c.nets import ArchConfig, encoder_forward, encoder_input, init_pretrain_model

TINY = ArchConfig(enc_layers=1, dec_layers=1, d_model=8, d_ffn=12, n_heads=2,
                  rel_pos_max_distance=3, C=5, code_embed_dim=6)
TINY_CONV = ConvStackConfig(((4, 10, 5), (4, 3, 2)))
VOCAB = CharVocab("AB '")


def wave(n=200, seed=0):
    return Waveform(0.3 * np.random.default_rng(seed).standard_normal(n))


def asr_params(seed=0):
    pre = init_pretrain_model(TINY, TINY_CONV, np.random.default_rng(seed))
    return init_from_pretrained(pre, TINY.as_dict(), TINY, VOCAB, np.random.default_rng(seed + 100))


# -- vocabulary -----------------------------------------------------------------
def test_vocab_layout():
    v = CharVocab("AB")
    assert (v.pad, v.bos, v.eos, v.blank) == (0, 1, 2, 3)
    assert len(v) == 6 and v.label_ids == [4, 5]
    assert v.encode("BA") == [5, 4] and v.decode([1, 5, 4, 2]) == "BA"
    with pytest.raises(KeyError):
        v.encode("C")
    with pytest.raises(ValueError):
        CharVocab("AA")


def test_normalize_transcript():
    assert normalize_transcript("  it's  a-test! ") == "IT'S A TEST"


def test_vocab_from_transcripts_is_sorted():
    assert CharVocab.from_transcripts(["BA C", "A"]).chars == " ABC"


# -- CTC ------------------------------------------------------------------------
def test_ctc_single_frame():
    lp = np.log(np.array([[0.1, 0.2, 0.7]]))
    assert ctc_loss(Tensor(lp), [2], blank=0).item() == pytest.approx(-math.log(0.7), rel=1e-14)


def test_ctc_two_frames_three_paths():
    p = np.array([[0.3, 0.6, 0.1], [0.5, 0.2, 0.3]])
    a, blank = 1, 0
    expected = -math.log(p[0, a] * p[1, a] + p[0, blank] * p[1, a] + p[0, a] * p[1, blank])
    assert ctc_loss(Tensor(np.log(p)), [a], blank).item() == pytest.approx(expected, rel=1e-14)


def test_ctc_infeasible():
    lp = Tensor(random_log_probs(np.random.default_rng(0), 2, 3))
    assert ctc_min_frames([1, 1]) == 3
    with pytest.raises(InfeasibleAlignmentError):
        ctc_loss(lp, [1, 1], blank=0)


def test_ctc_rejects_blank_in_target():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 3))), [0], blank=0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 7), st.integers(2, 4), st.integers(0, 3), st.integers(0, 10_000))
def test_ctc_matches_path_enumeration(T, V, n, seed):
    r = np.random.default_rng(seed)
    blank = int(r.integers(V))
    labels = [c for c in range(V) if c != blank]
    target = [int(c) for c in r.choice(labels, n)]
    if ctc_min_frames(target) > T:
        return
    lp = random_log_probs(r, T, V)
    expected = -math.log(ctc_prob(lp, target, blank))
    assert abs(ctc_loss(Tensor(lp), target, blank).item() - expected) < 1e-10


@pytest.mark.parametrize("seed", range(4))
def test_ctc_gradcheck(seed):
    r = np.random.default_rng(seed)
    x = parameter(r.standard_normal((6, 4)))
    from speech2c.autodiff import log_softmax
    errs = check_entrywise(lambda: ctc_loss(log_softmax(x), [1, 2, 2], 0), {"x": x})
    assert errs["x"] < 1e-6


# -- schedule --------------------------------------------------------------------
def tristage_reference(step, total, peak):
    t = Fraction(step, total)
    if t < Fraction(1, 10):
        return peak * t * 10
    if t < Fraction(1, 2):
        return peak
    return peak * (1 - t) * 2


def test_tristage_examples():
    peak = Fraction(2, 100_000)
    assert lr_schedule_tristage(30, 100, peak) == peak
    assert lr_schedule_tristage(100, 100, peak) == 0
    assert lr_schedule_tristage(75, 100, peak) == peak / 2
    assert lr_schedule_tristage(0, 100, peak) == 0


def test_tristage_probe_points():
    peak = Fraction(4, 100_000)
    for step in np.linspace(0, 1000, 20).astype(int):
        assert lr_schedule_tristage(int(step), 1000, peak) == tristage_reference(int(step), 1000, peak)


def test_tristage_range():
    with pytest.raises(ValueError):
        lr_schedule_tristage(-1, 10, 1.0)


# -- initialisation -------------------------------------------------------------
def test_init_copies_shared_tensors_bitwise():
    pre = init_pretrain_model(TINY, TINY_CONV, np.random.default_rng(0))
    ft = init_from_pretrained(pre, TINY.as_dict(), TINY, VOCAB, np.random.default_rng(1))
    for k, v in pre.items():
        if k.startswith(("prenet.", "enc.", "dec.")):
            assert ft[k].data.tobytes() == v.data.tobytes(), k
            assert ft[k] is not v and not np.shares_memory(ft[k].data, v.data)
    assert not any(k.startswith("enc_post.") for k in ft)
    assert "mask_emb" not in ft
    assert ft["dec_pre.emb"].shape == (len(VOCAB), TINY.d_model)
    assert ft["dec_post.W"].shape == (TINY.d_model, len(VOCAB))
    assert ft["ctc.W"].shape == (TINY.d_model, len(VOCAB))


def test_init_fresh_layers_seeded():
    pre = init_pretrain_model(TINY, TINY_CONV, np.random.default_rng(0))
    a = init_from_pretrained(pre, TINY.as_dict(), TINY, VOCAB, np.random.default_rng(9))
    b = init_from_pretrained(pre, TINY.as_dict(), TINY, VOCAB, np.random.default_rng(9))
    for k in ("dec_pre.emb", "dec_post.W", "ctc.W"):
        np.testing.assert_array_equal(a[k].data, b[k].data)


def test_init_rejects_mismatched_arch():
    pre = init_pretrain_model(TINY, TINY_CONV, np.random.default_rng(0))
    other = ArchConfig(enc_layers=2, dec_layers=1, d_model=8, d_ffn=16, n_heads=2,
                       rel_pos_max_distance=3, C=5, code_embed_dim=6)
    with pytest.raises(IncompatibleConfigError) as e:
        init_from_pretrained(pre, TINY.as_dict(), other, VOCAB, np.random.default_rng(0))
    assert "enc_layers" in str(e.value) and "d_ffn" in str(e.value)
    assert "n_heads" not in str(e.value)


def test_init_preserves_encoder_outputs():
    pre = init_pretrain_model(TINY, TINY_CONV, np.random.default_rng(0))
    ft = init_from_pretrained(pre, TINY.as_dict(), TINY, VOCAB, np.random.default_rng(1))
    w = wave()
    with no_grad():
        a = encoder_forward(encoder_input(w, TINY_CONV, pre), pre, TINY).data
    enc_ft, _ = ASRModel(ft, TINY, TINY_CONV, VOCAB).encode(w)
    assert a.tobytes() == enc_ft.tobytes()


# -- training step --------------------------------------------------------------
def test_freeze_window_keeps_encoder():
    params = asr_params()
    cfg = FinetuneConfig(steps=10, peak_lr=1e-2, freeze_frac=0.4, batch_size=1)
    enc = {k: v.data.copy() for k, v in params.items() if k.startswith(("prenet.", "enc."))}
    dec_before = params["dec.0.ffn.w1"].data.copy()
    opt = AdamState()
    for step in range(4):
        assert is_frozen(step, cfg)
        finetune_step([(wave(), "AB")], params, TINY, TINY_CONV, VOCAB, cfg, opt, step)
    for k, v in enc.items():
        np.testing.assert_array_equal(params[k].data, v, err_msg=k)
    assert not np.array_equal(params["dec.0.ffn.w1"].data, dec_before)
    assert not is_frozen(4, cfg)
    finetune_step([(wave(), "AB")], params, TINY, TINY_CONV, VOCAB, cfg, opt, 4)
    assert not np.array_equal(params["enc.0.ffn.w1"].data, enc["enc.0.ffn.w1"])


def test_zero_ctc_weight_gives_ctc_head_no_gradient():
    params = asr_params()
    before = params["ctc.W"].data.copy()
    cfg = FinetuneConfig(steps=10, peak_lr=1e-2, ctc_weight=0.0, freeze_frac=0.0)
    finetune_step([(wave(), "A B")], params, TINY, TINY_CONV, VOCAB, cfg, AdamState(), 3)
    assert not np.any(params["ctc.W"].grad) and not np.any(params["ctc.b"].grad)
    np.testing.assert_array_equal(params["ctc.W"].data, before)


def test_loss_decomposition():
    params = asr_params()
    cfg = FinetuneConfig(steps=10, freeze_frac=0.0)
    m = finetune_step([(wave(), "AB'")], params, TINY, TINY_CONV, VOCAB, cfg, AdamState(), 5)
    assert abs(m["loss"] - (0.5 * m["lctc"] + 0.5 * m["lce"])) < 1e-12


def test_nonfinite_loss_aborts():
    params = asr_params()
    params["ctc.b"].data[:] = np.nan
    with pytest.raises(NonFiniteLossError):
        finetune_step([(wave(), "A")], params, TINY, TINY_CONV, VOCAB, FinetuneConfig(), AdamState(), 0)


def test_finetune_config_weights():
    with pytest.raises(ValueError):
        FinetuneConfig(ctc_weight=0.0, ce_weight=0.0)
    assert FinetuneConfig.base_10h().freeze_frac == 0.4
    assert FinetuneConfig.base_100h().freeze_frac == 0.3125


def test_finetune_loss_gradcheck():
    params = asr_params(3)
    data = [(wave(200, 1), "AB"), (wave(180, 2), "B A")]

    def fn():
        total = None
        for w, t in data:
            a, b = asr_losses(w, t, params, TINY, TINY_CONV, VOCAB)
            part = add(mul(a, 0.5), mul(b, 0.5))
            total = part if total is None else add(total, part)
        return total

    errs = check_directional(fn, params, np.random.default_rng(0))
    assert max(errs.values()) < 1e-4, max(errs.items(), key=lambda kv: kv[1])


def test_finetune_loop_logs_metrics():
    import io
    params = asr_params()
    buf = io.StringIO()
    cfg = FinetuneConfig(steps=2, peak_lr=1e-3, batch_size=2)
    hist = finetune([(wave(), "A"), (wave(220, 3), "B")], params, TINY, TINY_CONV, VOCAB, cfg, log_file=buf)
    lines = buf.getvalue().splitlines()
    assert len(hist) == 2 and lines[1].startswith("step=1 lctc=")
    assert [f.split("=")[0] for f in lines[0].split()] == ["step", "lctc", "lce", "lr"]
