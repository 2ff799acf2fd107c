"""Character-level ASR fine-tuning with joint CTC + attention cross-entropy."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence, TextIO

import numpy as np

from .audio import ConvStackConfig, Waveform
from .autodiff import (
    AdamState, Tensor, adam_step, add, collect_grads, concat, cross_entropy, linear,
    log_softmax, logsumexp, masked_fill, mul, no_grad, parameter, stack, take, zero_grads,
)
from .errors import IncompatibleConfigError, InfeasibleAlignmentError, NonFiniteLossError
from .nets import (
    ArchConfig, _dense, decoder_forward, encoder_forward, encoder_input, init_decoder, init_decoder_io, init_encoder,
)

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<s>", "</s>", "<blank>")


def normalize_transcript(text: str) -> str:
    """Upper-case; keep letters, digits, apostrophes and single spaces."""
    text = re.sub(r"[^A-Z0-9' ]", " ", text.upper())
    return re.sub(r" +", " ", text).strip()


@dataclass(frozen=True)
class CharVocab:
    chars: str

    pad = 0
    bos = 1
    eos = 2
    blank = 3

    def __post_init__(self):
        if len(set(self.chars)) != len(self.chars):
            raise ValueError("duplicate characters in vocabulary")

    @classmethod
    def from_transcripts(cls, texts: Sequence[str]) -> "CharVocab":
        return cls("".join(sorted(set("".join(texts)))))

    def __len__(self) -> int:
        return len(SPECIALS) + len(self.chars)

    @property
    def label_ids(self) -> list:
        return list(range(len(SPECIALS), len(self)))

    def encode(self, text: str) -> list:
        try:
            return [len(SPECIALS) + self.chars.index(c) for c in text]
        except ValueError:
            bad = next(c for c in text if c not in self.chars)
            raise KeyError(f"character {bad!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> str:
        n = len(SPECIALS)
        return "".join(self.chars[i - n] for i in ids if i >= n)

    def token(self, i: int) -> str:
        return SPECIALS[i] if i < len(SPECIALS) else self.chars[i - len(SPECIALS)]


# -- CTC ------------------------------------------------------------------------
def ctc_min_frames(target: Sequence[int]) -> int:
    target = list(target)
    return len(target) + sum(1 for a, b in zip(target, target[1:]) if a == b)


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """-log sum over all CTC alignments of ``target``; forward recursion in log space.

    log_probs: [T, V] per-frame log-probabilities.  Built from autodiff ops, so
    the gradient is whatever backward produces through the recursion.
    """
    target = [int(t) for t in target]
    T, V = log_probs.shape
    if any(t == blank or not 0 <= t < V for t in target):
        raise ValueError(f"CTC target {target} contains blank or out-of-range labels")
    need = ctc_min_frames(target)
    if T < need:
        raise InfeasibleAlignmentError(f"CTC needs at least {need} frames for target of length "
                                       f"{len(target)}, got {T}")
    ext = [blank]
    for t in target:
        ext += [t, blank]
    S = len(ext)
    ext_arr = np.asarray(ext)
    skip_ok = np.zeros(S, dtype=bool)
    skip_ok[2:] = (ext_arr[2:] != blank) & (ext_arr[2:] != ext_arr[:-2])
    emit = take(log_probs, (slice(None), ext_arr))  # [T, S]

    neg = Tensor(np.full(2, -np.inf))
    start = np.ones(S, dtype=bool)
    start[:2] = False
    alpha = masked_fill(emit[0], start, -np.inf)
    for t in range(1, T):
        shift1 = concat([neg[:1], alpha[:-1]])
        shift2 = masked_fill(concat([neg[:min(2, S)], alpha[:-2]]), ~skip_ok, -np.inf)
        alpha = add(logsumexp(stack([alpha, shift1, shift2]), 0), emit[t])
    tail = alpha[-2:] if S > 1 else alpha
    return mul(logsumexp(tail, 0), -1.0)


# -- schedule -------------------------------------------------------------------
def lr_schedule_tristage(step, total, peak):
    """10% linear warm-up, 40% hold at ``peak``, 50% linear decay to 0."""
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    warm = Fraction(1, 10) * total
    hold_end = Fraction(1, 2) * total
    if step < warm:
        return peak * step / warm
    if step < hold_end:
        return peak
    return peak * (total - step) / (total - hold_end)


# -- model --------------------------------------------------------------------
SHARED_PREFIXES = ("prenet.", "enc.", "dec.")
ENCODER_PREFIXES = ("prenet.", "enc.")


def _is_shared(name: str) -> bool:
    return name.startswith(SHARED_PREFIXES)


def init_asr_params(arch: ArchConfig, conv: ConvStackConfig, vocab: CharVocab, rng: np.random.Generator) -> dict:
    """Fresh (non-pretrained) ASR model: encoder, decoder stack and character I/O nets."""
    p = {k: v for k, v in init_encoder(arch, conv, rng).items() if _is_shared(k)}
    p.update(init_decoder(arch, rng))
    p.update(fresh_char_layers(arch.d_model, vocab, rng))
    return p


def fresh_char_layers(d_model: int, vocab: CharVocab, rng: np.random.Generator) -> dict:
    p = init_decoder_io(d_model, len(vocab), rng)
    p["ctc.W"] = _dense(rng, d_model, len(vocab))
    p["ctc.b"] = parameter(np.zeros(len(vocab)))
    return p


ARCH_KEYS = ("enc_layers", "dec_layers", "d_model", "d_ffn", "n_heads", "rel_pos_max_distance")


def init_from_pretrained(ckpt_params: dict, ckpt_arch: dict, arch: ArchConfig, vocab: CharVocab,
                         rng: np.random.Generator) -> dict:
    """Copy conv pre-net, encoder and decoder stacks; drop the code-specific nets.

    The encoder post-net, mask embedding and the code-vocabulary decoder
    pre/post-nets are discarded.  Character decoder pre/post-nets and the CTC
    projection are drawn fresh from ``rng``.
    """
    diff = [k for k in ARCH_KEYS if ckpt_arch.get(k) != getattr(arch, k)]
    if diff:
        detail = ", ".join(f"{k}: checkpoint={ckpt_arch.get(k)} model={getattr(arch, k)}" for k in diff)
        raise IncompatibleConfigError(f"pre-trained checkpoint does not match architecture ({detail})")
    p = {k: parameter(np.array(v.data if isinstance(v, Tensor) else v, copy=True))
         for k, v in ckpt_params.items() if _is_shared(k)}
    p.update(fresh_char_layers(arch.d_model, vocab, rng))
    return p


@dataclass
class ASRModel:
    """Fine-tuned encoder-decoder plus its CTC head; the scorer used by the decoders."""
    params: dict
    arch: ArchConfig
    conv: ConvStackConfig
    vocab: CharVocab

    def encode(self, wave: Waveform):
        """(encoder states [T, d], CTC log-probs [T, V]) as numpy arrays."""
        with no_grad():
            h = encoder_forward(encoder_input(wave, self.conv, self.params), self.params, self.arch)
            ctc = log_softmax(linear(h, self.params["ctc.W"], self.params["ctc.b"]))
        return h.data, ctc.data

    def next_token_logprobs(self, enc_out: np.ndarray, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """[B, V] attention-decoder log-probs of the token following each prefix (same length)."""
        with no_grad():
            logits = decoder_forward(np.asarray(prefixes), Tensor(enc_out), self.params, self.arch)
            return log_softmax(logits).data[:, -1, :]


def asr_losses(wave: Waveform, text: str, params: dict, arch: ArchConfig, conv: ConvStackConfig,
               vocab: CharVocab, freeze_encoder: bool = False):
    """(L_ctc, L_ce) for one utterance; encoder runs without a graph when frozen."""
    target = vocab.encode(text)
    if freeze_encoder:
        with no_grad():
            h = encoder_forward(encoder_input(wave, conv, params), params, arch)
        h = h.detach()
    else:
        h = encoder_forward(encoder_input(wave, conv, params), params, arch)
    ctc_lp = log_softmax(linear(h, params["ctc.W"], params["ctc.b"]))
    lctc = ctc_loss(ctc_lp, target, vocab.blank)
    logits = decoder_forward([vocab.bos] + target, h, params, arch)
    lce = cross_entropy(log_softmax(logits), target + [vocab.eos])
    return lctc, lce


@dataclass
class FinetuneConfig:
    steps: int = 300
    peak_lr: float = 2e-5
    ctc_weight: float = 0.5
    ce_weight: float = 0.5
    freeze_frac: float = 0.4
    batch_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.ctc_weight < 0 or self.ce_weight < 0 or self.ctc_weight + self.ce_weight <= 0:
            raise ValueError("ctc_weight and ce_weight must be >= 0 with a positive sum")

    @classmethod
    def base_10h(cls) -> "FinetuneConfig":
        return cls(steps=25_000, peak_lr=2e-5, freeze_frac=10_000 / 25_000)

    @classmethod
    def base_100h(cls) -> "FinetuneConfig":
        return cls(steps=80_000, peak_lr=4e-5, freeze_frac=25_000 / 80_000)


def is_frozen(step: int, cfg: FinetuneConfig) -> bool:
    return step < cfg.freeze_frac * cfg.steps


def finetune_step(batch: Sequence[tuple], params: dict, arch: ArchConfig, conv: ConvStackConfig,
                  vocab: CharVocab, cfg: FinetuneConfig, opt: AdamState, step: int) -> dict:
    """One update on ctc_weight * L_ctc + ce_weight * L_ce, averaged over (wave, text) pairs.

    While the encoder is frozen, pre-net and encoder parameters are left out
    of the update entirely.
    """
    frozen = is_frozen(step, cfg)
    lr = lr_schedule_tristage(step, cfg.steps, cfg.peak_lr)
    zero_grads(params)
    total, ctc_vals, ce_vals = None, [], []
    for wave, text in batch:
        lctc, lce = asr_losses(wave, text, params, arch, conv, vocab, frozen)
        ctc_vals.append(lctc.item())
        ce_vals.append(lce.item())
        terms = [mul(t, w) for t, w in ((lctc, cfg.ctc_weight), (lce, cfg.ce_weight)) if w > 0]
        part = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
        total = part if total is None else add(total, part)
    total = mul(total, 1.0 / len(batch))
    metrics = {"lctc": float(np.mean(ctc_vals)), "lce": float(np.mean(ce_vals)), "lr": float(lr),
               "loss": total.item()}
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NonFiniteLossError(f"non-finite fine-tuning loss at step {step}: "
                                 f"lctc={metrics['lctc']} lce={metrics['lce']}")
    total.backward()
    grads = collect_grads(params)
    if frozen:
        grads = {k: g for k, g in grads.items() if not k.startswith(ENCODER_PREFIXES)}
    adam_step(params, grads, opt, lr)
    return metrics


def finetune(data: Sequence[tuple], params: dict, arch: ArchConfig, conv: ConvStackConfig,
             vocab: CharVocab, cfg: FinetuneConfig, opt: Optional[AdamState] = None,
             log_file: Optional[TextIO] = None, callback=None) -> list:
    """Run ``cfg.steps`` updates over (wave, text) pairs.

    ``callback(step, metrics)`` runs after every update; returning True stops early.
    """
    from .pretrain import format_metrics

    opt = opt or AdamState()
    order_rng = np.random.default_rng([cfg.seed, 3])
    bs = min(cfg.batch_size, len(data))
    order: list = []
    history = []
    for step in range(cfg.steps):
        if len(order) < bs:
            order.extend(order_rng.permutation(len(data)).tolist())
        picked, order = order[:bs], order[bs:]
        m = finetune_step([data[i] for i in picked], params, arch, conv, vocab, cfg, opt, step)
        history.append(m)
        if log_file is not None:
            log_file.write(format_metrics(step, m, ("lctc", "lce", "lr")) + "\n")
        if callback is not None and callback(step, m):
            break
    return history
