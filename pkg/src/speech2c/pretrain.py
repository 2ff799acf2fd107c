"""Masked code prediction + reduced-code reconstruction pre-training."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence, TextIO

import numpy as np

from .audio import ConvStackConfig, Waveform, frame_count
from .autodiff import (
    AdamState, Tensor, adam_step, add, collect_grads, cross_entropy, log_softmax, mul, no_grad,
    reshape, take, zero_grads,
)
from .errors import ContractError, NonFiniteLossError
from .nets import ArchConfig, code_logits, decoder_forward, encoder_forward, encoder_input
from .quantizer import reduce_codes

log = logging.getLogger(__name__)

PRETRAIN_WARMUP = Fraction(8, 100)


@dataclass
class MaskSpec:
    mask_prob: float = 0.08
    span_len: int = 10
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mask_prob < 1:
            raise ValueError("mask_prob must be in (0, 1)")
        if self.span_len < 1:
            raise ValueError("span_len must be >= 1")


@dataclass
class SpanMask:
    starts: np.ndarray
    mask: np.ndarray  # bool [T]

    @property
    def indices(self) -> np.ndarray:
        return np.nonzero(self.mask)[0]

    def apply(self, x: Tensor, mask_emb: Tensor) -> Tensor:
        return apply_mask(x, self.mask, mask_emb)


def sample_span_mask(T: int, spec: MaskSpec, rng: Optional[np.random.Generator] = None) -> SpanMask:
    """ceil(mask_prob * T) distinct span starts; spans of span_len truncated at T and unioned."""
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n_starts = min(T, math.ceil(spec.mask_prob * T))
    starts = np.sort(rng.choice(T, size=n_starts, replace=False))
    mask = np.zeros(T, dtype=bool)
    for s in starts:
        mask[s:s + spec.span_len] = True
    return SpanMask(starts, mask)


def apply_mask(x: Tensor, mask: np.ndarray, mask_emb: Tensor) -> Tensor:
    """Replace the masked rows of x [T, d] by the learned mask embedding."""
    m = np.asarray(mask, dtype=np.float64)[:, None]
    return add(mul(x, 1.0 - m), mul(reshape(mask_emb, (1, -1)), m))


# -- losses -------------------------------------------------------------------
def mlm_loss(h: Tensor, z: Sequence[int], mask: np.ndarray, params: dict) -> Tensor:
    """Mean cross-entropy of the frame codes over masked frames only.

    With no masked frame the loss is 0 and carries zero gradient.
    """
    z = np.asarray(z, dtype=np.int64)
    if len(z) != h.shape[0]:
        raise ContractError(f"mlm_loss: {h.shape[0]} frames but {len(z)} codes")
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return cross_entropy(log_softmax(code_logits(h, params)), [-1] * len(z), ignore_index=-1)
    return cross_entropy(log_softmax(code_logits(take(h, idx), params)), z[idx])


def reconstruction_loss(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Token-level mean of -log p(z_n | z_<n, x~) under teacher forcing."""
    if logits.shape[0] != len(targets):
        raise ContractError(f"reconstruction_loss: {logits.shape[0]} logit rows vs {len(targets)} targets")
    return cross_entropy(log_softmax(logits), targets)


def decoder_sequences(codes: Sequence[int], arch: ArchConfig, codes_mode: str = "reduced"):
    """(BOS + z, z + EOS) for teacher forcing; z is reduced unless codes_mode == 'repeated'."""
    if codes_mode not in ("reduced", "repeated"):
        raise ValueError(f"codes_mode must be 'reduced' or 'repeated', got {codes_mode!r}")
    z = reduce_codes(codes).codes if codes_mode == "reduced" else list(codes)
    return [arch.bos] + z, z + [arch.eos]


# -- batches ------------------------------------------------------------------
@dataclass
class PretrainItem:
    wave: Waveform
    codes: list  # frame-level codes, one per encoder frame


@dataclass
class PretrainBatch:
    x: Tensor
    x_masked: Tensor
    mask: np.ndarray
    z: list
    dec_in: list
    dec_out: list


def build_batch(item: PretrainItem, params: dict, conv: ConvStackConfig, arch: ArchConfig,
                spec: MaskSpec, rng: np.random.Generator, codes_mode: str = "reduced") -> PretrainBatch:
    x = encoder_input(item.wave, conv, params)
    if x.shape[0] != len(item.codes):
        raise ContractError(f"{x.shape[0]} encoder frames but {len(item.codes)} codes")
    m = sample_span_mask(x.shape[0], spec, rng)
    dec_in, dec_out = decoder_sequences(item.codes, arch, codes_mode)
    return PretrainBatch(x, m.apply(x, params["mask_emb"]), m.mask, list(item.codes), dec_in, dec_out)


def batch_losses(batch: PretrainBatch, params: dict, arch: ArchConfig,
                 need_mlm: bool = True, need_mle: bool = True):
    h = encoder_forward(batch.x_masked, params, arch)
    lmlm = lmle = None
    if need_mlm:
        lmlm = mlm_loss(h, batch.z, batch.mask, params)
    if need_mle:
        lmle = reconstruction_loss(decoder_forward(batch.dec_in, h, params, arch), batch.dec_out)
    return lmlm, lmle


# -- schedule -------------------------------------------------------------------
def lr_schedule_pretrain(step, total_steps, peak, warmup_frac=PRETRAIN_WARMUP):
    """Linear warm-up to ``peak`` over the first 8% of updates, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warm = warmup_frac * total_steps
    if step < warm:
        return peak * step / warm
    return peak * (total_steps - step) / (total_steps - warm)


# -- training -------------------------------------------------------------------
@dataclass
class PretrainConfig:
    steps: int = 200
    peak_lr: float = 2e-4
    batch_size: int = 4
    w_mlm: float = 1.0
    w_mle: float = 1.0
    codes_mode: str = "reduced"
    mask: MaskSpec = field(default_factory=MaskSpec)
    seed: int = 0

    def __post_init__(self):
        if self.w_mlm < 0 or self.w_mle < 0 or (self.w_mlm == 0 and self.w_mle == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")


def pretrain_step(batches: Sequence[PretrainBatch], params: dict, opt: AdamState,
                  weights: tuple, lr: float, arch: ArchConfig, step: int = 0) -> dict:
    """One optimizer update on lambda_mlm * L_mlm + lambda_mle * L_mle averaged over ``batches``.

    A zero weight leaves that term out of the objective (its value is still
    reported), so parameters only it depends on get exactly zero gradient.
    """
    w_mlm, w_mle = weights
    zero_grads(params)
    total, mlm_vals, mle_vals = None, [], []
    for b in batches:
        lmlm, lmle = batch_losses(b, params, arch)
        mlm_vals.append(lmlm.item())
        mle_vals.append(lmle.item())
        terms = [mul(t, w) for t, w in ((lmlm, w_mlm), (lmle, w_mle)) if w > 0]
        part = terms[0] if len(terms) == 1 else add(terms[0], terms[1])
        total = part if total is None else add(total, part)
    total = mul(total, 1.0 / len(batches))
    metrics = {"lmlm": float(np.mean(mlm_vals)), "lmle": float(np.mean(mle_vals)), "lr": float(lr),
               "loss": total.item()}
    if not all(math.isfinite(v) for v in metrics.values()):
        raise NonFiniteLossError(f"non-finite pre-training loss at step {step}: "
                                 f"lmlm={metrics['lmlm']} lmle={metrics['lmle']}")
    total.backward()
    adam_step(params, collect_grads(params), opt, lr)
    return metrics


def format_metrics(step: int, metrics: dict, keys: Sequence[str]) -> str:
    return " ".join([f"step={step}"] + [f"{k}={metrics[k]:.8g}" for k in keys])


def pretrain(items: Sequence[PretrainItem], params: dict, arch: ArchConfig, conv: ConvStackConfig,
             cfg: PretrainConfig, opt: Optional[AdamState] = None, start_step: int = 0,
             log_file: Optional[TextIO] = None, stop_step: Optional[int] = None) -> list:
    """Run updates ``start_step .. cfg.steps - 1``; returns their metrics dicts.

    When resuming, the batch-order and mask draws of the skipped steps are
    replayed, so a resumed run matches an uninterrupted one.  ``stop_step``
    cuts the loop short without changing the learning-rate schedule.
    """
    if not items:
        raise ValueError("pretrain: no training items")
    opt = opt or AdamState()
    mask_rng = np.random.default_rng([cfg.seed, 1])
    order_rng = np.random.default_rng([cfg.seed, 2])
    bs = min(cfg.batch_size, len(items))
    order: list = []
    history = []
    for step in range(cfg.steps if stop_step is None else min(stop_step, cfg.steps)):
        if len(order) < bs:
            order.extend(order_rng.permutation(len(items)).tolist())
        picked, order = order[:bs], order[bs:]
        if step < start_step:
            for i in picked:
                sample_span_mask(frame_count(len(items[i].wave), conv), cfg.mask, mask_rng)
            continue
        lr = lr_schedule_pretrain(step, cfg.steps, cfg.peak_lr)
        batches = [build_batch(items[i], params, conv, arch, cfg.mask, mask_rng, cfg.codes_mode)
                   for i in picked]
        m = pretrain_step(batches, params, opt, (cfg.w_mlm, cfg.w_mle), lr, arch, step)
        history.append(m)
        line = format_metrics(step, m, ("lmlm", "lmle", "lr"))
        log.debug(line)
        if log_file is not None:
            log_file.write(line + "\n")
    return history


def evaluate_losses(items: Sequence[PretrainItem], params: dict, arch: ArchConfig, conv: ConvStackConfig,
                    spec: MaskSpec, codes_mode: str = "reduced", seed: int = 1234) -> tuple:
    """Mean (L_mlm, L_mle) over ``items`` with a fixed mask draw, no gradients."""
    rng = np.random.default_rng(seed)
    mlm, mle = [], []
    with no_grad():
        for it in items:
            b = build_batch(it, params, conv, arch, spec, rng, codes_mode)
            a, c = batch_losses(b, params, arch)
            mlm.append(a.item())
            mle.append(c.item())
    return float(np.mean(mlm)), float(np.mean(mle))
