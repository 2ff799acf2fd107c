"""End-to-end drivers shared by the CLI, the scripts and the acceptance suite."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, TextIO

import numpy as np

from .audio import Waveform
from .autodiff import AdamState, parameter
from .config import Config
from .finetune import ASRModel, CharVocab, finetune, init_asr_params, init_from_pretrained, normalize_transcript
from .nets import init_pretrain_model
from .pretrain import PretrainItem, evaluate_losses, pretrain
from .quantizer import KMeansModel, frame_features, kmeans_assign, kmeans_fit, reduce_codes
from .search import SearchOptions, best_text, corpus_wer, decode_corpus

log = logging.getLogger(__name__)

ENCODER_PREFIXES = ("prenet.", "enc.")


# -- quantization ---------------------------------------------------------------
def quantize(waves: Sequence[Waveform], cfg: Config) -> tuple:
    """Fit k-means on the frame features of every waveform; returns (model, frame-level codes)."""
    conv = cfg.conv()
    feats = [frame_features(w, conv, cfg.n_bands, cfg.log_floor) for w in waves]
    km = kmeans_fit(np.vstack(feats), cfg.n_codes, seed=cfg.sub_seed("kmeans"), max_iters=cfg.kmeans_iters)
    return km, [kmeans_assign(km, f).codes for f in feats]


def assign_codes(waves: Sequence[Waveform], km: KMeansModel, cfg: Config) -> list:
    conv = cfg.conv()
    return [kmeans_assign(km, frame_features(w, conv, cfg.n_bands, cfg.log_floor)).codes for w in waves]


def code_length_stats(codes: Sequence[Sequence[int]]) -> tuple:
    """(mean frame-level length, mean reduced length)."""
    return (float(np.mean([len(c) for c in codes])),
            float(np.mean([len(reduce_codes(c)) for c in codes])))


# -- pre-training -----------------------------------------------------------------
def init_pretrain_params(cfg: Config) -> dict:
    return init_pretrain_model(cfg.arch(), cfg.conv(), cfg.rng("init"))


def copy_encoder(params: dict, source: dict) -> list:
    """Overwrite pre-net and encoder tensors of ``params`` with copies from ``source``."""
    copied = []
    for k in sorted(params):
        if k.startswith(ENCODER_PREFIXES):
            if k not in source:
                raise KeyError(f"encoder tensor {k!r} missing from the source checkpoint")
            src = np.asarray(source[k].data if hasattr(source[k], "data") else source[k])
            if src.shape != params[k].shape:
                raise ValueError(f"encoder tensor {k!r}: source {src.shape} vs model {params[k].shape}")
            params[k] = parameter(src.copy())
            copied.append(k)
    return copied


def run_pretrain(waves: Sequence[Waveform], codes: Sequence[Sequence[int]], cfg: Config,
                 params: Optional[dict] = None, opt: Optional[AdamState] = None, start_step: int = 0,
                 log_file: Optional[TextIO] = None, stop_after: Optional[int] = None):
    """(params, opt, history).  ``stop_after`` ends the run early at that step count."""
    params = params if params is not None else init_pretrain_params(cfg)
    opt = opt or AdamState()
    items = [PretrainItem(w, list(c)) for w, c in zip(waves, codes)]
    history = pretrain(items, params, cfg.arch(), cfg.conv(), cfg.pretrain(), opt, start_step, log_file, stop_after)
    return params, opt, history


def pretrain_eval(waves, codes, params, cfg: Config) -> tuple:
    items = [PretrainItem(w, list(c)) for w, c in zip(waves, codes)]
    return evaluate_losses(items, params, cfg.arch(), cfg.conv(), cfg.pretrain().mask, cfg.codes_mode)


# -- fine-tuning --------------------------------------------------------------------
def make_vocab(transcripts: Sequence[str]) -> CharVocab:
    return CharVocab.from_transcripts([normalize_transcript(t) for t in transcripts])


@dataclass
class FinetuneRun:
    model: ASRModel
    history: list
    wer_trace: list = field(default_factory=list)  # (steps completed, corpus WER)

    @property
    def first_zero(self) -> Optional[int]:
        """Steps completed at the first evaluation with WER 0."""
        return next((s for s, w in self.wer_trace if w == 0), None)


def init_asr(cfg: Config, vocab: CharVocab, pretrained: Optional[dict] = None, pre_arch: Optional[dict] = None) -> dict:
    rng = cfg.rng("ft_init")
    if pretrained is None:
        return init_asr_params(cfg.arch(), cfg.conv(), vocab, rng)
    return init_from_pretrained(pretrained, pre_arch or cfg.arch().as_dict(), cfg.arch(), vocab, rng)


def decode_wer(model: ASRModel, data: Sequence[tuple], opts: SearchOptions, lm=None) -> tuple:
    """(corpus WER, hypotheses, n-best lists) for (wave, transcript) pairs."""
    nbests = decode_corpus(model, [w for w, _ in data], lm, opts)
    hyps = [best_text(nb, model.vocab) for nb in nbests]
    return corpus_wer(hyps, [normalize_transcript(t) for _, t in data]), hyps, nbests


def run_finetune(data: Sequence[tuple], cfg: Config, params: dict, vocab: CharVocab,
                 log_file: Optional[TextIO] = None, eval_every: Optional[int] = None,
                 eval_opts: Optional[SearchOptions] = None, opt: Optional[AdamState] = None) -> FinetuneRun:
    """Fine-tune on (wave, transcript) pairs; optionally decode the training set every ``eval_every`` steps."""
    data = [(w, normalize_transcript(t)) for w, t in data]
    model = ASRModel(params, cfg.arch(), cfg.conv(), vocab)
    run = FinetuneRun(model, [])
    eval_opts = eval_opts or cfg.search()

    def callback(step, metrics):
        if eval_every and (step + 1) % eval_every == 0:
            w, _, _ = decode_wer(model, data, eval_opts)
            run.wer_trace.append((step + 1, w))
            log.info("finetune step %d: train WER %.4f", step + 1, float(w))
        return False

    run.history = finetune(data, params, cfg.arch(), cfg.conv(), vocab, cfg.finetune(), opt, log_file, callback)
    return run
