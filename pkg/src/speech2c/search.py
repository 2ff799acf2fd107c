"""Joint CTC/attention beam search with CTC prefix scoring, a character LM and WER."""
from __future__ import annotations

import itertools
import logging
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .autodiff import (
    AdamState, Tensor, adam_step, collect_grads, cross_entropy, linear, log_softmax, no_grad,
    parameter, reshape, take, zero_grads,
)
from .errors import ContractError
from .finetune import CharVocab
from .nets import _attn, _dense, _ffn, _ln, decoder_stack

log = logging.getLogger(__name__)

NEG_INF = -np.inf


# -- CTC prefix scoring -----------------------------------------------------------
class CTCPrefixScorer:
    """Prefix probabilities log p_ctc(h...) over one utterance's frame log-probs.

    The cache maps each scored prefix (tuple of label ids) to its forward
    variables (r_n, r_b): log-probability of the prefix being emitted by frame
    t and ending in a non-blank / blank frame.
    """

    def __init__(self, log_probs: np.ndarray, blank: int):
        self.x = np.asarray(log_probs, dtype=np.float64)
        if self.x.ndim != 2:
            raise ValueError(f"CTC log-probs must be [T, V], got {self.x.shape}")
        self.T, self.V = self.x.shape
        self.blank = blank
        r_n = np.full(self.T, NEG_INF)
        r_b = np.cumsum(self.x[:, blank])
        self.cache = {(): (r_n, r_b)}

    def _state(self, prefix: tuple):
        try:
            r_n, r_b = self.cache[prefix]
        except KeyError:
            raise ContractError(f"CTC prefix cache has no entry for prefix {list(prefix)}") from None
        if r_n.shape != (self.T,) or r_b.shape != (self.T,):
            raise ContractError(f"CTC prefix cache entry for {list(prefix)} does not span {self.T} frames")
        return r_n, r_b

    def full_score(self, prefix: Sequence[int]) -> float:
        """log p_ctc of ``prefix`` as a complete labelling."""
        r_n, r_b = self._state(tuple(prefix))
        return float(np.logaddexp(r_n[-1], r_b[-1]))

    def extend(self, prefix: Sequence[int], chars: Optional[Sequence[int]] = None) -> np.ndarray:
        """Prefix log-probs of prefix + c for each c in ``chars`` (default: all labels).

        Caches the forward variables of every extension.  The blank entry, if
        requested, is -inf.
        """
        g = tuple(prefix)
        r_n_g, r_b_g = self._state(g)
        cs = np.arange(self.V) if chars is None else np.asarray(chars, dtype=np.int64)
        xc = self.x[:, cs]  # [T, K]
        T, K = xc.shape
        # phi_t: paths of g that may be followed by c at frame t
        same = np.array([bool(g) and g[-1] == c for c in cs])
        phi = np.where(same[None, :], r_b_g[:, None], np.logaddexp(r_b_g, r_n_g)[:, None])
        r_n = np.full((T, K), NEG_INF)
        r_b = np.full((T, K), NEG_INF)
        if not g:
            r_n[0] = xc[0]
        psi = r_n[0].copy()
        xb = self.x[:, self.blank]
        for t in range(1, T):
            r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + xc[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_n[t - 1]) + xb[t]
            psi = np.logaddexp(psi, phi[t - 1] + xc[t])
        for j, c in enumerate(cs):
            if c == self.blank:
                psi[j] = NEG_INF
            else:
                self.cache[g + (int(c),)] = (r_n[:, j].copy(), r_b[:, j].copy())
        return psi


def ctc_prefix_score(prefix: Sequence[int], next_char: int, scorer: CTCPrefixScorer, eos: Optional[int] = None) -> float:
    """log p_ctc(prefix + next_char ...), or the complete-labelling score when next_char is EOS."""
    if eos is not None and next_char == eos:
        return scorer.full_score(prefix)
    return float(scorer.extend(prefix, [next_char])[0])


# -- character LM -----------------------------------------------------------------
@dataclass
class CharLMConfig:
    layers: int = 1
    d_model: int = 32
    d_ffn: int = 64
    n_heads: int = 2
    rel_pos_max_distance: int = 8
    steps: int = 200
    lr: float = 3e-3
    batch_size: int = 8
    seed: int = 0


@dataclass
class CharLM:
    """Small causal Transformer over a CharVocab: BOS + text -> text + EOS."""
    params: dict
    cfg: CharLMConfig
    vocab: CharVocab

    @classmethod
    def init(cls, vocab: CharVocab, cfg: CharLMConfig, rng: np.random.Generator) -> "CharLM":
        p, d = {}, cfg.d_model
        p["lm.emb"] = parameter(rng.standard_normal((len(vocab), d)))
        for i in range(cfg.layers):
            _ln(p, f"lm.{i}.ln1", d)
            _attn(p, f"lm.{i}.self", d, rng, cfg.n_heads, cfg.rel_pos_max_distance)
            _ln(p, f"lm.{i}.ln3", d)
            _ffn(p, f"lm.{i}.ffn", d, cfg.d_ffn, rng)
        _ln(p, "lm.ln_f", d)
        p["lm.out.W"] = _dense(rng, d, len(vocab))
        p["lm.out.b"] = parameter(np.zeros(len(vocab)))
        return cls(p, cfg, vocab)

    def logits(self, tokens) -> Tensor:
        y = take(self.params["lm.emb"], np.asarray(tokens, dtype=np.int64))
        y = decoder_stack(y, None, self.params, self.cfg.layers, self.cfg.n_heads, prefix="lm")
        return linear(y, self.params["lm.out.W"], self.params["lm.out.b"])

    def next_token_logprobs(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        """[B, V] log-probs of the next token after each (equal-length, BOS-led) prefix."""
        with no_grad():
            return log_softmax(self.logits(prefixes)).data[:, -1, :]

    def sequence_logprob(self, text: str) -> float:
        ids = self.vocab.encode(text)
        with no_grad():
            lp = log_softmax(self.logits([self.vocab.bos] + ids)).data
        return float(sum(lp[i, t] for i, t in enumerate(ids + [self.vocab.eos])))


def _lm_batch(encoded: Sequence[list], vocab: CharVocab):
    n = max(len(e) for e in encoded) + 1
    inp = np.full((len(encoded), n), vocab.pad)
    out = np.full((len(encoded), n), vocab.pad)
    for i, e in enumerate(encoded):
        inp[i, :len(e) + 1] = [vocab.bos] + e
        out[i, :len(e) + 1] = e + [vocab.eos]
    return inp, out


def char_lm_loss(lm: CharLM, encoded: Sequence[list]) -> Tensor:
    inp, out = _lm_batch(encoded, lm.vocab)
    lp = log_softmax(lm.logits(inp))
    return cross_entropy(reshape(lp, (-1, lp.shape[-1])), out.reshape(-1), ignore_index=lm.vocab.pad)


def char_lm_perplexity(lm: CharLM, transcripts: Sequence[str]) -> float:
    """Per-token (characters + EOS) perplexity."""
    with no_grad():
        return float(np.exp(char_lm_loss(lm, [lm.vocab.encode(t) for t in transcripts]).item()))


def train_char_lm(transcripts: Sequence[str], vocab: CharVocab, cfg: CharLMConfig = CharLMConfig()) -> CharLM:
    """Teacher-forced cross-entropy training with Adam at constant ``cfg.lr``."""
    if not transcripts:
        raise ValueError("train_char_lm: empty corpus")
    rng = np.random.default_rng([cfg.seed, 4])
    lm = CharLM.init(vocab, cfg, rng)
    encoded = [vocab.encode(t) for t in transcripts]
    opt = AdamState()
    bs = min(cfg.batch_size, len(encoded))
    order: list = []
    for step in range(cfg.steps):
        if len(order) < bs:
            order.extend(rng.permutation(len(encoded)).tolist())
        picked, order = order[:bs], order[bs:]
        zero_grads(lm.params)
        loss = char_lm_loss(lm, [encoded[i] for i in picked])
        loss.backward()
        adam_step(lm.params, collect_grads(lm.params), opt, cfg.lr)
    return lm


# -- beam search ------------------------------------------------------------------
@dataclass
class SearchOptions:
    beam: int = 4
    ctc_weight: float = 0.0
    lm_weight: float = 0.0
    max_len: int = 100
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ValueError("ctc_weight must lie in [0, 1]")
        if self.lm_weight < 0:
            raise ValueError("lm_weight must be >= 0")
        if self.max_len < 0:
            raise ValueError("max_len must be >= 0")


def _w(weight: float, value: float) -> float:
    # a zero weight removes the term, even when the score is -inf
    return 0.0 if weight == 0 else weight * value


def combined_score(att: float, ctc: float, lm: float, n_tokens: int, opts: SearchOptions) -> float:
    return (_w(1.0 - opts.ctc_weight, att) + _w(opts.ctc_weight, ctc) + _w(opts.lm_weight, lm)
            + opts.length_penalty * n_tokens)


@dataclass
class Hypothesis:
    tokens: tuple  # label ids, without BOS/EOS
    att_logp: float = 0.0
    ctc_logp: float = 0.0
    lm_logp: float = 0.0
    score: float = 0.0
    ended: bool = False
    forced: bool = False

    def __post_init__(self):
        self.att_logp, self.ctc_logp, self.lm_logp = float(self.att_logp), float(self.ctc_logp), float(self.lm_logp)
        self.score = float(self.score)

    def recompute(self, opts: SearchOptions) -> float:
        return combined_score(self.att_logp, self.ctc_logp, self.lm_logp, len(self.tokens) + self.ended, opts)

    @property
    def key(self):
        return (-self.score, self.tokens)


def joint_beam_search(enc_out: np.ndarray, ctc_log_probs: np.ndarray, model, lm=None,
                      opts: SearchOptions = SearchOptions()) -> list:
    """n-best list of finished hypotheses, best first.

    ``model.next_token_logprobs(enc_out, prefixes)`` supplies attention
    scores and ``lm.next_token_logprobs(prefixes)`` LM scores, both over the
    model's CharVocab.  Every live hypothesis is extended by every label and
    by EOS; the ``beam`` best candidates survive (ties broken by token order).
    Hypotheses still open at ``max_len`` are closed with EOS and flagged
    ``forced``.  Without a length bonus the combined score never increases
    along a path, so search stops once ``beam`` finished hypotheses all beat
    the best live one.
    """
    vocab: CharVocab = model.vocab
    if opts.lm_weight > 0 and lm is None:
        raise ValueError("lm_weight > 0 needs a language model")
    labels = np.asarray(vocab.label_ids)
    use_ctc = opts.ctc_weight > 0
    scorer = CTCPrefixScorer(ctc_log_probs, vocab.blank) if use_ctc else None
    use_lm = opts.lm_weight > 0
    live = [Hypothesis(())]
    finished: list = []
    for length in range(opts.max_len + 1):
        prefixes = [[vocab.bos] + list(h.tokens) for h in live]
        att = model.next_token_logprobs(enc_out, prefixes)
        lmp = lm.next_token_logprobs(prefixes) if use_lm else np.zeros_like(att)
        closing = length == opts.max_len
        cands = []
        for b, h in enumerate(live):
            # closing with EOS
            ctc_end = scorer.full_score(h.tokens) if use_ctc else 0.0
            e = Hypothesis(h.tokens, h.att_logp + att[b, vocab.eos], ctc_end, h.lm_logp + lmp[b, vocab.eos],
                           ended=True, forced=closing)
            e.score = float(e.recompute(opts))
            cands.append(e)
            if closing:
                continue
            psi = scorer.extend(h.tokens, labels) if use_ctc else np.zeros(len(labels))
            for j, c in enumerate(labels):
                n = Hypothesis(h.tokens + (int(c),), h.att_logp + att[b, c], float(psi[j]),
                               h.lm_logp + lmp[b, c])
                n.score = float(n.recompute(opts))
                cands.append(n)
        cands.sort(key=lambda h: h.key)
        kept = cands[:opts.beam]
        finished.extend(h for h in kept if h.ended)
        live = [h for h in kept if not h.ended]
        if closing and any(h.forced for h in kept):
            log.warning("beam search hit max_len=%d; forcing EOS", opts.max_len)
        finished.sort(key=lambda h: h.key)
        if not live:
            break
        if opts.length_penalty <= 0 and len(finished) >= opts.beam and finished[opts.beam - 1].score >= live[0].score:
            break
    return finished[:opts.beam]


# -- WER --------------------------------------------------------------------------
def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit substitution/insertion/deletion costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp: str, ref: str) -> Fraction:
    """Word edit distance over reference length; an empty reference counts insertions over 1."""
    h, r = hyp.split(), ref.split()
    if not r:
        warnings.warn("wer: empty reference; returning the insertion count", RuntimeWarning)
        return Fraction(len(h), 1)
    return Fraction(edit_distance(h, r), len(r))


def corpus_wer(hyps: Sequence[str], refs: Sequence[str]) -> Fraction:
    """Total word edits over total reference words (an all-empty reference set divides by 1)."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    edits = sum(edit_distance(h.split(), r.split()) for h, r in zip(hyps, refs))
    return Fraction(edits, max(1, sum(len(r.split()) for r in refs)))


# -- decoding helpers -----------------------------------------------------------
def decode_utterance(model, wave, lm=None, opts: SearchOptions = SearchOptions()) -> list:
    enc_out, ctc = model.encode(wave)
    return joint_beam_search(enc_out, ctc, model, lm, opts)


def decode_corpus(model, waves: Sequence, lm=None, opts: SearchOptions = SearchOptions(),
                  encoded: Optional[list] = None) -> list:
    """n-best lists for each waveform; pass ``encoded`` to reuse (enc_out, ctc) pairs."""
    encoded = encoded if encoded is not None else [model.encode(w) for w in waves]
    return [joint_beam_search(e, c, model, lm, opts) for e, c in encoded]


def best_text(nbest: list, vocab: CharVocab) -> str:
    return vocab.decode(nbest[0].tokens) if nbest else ""


@dataclass
class SweepResult:
    best_ctc: float
    best_lm: float
    table: dict = field(default_factory=dict)  # (ctc_weight, lm_weight) -> corpus WER

    def to_text(self) -> str:
        lines = ["ctc_weight\tlm_weight\twer"]
        for (c, l), w in sorted(self.table.items()):
            lines.append(f"{c:g}\t{l:g}\t{float(w):.6f}")
        return "\n".join(lines) + "\n"


def sweep_weights(dev: Sequence[tuple], model, lm=None, ctc_grid: Sequence[float] = (0.0, 0.5, 1.0),
                  lm_grid: Sequence[float] = (0.0,), opts: SearchOptions = SearchOptions()) -> SweepResult:
    """Corpus WER for every (ctc_weight, lm_weight) grid point; ties go to smaller weights."""
    if not dev:
        raise ValueError("sweep_weights: empty dev set")
    for v in itertools.chain(ctc_grid, lm_grid):
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"sweep grid value {v} outside [0, 1]")
    if lm is None:
        lm_grid = [v for v in lm_grid if v == 0] or [0.0]
    encoded = [model.encode(w) for w, _ in dev]
    refs = [t for _, t in dev]
    table = {}
    for c in sorted(set(ctc_grid)):
        for l in sorted(set(lm_grid)):
            o = SearchOptions(opts.beam, c, l, opts.max_len, opts.length_penalty)
            hyps = [best_text(nb, model.vocab) for nb in decode_corpus(model, None, lm, o, encoded)]
            table[(c, l)] = corpus_wer(hyps, refs)
    best = min(table, key=lambda k: (table[k], k[0], k[1]))
    return SweepResult(best[0], best[1], table)


# -- output files -------------------------------------------------------------------
def write_decodes(path, rows: Sequence[tuple]) -> None:
    """``<utt-id>\\t<transcript>`` per line."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt, text in rows:
            f.write(f"{utt}\t{text}\n")


def write_nbest(path, rows: Sequence[tuple], vocab: CharVocab) -> None:
    """``<utt-id>\\t<rank>\\t<score>\\t<att>\\t<ctc>\\t<lm>\\t<forced>\\t<transcript>`` per hypothesis."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for utt, nbest in rows:
            for rank, h in enumerate(nbest):
                f.write(f"{utt}\t{rank}\t{h.score!r}\t{h.att_logp!r}\t{h.ctc_logp!r}\t{h.lm_logp!r}\t"
                        f"{int(h.forced)}\t{vocab.decode(h.tokens)}\n")
