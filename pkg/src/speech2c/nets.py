"""Transformer encoder/decoder with clipped relative-position attention bias.

Parameters live in flat ``dict[str, Tensor]`` maps keyed by dotted names
(``enc.0.attn.wq``, ``dec_post.W`` ...).  All forward functions accept extra
leading batch axes on the sequence input.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .audio import ConvStackConfig, Waveform, feature_encode, init_prenet
from .autodiff import (
    Tensor, add, gelu, l2_normalize, layer_norm, linear, matmul, mul, parameter, reshape,
    softmax, take, transpose,
)
from .errors import DimensionError

TAU = 0.1


@dataclass
class ArchConfig:
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    d_ffn: int = 128
    n_heads: int = 4
    rel_pos_max_distance: int = 16
    C: int = 32
    code_embed_dim: int = 64

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.C < 2:
            raise ValueError("need at least two code classes")

    @classmethod
    def base(cls) -> "ArchConfig":
        return cls(enc_layers=12, dec_layers=6, d_model=768, d_ffn=3072, n_heads=12,
                   rel_pos_max_distance=16, C=500, code_embed_dim=256)

    @property
    def code_vocab(self) -> int:
        """Decoder vocabulary during pre-training: codes + BOS, EOS, PAD."""
        return self.C + 3

    @property
    def bos(self) -> int:
        return self.C

    @property
    def eos(self) -> int:
        return self.C + 1

    @property
    def pad(self) -> int:
        return self.C + 2

    def as_dict(self) -> dict:
        return asdict(self)


# -- initialisation -------------------------------------------------------------
def _dense(rng, n_in, n_out):
    return parameter(rng.standard_normal((n_in, n_out)) / np.sqrt(n_in))


def _ln(params, name, d):
    params[f"{name}.g"] = parameter(np.ones(d))
    params[f"{name}.b"] = parameter(np.zeros(d))


def _attn(params, name, d, rng, n_heads=None, rel_max=None):
    for p in ("q", "k", "v", "o"):
        params[f"{name}.w{p}"] = _dense(rng, d, d)
        params[f"{name}.b{p}"] = parameter(np.zeros(d))
    if rel_max is not None:
        params[f"{name}.rel"] = parameter(0.02 * rng.standard_normal((2 * rel_max + 1, n_heads)))


def _ffn(params, name, d, d_ffn, rng):
    params[f"{name}.w1"] = _dense(rng, d, d_ffn)
    params[f"{name}.b1"] = parameter(np.zeros(d_ffn))
    params[f"{name}.w2"] = _dense(rng, d_ffn, d)
    params[f"{name}.b2"] = parameter(np.zeros(d))


def init_encoder(arch: ArchConfig, conv: ConvStackConfig, rng: np.random.Generator) -> dict:
    """Conv pre-net, feature projection, mask embedding and the encoder stack."""
    p = init_prenet(conv, rng)
    d = arch.d_model
    p["prenet.proj.W"] = _dense(rng, conv.out_dim, d)
    p["prenet.proj.b"] = parameter(np.zeros(d))
    p["mask_emb"] = parameter(rng.uniform(0, 1, d))
    for i in range(arch.enc_layers):
        _ln(p, f"enc.{i}.ln1", d)
        _attn(p, f"enc.{i}.attn", d, rng, arch.n_heads, arch.rel_pos_max_distance)
        _ln(p, f"enc.{i}.ln2", d)
        _ffn(p, f"enc.{i}.ffn", d, arch.d_ffn, rng)
    if arch.enc_layers:
        _ln(p, "enc.ln_f", d)
    return p


def init_encoder_postnet(arch: ArchConfig, rng: np.random.Generator) -> dict:
    return {
        "enc_post.W": _dense(rng, arch.d_model, arch.code_embed_dim),
        "enc_post.emb": parameter(rng.standard_normal((arch.C, arch.code_embed_dim))),
    }


def init_decoder(arch: ArchConfig, rng: np.random.Generator) -> dict:
    p, d = {}, arch.d_model
    for i in range(arch.dec_layers):
        _ln(p, f"dec.{i}.ln1", d)
        _attn(p, f"dec.{i}.self", d, rng, arch.n_heads, arch.rel_pos_max_distance)
        _ln(p, f"dec.{i}.ln2", d)
        _attn(p, f"dec.{i}.cross", d, rng)
        _ln(p, f"dec.{i}.ln3", d)
        _ffn(p, f"dec.{i}.ffn", d, arch.d_ffn, rng)
    _ln(p, "dec.ln_f", d)
    return p


def init_decoder_io(d_model: int, vocab: int, rng: np.random.Generator) -> dict:
    """Decoder pre-net (token embedding) and post-net (projection to vocab logits)."""
    return {
        "dec_pre.emb": parameter(rng.standard_normal((vocab, d_model))),
        "dec_post.W": _dense(rng, d_model, vocab),
        "dec_post.b": parameter(np.zeros(vocab)),
    }


def init_pretrain_model(arch: ArchConfig, conv: ConvStackConfig, rng: np.random.Generator) -> dict:
    p = init_encoder(arch, conv, rng)
    p.update(init_encoder_postnet(arch, rng))
    p.update(init_decoder(arch, rng))
    p.update(init_decoder_io(arch.d_model, arch.code_vocab, rng))
    return p


# -- attention ------------------------------------------------------------------
def rel_offsets(q_len: int, k_len: int, max_dist: int) -> np.ndarray:
    """Index into the bias table for every (query i, key j): clip(j - i) + max_dist."""
    off = np.arange(k_len)[None, :] - np.arange(q_len)[:, None]
    return np.clip(off, -max_dist, max_dist) + max_dist


def rel_pos_bias(q_len: int, k_len: int, table: Tensor) -> Tensor:
    """[heads, q_len, k_len] additive logits bias from a [2D+1, heads] offset table."""
    if q_len < 1 or k_len < 1:
        raise ValueError("sequence lengths must be >= 1")
    max_dist = (table.shape[0] - 1) // 2
    return transpose(take(table, rel_offsets(q_len, k_len, max_dist)), (2, 0, 1))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, t, d = x.shape
    x = reshape(x, (*lead, t, n_heads, d // n_heads))
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return transpose(x, tuple(axes))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dh = x.shape
    n = x.ndim
    axes = list(range(n - 3)) + [n - 2, n - 3, n - 1]
    return reshape(transpose(x, tuple(axes)), (*lead, t, h * dh))


def mha_forward(queries: Tensor, keys: Tensor, values: Tensor, mask: Optional[np.ndarray],
                params: dict, name: str, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention.

    ``mask`` is boolean [q_len, k_len] with True = may attend.  When
    ``params`` holds ``{name}.rel``, a relative-offset bias is added to the
    logits.  Rows with nothing to attend to produce zero context vectors.
    """
    d = queries.shape[-1]
    if d % n_heads:
        raise DimensionError(f"model dim {d} not divisible by {n_heads} heads")
    q = _split_heads(linear(queries, params[f"{name}.wq"], params[f"{name}.bq"]), n_heads)
    k = _split_heads(linear(keys, params[f"{name}.wk"], params[f"{name}.bk"]), n_heads)
    v = _split_heads(linear(values, params[f"{name}.wv"], params[f"{name}.bv"]), n_heads)
    kt = transpose(k, tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2))
    logits = mul(matmul(q, kt), 1.0 / np.sqrt(d // n_heads))
    rel = params.get(f"{name}.rel")
    if rel is not None:
        logits = add(logits, rel_pos_bias(queries.shape[-2], keys.shape[-2], rel))
    attn = softmax(logits, 1.0, mask)
    ctx = _merge_heads(matmul(attn, v))
    return linear(ctx, params[f"{name}.wo"], params[f"{name}.bo"])


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def _ffn_forward(x, params, name):
    h = gelu(linear(x, params[f"{name}.w1"], params[f"{name}.b1"]))
    return linear(h, params[f"{name}.w2"], params[f"{name}.b2"])


def _ln_apply(x, params, name):
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"], 1e-5)


# -- encoder side ---------------------------------------------------------------
def project_features(feats: Tensor, params: dict) -> Tensor:
    return linear(feats, params["prenet.proj.W"], params["prenet.proj.b"])


def encoder_input(w: Waveform, conv: ConvStackConfig, params: dict) -> Tensor:
    """Waveform -> projected frame features x of shape [T, d_model]."""
    return project_features(feature_encode(w, conv, params), params)


def encoder_forward(x: Tensor, params: dict, arch: ArchConfig) -> Tensor:
    """Pre-norm self-attention blocks; a final layer norm closes a non-empty stack."""
    for i in range(arch.enc_layers):
        x = add(x, mha_forward(*([_ln_apply(x, params, f"enc.{i}.ln1")] * 3), None, params,
                               f"enc.{i}.attn", arch.n_heads))
        x = add(x, _ffn_forward(_ln_apply(x, params, f"enc.{i}.ln2"), params, f"enc.{i}.ffn"))
    if arch.enc_layers:
        x = _ln_apply(x, params, "enc.ln_f")
    return x


def code_similarity(h: Tensor, params: dict) -> Tensor:
    """cos(h W, e_c) for every frame (rows of h) and code c."""
    if h.ndim == 1:
        return reshape(code_similarity(reshape(h, (1, -1)), params), (-1,))
    proj = l2_normalize(matmul(h, params["enc_post.W"]))
    emb = l2_normalize(params["enc_post.emb"])
    return matmul(proj, transpose(emb, (1, 0)))


def code_logits(h: Tensor, params: dict, tau: float = TAU) -> Tensor:
    return mul(code_similarity(h, params), 1.0 / tau)


def code_distribution(h: Tensor, params: dict, tau: float = TAU) -> Tensor:
    """p(c | frame) = softmax_c(cos(h W, e_c) / tau) over the last axis."""
    return softmax(code_similarity(h, params), tau)


# -- decoder side ---------------------------------------------------------------
def decoder_stack(y: Tensor, enc_out: Optional[Tensor], params: dict, n_layers: int,
                  n_heads: int, prefix: str = "dec") -> Tensor:
    """Causal self-attention (+ cross-attention when ``enc_out`` is given) blocks."""
    mask = causal_mask(y.shape[-2])
    for i in range(n_layers):
        h = _ln_apply(y, params, f"{prefix}.{i}.ln1")
        y = add(y, mha_forward(h, h, h, mask, params, f"{prefix}.{i}.self", n_heads))
        if enc_out is not None:
            h = _ln_apply(y, params, f"{prefix}.{i}.ln2")
            y = add(y, mha_forward(h, enc_out, enc_out, None, params, f"{prefix}.{i}.cross", n_heads))
        y = add(y, _ffn_forward(_ln_apply(y, params, f"{prefix}.{i}.ln3"), params, f"{prefix}.{i}.ffn"))
    return _ln_apply(y, params, f"{prefix}.ln_f")


def decoder_forward(tokens, enc_out: Tensor, params: dict, arch: ArchConfig) -> Tensor:
    """Teacher-forced decoder logits, one row per input token.

    ``tokens`` is [N+1] (or [B, N+1]) starting with BOS; row n depends only on
    tokens[..n] and ``enc_out``.
    """
    tok = np.asarray(tokens, dtype=np.int64)
    vocab = params["dec_pre.emb"].shape[0]
    if tok.size and (tok.min() < 0 or tok.max() >= vocab):
        raise IndexError(f"decoder token outside vocabulary of size {vocab}: {tok.tolist()}")
    y = take(params["dec_pre.emb"], tok)
    y = decoder_stack(y, enc_out, params, arch.dec_layers, arch.n_heads)
    return linear(y, params["dec_post.W"], params["dec_post.b"])


def param_groups(params: dict) -> dict:
    """Group names by network part: prenet / mask / encoder / enc_post / decoder / dec_io / other."""
    groups: dict = {}
    for k in params:
        head = k.split(".", 1)[0]
        g = {"prenet": "prenet", "mask_emb": "mask", "enc": "encoder", "enc_post": "enc_post",
             "dec": "decoder", "dec_pre": "dec_io", "dec_post": "dec_io"}.get(head, "other")
        groups.setdefault(g, []).append(k)
    return groups
