"""Flat run configuration: defaults <- ``key = value`` file <- command-line overrides."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .audio import ConvStackConfig, SynthSpec
from .finetune import FinetuneConfig
from .nets import ArchConfig
from .pretrain import MaskSpec, PretrainConfig
from .search import CharLMConfig, SearchOptions

log = logging.getLogger(__name__)

# one master seed; each component draws from its own stream [seed, id]
SEED_STREAMS = {"mask": 1, "order": 2, "ft_order": 3, "lm": 4, "init": 5, "ft_init": 6, "kmeans": 7}


class ConfigError(ValueError):
    """Unknown key or unparsable value in a config file or override."""


@dataclass
class Config:
    seed: int = 0
    # synthetic corpus
    n_utts: int = 20
    min_dur: float = 0.4
    max_dur: float = 0.8
    symbols: str = "ABCDEF"
    symbol_dur: float = 0.1
    # conv pre-net and Transformer
    conv_channels: int = 32
    enc_layers: int = 2
    dec_layers: int = 2
    d_model: int = 64
    d_ffn: int = 128
    n_heads: int = 4
    rel_pos_max_distance: int = 16
    n_codes: int = 16
    code_embed_dim: int = 64
    # k-means features
    n_bands: int = 24
    log_floor: float = 1.0
    kmeans_iters: int = 100
    # pre-training
    pretrain_steps: int = 200
    pretrain_lr: float = 2e-3
    pretrain_batch: int = 4
    w_mlm: float = 1.0
    w_mle: float = 1.0
    mask_prob: float = 0.08
    mask_span: int = 10
    codes_mode: str = "reduced"
    # fine-tuning
    finetune_utts: int = 10
    finetune_steps: int = 300
    finetune_lr: float = 1e-3
    finetune_batch: int = 5
    ctc_weight: float = 0.5
    ce_weight: float = 0.5
    freeze_frac: float = 0.4
    # character LM
    lm_steps: int = 150
    lm_lr: float = 3e-3
    lm_layers: int = 1
    lm_d_model: int = 32
    # decoding
    beam: int = 4
    dec_ctc_weight: float = 0.3
    dec_lm_weight: float = 0.0
    max_len: int = 40
    length_penalty: float = 0.0
    sweep_ctc_grid: str = "0,0.25,0.5,0.75,1"
    sweep_lm_grid: str = "0,0.25,0.5"

    def __post_init__(self):
        if self.codes_mode not in ("reduced", "repeated"):
            raise ConfigError(f"codes_mode: expected 'reduced' or 'repeated', got {self.codes_mode!r}")

    # -- views -------------------------------------------------------------------
    def lines(self) -> list:
        return [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.lines()).encode("utf-8")).hexdigest()[:16]

    def rng(self, stream: str) -> np.random.Generator:
        return np.random.default_rng(self.sub_seed(stream))

    def sub_seed(self, stream: str) -> list:
        return [self.seed, SEED_STREAMS[stream]]

    def synth(self) -> SynthSpec:
        return SynthSpec(self.n_utts, (self.min_dur, self.max_dur), self.symbols, self.seed, self.symbol_dur)

    def conv(self) -> ConvStackConfig:
        return ConvStackConfig.desk(self.conv_channels)

    def arch(self) -> ArchConfig:
        return ArchConfig(self.enc_layers, self.dec_layers, self.d_model, self.d_ffn, self.n_heads,
                          self.rel_pos_max_distance, self.n_codes, self.code_embed_dim)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(self.pretrain_steps, self.pretrain_lr, self.pretrain_batch, self.w_mlm, self.w_mle,
                              self.codes_mode, MaskSpec(self.mask_prob, self.mask_span, self.seed), self.seed)

    def finetune(self) -> FinetuneConfig:
        return FinetuneConfig(self.finetune_steps, self.finetune_lr, self.ctc_weight, self.ce_weight,
                              self.freeze_frac, self.finetune_batch, self.seed)

    def char_lm(self) -> CharLMConfig:
        return CharLMConfig(layers=self.lm_layers, d_model=self.lm_d_model, d_ffn=2 * self.lm_d_model,
                            steps=self.lm_steps, lr=self.lm_lr, seed=self.seed)

    def search(self, ctc_weight: Optional[float] = None, lm_weight: Optional[float] = None) -> SearchOptions:
        return SearchOptions(self.beam, self.dec_ctc_weight if ctc_weight is None else ctc_weight,
                             self.dec_lm_weight if lm_weight is None else lm_weight, self.max_len,
                             self.length_penalty)

    @staticmethod
    def grid(text: str) -> list:
        return [float(v) for v in text.split(",") if v.strip()]


def _convert(key: str, raw: str, where: str):
    kinds = {f.name: f.type for f in fields(Config)}
    if key not in kinds:
        raise ConfigError(f"{where}: unknown key {key!r}")
    kind = kinds[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {kind} for key {key!r}") from None


def _split(line: str, where: str):
    if "=" not in line:
        raise ConfigError(f"{where}: expected 'key = value', got {line!r}")
    key, value = line.split("=", 1)
    return key.strip(), value.strip()


def parse_config(path=None, overrides: Sequence[str] = ()) -> Config:
    """Resolve defaults, then the file (if any), then ``key=value`` overrides."""
    values: dict = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            key, raw = _split(line, where)
            values[key] = _convert(key, raw, where)
    for item in overrides:
        key, raw = _split(item, f"override {item!r}")
        values[key] = _convert(key, raw, f"override {item!r}")
    cfg = Config(**values)
    for line in cfg.lines():
        log.info("config %s", line)
    return cfg


def write_config(cfg: Config, path) -> None:
    Path(path).write_text("\n".join(cfg.lines()) + "\n", encoding="utf-8")


def config_dict(cfg: Config) -> dict:
    return asdict(cfg)
