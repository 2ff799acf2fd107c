"""Waveform I/O, the synthetic pseudo-phoneme corpus, and the conv pre-net."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, conv1d, gelu, parameter
from .errors import FormatError, InputTooShortError

SAMPLE_RATE = 16000
BASE_STRIDES = (5, 2, 2, 2, 2, 2, 2)
BASE_KERNELS = (10, 3, 3, 3, 3, 2, 2)


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-D array")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


# -- WAV ---------------------------------------------------------------------
def _to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")


def write_wav(path, wav: Waveform | np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write mono PCM16.  Integer arrays are written verbatim, floats are scaled by 32768."""
    if isinstance(wav, Waveform):
        sample_rate = wav.sample_rate
        pcm = _to_pcm16(wav.samples)
    else:
        arr = np.asarray(wav)
        pcm = arr.astype("<i2") if arr.dtype.kind in "iu" else _to_pcm16(arr)
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, sample_rate, sample_rate * 2, 2, 16)
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(body)) + body)


def read_pcm16(path) -> tuple[np.ndarray, int]:
    """Parse a RIFF/WAVE PCM16 mono file into (int16 samples, sample_rate)."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF":
        raise FormatError(f"{path}: RIFF id missing")
    if raw[8:12] != b"WAVE":
        raise FormatError(f"{path}: WAVE form type missing")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise FormatError(f"{path}: chunk {cid!r} truncated at byte {pos}")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise FormatError(f"{path}: fmt chunk missing or short")
    audio_format, channels, rate, _, _, bits = struct.unpack("<HHIIHH", fmt[:16])
    if audio_format != 1:
        raise FormatError(f"{path}: audio_format={audio_format}, expected 1 (PCM)")
    if channels != 1:
        raise FormatError(f"{path}: channels={channels}, expected 1 (mono)")
    if bits != 16:
        raise FormatError(f"{path}: bits_per_sample={bits}, expected 16")
    if data is None:
        raise FormatError(f"{path}: data chunk missing")
    if len(data) % 2:
        raise FormatError(f"{path}: data chunk has odd byte length {len(data)}")
    return np.frombuffer(data, dtype="<i2").copy(), rate


def load_wav(path) -> Waveform:
    pcm, rate = read_pcm16(path)
    if pcm.size == 0:
        raise FormatError(f"{path}: data chunk is empty")
    return Waveform(pcm.astype(np.float64) / 32768.0, rate)


# -- manifests ---------------------------------------------------------------
def write_manifest(path, rows: Sequence[tuple[str, str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rel, text in rows:
            f.write(f"{rel}\t{text}\n")


def read_manifest(path) -> list[tuple[str, str]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise FormatError(f"{path}:{lineno}: expected '<wav>\\t<transcript>'")
            rel, text = line.split("\t", 1)
            rows.append((rel, text))
    return rows


def load_manifest_audio(path) -> list[tuple[Waveform, str]]:
    root = Path(path).parent
    return [(load_wav(root / rel), text) for rel, text in read_manifest(path)]


# -- synthetic corpus -----------------------------------------------------------
@dataclass
class SynthSpec:
    n_utts: int = 20
    duration_range_s: tuple = (0.4, 0.8)
    vocab: str = "ABCDEF"
    seed: int = 0
    symbol_dur_s: float = 0.1
    sample_rate: int = SAMPLE_RATE
    transcripts: tuple = ()  # fixed texts; when given, n_utts and duration are ignored


def signature(symbol: str, n_samples: int, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Fixed acoustic rendering of one symbol: two tones over a coloured noise floor.

    Depends only on the symbol, so every occurrence sounds the same.  The space
    character renders as near-silence.
    """
    r = np.random.default_rng(ord(symbol) * 7919 + 17)
    t = np.arange(n_samples) / sample_rate
    if symbol == " ":
        return 0.01 * r.standard_normal(n_samples)
    f1, f2 = r.uniform(150, 3500, size=2)
    a1, a2 = r.uniform(0.3, 1.0, size=2)
    noise = np.convolve(r.standard_normal(n_samples + 8), r.standard_normal(9), mode="valid")[:n_samples]
    sig = a1 * np.sin(2 * np.pi * f1 * t) + a2 * np.sin(2 * np.pi * f2 * t) + 0.1 * noise
    return 0.5 * sig / np.max(np.abs(sig))


def render(transcript: str, symbol_dur_s: float = 0.1, sample_rate: int = SAMPLE_RATE) -> Waveform:
    n = int(round(symbol_dur_s * sample_rate))
    return Waveform(np.concatenate([signature(ch, n, sample_rate) for ch in transcript]), sample_rate)


def _random_transcript(r: np.random.Generator, vocab: str, n_symbols: int) -> str:
    out = []
    while len(out) < n_symbols:
        if out:
            out.append(" ")
        word_len = int(r.integers(1, 4))
        out.extend(vocab[int(i)] for i in r.integers(0, len(vocab), word_len))
    text = "".join(out[:n_symbols]).strip()
    return text if text else vocab[0]


def synth_corpus(spec: SynthSpec) -> list[tuple[Waveform, str]]:
    """Deterministic (waveform, transcript) pairs built by concatenating symbol signatures."""
    if not spec.vocab:
        raise ValueError("synth_corpus: vocab is empty")
    if " " in spec.vocab:
        raise ValueError("synth_corpus: space is the word separator, not a vocab symbol")
    if spec.transcripts:
        return [(render(t, spec.symbol_dur_s, spec.sample_rate), t) for t in spec.transcripts]
    r = np.random.default_rng(spec.seed)
    lo, hi = spec.duration_range_s
    corpus = []
    for _ in range(spec.n_utts):
        dur = r.uniform(lo, hi)
        n_sym = max(1, int(round(dur / spec.symbol_dur_s)))
        text = _random_transcript(r, spec.vocab, n_sym)
        corpus.append((render(text, spec.symbol_dur_s, spec.sample_rate), text))
    return corpus


# -- conv pre-net -------------------------------------------------------------
@dataclass
class ConvStackConfig:
    layers: tuple = field(default_factory=lambda: tuple((32, k, s) for k, s in zip(BASE_KERNELS, BASE_STRIDES)))

    def __post_init__(self):
        self.layers = tuple(tuple(int(v) for v in layer) for layer in self.layers)
        if not self.layers:
            raise ValueError("conv stack needs at least one layer")
        for ch, k, s in self.layers:
            if ch < 1 or k < 1 or s < 1:
                raise ValueError(f"bad conv layer (channels={ch}, kernel={k}, stride={s})")

    @classmethod
    def base(cls) -> "ConvStackConfig":
        return cls(tuple((512, k, s) for k, s in zip(BASE_KERNELS, BASE_STRIDES)))

    @classmethod
    def desk(cls, channels: int = 32) -> "ConvStackConfig":
        return cls(tuple((channels, k, s) for k, s in zip(BASE_KERNELS, BASE_STRIDES)))

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0]

    @property
    def hop(self) -> int:
        return int(np.prod([s for _, _, s in self.layers]))

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for _, k, s in self.layers:
            rf += (k - 1) * jump
            jump *= s
        return rf


def frame_count(n_samples: int, cfg: ConvStackConfig) -> int:
    """Output frames of the valid conv stack; 0 when the input is too short."""
    t = int(n_samples)
    for _, k, s in cfg.layers:
        if t < k:
            return 0
        t = (t - k) // s + 1
    return t


def min_samples(cfg: ConvStackConfig) -> int:
    return cfg.receptive_field


def init_prenet(cfg: ConvStackConfig, rng: np.random.Generator) -> dict:
    params, c_in = {}, 1
    for i, (c_out, k, _) in enumerate(cfg.layers):
        std = np.sqrt(2.0 / (c_in * k))
        params[f"prenet.conv{i}"] = parameter(rng.standard_normal((c_out, c_in, k)) * std)
        c_in = c_out
    return params


def feature_encode(w: Waveform | np.ndarray, cfg: ConvStackConfig, params: dict) -> Tensor:
    """Raw samples -> [T, channels] frame features (GELU between conv layers)."""
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    if frame_count(samples.size, cfg) < 1:
        raise InputTooShortError(
            f"waveform has {samples.size} samples; the conv stack needs at least {min_samples(cfg)}")
    x = Tensor(samples.reshape(-1, 1))
    n = len(cfg.layers)
    for i, (_, _, s) in enumerate(cfg.layers):
        x = conv1d(x, params[f"prenet.conv{i}"], s)
        if i < n - 1:
            x = gelu(x)
    return x
