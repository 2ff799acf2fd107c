"""Offline k-means pseudo-code generation, code reduction and code/text analysis."""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .audio import ConvStackConfig, Waveform, frame_count
from .errors import DimensionError, FormatError

log = logging.getLogger(__name__)


@dataclass
class CodeSequence:
    codes: list
    reduced: bool = False

    def __post_init__(self):
        self.codes = [int(c) for c in self.codes]
        if self.reduced and any(a == b for a, b in zip(self.codes, self.codes[1:])):
            raise ValueError("reduced code sequence has adjacent duplicates")

    def __len__(self):
        return len(self.codes)

    def __iter__(self):
        return iter(self.codes)


@dataclass
class KMeansModel:
    centroids: np.ndarray
    feature_kind: str = "logspec"
    objective_history: list = field(default_factory=list, repr=False)

    @property
    def C(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


# -- clustering features ---------------------------------------------------------
def frame_features(w: Waveform | np.ndarray, cfg: ConvStackConfig, n_bands: int = 24,
                   log_floor: float = 1.0) -> np.ndarray:
    """Log band energies on the pre-net's frame grid.

    Window = conv receptive field, hop = product of strides, so row t covers
    exactly the samples that feed encoder frame t.
    """
    samples = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    win, hop = cfg.receptive_field, cfg.hop
    n = frame_count(samples.size, cfg)
    if n == 0:
        return np.zeros((0, n_bands))
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]
    power = np.abs(np.fft.rfft(frames * np.hanning(win), axis=1)) ** 2
    edges = np.linspace(0, power.shape[1], n_bands + 1).astype(int)
    bands = np.stack([power[:, a:b].mean(axis=1) for a, b in zip(edges[:-1], edges[1:])], axis=1)
    return np.log(bands + log_floor)


# -- k-means -------------------------------------------------------------------
def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return (diff * diff).sum(axis=-1)


def _kmeans_pp(x: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, C):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(x)))
        else:
            idx = int(rng.choice(len(x), p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers, dtype=np.float64)


def kmeans_fit(features, C: int, seed: int = 0, max_iters: int = 100, tol: float = 1e-8,
               feature_kind: str = "logspec") -> KMeansModel:
    """Lloyd iterations from k-means++ seeds.

    ``objective_history`` holds the within-cluster sum of squares after every
    assignment step; it never increases.  A cluster that loses all its points
    is moved onto the point currently farthest from its centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"kmeans_fit expects [N, d] features, got shape {x.shape}")
    if C < 2:
        raise ValueError("kmeans_fit needs C >= 2")
    if len(x) < C:
        raise ValueError(f"kmeans_fit: {len(x)} frames is fewer than C={C}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, C, rng)
    history = []
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        labels = d2.argmin(axis=1)
        point_cost = d2[np.arange(len(x)), labels]
        obj = float(point_cost.sum())
        history.append(obj)
        new = centroids.copy()
        taken = set()
        for k in range(C):
            members = labels == k
            if members.any():
                new[k] = x[members].mean(axis=0)
            else:
                order = np.argsort(-point_cost, kind="stable")
                far = next(int(i) for i in order if int(i) not in taken)
                taken.add(far)
                new[k] = x[far]
                point_cost[far] = 0.0
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift == 0.0 or (len(history) > 1 and history[-2] - obj <= tol * max(history[-2], 1e-300)):
            break
    d2 = _sq_dists(x, centroids)
    history.append(float(d2.min(axis=1).sum()))
    return KMeansModel(centroids, feature_kind, history)


def kmeans_assign(model: KMeansModel, features) -> CodeSequence:
    """Nearest centroid per frame (squared Euclidean; ties go to the lowest index)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise DimensionError(f"kmeans_assign: features {x.shape} vs centroids {model.centroids.shape}")
    if len(x) == 0:
        return CodeSequence([])
    return CodeSequence(_sq_dists(x, model.centroids).argmin(axis=1).tolist())


def reduce_codes(z: CodeSequence | Sequence[int]) -> CodeSequence:
    codes = list(z.codes if isinstance(z, CodeSequence) else z)
    out = [c for i, c in enumerate(codes) if i == 0 or c != codes[i - 1]]
    return CodeSequence(out, reduced=True)


# -- files --------------------------------------------------------------------
def save_kmeans(model: KMeansModel, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(f"kmeans C={model.C} d={model.dim} feature_kind={model.feature_kind}\n")
        for row in model.centroids:
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_kmeans(path) -> KMeansModel:
    with open(path, encoding="utf-8") as f:
        header = f.readline().split()
        if not header or header[0] != "kmeans":
            raise FormatError(f"{path}: missing 'kmeans' header")
        try:
            fields = dict(item.split("=", 1) for item in header[1:])
            C, d = int(fields["C"]), int(fields["d"])
        except (KeyError, ValueError) as e:
            raise FormatError(f"{path}: bad header field ({e})") from None
        rows = [[float(v) for v in line.split()] for line in f if line.strip()]
    cent = np.array(rows, dtype=np.float64)
    if cent.shape != (C, d):
        raise FormatError(f"{path}: header says {C}x{d} centroids, body has {cent.shape}")
    return KMeansModel(cent, fields.get("feature_kind", "logspec"))


def write_codes(path, seqs: Iterable[CodeSequence | Sequence[int]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for s in seqs:
            f.write(" ".join(str(int(c)) for c in s) + "\n")


def read_codes(path) -> list[CodeSequence]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            try:
                out.append(CodeSequence([int(v) for v in line.split()]))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer code") from None
    return out


# -- code/text analysis ----------------------------------------------------------
def proportional_alignment(n_frames: int, n_symbols: int) -> np.ndarray:
    """Symbol index for every frame assuming symbols share the frames evenly."""
    t = (np.arange(n_frames) + 0.5) * n_symbols / n_frames
    return np.minimum(t.astype(int), n_symbols - 1)


def grid_alignment(n_frames: int, n_symbols: int, cfg: ConvStackConfig, symbol_samples: int) -> np.ndarray:
    """Exact alignment for fixed-duration symbols: each frame goes to the symbol under its centre."""
    centre = np.arange(n_frames) * cfg.hop + cfg.receptive_field / 2.0
    return np.minimum((centre // symbol_samples).astype(int), n_symbols - 1)


@dataclass
class SymbolRow:
    symbol: str
    n_frames: int
    distribution: dict
    purity: float

    def top(self, k: int = 3) -> list:
        return [c for c, _ in sorted(self.distribution.items(), key=lambda kv: (-kv[1], kv[0]))[:k]]


@dataclass
class CodeTextReport:
    rows: list
    skipped: int = 0

    def row(self, symbol: str) -> SymbolRow:
        return next(r for r in self.rows if r.symbol == symbol)

    @property
    def mean_purity(self) -> float:
        total = sum(r.n_frames for r in self.rows)
        return sum(r.purity * r.n_frames for r in self.rows) / total if total else 0.0

    def to_text(self) -> str:
        lines = [f"{'symbol':<8}{'frames':>8}{'purity':>9}  top codes"]
        for r in self.rows:
            sym = "<sp>" if r.symbol == " " else r.symbol
            tops = ", ".join(f"{c}:{r.distribution[c]:.2f}" for c in r.top(3))
            lines.append(f"{sym:<8}{r.n_frames:>8}{r.purity:>9.3f}  {tops}")
        lines.append(f"frame-weighted purity {self.mean_purity:.3f}; skipped pairs {self.skipped}")
        return "\n".join(lines) + "\n"

    def to_tsv(self) -> str:
        out = ["symbol\tn_frames\tpurity\tdistribution"]
        for r in self.rows:
            dist = " ".join(f"{c}:{p:.6f}" for c, p in sorted(r.distribution.items()))
            out.append(f"{r.symbol}\t{r.n_frames}\t{r.purity:.6f}\t{dist}")
        return "\n".join(out) + "\n"


def symbol_code_counts(codes: Sequence[int], transcript: str, alignment: Optional[np.ndarray] = None) -> dict:
    """symbol -> Counter of codes on the frames aligned to it, for one utterance."""
    codes = list(codes)
    if alignment is None:
        alignment = proportional_alignment(len(codes), len(transcript))
    counts: dict = defaultdict(Counter)
    for c, s in zip(codes, alignment):
        counts[transcript[int(s)]][c] += 1
    return counts


def code_text_report(pairs: Sequence[tuple], alignments: Optional[Sequence[np.ndarray]] = None) -> CodeTextReport:
    """Per-symbol code distributions and purity (largest code share) over a corpus.

    ``pairs`` are (codes, transcript).  Without explicit alignments, each
    utterance's frames are split evenly across its transcript characters.
    """
    totals: dict = defaultdict(Counter)
    skipped = 0
    for i, (codes, text) in enumerate(pairs):
        codes = list(codes)
        if not codes or not text:
            skipped += 1
            continue
        ali = alignments[i] if alignments is not None else None
        for sym, cnt in symbol_code_counts(codes, text, ali).items():
            totals[sym].update(cnt)
    if skipped:
        log.warning("code_text_report skipped %d empty pair(s)", skipped)
    rows = []
    for sym in sorted(totals):
        cnt = totals[sym]
        n = sum(cnt.values())
        dist = {c: k / n for c, k in sorted(cnt.items())}
        rows.append(SymbolRow(sym, n, dist, max(dist.values())))
    return CodeTextReport(rows, skipped)


def shuffled_pairs(pairs: Sequence[tuple], seed: int = 0) -> list:
    """Control pairing: codes of utterance i against a permuted transcript."""
    perm = np.random.default_rng(seed).permutation(len(pairs))
    return [(pairs[i][0], pairs[int(j)][1]) for i, j in enumerate(perm)]
