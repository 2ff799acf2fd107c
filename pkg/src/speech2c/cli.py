"""Command-line entry point: synth, quantize, pretrain, finetune, decode, sweep, analyze."""
from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

from .audio import ConvStackConfig, load_manifest_audio, read_manifest, synth_corpus, write_manifest, write_wav
from .checkpoint import load_checkpoint, save_checkpoint
from .config import Config, ConfigError, parse_config, write_config
from .errors import ContractError, FormatError, IncompatibleConfigError, InputTooShortError, NonFiniteLossError
from .finetune import ASRModel, CharVocab, normalize_transcript
from .nets import ArchConfig
from .pipeline import (
    code_length_stats, copy_encoder, decode_wer, init_asr, init_pretrain_params, make_vocab, quantize,
    run_finetune, run_pretrain,
)
from .quantizer import (
    code_text_report, grid_alignment, read_codes, save_kmeans, shuffled_pairs, write_codes,
)
from .search import CharLM, CharLMConfig, sweep_weights, train_char_lm, write_decodes, write_nbest

log = logging.getLogger("speech2c")

HANDLED = (ConfigError, ContractError, FormatError, IncompatibleConfigError, InputTooShortError, NonFiniteLossError,
           FileNotFoundError, KeyError, ValueError)


class Outputs:
    """Tracks files a command creates so they can be removed if it fails."""

    def __init__(self):
        self.paths: list = []

    def __call__(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            self.paths.append(p)
        return p

    def discard(self) -> None:
        for p in reversed(self.paths):
            if p.is_file():
                p.unlink()
            elif p.is_dir():
                with contextlib.suppress(OSError):
                    p.rmdir()


def utt_ids(manifest) -> list:
    return [Path(rel).stem for rel, _ in read_manifest(manifest)]


# -- commands -------------------------------------------------------------------
def cmd_synth(args, cfg: Config, out: Outputs) -> None:
    root = out(args.out)
    root.mkdir(parents=True, exist_ok=True)
    out(root / "wav").mkdir(exist_ok=True)
    rows = []
    for i, (w, text) in enumerate(synth_corpus(cfg.synth())):
        rel = f"wav/utt{i:04d}.wav"
        write_wav(out(root / rel), w)
        rows.append((rel, text))
    write_manifest(out(root / "manifest.tsv"), rows)
    log.info("wrote %d utterances to %s", len(rows), root)


def cmd_quantize(args, cfg: Config, out: Outputs) -> None:
    waves = [w for w, _ in load_manifest_audio(args.manifest)]
    km, codes = quantize(waves, cfg)
    save_kmeans(km, out(args.out_model))
    write_codes(out(args.out_codes), codes)
    frames, reduced = code_length_stats(codes)
    log.info("k-means C=%d: objective %.6g -> %.6g; mean code length %.2f frame-level, %.2f reduced",
             km.C, km.objective_history[0], km.objective_history[-1], frames, reduced)


def _meta(cfg: Config, kind: str, **extra) -> dict:
    return {"kind": kind, "arch": cfg.arch().as_dict(), "conv_channels": cfg.conv_channels,
            "config": cfg.lines(), **extra}


def cmd_pretrain(args, cfg: Config, out: Outputs) -> None:
    if args.codes:
        cfg.codes_mode = args.codes
    waves = [w for w, _ in load_manifest_audio(args.manifest)]
    codes = [c.codes for c in read_codes(args.codes_file)]
    if len(codes) != len(waves):
        raise ValueError(f"{args.codes_file}: {len(codes)} code lines for {len(waves)} utterances")
    frames, reduced = code_length_stats(codes)
    log.info("codes_mode=%s; mean code length %.2f frame-level, %.2f reduced", cfg.codes_mode, frames, reduced)
    params, opt, start = None, None, 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        if ck.fingerprint != cfg.fingerprint() and not args.force:
            raise IncompatibleConfigError(f"{args.resume}: config fingerprint {ck.fingerprint} differs from "
                                          f"current {cfg.fingerprint()} (use --force to resume anyway)")
        params, opt, start = ck.tensors(), ck.opt, ck.step
        log.info("resuming from %s at step %d", args.resume, start)
    else:
        params = init_pretrain_params(cfg)
        if args.init_encoder:
            copied = copy_encoder(params, load_checkpoint(args.init_encoder).params)
            log.info("initialised %d encoder tensors from %s", len(copied), args.init_encoder)
    log_path = out(args.log) if args.log else None
    with open(log_path, "a" if args.resume else "w", encoding="utf-8", newline="\n") if log_path else \
            contextlib.nullcontext() as lf:
        params, opt, hist = run_pretrain(waves, codes, cfg, params, opt, start, lf, args.stop_after)
    step = start + len(hist)
    save_checkpoint(out(args.out), params, step, cfg.fingerprint(), _meta(cfg, "pretrain"), opt)
    if hist:
        log.info("pretrain steps %d..%d: lmlm %.4f -> %.4f, lmle %.4f -> %.4f", start, step - 1,
                 hist[0]["lmlm"], hist[-1]["lmlm"], hist[0]["lmle"], hist[-1]["lmle"])


def _finetune_data(manifest, cfg: Config) -> list:
    data = load_manifest_audio(manifest)
    return data[:cfg.finetune_utts] if cfg.finetune_utts > 0 else data


def cmd_finetune(args, cfg: Config, out: Outputs) -> None:
    data = _finetune_data(args.manifest, cfg)
    vocab = make_vocab([t for _, t in read_manifest(args.manifest)])
    if args.init:
        ck = load_checkpoint(args.init)
        params = init_asr(cfg, vocab, ck.tensors(), ck.meta.get("arch"))
        log.info("initialised from pre-trained %s (step %d)", args.init, ck.step)
    else:
        params = init_asr(cfg, vocab)
        log.info("no --init: fine-tuning from random initialisation")
    log_path = out(args.log) if args.log else None
    with open(log_path, "w", encoding="utf-8", newline="\n") if log_path else contextlib.nullcontext() as lf:
        run = run_finetune(data, cfg, params, vocab, lf, args.eval_every or None)
    save_checkpoint(out(args.out), params, len(run.history), cfg.fingerprint(),
                    _meta(cfg, "asr", vocab=vocab.chars))
    for s, w in run.wer_trace:
        log.info("train WER after %d steps: %.4f", s, float(w))
    if args.lm_out:
        lm = train_char_lm([t for _, t in data], vocab, cfg.char_lm())
        save_checkpoint(out(args.lm_out), lm.params, cfg.lm_steps, cfg.fingerprint(),
                        _meta(cfg, "lm", vocab=vocab.chars, lm=lm.cfg.__dict__))


def load_asr(path) -> ASRModel:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "asr":
        raise FormatError(f"{path}: not an ASR checkpoint (kind={ck.meta.get('kind')!r})")
    arch = ArchConfig(**ck.meta["arch"])
    return ASRModel(ck.tensors(), arch, ConvStackConfig.desk(ck.meta["conv_channels"]), CharVocab(ck.meta["vocab"]))


def load_lm(path) -> CharLM:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "lm":
        raise FormatError(f"{path}: not a language-model checkpoint (kind={ck.meta.get('kind')!r})")
    return CharLM(ck.tensors(), CharLMConfig(**ck.meta["lm"]), CharVocab(ck.meta["vocab"]))


def cmd_decode(args, cfg: Config, out: Outputs) -> None:
    model = load_asr(args.model)
    lm = load_lm(args.lm) if args.lm else None
    opts = cfg.search(args.ctc_weight, args.lm_weight)
    data = load_manifest_audio(args.manifest)
    w, hyps, nbests = decode_wer(model, data, opts, lm)
    ids = utt_ids(args.manifest)
    write_decodes(out(args.out), list(zip(ids, hyps)))
    if args.nbest:
        write_nbest(out(args.nbest), list(zip(ids, nbests)), model.vocab)
    forced = sum(1 for nb in nbests if nb and nb[0].forced)
    log.info("decoded %d utterances (ctc_weight=%g lm_weight=%g beam=%d): WER %.4f%s", len(data),
             opts.ctc_weight, opts.lm_weight, opts.beam, float(w), f"; {forced} forced at max_len" if forced else "")
    print(f"WER {float(w):.6f}")


def cmd_sweep(args, cfg: Config, out: Outputs) -> None:
    model = load_asr(args.model)
    lm = load_lm(args.lm) if args.lm else None
    dev = [(w, normalize_transcript(t)) for w, t in load_manifest_audio(args.manifest)]
    res = sweep_weights(dev, model, lm, Config.grid(cfg.sweep_ctc_grid), Config.grid(cfg.sweep_lm_grid),
                        cfg.search())
    out(args.out).write_text(res.to_text(), encoding="utf-8")
    log.info("best ctc_weight=%g lm_weight=%g (WER %.4f)", res.best_ctc, res.best_lm,
             float(res.table[(res.best_ctc, res.best_lm)]))
    print(f"best ctc_weight={res.best_ctc:g} lm_weight={res.best_lm:g}")


def cmd_analyze(args, cfg: Config, out: Outputs) -> None:
    rows = read_manifest(args.manifest)
    codes = [c.codes for c in read_codes(args.codes_file)]
    texts = [t for _, t in rows]
    pairs = list(zip(codes, texts))
    alignments = None
    if args.grid:
        conv = cfg.conv()
        n = int(round(cfg.symbol_dur * 16000))
        alignments = [grid_alignment(len(c), len(t), conv, n) for c, t in pairs]
    if args.control:
        pairs = shuffled_pairs(pairs, cfg.seed)
        alignments = None
    report = code_text_report(pairs, alignments)
    out(args.out).write_text(report.to_tsv() if args.tsv else report.to_text(), encoding="utf-8")
    log.info("code/text report: frame-weighted purity %.3f over %d symbols", report.mean_purity, len(report.rows))


# -- parser -----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speech2c", description=__doc__)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--save-config", help="write the resolved config here")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser("quantize", help="fit k-means and write frame-level codes")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out-model", required=True)
    s.add_argument("--out-codes", required=True)

    s = sub.add_parser("pretrain", help="masked code prediction + code reconstruction")
    s.add_argument("--manifest", required=True)
    s.add_argument("--codes-file", required=True)
    s.add_argument("--codes", choices=("reduced", "repeated"), help="decoder targets (default: config)")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", help="metrics log")
    s.add_argument("--init-encoder", help="copy pre-net and encoder tensors from this checkpoint")
    s.add_argument("--resume", help="continue from this checkpoint (optimizer state included)")
    s.add_argument("--force", action="store_true", help="resume despite a config fingerprint mismatch")
    s.add_argument("--stop-after", type=int, help="stop once this many steps are done")

    s = sub.add_parser("finetune", help="CTC + attention fine-tuning")
    s.add_argument("--manifest", required=True)
    s.add_argument("--init", help="pre-trained checkpoint (omit for random init)")
    s.add_argument("--out", required=True)
    s.add_argument("--log")
    s.add_argument("--lm-out", help="also train a character LM on the transcripts and save it here")
    s.add_argument("--eval-every", type=int, default=0, help="decode the training set every N steps")

    for name, text in (("decode", "joint CTC/attention decoding"), ("sweep", "grid search over decoding weights")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--manifest", required=True)
        s.add_argument("--model", required=True)
        s.add_argument("--lm")
        s.add_argument("--out", required=True)
        if name == "decode":
            s.add_argument("--nbest")
            s.add_argument("--ctc-weight", type=float)
            s.add_argument("--lm-weight", type=float)

    s = sub.add_parser("analyze", help="code/text co-occurrence report")
    s.add_argument("--manifest", required=True)
    s.add_argument("--codes-file", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tsv", action="store_true")
    s.add_argument("--grid", action="store_true", help="exact alignment for fixed-duration synthetic symbols")
    s.add_argument("--control", action="store_true", help="pair codes with shuffled transcripts")
    return p


COMMANDS = {"synth": cmd_synth, "quantize": cmd_quantize, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "decode": cmd_decode, "sweep": cmd_sweep, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    log.setLevel(logging.DEBUG if args.verbose else logging.INFO)
    out = Outputs()
    try:
        cfg = parse_config(args.config, args.set)
        if args.save_config:
            write_config(cfg, out(args.save_config))
        COMMANDS[args.command](args, cfg, out)
    except HANDLED as e:
        out.discard()
        msg = e.args[0] if isinstance(e, KeyError) and e.args else e
        print(f"speech2c {args.command}: error: {msg}", file=sys.stderr)
        return 1
    except BaseException:
        out.discard()
        raise
    return 0


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
