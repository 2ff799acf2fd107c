"""Small ablations on the synthetic corpus.

``--study codes`` compares reduced and repeated decoder targets during
pre-training.  ``--study layers`` varies the encoder and decoder depth.  Each
row reports pre-training loss reductions, the first fine-tuning step with
training-set WER 0 (checked every ``--eval-every`` steps) and the final WER.

    python3 scripts/ablations.py --study codes --seeds 0 1 --out codes.tsv
"""
import argparse
import logging
import sys
import time
from dataclasses import replace

from speech2c.audio import synth_corpus
from speech2c.config import parse_config
from speech2c.pipeline import (
    code_length_stats, decode_wer, init_asr, make_vocab, pretrain_eval, quantize, run_finetune, run_pretrain,
)

STUDIES = {
    "codes": [("reduced", {"codes_mode": "reduced"}), ("repeated", {"codes_mode": "repeated"})],
    "layers": [("enc1-dec1", {"enc_layers": 1, "dec_layers": 1}), ("enc2-dec1", {"enc_layers": 2, "dec_layers": 1}),
               ("enc2-dec2", {"enc_layers": 2, "dec_layers": 2}), ("enc3-dec2", {"enc_layers": 3, "dec_layers": 2})],
    "decoder": [("full", {}), ("no-mle", {"w_mle": 0.0})],
}


def run_variant(base, seed, overrides, eval_every):
    cfg = replace(base, seed=seed, **overrides)
    corpus = synth_corpus(cfg.synth())
    waves = [w for w, _ in corpus]
    _, codes = quantize(waves, cfg)
    params = run_pretrain(waves, codes, cfg, stop_after=0)[0]
    before = pretrain_eval(waves, codes, params, cfg)
    params = run_pretrain(waves, codes, cfg, params=params)[0]
    after = pretrain_eval(waves, codes, params, cfg)
    vocab = make_vocab([t for _, t in corpus])
    data = corpus[:cfg.finetune_utts]
    run = run_finetune(data, cfg, init_asr(cfg, vocab, params), vocab, eval_every=eval_every)
    final, _, _ = decode_wer(run.model, data, cfg.search())
    frames, reduced = code_length_stats(codes)
    return {"mlm_drop": 1 - after[0] / before[0], "mle_drop": 1 - after[1] / before[1],
            "first_zero": run.first_zero, "final_wer": float(final), "frames": frames, "reduced": reduced}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--study", choices=sorted(STUDIES), required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0])
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--eval-every", type=int, default=10)
    p.add_argument("--out", help="write the table as TSV")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.WARNING)

    base = parse_config(args.config, args.set)
    header = "variant\tseed\tmlm_drop\tmle_drop\tfirst_zero\tfinal_wer\tcode_len\treduced_len\tseconds"
    rows = [header]
    print(header)
    for name, overrides in STUDIES[args.study]:
        for seed in args.seeds:
            t0 = time.perf_counter()
            r = run_variant(base, seed, overrides, args.eval_every)
            row = (f"{name}\t{seed}\t{r['mlm_drop']:.3f}\t{r['mle_drop']:.3f}\t{r['first_zero']}\t"
                   f"{r['final_wer']:.3f}\t{r['frames']:.1f}\t{r['reduced']:.1f}\t{time.perf_counter() - t0:.0f}")
            rows.append(row)
            print(row, flush=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write("\n".join(rows) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
