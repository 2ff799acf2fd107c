"""How well do k-means codes line up with transcript symbols?

Quantizes the synthetic corpus and prints per-symbol code distributions under
an even split of frames across characters, under the exact synthesis grid,
and for a shuffled code/transcript pairing as a chance-level control.
"""
import argparse
import sys

from speech2c.audio import SAMPLE_RATE, synth_corpus
from speech2c.config import parse_config
from speech2c.pipeline import code_length_stats, quantize
from speech2c.quantizer import code_text_report, grid_alignment, shuffled_pairs


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    args = p.parse_args(argv)
    cfg = parse_config(args.config, args.set)

    corpus = synth_corpus(cfg.synth())
    _, codes = quantize([w for w, _ in corpus], cfg)
    pairs = [(c, t) for c, (_, t) in zip(codes, corpus)]
    frames, reduced = code_length_stats(codes)
    print(f"{len(pairs)} utterances, C={cfg.n_codes}, mean code length {frames:.1f} -> {reduced:.1f} after reduction\n")

    n = int(round(cfg.symbol_dur * SAMPLE_RATE))
    grid = [grid_alignment(len(c), len(t), cfg.conv(), n) for c, t in pairs]
    for title, report in (("even split", code_text_report(pairs)),
                          ("synthesis grid", code_text_report(pairs, grid)),
                          ("shuffled control", code_text_report(shuffled_pairs(pairs, cfg.seed)))):
        print(f"== {title}")
        print(report.to_text())
    return 0


if __name__ == "__main__":
    sys.exit(main())
