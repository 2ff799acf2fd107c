"""Run synth -> quantize -> pretrain -> finetune -> decode -> sweep -> analyze through the CLI.

    python3 scripts/toy_pipeline.py --workdir runs/toy --set pretrain_steps=50
"""
import argparse
import sys
from pathlib import Path

from speech2c.cli import main as cli


def build_parser():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--workdir", default="runs/toy")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--skip-sweep", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    wd = Path(args.workdir)
    wd.mkdir(parents=True, exist_ok=True)
    common = (["--config", args.config] if args.config else []) + [x for kv in args.set for x in ("--set", kv)]
    man = str(wd / "corpus" / "manifest.tsv")
    steps = [
        ["--save-config", str(wd / "resolved.cfg"), "synth", "--out", str(wd / "corpus")],
        ["quantize", "--manifest", man, "--out-model", str(wd / "kmeans.txt"), "--out-codes", str(wd / "codes.txt")],
        ["pretrain", "--manifest", man, "--codes-file", str(wd / "codes.txt"), "--out", str(wd / "pretrain.ckpt"),
         "--log", str(wd / "pretrain.log")],
        ["finetune", "--manifest", man, "--init", str(wd / "pretrain.ckpt"), "--out", str(wd / "asr.ckpt"),
         "--log", str(wd / "finetune.log"), "--lm-out", str(wd / "lm.ckpt")],
        ["decode", "--manifest", man, "--model", str(wd / "asr.ckpt"), "--lm", str(wd / "lm.ckpt"),
         "--out", str(wd / "decodes.txt"), "--nbest", str(wd / "nbest.txt")],
        ["sweep", "--manifest", man, "--model", str(wd / "asr.ckpt"), "--lm", str(wd / "lm.ckpt"),
         "--out", str(wd / "sweep.tsv")],
        ["analyze", "--manifest", man, "--codes-file", str(wd / "codes.txt"), "--grid",
         "--out", str(wd / "code_text.txt")],
    ]
    for argv_ in steps:
        if args.skip_sweep and "sweep" in argv_:
            continue
        rc = cli(common + argv_)
        if rc:
            return rc
    print(f"outputs in {wd}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
