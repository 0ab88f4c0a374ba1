"""Command-line entry point: ``mnvae {train,analyze,separate,evaluate,synth-data}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as pl


def _config(args) -> pl.PipelineConfig:
    cfg = pl.load_config(args.config, args.profile, getattr(args, "nodes", None))
    over = {}
    rp = {k: v for k, v in (("lambda_scale", args.lambda_scale), ("tol", args.rpca_tol),
                            ("max_iter", args.rpca_max_iter)) if v is not None}
    mk = {k: v for k, v in (("gain", args.mask_gain), ("alpha", args.mask_alpha)) if v is not None}
    if rp:
        over["rpca"] = rp
    if mk:
        over["mask"] = mk
    tr = {}
    if getattr(args, "epochs", None) is not None:
        tr["epochs"] = args.epochs
    if args.seed is not None:
        tr["seed"] = args.seed
    if tr:
        over["train"] = tr
    return cfg.replace(**over) if over else cfg


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file mirroring PipelineConfig fields")
    common.add_argument("--profile", choices=sorted(pl.PROFILES), default="full")
    common.add_argument("--seed", type=int)
    common.add_argument("--lambda-scale", type=float)
    common.add_argument("--rpca-tol", type=float)
    common.add_argument("--rpca-max-iter", type=int)
    common.add_argument("--mask-gain", type=float)
    common.add_argument("--mask-alpha", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="mnvae", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train and detect the separation window")
    p.add_argument("inputs", nargs="+", help="WAV files or directories")
    p.add_argument("-o", "--out", required=True, help="checkpoint/output directory")
    p.add_argument("--nodes", type=int, help="number of latent nodes K")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("analyze", parents=[common], help="estimate the number of latent nodes")
    p.add_argument("inputs", nargs="+")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--k-max", type=int, default=8)

    p = sub.add_parser("separate", parents=[common], help="separate speech from one mixture")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--nodes", type=int)
    p.add_argument("--dump", help="directory for intermediate spectrogram dumps")
    p.add_argument("--bypass-vae", action="store_true", help="feed the mixture magnitude to RPCA")
    p.add_argument("--mask-ones", action="store_true", help="skip RPCA and use an all-ones mask")

    p = sub.add_parser("evaluate", parents=[common], help="SI-SDR before and after separation")
    p.add_argument("checkpoint")
    p.add_argument("pairs", nargs="+", help="MIX:REFERENCE pairs of WAV paths")
    p.add_argument("-o", "--out", required=True, help="report CSV")
    p.add_argument("--nodes", type=int)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic mixture corpus")
    p.add_argument("out")
    p.add_argument("--clips", type=int, default=10)
    p.add_argument("--duration", type=float, default=1.0)
    p.add_argument("--speakers", type=int, nargs="+", default=[0])
    p.add_argument("--music-fraction", type=float, default=0.5)
    p.add_argument("--snr", type=float, default=0.0)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synth-data":
            pl.cmd_synth_data(args.out, args.clips, args.seed or 0, args.duration, tuple(args.speakers),
                              args.music_fraction, args.snr)
            return pl.EXIT_OK
        cfg = _config(args)
        if args.command == "train":
            res = pl.cmd_train(cfg, args.inputs, args.out)
            win = res.window
            print(f"window {win.spans} selected {win.selected_epoch}")
            return res.exit_code
        if args.command == "analyze":
            est = pl.cmd_analyze(cfg, args.inputs, args.out, args.k_max, args.seed or 0)
            print(f"clusters {est.clusters} nodes {est.nodes} nodes_safe {est.nodes_safe}")
            return pl.EXIT_OK
        if args.command == "separate":
            pl.cmd_separate(cfg, args.checkpoint, args.input, args.output, args.dump,
                            args.bypass_vae, args.mask_ones)
            return pl.EXIT_OK
        if args.command == "evaluate":
            pairs = []
            for item in args.pairs:
                mix, sep, ref = item.partition(":")
                if not sep:
                    raise pl.PipelineError(f"expected MIX:REFERENCE, got {item!r}")
                pairs.append((Path(mix), Path(ref)))
            rep = pl.cmd_evaluate(cfg, args.checkpoint, pairs, args.out)
            print(f"mean SI-SDR improvement {rep.mean_improvement:.2f} dB")
            return pl.EXIT_OK
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pl.EXIT_ERROR
    return pl.EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
