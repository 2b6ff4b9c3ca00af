"""Command-line entry point: ``lvseg {train,segment,evaluate,phantom}``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvseg", description="LV segmentation in short-axis cine MRI")
    p.add_argument("--seed", type=int, default=None, help="override the configured random seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-slice work")
    p.add_argument("--debug-trace", action="store_true", help="write level-set traces and verbose logs")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the detector and both shape networks")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)

    s = sub.add_parser("segment", help="segment one study directory (or a directory of studies)")
    s.add_argument("--model", required=True)
    s.add_argument("--study", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--network-rule", choices=("position", "area"), default="position")

    e = sub.add_parser("evaluate", help="compare segmentation outputs with reference contours")
    e.add_argument("--auto", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--aligned", action="store_true", help="evaluate aligned_<i>.csv instead of contour_<i>.csv")
    e.add_argument("--symmetric-apd", action="store_true")

    g = sub.add_parser("phantom", help="write synthetic phantom studies")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.debug_trace else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "train":
            pipeline.cmd_train(args.config, args.out, seed=args.seed)
        elif args.command == "segment":
            pipeline.cmd_segment(args.model, args.study, args.out, rule=args.network_rule,
                                 threads=args.threads, debug_trace=args.debug_trace)
        elif args.command == "evaluate":
            rep = pipeline.cmd_evaluate(args.auto, args.ref, args.out,
                                        prefix="aligned" if args.aligned else "contour",
                                        symmetric_apd=args.symmetric_apd, threads=args.threads)
            overall = rep.get("overall")
            if overall:
                print(f"slices={overall['n']} dice={overall['dice_mean']:.4f} "
                      f"apd_mm={overall['apd_mean']:.3f} good_pct={overall['good_pct']:.1f}")
        elif args.command == "phantom":
            recs = pipeline.cmd_phantom(args.config, args.out, seed=args.seed)
            print(f"wrote {len(recs)} studies to {args.out}")
    except pipeline.StageError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
