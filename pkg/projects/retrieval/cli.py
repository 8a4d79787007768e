"""
Command-line surface.

    python cli.py synth-data --spec pairs=500 val_pairs=100 --out data/
    python cli.py train --config toy.cfg --override epochs=5
    python cli.py evaluate --checkpoint runs/best.smck --split val
    python cli.py embed --checkpoint runs/best.smck --side text --out text_joint.smdc
    python cli.py grad-check --module smsdc

Exit codes: 0 success, 1 usage or config error, 2 data or format error, 3 numerical abort.
"""

import argparse
import logging
import sys

from data_io import SPLITS, SynthSpec, generate_synthetic, least_squares_pairing_accuracy, write_corpus
from errors import RetrievalError
from grad_suite import CHECKS, THRESHOLD, run_checks
from metrics import render_records, render_table
from tensor import set_debug
from train import TrainConfig, embed, evaluate, load_config, train

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="retrieval", description="Dual-encoder video-text retrieval.")
    ap.add_argument("--verbose", action="store_true", help="Log at DEBUG level.")
    ap.add_argument("--debug", action="store_true", help="Abort on the first non-finite tensor.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="Train and keep the best-RSum checkpoint.")
    p.add_argument("--config", required=True, help="key = value config file.")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--preset", choices=("full", "toy"), default="full",
                   help="Defaults the config file starts from.")

    p = sub.add_parser("evaluate", help="Report R@K, MedR, MeanR, mAP and RSum for a split.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=SPLITS, default=None)
    p.add_argument("--records", action="store_true", help="Print one `direction metric value` per line.")

    p = sub.add_parser("embed", help="Write joint-space embeddings as a feature file.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--side", choices=("video", "text"), required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth-data", help="Write a synthetic paired corpus.")
    p.add_argument("--spec", nargs="*", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", required=True)

    p = sub.add_parser("grad-check", help="Finite-difference checks at toy dimensions.")
    p.add_argument("--module", action="append", choices=sorted(CHECKS), default=None)
    p.add_argument("--seed", type=int, default=0)
    return ap


def _train(args) -> int:
    base = TrainConfig.toy() if args.preset == "toy" else TrainConfig()
    cfg = load_config(args.config, args.override, base)
    result = train(cfg)
    best = result.best.best_rsum
    print(f"best RSum {best:.1f} at epoch {result.best.epoch}" if best is not None
          else "no epochs run, saved initialization")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _evaluate(args) -> int:
    t2v, v2t, rsum = evaluate(args.checkpoint, args.split)
    print(render_records(t2v, v2t, rsum) if args.records else render_table(t2v, v2t, rsum))
    return EXIT_OK


def _embed(args) -> int:
    written = embed(args.checkpoint, args.side, args.out)
    print(f"{len(written.items)} {args.side} embeddings of width {written.width} -> {args.out}")
    return EXIT_OK


def _synth(args) -> int:
    spec = SynthSpec.from_pairs(args.spec)
    videos, texts, manifests = generate_synthetic(spec)
    paths = write_corpus(args.out, videos, texts, manifests)
    accuracy = least_squares_pairing_accuracy(videos, texts, manifests["train"])
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"least-squares pairing accuracy (train): {accuracy:.3f}")
    return EXIT_OK


def _grad_check(args) -> int:
    results = run_checks(args.module, args.seed)
    for name, err in results.items():
        print(f"{name:<14} {err:.2e} {'ok' if err < THRESHOLD else 'FAIL'}")
    return EXIT_OK if all(err < THRESHOLD for err in results.values()) else EXIT_NUMERICAL


COMMANDS = {"train": _train, "evaluate": _evaluate, "embed": _embed,
            "synth-data": _synth, "grad-check": _grad_check}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    set_debug(args.debug)
    try:
        return COMMANDS[args.command](args)
    except RetrievalError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except OSError as e:
        logger.error("%s", e)
        return EXIT_DATA
    finally:
        set_debug(False)


if __name__ == "__main__":
    sys.exit(main())
