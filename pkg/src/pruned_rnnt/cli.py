"""``bench`` command line: run benchmarks, dump occupancy grids, generate shapes."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .bench import BenchConfig, dump_occupancy, gen_shapes, load_shapes, run_benchmark, save_shapes
from .core import TargetSequence, TransducerError
from .tensor_io import load_tensor
from .trivial_joiner import JoinerLogits


def _load_target(path, vocab: int) -> TargetSequence:
    with open(path) as f:
        obj = json.load(f)
    if isinstance(obj, dict):
        return TargetSequence(obj["tokens"], obj.get("vocab_size", vocab))
    return TargetSequence(obj, vocab)


def cmd_run(args) -> int:
    cfg = BenchConfig(
        mode=args.mode,
        batch_size=args.batch_size,
        max_frames=args.max_frames,
        vocab=args.vocab,
        s_range=args.s_range,
        impl=args.impl,
        reps=args.reps,
        seed=args.seed,
        threads=args.threads,
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
    )
    spec = load_shapes(args.shapes) if args.shapes else gen_shapes(args.count, args.seed)
    report = run_benchmark(cfg, spec, args.out)
    print(
        f"{cfg.impl} {cfg.mode}: {report.batch_count} batches, "
        f"{report.average_time_per_batch_ms:.1f} ms/batch, "
        f"peak {report.peak_tracked_bytes / 2**20:.1f} MiB tracked"
    )
    for note in report.notes:
        print(f"note: {note}")
    return 0


def cmd_dump(args) -> int:
    grid = load_tensor(args.input)
    if args.dec:
        logits = JoinerLogits(grid, load_tensor(args.dec))
    else:
        if grid.ndim != 3:
            raise TransducerError(f"--input must be a (T, U+1, V) tensor without --dec, got rank {grid.ndim}")
        logits = grid
    target = _load_target(args.target, grid.shape[-1])
    dump = dump_occupancy(logits, target, args.out, s_range=args.s_range)
    for p in dump.paths:
        print(p)
    return 0


def cmd_gen(args) -> int:
    save_shapes(args.out, gen_shapes(args.count, args.seed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="time a loss implementation over batched shapes")
    run.add_argument("--mode", choices=["fixed", "dynamic"], default="fixed")
    run.add_argument("--batch-size", type=int, default=30)
    run.add_argument("--max-frames", type=int, default=10_000)
    run.add_argument("--vocab", type=int, default=500)
    run.add_argument("--s-range", type=int, default=5)
    run.add_argument("--impl", choices=["pruned", "dense"], default="pruned")
    run.add_argument("--shapes", help='ShapeSpec JSON: [{"t": int, "u": int}, ...]')
    run.add_argument("--count", type=int, default=60, help="synthetic utterances when --shapes is absent")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--reps", type=int, default=2)
    run.add_argument("--threads", type=int, default=1)
    run.add_argument("--embed-dim", type=int, default=32)
    run.add_argument("--hidden-dim", type=int, default=32)
    run.add_argument("--out", help="write the JSON report here")
    run.set_defaults(func=cmd_run)

    dump = sub.add_parser("dump-occupancy", help="write the node-gradient grid and pruning bounds as CSV")
    dump.add_argument("--input", required=True, help="tensor file: (T, U+1, V) logits, or (T, V) l_enc with --dec")
    dump.add_argument("--dec", help="tensor file with (U+1, V) l_dec for the trivial joiner")
    dump.add_argument("--target", required=True, help="JSON token list or {\"tokens\": [...]}")
    dump.add_argument("--s-range", type=int, default=4)
    dump.add_argument("--out", required=True, help="output path prefix")
    dump.set_defaults(func=cmd_dump)

    gen = sub.add_parser("gen-shapes", help="write a synthetic ShapeSpec JSON")
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (TransducerError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
