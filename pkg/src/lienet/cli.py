"""Command-line entry point: train, enhance, eval, audit, gradcheck, synth, bench."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from lienet import tensor as T
from lienet.dsconv import dsconv_param_count
from lienet.imageio import DatasetError, read_image, synth_pairs, write_image
from lienet.network import (
    CheckpointError,
    NetworkConfig,
    build_network,
    format_flop_report,
    load_checkpoint,
    msrb_param_count,
    net_flop_report,
    net_forward,
    net_param_count,
    parse_dia_set,
)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _positive_int(flag):
    def conv(text):
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{flag} expects an integer, got {text!r}") from None
        if v < 1:
            raise argparse.ArgumentTypeError(f"{flag} must be >= 1, got {v}")
        return v

    return conv


def _dia_set(text):
    try:
        return parse_dia_set(text)
    except T.StructuralError as e:
        raise argparse.ArgumentTypeError(f"--dia-set: {e}") from None


def _add_net_flags(p):
    p.add_argument("--dia-set", type=_dia_set, default=(0, 1, 2, 3, 4),
                   help='dilation set, e.g. "0+1+2+3+4" or "2+3+4"')
    p.add_argument("--tie-mode", choices=("mirror_tied", "untied"), default="mirror_tied")
    p.add_argument("--skip-mode", choices=("literal", "single"), default="literal")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lienet", description="Ultra-light low-light enhancement network")
    parser.add_argument("--threads", type=_positive_int("--threads"), default=1,
                        help="BLAS thread limit (1 keeps runs bit-reproducible)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a low/ + high/ dataset")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--epochs", type=_positive_int("--epochs"), default=360)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch", type=_positive_int("--batch"), default=40)
    p.add_argument("--crop", type=_positive_int("--crop"), default=180)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-timing", action="store_true", help="write 0.0 seconds so logs are byte-reproducible")
    _add_net_flags(p)

    p = sub.add_parser("enhance", help="enhance one image")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--in", dest="input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("eval", help="PSNR/SSIM of enhanced low images against references")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--report", required=True, type=Path)
    p.add_argument("--split", type=Path, help="split.json from training; evaluates its test names only")

    p = sub.add_parser("audit", help="parameter count and itemized FLOP report")
    _add_net_flags(p)
    p.add_argument("--height", type=_positive_int("--height"), default=180)
    p.add_argument("--width", type=_positive_int("--width"), default=180)
    p.add_argument("--json", type=Path, help="also write the report as JSON")

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cases", type=_positive_int("--cases"), default=20)
    p.add_argument("--network-cases", type=_positive_int("--network-cases"), default=None)

    p = sub.add_parser("synth", help="write a synthetic low/high dataset")
    p.add_argument("--count", type=_positive_int("--count"), required=True)
    p.add_argument("--size", type=_positive_int("--size"), default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("bench", help="forward wall time on the host CPU")
    p.add_argument("--checkpoint", type=Path, help="default: a freshly initialized network")
    p.add_argument("--height", type=_positive_int("--height"), default=180)
    p.add_argument("--width", type=_positive_int("--width"), default=180)
    p.add_argument("--iters", type=_positive_int("--iters"), default=20)
    p.add_argument("--warmup", type=int, default=3)
    return parser


# ---------------------------------------------------------------------------


def cmd_train(args, out):
    from lienet.trainer import TrainConfig, train

    cfg = TrainConfig(epochs=args.epochs, base_lr=args.lr, batch_size=args.batch, crop=args.crop,
                      seed=args.seed, log_timing=not args.no_timing)
    net_cfg = NetworkConfig(args.dia_set, tie_mode=args.tie_mode, skip_mode=args.skip_mode)
    _, rows, _ = train(args.data, cfg, net_cfg, args.out)
    last = rows[-1]
    print(f"epochs: {len(rows)}", file=out)
    print(f"final_total: {last['total']:.6f}", file=out)
    print(f"checkpoint: {args.out / 'checkpoint.json'}", file=out)
    return EXIT_OK


def cmd_enhance(args, out):
    from lienet.metrics import enhance

    net = load_checkpoint(args.checkpoint)
    img = read_image(args.input, net.dtype)
    write_image(enhance(net, img), args.out)
    print(f"wrote {args.out} ({img.shape[2]}x{img.shape[3]})", file=out)
    return EXIT_OK


def cmd_eval(args, out):
    from lienet.metrics import evaluate, write_report

    names = None
    if args.split is not None:
        try:
            names = json.loads(args.split.read_text())["test"]
        except (OSError, ValueError, KeyError) as e:
            raise OSError(f"--split {args.split}: {e}") from None
    report = evaluate(args.data, args.checkpoint, names)
    write_report(report, args.report)
    print(report.to_text(), file=out)
    return EXIT_OK


def cmd_audit(args, out):
    cfg = NetworkConfig(args.dia_set, tie_mode=args.tie_mode, skip_mode=args.skip_mode)
    net = build_network(cfg)
    report = net_flop_report(cfg, args.height, args.width)
    params = net_param_count(net)
    print(f"params: {params}", file=out)
    print(f"dsconv_params: {dsconv_param_count(cfg.channels)}", file=out)
    print(f"msrb_params: {msrb_param_count(cfg.channels, cfg.kappa)}", file=out)
    print(f"unique_blocks: {cfg.num_blocks}", file=out)
    print(format_flop_report(report), file=out)
    doc = {"params": params, "flops": report}
    print(json.dumps(doc), file=out)
    if args.json:
        args.json.parent.mkdir(parents=True, exist_ok=True)
        args.json.write_text(json.dumps(doc, indent=1) + "\n")
    return EXIT_OK


def cmd_gradcheck(args, out):
    from lienet.gradcheck import TOLERANCE, run_suite

    def report(r):
        status = "ok" if r.passed else "FAIL"
        print(f"{r.component:<28} cases={r.cases:<3d} max_rel_err={r.max_rel_error:.3e} {status}", file=out,
              flush=True)

    results = run_suite(args.cases, args.seed, args.network_cases, log=report)
    worst = max(r.max_rel_error for r in results)
    ok = all(r.passed for r in results)
    print(f"overall max_rel_err={worst:.3e} tolerance={TOLERANCE:.0e} {'PASS' if ok else 'FAIL'}", file=out)
    return EXIT_OK if ok else EXIT_CONTRACT


def cmd_synth(args, out):
    names = synth_pairs(args.count, args.size, args.seed, args.out)
    print(f"wrote {len(names)} pairs to {args.out}", file=out)
    return EXIT_OK


def cmd_bench(args, out):
    net = load_checkpoint(args.checkpoint) if args.checkpoint else build_network()
    x = np.random.default_rng(0).uniform(size=(1, 3, args.height, args.width)).astype(net.dtype)
    for _ in range(args.warmup):
        net_forward(x, net)
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        net_forward(x, net)
        times.append(time.perf_counter() - t0)
    sd = statistics.stdev(times) if len(times) > 1 else 0.0
    print("# host CPU wall time of the numpy forward pass; not comparable to embedded GPU figures", file=out)
    print(f"input: {args.height}x{args.width}", file=out)
    print(f"iters: {args.iters}", file=out)
    print(f"mean_ms: {1e3 * statistics.fmean(times):.3f}", file=out)
    print(f"stdev_ms: {1e3 * sd:.3f}", file=out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
    "bench": cmd_bench,
}


def run(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    try:
        if threadpool_limits is not None:
            with threadpool_limits(limits=args.threads):
                return COMMANDS[args.command](args, out)
        return COMMANDS[args.command](args, out)
    except (CheckpointError, DatasetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONTRACT


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
