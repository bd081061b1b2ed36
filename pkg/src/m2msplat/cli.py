"""Command line front end.

Exit codes: 0 success, 1 usage error, 2 runtime error (including a failed
gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("m2msplat")

HOLE_COLOR = (1.0, 0.0, 1.0)  # magenta marks unfilled holes


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def __init__(self, *a, **kw):
        kw.setdefault("allow_abbrev", False)  # config merging needs exact flag names
        super().__init__(*a, **kw)

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated list of numbers: {text!r}") from None


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated list of integers: {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like 256x256, got {text!r}") from None
    if w <= 0 or h <= 0:
        raise argparse.ArgumentTypeError("size must be positive")
    return w, h


def build_parser() -> Parser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="key = value file; flags given explicitly win")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS/OpenMP worker threads (default: $M2M_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = Parser(prog="m2msplat", description="Many-to-many splatting frame interpolation.")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    q = sub.add_parser("interpolate", parents=[common], help="render in-between frames",
                       description="Writes frame_t{index}.png per time plus ledger.json with keys "
                                   "shared_flops, unshared_flops, mrn_invocations, step_unshared_flops, "
                                   "holes, stage_ms, shared_ms, unshared_ms, times, n_flows.")
    q.add_argument("--frame0", required=True)
    q.add_argument("--frame1", required=True)
    q.add_argument("--flow01", help=".flo file, frame 0 to frame 1 (needs --flow10)")
    q.add_argument("--flow10", help=".flo file, frame 1 to frame 0")
    q.add_argument("--times", type=_float_list, default=[0.5], help="comma separated, each in (0, 1)")
    q.add_argument("--model", required=True, help="checkpoint written by train-toy")
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--no-fill", action="store_true", help="leave holes unfilled, drawn magenta")
    q.add_argument("--n-flows", type=int, default=None, help="use only the first N sub-motion fields")

    q = sub.add_parser("holes", parents=[common], help="hole count / PSNR sweep over N",
                       description="Writes CSV with header N,mean_holes,psnr and one row per N. "
                                   "psnr is empty when no ground-truth middle frame is known.")
    q.add_argument("--frame0")
    q.add_argument("--frame1")
    q.add_argument("--frame-gt", help="ground-truth middle frame, enables the psnr column")
    q.add_argument("--scene", choices=("translation", "rotation", "zoom", "occlusion", "static"),
                   help="use seeded synthetic scenes instead of --frame0/--frame1")
    q.add_argument("--count", type=int, default=8, help="number of synthetic scenes")
    q.add_argument("--size", type=int, default=64, help="synthetic scene size in pixels")
    q.add_argument("--model", required=True,
                   help="one checkpoint (first N heads used) or 'N=path,N=path,...'")
    q.add_argument("--n-flows", type=_int_list, required=True, help="comma separated list")
    q.add_argument("--out", required=True, help="CSV path")

    q = sub.add_parser("train-toy", parents=[common], help="train on synthetic triplets",
                       description="Config keys: any TrainConfig field (iterations, batch, crop, lr, "
                                   "lr_min, weight_decay, kinds, t, flip_spatial, flip_temporal, "
                                   "color_jitter, max_shift, flow_source, held_out, log_every) plus "
                                   "model keys levels, channels, rank, n_flows, downscale. "
                                   "The loss CSV has columns iteration,L_char,L_cen,total.")
    q.add_argument("--out", required=True, help="checkpoint path")
    q.add_argument("--loss-csv", help="default: <out>.loss.csv")
    q.add_argument("--iterations", type=int)
    q.add_argument("--n-flows", type=int)

    q = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    q.add_argument("--scope", choices=("op", "mrn", "pipeline"), default="op")
    q.add_argument("--tol", type=float, default=None,
                   help="max relative error (default 1e-5 op, 1e-3 mrn and pipeline)")

    q = sub.add_parser("bench", parents=[common], help="shared vs per-frame timing",
                       description="Prints one JSON object per --times value with keys size, times, "
                                   "shared_ms, unshared_ms, unshared_ms_per_frame, shared_flops, "
                                   "unshared_flops, mrn_invocations.")
    q.add_argument("--size", type=_size, default=(256, 256), help="WxH")
    q.add_argument("--times", type=_int_list, default=[1], help="frames per pair; comma list compares")
    q.add_argument("--repeat", type=int, default=3)
    q.add_argument("--model", help="checkpoint; default is a randomly initialised full-size network")
    return p


MODEL_KEYS = ("levels", "channels", "rank", "n_flows", "downscale")


def parse(argv) -> tuple[argparse.Namespace, dict]:
    """Parse flags, then fill unset options from --config; returns (args, leftover config)."""
    parser = build_parser()
    args = parser.parse_args(argv)
    extra = {}
    if args.config:
        try:
            cfg = read_config(args.config)
        except OSError as exc:
            parser.error(f"cannot read config: {exc}")
        except UsageError as exc:
            parser.error(str(exc))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        explicit = _explicit_dests(sub, argv[1:] if argv else [])
        dests = {a.dest: a for a in sub._actions}
        for key, value in cfg.items():
            if key in dests and key not in ("config", "help"):
                if key in explicit:
                    continue
                action = dests[key]
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    setattr(args, key, value.lower() in ("1", "true", "yes", "on"))
                else:
                    try:
                        setattr(args, key, action.type(value) if action.type else value)
                    except (argparse.ArgumentTypeError, ValueError) as exc:
                        sub.error(f"config key {key}: {exc}")
            elif args.command == "train-toy":
                extra[key] = value
            else:
                sub.error(f"unknown config key {key!r}")
    if args.threads is None and os.environ.get("M2M_THREADS"):
        try:
            args.threads = int(os.environ["M2M_THREADS"])
        except ValueError:
            parser.error("M2M_THREADS must be an integer")
    return args, extra


def _explicit_dests(sub: argparse.ArgumentParser, argv) -> set:
    flags = {}
    for action in sub._actions:
        for opt in action.option_strings:
            flags[opt] = action.dest
    seen = set()
    for tok in argv:
        name = tok.split("=", 1)[0]
        if name in flags:
            seen.add(flags[name])
    return seen


# ------------------------------------------------------------------ commands


def cmd_interpolate(args) -> int:
    from .io import read_flo, read_image, write_image
    from .pipeline import InterpolationRequest, interpolate

    if bool(args.flow01) != bool(args.flow10):
        raise UsageError("--flow01 and --flow10 must be given together")
    if not Path(args.model).is_file():
        raise FileNotFoundError(f"model checkpoint not found: {args.model}")
    I0, I1 = read_image(args.frame0), read_image(args.frame1)
    flows = (read_flo(args.flow01), read_flo(args.flow10)) if args.flow01 else None
    req = InterpolationRequest(I0, I1, args.times, args.model, flows, fill_holes=not args.no_fill,
                               n_flows=args.n_flows)
    frames, ledger, masks = interpolate(req, return_holes=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (frame, mask) in enumerate(zip(frames, masks)):
        if args.no_fill:
            frame = frame.copy()
            frame[:, mask] = np.array(HOLE_COLOR, dtype=frame.dtype)[:, None]
        write_image(out / f"frame_t{i}.png", frame)
    info = ledger.to_dict()
    info["times"] = req.times
    info["n_flows"] = args.n_flows
    (out / "ledger.json").write_text(json.dumps(info, indent=2))
    print(f"wrote {len(frames)} frame(s) to {out}")
    return 0


def _parse_models(spec: str):
    from .mrn import MotionRefinementNet

    if "=" not in spec:
        return MotionRefinementNet.load(_existing(spec))
    models = {}
    for part in spec.split(","):
        n, path = part.split("=", 1)
        models[int(n)] = MotionRefinementNet.load(_existing(path.strip()))
    return models


def _existing(path: str) -> str:
    if not Path(path).is_file():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    return path


def cmd_holes(args) -> int:
    from .io import read_image
    from .pipeline import sweep_n_flows
    from .scenes import Triplet, make_suite

    if args.scene:
        triplets = make_suite([args.scene], args.count, size=args.size, seed=args.seed)
    else:
        if not (args.frame0 and args.frame1):
            raise UsageError("give --frame0 and --frame1, or --scene")
        I0, I1 = read_image(args.frame0), read_image(args.frame1)
        gt = read_image(args.frame_gt) if args.frame_gt else None
        triplets = [Triplet(I0, gt, I1, None, None, 0.5)]
    rows = sweep_n_flows(triplets, args.n_flows, _parse_models(args.model))
    with open(args.out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["N", "mean_holes", "psnr"])
        for row in rows:
            psnr = "" if np.isnan(row["psnr"]) else f"{row['psnr']:.4f}"
            wr.writerow([row["n"], f"{row['mean_holes']:.4f}", psnr])
    for row in rows:
        print(f"N={row['n']}: mean holes {row['mean_holes']:.3f}, psnr {row['psnr']:.3f}")
    return 0


def cmd_train_toy(args, extra: dict) -> int:
    from .mrn import MrnConfig
    from .train import TrainConfig, train_toy

    model_kw = {}
    for key in MODEL_KEYS:
        if key in extra:
            raw = extra.pop(key)
            model_kw[key] = tuple(int(v) for v in raw.split(",")) if key == "channels" else int(raw)
    if args.n_flows is not None:
        model_kw["n_flows"] = args.n_flows
    try:
        train_kw = dict(extra)
        train_kw["seed"] = args.seed
        if args.iterations is not None:
            train_kw["iterations"] = args.iterations
        cfg = TrainConfig.from_dict(train_kw)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    model = MrnConfig.toy(**model_kw)
    loss_csv = args.loss_csv or f"{args.out}.loss.csv"
    res = train_toy(cfg, model, out=args.out, loss_csv=loss_csv)
    last = res.losses[-1]
    print(f"final loss {last[3]!r} (char {last[1]!r}, census {last[2]!r})")
    print(f"held-out loss {res.initial_eval['loss']:.5f} -> {res.final_eval['loss']:.5f}, "
          f"psnr {res.initial_eval['psnr']:.2f} -> {res.final_eval['psnr']:.2f} dB")
    return 0


def cmd_gradcheck(args) -> int:
    from .checks import run_mrn_check, run_op_checks, run_pipeline_check

    if args.scope == "op":
        tol = args.tol if args.tol is not None else 1e-5
        results = run_op_checks(args.seed)
    elif args.scope == "mrn":
        tol = args.tol if args.tol is not None else 1e-3
        results = {"mrn_forward": run_mrn_check(args.seed)}
    else:
        tol = args.tol if args.tol is not None else 1e-3
        results = {"synthesis_loss": run_pipeline_check(args.seed)}
    failed = 0
    for name, err in results.items():
        ok = err <= tol
        failed += not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:28s} {err:.3e}")
    print(f"{len(results) - failed}/{len(results)} within {tol:g}")
    return 0 if failed == 0 else 2


def cmd_bench(args) -> int:
    from .mrn import MotionRefinementNet, MrnConfig
    from .pipeline import bench

    net = (MotionRefinementNet.load(_existing(args.model)) if args.model
           else MotionRefinementNet(MrnConfig(), seed=args.seed))
    w, h = args.size
    for k in args.times:
        if k < 1:
            raise UsageError("--times values must be >= 1")
        print(json.dumps(bench(net, (h, w), k, args.repeat, args.seed)))
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args, extra = parse(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=args.threads):
            if args.command == "interpolate":
                return cmd_interpolate(args)
            if args.command == "holes":
                return cmd_holes(args)
            if args.command == "train-toy":
                return cmd_train_toy(args, extra)
            if args.command == "gradcheck":
                return cmd_gradcheck(args)
            return cmd_bench(args)
    except UsageError as exc:
        print(f"m2msplat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        if args.verbose:
            log.exception("failed")
        print(f"m2msplat {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
