"""Command-line entry point: ``ereformer <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O error,
3 numerical failure (non-finite loss or a failed gradient check).
"""

from __future__ import annotations

import argparse
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

_TRANSFER = {"gate": "update_gate", "update_gate": "update_gate", "attended": "attended", "residual": "residual"}


def _log(msg: str) -> None:
    print(msg, flush=True)


def _config(args, default=None):
    from .config import desk_config, load_config

    cfg = load_config(args.config) if args.config else (default or desk_config)()
    model = {}
    if getattr(args, "skip_mode", None):
        model["skip_mode"] = args.skip_mode
    if getattr(args, "transfer_mode", None):
        model["transfer_mode"] = _TRANSFER[args.transfer_mode]
    if getattr(args, "recurrence", None):
        model["recurrence"] = args.recurrence == "on"
    if model:
        cfg = cfg.replace("model", **model)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace("train", seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.replace("train", epochs=args.epochs)
    return cfg


def cmd_train(args) -> int:
    from .train import read_dataset, train

    cfg = _config(args)
    data = None
    if args.data:
        data = (read_dataset(args.data, "train"), read_dataset(args.data, "val"))
    res = train(cfg, args.out, data=data, resume=args.resume, log=_log)
    first, last = res.initial_val["abs_rel"], res.final_val["abs_rel"]
    _log(f"val abs_rel {first:.4f} -> {last:.4f}; checkpoints in {res.out_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model, read_dataset

    model, _, _ = load_model(args.ckpt)
    result = evaluate(model, read_dataset(args.data, args.split))
    for name, rep in result.per_sequence.items():
        _log(f"{name}: abs_rel {rep.abs_rel:.4f}  rmse_log {rep.rmse_log:.4f}  d1 {rep.delta1:.4f}")
    _log(result.aggregate.table())
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import infer

    n = infer(args.ckpt, args.events, args.out, fmt=args.format, log=_log)
    if n == 0:
        _log("notice: the event file is empty, no depth maps written")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .config import load_config, load_scene
    from .simulator import emit_events, save_sequence
    from .train import write_dataset

    if args.dataset:
        write_dataset(load_config(args.dataset), args.out, log=_log)
        return EXIT_OK
    spec = load_scene(args.spec)
    seq = emit_events(spec, args.dt_us)
    save_sequence(seq, args.out)
    _log(f"{seq.stream.num_events} events, {seq.num_bins} depth maps written to {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    import time

    from .checks import report, run

    t0 = time.time()
    text, ok = report(run(args.module))
    _log(text)
    _log(f"{'all passed' if ok else 'FAILED'} in {time.time() - t0:.1f}s")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    from .config import ablation_config
    from .train import ablation_suite

    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        _log(f"error: bad seed list {args.seeds!r}")
        return EXIT_USAGE
    if len(seeds) < 3:
        _log("error: the ablation suite needs at least 3 seeds")
        return EXIT_USAGE
    result = ablation_suite(_config(args, ablation_config), seeds, out_dir=args.out, log=_log)
    _log(result.table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ereformer", description="Recurrent transformer depth estimation from events.")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="run configuration file (default: built-in desk configuration)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--skip-mode", choices=["stf", "add", "concat"])
        sp.add_argument("--transfer-mode", choices=sorted(_TRANSFER))
        sp.add_argument("--recurrence", choices=["on", "off"])

    sp = sub.add_parser("train", help="train a model")
    with_config(sp)
    sp.add_argument("--data", help="dataset directory written by 'simulate --dataset' (default: simulate in memory)")
    sp.add_argument("--out", required=True, help="run directory for checkpoints and manifest")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", choices=["train", "val"], help="restrict to one split (default: all)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="predict depth maps for an event file")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--events", required=True)
    sp.add_argument("--format", choices=["csv", "bin"])
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("simulate", help="render a scene (or a whole dataset) to events and depth maps")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="scene file")
    src.add_argument("--dataset", metavar="CONFIG", help="write the dataset described by a run configuration")
    sp.add_argument("--dt-us", type=int, default=50_000)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient checks in float64")
    sp.add_argument("--module", default="all", choices=["all", "backbone", "grvit", "stf", "loss", "model"])
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="train every ablation variant over several seeds")
    with_config(sp)
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--out", help="keep run directories here")
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .events import EventFormatError
    from .train import DataError, NumericalError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, EventFormatError, CheckpointError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
