"""Command line: ``saltlab {pretrain,run,serve,attack}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .errors import SaltError
from .harness import ExperimentConfig, load_backbone, pretrain_backbone, run_attack, run_scenario
from .protocol import SocketTransport, SplitServer
from .split import split_at


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seeds=(args.seed,))
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    seed = cfg.data_seed if args.seed is None else args.seed
    path = Path(args.out or cfg.backbone_path)
    result = pretrain_backbone(cfg.dataset, seed, path, cfg.pretrain)
    print(f"saved {result.path}  test accuracy {result.test_accuracy:.4f}  "
          f"epochs {result.epochs} (best {result.best_epoch})  digest {result.digest}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    factory = None
    if args.connect:
        host, port = args.connect
        factory = lambda: SocketTransport.connect(host, port)  # noqa: E731
    for name, path in run_scenario(cfg, factory, args.out).items():
        print(f"{name}: {path}")
    return 0


def cmd_serve(args) -> int:
    cfg = _load_config(args)
    model = split_at(load_backbone(cfg.backbone_path), cfg.split_point)
    host, port = args.listen
    with SplitServer(model, host, port) as server:
        print(f"listening on {server.server_address[0]}:{server.port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
    return 0


def cmd_attack(args) -> int:
    cfg = _load_config(args)
    print(f"attack: {run_attack(cfg, args.out)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="saltlab", description="Split-learning adapter experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_help):
        p.add_argument("--config", help="experiment config (JSON)")
        p.add_argument("--seed", type=int, help="override the seed list with a single seed")
        p.add_argument("--out", help=out_help)
        return p

    common(sub.add_parser("pretrain", help="train and save the backbone"),
           "backbone file (default: config backbone_path)").set_defaults(func=cmd_pretrain)
    run = common(sub.add_parser("run", help="run the configured scenario"), "output directory")
    run.add_argument("--connect", type=_address, metavar="HOST:PORT",
                     help="train adapters against a remote split server")
    run.set_defaults(func=cmd_run)
    serve = common(sub.add_parser("serve", help="host the frozen tail for networked training"), "unused")
    serve.add_argument("--listen", type=_address, default=("127.0.0.1", 0), metavar="HOST:PORT",
                       help="bind address (port 0 picks a free port)")
    serve.set_defaults(func=cmd_serve)
    common(sub.add_parser("attack", help="train the inversion decoder and score it over the sigma grid"),
           "output directory").set_defaults(func=cmd_attack)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SaltError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
