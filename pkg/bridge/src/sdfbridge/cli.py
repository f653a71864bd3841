"""`sdfbridge serve`: run the residual service."""

import argparse
import sys

from .service import BridgeConfig, create_app


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdfbridge")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("serve", help="start the guidance endpoint")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8085)
    p.add_argument("--model", default=None,
                   help="model identifier (default: stub mode)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("zero", "echo"), default="zero",
                   help="stub residual behavior")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = BridgeConfig(model=args.model, port=args.port, seed=args.seed,
                          residual_mode=args.mode)
    app = create_app(config)
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
