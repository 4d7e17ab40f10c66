"""Serve the adapter: `python -m trackprune_adapter --stub --port 8080`."""

from __future__ import annotations

import argparse

import uvicorn

from trackprune_adapter.app import create_app
from trackprune_adapter.config import AdapterConfig


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackprune-adapter", description=__doc__)
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8080)
    parser.add_argument("--stub", action="store_true", help="serve both roles from fixtures (no weights)")
    parser.add_argument("--segmenter-mode", choices=("stub", "checkpoint", "off"), default="stub")
    parser.add_argument("--segmenter-fixture", help="fixture JSON for the stub segmenter")
    parser.add_argument("--segmenter-checkpoint")
    parser.add_argument("--chat-mode", choices=("stub", "proxy", "off"), default="stub")
    parser.add_argument("--chat-upstream", help="base URL of a chat-completions server to proxy")
    parser.add_argument("--chat-replies", help="JSON file of {pattern, reply} rules for the stub chat")
    parser.add_argument("--device", default="cpu")
    return parser


def config_from_args(args) -> AdapterConfig:
    if args.stub:
        segmenter_mode, chat_mode = "stub", "stub"
    else:
        segmenter_mode = None if args.segmenter_mode == "off" else args.segmenter_mode
        chat_mode = None if args.chat_mode == "off" else args.chat_mode
    return AdapterConfig(
        segmenter_mode=segmenter_mode,
        segmenter_fixture=args.segmenter_fixture,
        segmenter_checkpoint=args.segmenter_checkpoint,
        chat_mode=chat_mode,
        chat_upstream=args.chat_upstream,
        chat_replies=args.chat_replies,
        device=args.device,
        host=args.host,
        port=args.port,
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = config_from_args(args)
    uvicorn.run(create_app(config), host=config.host, port=config.port, log_level="info")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
