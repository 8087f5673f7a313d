"""Sidecar entry point: pick a mode, pick a transport, serve."""

from __future__ import annotations

import argparse
import logging
import sys

from .server import Server


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="guidance-sidecar",
        description="Remote guidance backend (echo-delta or diffusion mode)")
    parser.add_argument("--mode", choices=["echo-delta", "diffusion"],
                        default="echo-delta")
    transport = parser.add_mutually_exclusive_group(required=True)
    transport.add_argument("--stdio", action="store_true")
    transport.add_argument("--port", type=int)
    parser.add_argument("--host", default="127.0.0.1")

    echo = parser.add_argument_group("echo-delta mode")
    echo.add_argument("--target", help="conditional target PNG")
    echo.add_argument("--uncond-target", help="unconditional target PNG")

    diff = parser.add_argument_group("diffusion mode")
    diff.add_argument("--model", default=None, help="latent diffusion model id")
    diff.add_argument("--vae", default=None, help="distilled VAE id")
    diff.add_argument("--lora", default=None, help="LoRA adapter to load")
    diff.add_argument("--device", default="cuda")
    return parser


def make_backend(args):
    if args.mode == "echo-delta":
        from .echo_delta import EchoDeltaBackend, load_target

        if not args.target:
            raise SystemExit("echo-delta mode needs --target")
        uncond = load_target(args.uncond_target) if args.uncond_target else None
        return EchoDeltaBackend(load_target(args.target), uncond)

    from . import diffusion

    kwargs = {"device": args.device}
    if args.model:
        kwargs["model_id"] = args.model
    if args.vae:
        kwargs["vae_id"] = args.vae
    if args.lora:
        kwargs["lora"] = args.lora
    return diffusion.DiffusionBackend(**kwargs)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        backend = make_backend(args)
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    server = Server(backend)
    if args.stdio:
        server.serve_stdio()
        return 0
    host, port = server.serve_tcp(args.host, args.port)
    print(f"{backend.name} guidance server on {host}:{port}", file=sys.stderr)
    server.accept_loop()
    return 0


if __name__ == "__main__":
    sys.exit(main())
