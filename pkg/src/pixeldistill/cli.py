"""Command-line entry point.

Subcommands: generate, palette-extract, export, gradcheck, serve-echo.
Set PIXELDISTILL_LOG=debug|info|warning to control verbosity.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import export as export_mod
from . import gradcheck as gradcheck_mod
from . import imaging
from .generator import argmax_indices, entropy_map, softmax_probs
from .guidance import Condition, make_schedule
from .optimize import load_checkpoint, run
from .palette import Palette, kmeans_palette, load_tile_palette, parse_palette, serialize_palette

log = logging.getLogger("pixeldistill")


def _setup_logging():
    level = os.environ.get("PIXELDISTILL_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_palette(gen_cfg: dict, seed: int) -> Palette:
    if gen_cfg["palette"]:
        text = Path(gen_cfg["palette"]).read_text()
        return parse_palette(text, name=Path(gen_cfg["palette"]).stem)
    if gen_cfg["tiles"]:
        return load_tile_palette(gen_cfg["tiles"])
    image = imaging.read_png(gen_cfg["input_image"])
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    return kmeans_palette(image, gen_cfg["kmeans_n"], seed)


def _save_entropy_figure(path, entropy_img: np.ndarray) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    im = ax.imshow(entropy_img, cmap="viridis", vmin=0.0, vmax=1.0,
                   interpolation="nearest")
    ax.set_title("normalized entropy")
    ax.set_xticks([])
    ax.set_yticks([])
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)


def _save_trace_figure(path, entropy_trace, fft_trace) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    axes[0].plot(entropy_trace, lw=0.8)
    axes[0].set_xlabel("step")
    axes[0].set_ylabel("mean normalized entropy")
    axes[0].set_ylim(0, 1)
    axes[1].plot(fft_trace, lw=0.8, color="tab:orange")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("high-frequency energy")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_generate(args) -> int:
    cfg = config_mod.parse_config(args.config)
    out_dir = Path(args.out or cfg.raw["run"]["out"])
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        log.error("output directory %s is not empty (use --force)", out_dir)
        print(f"error: output directory {out_dir} is not empty (use --force)",
              file=sys.stderr)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)

    gen_cfg = cfg.raw["generator"]
    palette = _load_palette(gen_cfg, cfg.raw["run"]["seed"])
    h, w = cfg.raw["run"]["size"]
    tile_h, tile_w = palette.tile_shape
    config_mod.finalize_target_size(cfg, (h * tile_h, w * tile_w))

    schedule = make_schedule(t_max=cfg.raw["schedule"]["steps"])
    target_size = tuple(cfg.raw["augment"]["target_size"])
    backend = config_mod.build_backend(cfg.raw["backend"]["spec"], target_size, schedule)

    input_image_ds = None
    condition = Condition(
        prompt=cfg.raw["condition"]["prompt"],
        uncond_prompt=cfg.raw["condition"]["uncond_prompt"],
        canny_scale=cfg.raw["condition"]["canny_scale"],
        depth_scale=cfg.raw["condition"]["depth_scale"],
    )
    if gen_cfg["input_image"]:
        image = imaging.read_png(gen_cfg["input_image"])
        if image.shape[2] == 1:
            image = np.repeat(image, 3, axis=2)
        input_image_ds = imaging.bilinear_resize(image, h, w)
        depth = (imaging.read_png(cfg.raw["condition"]["depth_map"])
                 if cfg.raw["condition"]["depth_map"] else imaging.pseudo_depth(image))
        if depth.shape[2] != 1:
            depth = imaging.to_gray(depth)[:, :, None]
        condition.canny = imaging.canny(image)
        condition.depth = depth

    resolved = cfg.to_toml()
    (out_dir / "resolved_config").write_text(resolved)

    run_config = cfg.run_config()
    result = run(run_config, palette, backend, input_image_ds=input_image_ds,
                 condition=condition, schedule=schedule, out_dir=out_dir,
                 config_hash=cfg.config_hash())

    imaging.write_png(out_dir / "argmax.png", result.argmax_render)
    imaging.write_png(out_dir / "softmax.png", result.softmax_render)
    imaging.write_png(out_dir / "preview_x8.png",
                      imaging.nearest_upscale(result.argmax_render, 8))
    entropy_img, mean_entropy = entropy_map(softmax_probs(result.theta))
    _save_entropy_figure(out_dir / "entropy.png", entropy_img)
    _save_trace_figure(out_dir / "traces.png", result.entropy_trace, result.fft_trace)
    log.info("run finished: %d steps, final mean entropy %.4f",
             run_config.steps, mean_entropy)
    print(f"wrote {out_dir}/argmax.png softmax.png preview_x8.png entropy.png "
          f"traces.png telemetry.csv resolved_config")
    return 0


def cmd_palette_extract(args) -> int:
    image = imaging.read_png(args.image)
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    palette = kmeans_palette(image, args.n, args.seed)
    Path(args.out).write_text(serialize_palette(palette))
    print(f"wrote {args.out} ({palette.n} colors)")
    return 0


def _indices_from_args(args, palette: Palette) -> np.ndarray:
    if args.checkpoint:
        theta, _, _, _ = load_checkpoint(args.checkpoint)
        if theta.n != palette.n:
            raise export_mod.ExportError(
                f"checkpoint palette size {theta.n} != palette {palette.n}")
        return argmax_indices(theta)
    img = imaging.read_png(args.argmax)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    # exact match against the palette's byte-quantized colors
    quantized = np.rint(palette.colors * 255.0) / 255.0
    dist = np.abs(img[:, :, None, :] - quantized[None, None, :, :]).sum(axis=-1)
    indices = dist.argmin(axis=-1)
    if dist.min(axis=-1).max() > 1e-9:
        raise export_mod.ExportError(
            "argmax image contains colors outside the palette")
    return indices


def cmd_export(args) -> int:
    tiles = load_tile_palette(args.tiles) if args.kind == "mosaic" else None
    if args.palette:
        palette = parse_palette(Path(args.palette).read_text())
    elif args.checkpoint and tiles is not None:
        palette = tiles  # checkpoints carry indices directly
    else:
        raise config_mod.ConfigError("--palette is required to decode an argmax PNG")
    indices = _indices_from_args(args, palette)
    out = Path(args.out)
    if args.kind == "stitch":
        chart = export_mod.make_chart(indices, palette, title=args.title)
        out.write_text(export_mod.render_chart_svg(chart))
    elif args.kind == "csv":
        out.write_text(export_mod.chart_to_csv(indices))
    elif args.kind == "mosaic":
        if tiles.n != palette.n:
            raise export_mod.ExportError(
                f"tile palette has {tiles.n} elements, run palette {palette.n}")
        imaging.write_png(out, export_mod.render_mosaic(indices, tiles))
    print(f"wrote {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.n < 2:
        print("error: palette size must be >= 2", file=sys.stderr)
        return 1
    if args.size > 8:
        print("error: gradcheck sizes above 8x8 are needlessly slow", file=sys.stderr)
        return 1
    results = gradcheck_mod.run_all(args.size, args.n, args.seed,
                                    inject_sign_error=args.inject_sign_error)
    ok = True
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:24s} max rel err {r.error:.3e}  (< {r.threshold:.0e})  {status}")
        ok &= r.ok
    return 0 if ok else 1


def cmd_serve_echo(args) -> int:
    from .protocol import EchoDeltaServer

    target = imaging.read_png(args.target)
    if target.shape[2] == 1:
        target = np.repeat(target, 3, axis=2)
    uncond = None
    if args.uncond_target:
        uncond = imaging.read_png(args.uncond_target)
        if uncond.shape[2] == 1:
            uncond = np.repeat(uncond, 3, axis=2)
    server = EchoDeltaServer(target, uncond)
    if args.stdio:
        server.serve_stdio()
        return 0
    host, port = server.serve_tcp(port=args.port)
    print(f"echo-delta guidance server on {host}:{port}", file=sys.stderr)
    server.accept_loop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pixeldistill",
        description="Palette-constrained image synthesis by score distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="run an optimization from a config file")
    p.add_argument("config")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("palette-extract", help="K-means palette from an image")
    p.add_argument("image")
    p.add_argument("n", type=int)
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_palette_extract)

    p = sub.add_parser("export", help="fabrication chart / mosaic / csv from a result")
    p.add_argument("--kind", choices=["stitch", "mosaic", "csv"], required=True)
    p.add_argument("--palette", help="run palette file (decodes argmax PNGs)")
    p.add_argument("--tiles", help="tile directory (mosaic rendering)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--argmax", help="argmax render PNG")
    p.add_argument("--title", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p.add_argument("--size", type=int, default=4)
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-sign-error", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("serve-echo", help="echo-delta guidance server for protocol tests")
    p.add_argument("--target", required=True, help="conditional target PNG")
    p.add_argument("--uncond-target", default=None)
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--port", type=int, default=None)
    mode.add_argument("--stdio", action="store_true")
    p.set_defaults(func=cmd_serve_echo)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0
    except Exception as e:
        log.debug("fatal error", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
