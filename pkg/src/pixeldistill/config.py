"""Declarative run configuration: parsing, validation, resolution, round-trip.

The config file is TOML with nested sections (run / generator / augment /
loss / schedule / optimizer / backend / condition). Unknown keys anywhere are
errors so typos cannot silently fall back to defaults. Resolving a config
makes every default explicit; the resolved text is written next to the run
artifacts and re-running from it reproduces the run bit-exactly with oracle
backends.
"""

from __future__ import annotations

import hashlib
import shlex
from dataclasses import dataclass
from pathlib import Path
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import imaging
from .augment import AugmentConfig
from .guidance import DeltaOracle, GmmOracle
from .optimize import RunConfig


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "run": {"steps": 6000, "seed": 0, "size": [64, 64], "out": "out"},
    "generator": {
        "tau": 1.0, "use_gumbel": True, "straight_through": False,
        "init": "auto", "init_scale": 0.1, "init_norm": "l1",
        "palette": "", "tiles": "", "kmeans_n": 0, "input_image": "",
    },
    "augment": {
        "p_gray": 0.2, "p_flip": 0.5, "p_persp": 0.5,
        "distortion_scale": 0.3, "target_size": [0, 0],
    },
    "loss": {"guidance_scale": 40.0, "w_fft": 20.0, "fft_radius": 0},
    "schedule": {"t_min": 20, "b_start": 980, "b_end": 800, "steps": 1000},
    "optimizer": {"lr": 0.25, "warmup": 250, "weight_decay": 0.0},
    "backend": {"spec": ""},
    "condition": {
        "prompt": "", "uncond_prompt": "",
        "canny_scale": 0.35, "depth_scale": 0.35, "depth_map": "",
    },
}

# sentinel meanings, resolved in resolve(): generator.init "auto" becomes
# "image" when an input image is given, else "random"; augment.target_size
# [0, 0] means native render size for oracle backends and 1024x1024 for
# remote ones; loss.fft_radius 0 means max(1, min(H, W) // 8).


@dataclass
class ResolvedConfig:
    raw: dict
    base_dir: Path

    def section(self, name) -> dict:
        return self.raw[name]

    def to_toml(self) -> str:
        lines = []
        for section in _SCHEMA:
            lines.append(f"[{section}]")
            for key, value in self.raw[section].items():
                lines.append(f"{key} = {_toml_value(value)}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_toml().encode("utf-8")).hexdigest()

    def run_config(self) -> RunConfig:
        r, g, a, l, s, o = (self.raw[k] for k in
                            ("run", "generator", "augment", "loss", "schedule", "optimizer"))
        if list(a["target_size"]) == [0, 0]:
            raise ConfigError("internal: target_size not finalized")
        return RunConfig(
            steps=r["steps"], size=tuple(r["size"]), seed=r["seed"],
            tau=g["tau"], use_gumbel=g["use_gumbel"],
            straight_through=g["straight_through"], init=g["init"],
            init_scale=g["init_scale"], init_norm=g["init_norm"],
            s=l["guidance_scale"], w_fft=l["w_fft"],
            fft_radius=l["fft_radius"] or None,
            aug=AugmentConfig(
                p_gray=a["p_gray"], p_flip=a["p_flip"], p_persp=a["p_persp"],
                distortion_scale=a["distortion_scale"],
                target_size=tuple(a["target_size"])),
            t_min=s["t_min"], b_start=s["b_start"], b_end=s["b_end"],
            schedule_steps=s["steps"],
            lr=o["lr"], warmup=o["warmup"], weight_decay=o["weight_decay"],
        )


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def parse_config(path) -> ResolvedConfig:
    """Load, validate against the schema, and resolve all defaults."""
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}")

    merged = {}
    for section, defaults in _SCHEMA.items():
        given = data.pop(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"[{section}] must be a section")
        unknown = set(given) - set(defaults)
        if unknown:
            raise ConfigError(f"[{section}] has unknown keys: {sorted(unknown)}")
        merged[section] = {**defaults, **given}
    if data:
        raise ConfigError(f"unknown config sections: {sorted(data)}")

    cfg = ResolvedConfig(raw=merged, base_dir=path.parent.resolve())
    _resolve(cfg)
    return cfg


def _resolve(cfg: ResolvedConfig) -> None:
    g = cfg.raw["generator"]
    b = cfg.raw["backend"]
    r = cfg.raw["run"]
    a = cfg.raw["augment"]
    l = cfg.raw["loss"]
    c = cfg.raw["condition"]

    if not b["spec"]:
        raise ConfigError("backend.spec is required "
                          "(delta:<png>, gmm:<png,png,...>, remote:<host:port>, remote-stdio:<cmd>)")

    for key in ("palette", "tiles", "input_image"):
        if g[key]:
            g[key] = str((cfg.base_dir / g[key]).resolve())
    if c["depth_map"]:
        c["depth_map"] = str((cfg.base_dir / c["depth_map"]).resolve())
    b["spec"] = _resolve_backend_paths(b["spec"], cfg.base_dir)

    palette_sources = [bool(g["palette"]), bool(g["tiles"]), g["kmeans_n"] > 0]
    if sum(palette_sources) != 1:
        raise ConfigError(
            "exactly one palette source required: generator.palette, "
            "generator.tiles, or generator.kmeans_n")
    if g["kmeans_n"] > 0 and not g["input_image"]:
        raise ConfigError("generator.kmeans_n needs generator.input_image")

    if g["init"] == "auto":
        g["init"] = "image" if g["input_image"] else "random"
    if g["init"] == "image" and not g["input_image"]:
        raise ConfigError("generator.init = 'image' needs generator.input_image")
    if g["init"] not in ("image", "random"):
        raise ConfigError(f"generator.init must be image|random, got {g['init']!r}")

    h, w = r["size"]
    if not (isinstance(h, int) and isinstance(w, int) and h >= 1 and w >= 1):
        raise ConfigError(f"run.size must be two positive integers, got {r['size']}")
    # augment.target_size [0, 0] stays a sentinel until finalize_target_size()
    # knows the palette tile shape (mosaic renders are larger than the grid)


def finalize_target_size(cfg: ResolvedConfig, render_size: tuple[int, int]) -> None:
    """Resolve the target-size sentinel once the render size is known.

    Oracle backends default to the native render size (they are
    resolution-free); remote backends default to 1024x1024 inputs. Explicit
    values, including those in a resolved config, pass through untouched.
    """
    a = cfg.raw["augment"]
    l = cfg.raw["loss"]
    if list(a["target_size"]) == [0, 0]:
        if cfg.raw["backend"]["spec"].startswith(("remote:", "remote-stdio:")):
            a["target_size"] = [1024, 1024]
        else:
            a["target_size"] = [int(render_size[0]), int(render_size[1])]
    if l["fft_radius"] == 0:
        l["fft_radius"] = max(1, min(render_size[0], render_size[1]) // 8)


def _resolve_backend_paths(spec: str, base_dir: Path) -> str:
    kind, _, rest = spec.partition(":")
    if kind == "delta":
        paths = [str((base_dir / p).resolve()) for p in rest.split(",") if p]
        if not 1 <= len(paths) <= 2:
            raise ConfigError("delta backend takes 1 or 2 image paths")
        return "delta:" + ",".join(paths)
    if kind == "gmm":
        parts = [p for p in rest.split(",") if p]
        out = []
        for p in parts:
            if p.startswith("gamma="):
                out.append(p)
            else:
                out.append(str((base_dir / p).resolve()))
        return "gmm:" + ",".join(out)
    if kind in ("remote", "remote-stdio"):
        return spec
    raise ConfigError(f"unknown backend kind {kind!r}")


def build_backend(spec: str, target_size: tuple[int, int], schedule):
    """Instantiate a guidance backend from its spec string.

    Oracle target images get bilinearly resized to the augmented-image size.
    The remote client import is deferred so oracle-only runs never touch
    sockets.
    """
    kind, _, rest = spec.partition(":")
    if kind == "delta":
        paths = rest.split(",")
        targets = [_load_target(p, target_size) for p in paths]
        uncond = targets[1] if len(targets) > 1 else None
        return DeltaOracle(targets[0], uncond, schedule=schedule)
    if kind == "gmm":
        gamma = 0.1
        means = []
        for part in rest.split(","):
            if part.startswith("gamma="):
                gamma = float(part[len("gamma="):])
            elif part:
                means.append(_load_target(part, target_size))
        if not means:
            raise ConfigError("gmm backend needs at least one mean image")
        weights = np.full(len(means), 1.0 / len(means))
        return GmmOracle(np.stack(means), weights, gamma, schedule=schedule)
    if kind == "remote":
        from .protocol import RemoteBackend
        host, _, port = rest.rpartition(":")
        if not host or not port.isdigit():
            raise ConfigError(f"remote backend spec must be remote:<host>:<port>, got {spec!r}")
        return RemoteBackend.connect_tcp(host, int(port))
    if kind == "remote-stdio":
        from .protocol import RemoteBackend
        return RemoteBackend.spawn(shlex.split(rest))
    raise ConfigError(f"unknown backend kind {kind!r}")


def _load_target(path: str, target_size: tuple[int, int]) -> np.ndarray:
    img = imaging.read_png(path)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    return imaging.bilinear_resize(img, target_size[0], target_size[1])
