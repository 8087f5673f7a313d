import numpy as np
import pytest

from pixeldistill import cli
from pixeldistill import config as config_mod
from pixeldistill.imaging import read_png, write_png
from pixeldistill.palette import parse_palette


@pytest.fixture
def workdir(tmp_path):
    pal_text = "#000000\n#FF0000\n#00FF00\n"
    (tmp_path / "palette.txt").write_text(pal_text)
    palette = parse_palette(pal_text)
    rng = np.random.default_rng(0)
    target = palette.colors[rng.integers(0, 3, (8, 8))]
    write_png(tmp_path / "target.png", target)
    return tmp_path


def _minimal_config(workdir, steps=30, extra=""):
    text = f"""
[run]
steps = {steps}
seed = 4
size = [8, 8]

[generator]
palette = "palette.txt"
init = "random"

[augment]
p_gray = 0.0
p_flip = 0.0
p_persp = 0.0

[loss]
w_fft = 0.0

[backend]
spec = "delta:target.png"
{extra}
"""
    path = workdir / "run.toml"
    path.write_text(text)
    return path


def test_generate_smoke_writes_all_artifacts(workdir):
    cfg = _minimal_config(workdir)
    out = workdir / "out"
    assert cli.main(["generate", str(cfg), "--out", str(out)]) == 0
    for name in ["argmax.png", "softmax.png", "preview_x8.png", "entropy.png",
                 "traces.png", "telemetry.csv", "resolved_config"]:
        assert (out / name).exists(), name
    assert list((out / "checkpoints").glob("*.npz"))
    # artifacts parse
    assert read_png(out / "argmax.png").shape == (8, 8, 3)
    assert read_png(out / "preview_x8.png").shape == (64, 64, 3)
    rows = (out / "telemetry.csv").read_text().splitlines()
    assert len(rows) == 31


def test_generate_refuses_nonempty_out(workdir):
    cfg = _minimal_config(workdir)
    out = workdir / "out"
    out.mkdir()
    (out / "junk.txt").write_text("x")
    assert cli.main(["generate", str(cfg), "--out", str(out)]) == 1
    assert cli.main(["generate", str(cfg), "--out", str(out), "--force"]) == 0


def test_generate_deterministic_reruns(workdir):
    cfg = _minimal_config(workdir)
    out1, out2 = workdir / "o1", workdir / "o2"
    assert cli.main(["generate", str(cfg), "--out", str(out1)]) == 0
    assert cli.main(["generate", str(cfg), "--out", str(out2)]) == 0
    assert (out1 / "telemetry.csv").read_bytes() == (out2 / "telemetry.csv").read_bytes()
    assert (out1 / "argmax.png").read_bytes() == (out2 / "argmax.png").read_bytes()


def test_generate_from_resolved_config_reproduces(workdir):
    cfg = _minimal_config(workdir)
    out1 = workdir / "r1"
    assert cli.main(["generate", str(cfg), "--out", str(out1)]) == 0
    out2 = workdir / "r2"
    assert cli.main(["generate", str(out1 / "resolved_config"),
                     "--out", str(out2)]) == 0
    assert (out1 / "telemetry.csv").read_bytes() == (out2 / "telemetry.csv").read_bytes()
    assert (out1 / "argmax.png").read_bytes() == (out2 / "argmax.png").read_bytes()


def test_config_missing_palette_source_names_field(workdir):
    path = workdir / "bad.toml"
    path.write_text('[backend]\nspec = "delta:target.png"\n')
    with pytest.raises(config_mod.ConfigError, match="palette"):
        config_mod.parse_config(path)


def test_config_unknown_key_rejected(workdir):
    path = workdir / "bad.toml"
    path.write_text(
        '[generator]\npalette = "palette.txt"\ntypo_key = 3\n'
        '[backend]\nspec = "delta:target.png"\n')
    with pytest.raises(config_mod.ConfigError, match="typo_key"):
        config_mod.parse_config(path)


def test_config_unknown_section_rejected(workdir):
    path = workdir / "bad.toml"
    path.write_text('[nonsense]\nx = 1\n[backend]\nspec = "delta:t.png"\n'
                    '[generator]\npalette = "palette.txt"\n')
    with pytest.raises(config_mod.ConfigError, match="nonsense"):
        config_mod.parse_config(path)


def test_config_requires_backend(workdir):
    path = workdir / "bad.toml"
    path.write_text('[generator]\npalette = "palette.txt"\n')
    with pytest.raises(config_mod.ConfigError, match="backend.spec"):
        config_mod.parse_config(path)


def test_target_size_defaults_by_backend_kind(workdir):
    path = workdir / "remote.toml"
    path.write_text('[generator]\npalette = "palette.txt"\n'
                    '[backend]\nspec = "remote:localhost:9000"\n')
    cfg = config_mod.parse_config(path)
    config_mod.finalize_target_size(cfg, (32, 32))
    assert cfg.raw["augment"]["target_size"] == [1024, 1024]

    path.write_text('[generator]\npalette = "palette.txt"\n'
                    '[backend]\nspec = "delta:target.png"\n')
    cfg = config_mod.parse_config(path)
    config_mod.finalize_target_size(cfg, (32, 32))
    assert cfg.raw["augment"]["target_size"] == [32, 32]


def test_palette_extract_round_trip(workdir):
    out = workdir / "extracted.txt"
    assert cli.main(["palette-extract", str(workdir / "target.png"), "3",
                     str(out), "--seed", "1"]) == 0
    p = parse_palette(out.read_text())
    assert p.n == 3


def test_palette_extract_insufficient_colors(workdir):
    write_png(workdir / "flat.png", np.full((8, 8, 3), 0.5))
    assert cli.main(["palette-extract", str(workdir / "flat.png"), "3",
                     str(workdir / "x.txt")]) == 1


def test_export_stitch_csv_mosaic(workdir, tmp_path):
    cfg = _minimal_config(workdir)
    out = workdir / "out"
    assert cli.main(["generate", str(cfg), "--out", str(out)]) == 0
    svg = workdir / "chart.svg"
    assert cli.main(["export", "--kind", "stitch", "--palette",
                     str(workdir / "palette.txt"), "--argmax",
                     str(out / "argmax.png"), "--out", str(svg)]) == 0
    assert svg.read_text().startswith("<svg")

    csv_path = workdir / "chart.csv"
    assert cli.main(["export", "--kind", "csv", "--palette",
                     str(workdir / "palette.txt"), "--argmax",
                     str(out / "argmax.png"), "--out", str(csv_path)]) == 0
    assert csv_path.read_text().startswith("i,j,palette_index")

    tiles = tmp_path / "tiles"
    tiles.mkdir()
    rng = np.random.default_rng(0)
    write_png(tiles / "a.png", rng.random((4, 4, 3)))
    write_png(tiles / "b.png", rng.random((4, 4, 3)))
    write_png(tiles / "c.png", rng.random((4, 4, 3)))
    mosaic = workdir / "mosaic.png"
    assert cli.main(["export", "--kind", "mosaic", "--tiles", str(tiles),
                     "--palette", str(workdir / "palette.txt"),
                     "--argmax", str(out / "argmax.png"), "--out",
                     str(mosaic)]) == 0
    assert read_png(mosaic).shape == (32, 32, 3)


def test_export_checkpoint_source(workdir):
    cfg = _minimal_config(workdir)
    out = workdir / "out"
    assert cli.main(["generate", str(cfg), "--out", str(out)]) == 0
    ckpt = sorted((out / "checkpoints").glob("step_*.npz"))[-1]
    svg = workdir / "from_ckpt.svg"
    assert cli.main(["export", "--kind", "stitch", "--palette",
                     str(workdir / "palette.txt"), "--checkpoint", str(ckpt),
                     "--out", str(svg)]) == 0
    assert svg.exists()


def test_export_foreign_argmax_rejected(workdir):
    bad = workdir / "bad.png"
    write_png(bad, np.full((4, 4, 3), 0.43))
    assert cli.main(["export", "--kind", "csv", "--palette",
                     str(workdir / "palette.txt"), "--argmax", str(bad),
                     "--out", str(workdir / "no.csv")]) == 1


def test_generate_with_tile_palette(workdir):
    tiles = workdir / "tiles"
    tiles.mkdir()
    rng = np.random.default_rng(6)
    for name in ("a.png", "b.png", "c.png"):
        write_png(tiles / name, rng.random((3, 3, 3)))
    # target must match the render size (grid 4x4 of 3x3 tiles = 12x12)
    write_png(workdir / "big_target.png", rng.random((12, 12, 3)))
    (workdir / "tiles.toml").write_text("""
[run]
steps = 15
seed = 2
size = [4, 4]
[generator]
tiles = "tiles"
init = "random"
[augment]
p_gray = 0.0
p_flip = 0.0
p_persp = 0.0
[backend]
spec = "delta:big_target.png"
""")
    out = workdir / "tile_out"
    assert cli.main(["generate", str(workdir / "tiles.toml"),
                     "--out", str(out)]) == 0
    assert read_png(out / "argmax.png").shape == (12, 12, 3)
    resolved = (out / "resolved_config").read_text()
    assert "target_size = [12, 12]" in resolved


def test_gradcheck_passes():
    assert cli.main(["gradcheck"]) == 0


def test_gradcheck_negative_control():
    assert cli.main(["gradcheck", "--inject-sign-error"]) == 1


def test_gradcheck_rejects_n1():
    assert cli.main(["gradcheck", "--n", "1"]) == 1
