"""Protocol conformance against the engine: the sidecar's echo-delta mode must
reproduce the engine's in-process delta oracle bit-exactly (float32) when
driven through the engine's own remote client."""

import sys

import numpy as np
import pytest

pixeldistill = pytest.importorskip("pixeldistill")

from pixeldistill.guidance import Condition, DeltaOracle, make_schedule
from pixeldistill.imaging import write_png
from pixeldistill.protocol import ProtocolError, RemoteBackend


@pytest.fixture
def spawned_sidecar(tmp_path):
    rng = np.random.default_rng(5)
    target = rng.random((6, 6, 3))
    target_q = np.rint(np.clip(target, 0, 1) * 255) / 255  # PNG quantization
    write_png(tmp_path / "target.png", target)
    client = RemoteBackend.spawn(
        [sys.executable, "-m", "guidance_sidecar", "--mode", "echo-delta",
         "--stdio", "--target", str(tmp_path / "target.png")])
    yield client, target_q
    client.close()


def test_handshake_name(spawned_sidecar):
    client, _ = spawned_sidecar
    assert client.server_name == "echo-delta"


def test_bit_exact_against_in_process_oracle(spawned_sidecar):
    client, target = spawned_sidecar
    oracle = DeltaOracle(target, schedule=make_schedule())
    rng = np.random.default_rng(17)
    for trial in range(10):
        x32 = rng.random((6, 6, 3)).astype(np.float32)
        t = int(rng.integers(20, 981))
        seed = int(rng.integers(1 << 31))
        remote = client.evaluate(x32, Condition(), t, seed)
        local = oracle.evaluate(x32, Condition(), t, seed)
        assert remote.grad_noise.dtype == np.float32
        assert np.array_equal(remote.grad_noise, local.grad_noise), f"trial {trial}"
        assert np.array_equal(remote.grad_sem, local.grad_sem), f"trial {trial}"
    print("[PASS] sidecar echo-delta matches in-process delta oracle bit-exactly "
          "(10 random requests)")


def test_version_mismatch_error_message(tmp_path):
    rng = np.random.default_rng(0)
    write_png(tmp_path / "t.png", rng.random((4, 4, 3)))
    import subprocess

    from pixeldistill.protocol import Transport, recv_header, send_message

    child = subprocess.Popen(
        [sys.executable, "-m", "guidance_sidecar", "--mode", "echo-delta",
         "--stdio", "--target", str(tmp_path / "t.png")],
        stdin=subprocess.PIPE, stdout=subprocess.PIPE)
    transport = Transport(child.stdout, child.stdin, timeout=30, child=child)
    send_message(transport, {"msg": "hello", "version": 2})
    reply = recv_header(transport)
    assert reply["msg"] == "error"
    assert "version mismatch" in reply["detail"]
    transport.close()
    print("[PASS] sidecar rejects protocol version 2 with an explicit error")


def test_missing_slot_error_message(spawned_sidecar, tmp_path):
    client, _ = spawned_sidecar
    from pixeldistill.protocol import recv_header, send_message, slot_nbytes

    header = {"msg": "grad", "t": 300, "h": 6, "w": 6, "c": 3, "prompt": "",
              "uncond_prompt": "", "canny_scale": 0.35, "depth_scale": 0.35,
              "slots": ["x"]}
    payload = np.zeros((6, 6, 3), dtype="<f4").tobytes()
    send_message(client.transport, header, payload)
    reply = recv_header(client.transport)
    assert reply["msg"] == "error"
    assert "'eps'" in reply["detail"]
    print("[PASS] sidecar names the missing slot in its error message")


def test_engine_runs_against_sidecar(tmp_path):
    """End-to-end: a short optimization driven entirely over the wire."""
    from pixeldistill import optimize as opt
    from pixeldistill.augment import AugmentConfig
    from pixeldistill.palette import parse_palette

    pal = parse_palette("#000000\n#FF0000\n#00FF00\n#0000FF")
    rng = np.random.default_rng(2)
    target = pal.colors[rng.integers(0, 4, (8, 8))]
    write_png(tmp_path / "target.png", target)
    client = RemoteBackend.spawn(
        [sys.executable, "-m", "guidance_sidecar", "--mode", "echo-delta",
         "--stdio", "--target", str(tmp_path / "target.png")])
    config = opt.RunConfig(steps=300, size=(8, 8), seed=1, init="random",
                           s=40.0, w_fft=0.0, aug=AugmentConfig.identity((8, 8)),
                           checkpoint_every=0, warmup=50)
    result = opt.run(config, pal, client, schedule=make_schedule())
    client.close()
    match = (result.argmax_render == target).all(axis=-1).mean()
    assert match >= 0.9
    print(f"[PASS] engine converges against the sidecar over stdio ({match:.0%} match)")
