import io
import struct

import numpy as np
import pytest

from guidance_sidecar import framing
from guidance_sidecar.echo_delta import EchoDeltaBackend
from guidance_sidecar.schedule import Schedule
from guidance_sidecar.server import Server


def test_schedule_variance_preserving():
    s = Schedule()
    assert np.abs(s.alpha ** 2 + s.sigma ** 2 - 1.0).max() < 1e-12
    assert s.alpha[0] == 1.0 and s.sigma[0] == 0.0
    assert s.sigma[-1] > 0.99


def test_encode_decode_round_trip():
    msg = framing.encode_message({"msg": "hello", "version": 1}, b"abc")
    stream = io.BytesIO(msg)
    header = framing.read_header(stream)
    assert header == {"msg": "hello", "version": 1}
    assert stream.read() == b"abc"


def test_read_header_rejects_bad_length():
    stream = io.BytesIO(struct.pack("<I", 0) + b"x")
    with pytest.raises(framing.FramingError, match="length"):
        framing.read_header(stream)


def test_read_header_rejects_bad_json():
    body = b"{oops"
    stream = io.BytesIO(struct.pack("<I", len(body)) + body)
    with pytest.raises(framing.FramingError, match="malformed"):
        framing.read_header(stream)


def test_peer_closed_vs_truncated():
    with pytest.raises(framing.PeerClosed):
        framing.read_header(io.BytesIO(b""))
    with pytest.raises(framing.FramingError, match="mid-message"):
        framing.read_header(io.BytesIO(b"\x05\x00\x00\x00ab"))


def _drive(server: Server, *messages: bytes) -> list[dict]:
    """Feed raw bytes to a server and collect its reply headers/payloads."""
    read = io.BytesIO(b"".join(messages))
    write = io.BytesIO()
    server.handle_connection(read, write)
    write.seek(0)
    replies = []
    while write.tell() < len(write.getvalue()):
        header = framing.read_header(write)
        payload = b""
        if header.get("msg") == "grad":
            h, w = 4, 4  # fixed by the tests below
            payload = framing.read_exact(
                write, 2 * framing.slot_nbytes("grad_noise", h, w))
        replies.append((header, payload))
    return replies


@pytest.fixture
def server():
    rng = np.random.default_rng(0)
    return Server(EchoDeltaBackend(rng.random((4, 4, 3))))


def _grad_request(slots=("x", "eps"), t=500, h=4, w=4):
    header = {"msg": "grad", "t": t, "h": h, "w": w, "c": 3, "prompt": "",
              "uncond_prompt": "", "canny_scale": 0.35, "depth_scale": 0.35,
              "slots": list(slots)}
    payload = b"".join(
        np.zeros((h, w, 1 if s == "depth" else 3), dtype="<f4").tobytes()
        for s in slots)
    return framing.encode_message(header, payload)


def test_hello_reply(server):
    (reply, _), = _drive(server, framing.encode_message({"msg": "hello", "version": 1}))
    assert reply == {"msg": "hello", "version": 1, "name": "echo-delta"}


def test_version_mismatch_error(server):
    (reply, _), = _drive(server, framing.encode_message({"msg": "hello", "version": 2}))
    assert reply["msg"] == "error"
    assert "version mismatch" in reply["detail"]


def test_missing_eps_slot_named(server):
    (reply, _), = _drive(server, _grad_request(slots=("x",)))
    assert reply["msg"] == "error"
    assert "'eps'" in reply["detail"]


def test_well_formed_request_gets_exactly_one_response(server):
    replies = _drive(server, _grad_request(), _grad_request())
    assert [r[0]["msg"] for r in replies] == ["grad", "grad"]
    for header, payload in replies:
        assert header["slots"] == ["grad_noise", "grad_sem"]
        assert len(payload) == 2 * 4 * 4 * 3 * 4


def test_semantic_error_keeps_serving(server):
    replies = _drive(server, _grad_request(t=0), _grad_request())
    assert replies[0][0]["msg"] == "error"
    assert "timestep" in replies[0][0]["detail"]
    assert replies[1][0]["msg"] == "grad"


def test_unknown_message_keeps_serving(server):
    replies = _drive(server, framing.encode_message({"msg": "what"}),
                     framing.encode_message({"msg": "hello", "version": 1}))
    assert replies[0][0]["msg"] == "error"
    assert replies[1][0]["msg"] == "hello"


def test_malformed_frame_answered_then_dropped(server):
    bad = struct.pack("<I", 0xFFFFFF00) + b"junk"
    replies = _drive(server, bad)
    assert len(replies) == 1
    assert replies[0][0]["msg"] == "error"
    assert "length" in replies[0][0]["detail"]


def test_shape_mismatch_reported(server):
    (reply, _), = _drive(server, _grad_request(h=3, w=3))
    assert reply["msg"] == "error"
    assert "shape" in reply["detail"]
