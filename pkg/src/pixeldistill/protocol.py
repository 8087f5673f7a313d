"""Guidance wire protocol (version 1): client, framing, and an echo server.

Framing: each message is a 4-byte little-endian unsigned length of the UTF-8
JSON header, the header itself, then raw payload bytes. The payload length is
implied by the header: each named slot is a row-major little-endian float32
tensor of shape (h, w, 3), except ``depth`` which is (h, w, 1).

Messages:
  hello     {"msg": "hello", "version": 1}  ->  + {"name": str} from the server
  grad      {"msg": "grad", "t", "h", "w", "c", "prompt", "uncond_prompt",
             "canny_scale", "depth_scale", "slots": ["x", "eps", ...]}
            response {"msg": "grad", "slots": ["grad_noise", "grad_sem"]}
  error     {"msg": "error", "detail": str} (no payload)
"""

from __future__ import annotations

import json
import select
import socket
import struct
import subprocess
import sys
import time

import numpy as np

from .guidance import Condition, GuidanceGrad, GuidanceError, NoiseSchedule, draw_epsilon, make_schedule

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 120.0

_LEN = struct.Struct("<I")


class ProtocolError(GuidanceError):
    pass


class _FramingLost(ProtocolError):
    """Stream position can no longer be trusted; the connection must drop."""


def slot_nbytes(slot: str, h: int, w: int) -> int:
    channels = 1 if slot == "depth" else 3
    return h * w * channels * 4


class ConnectionClosed(ProtocolError):
    """The peer disconnected cleanly between messages."""


class Transport:
    """Blocking byte transport with a deadline, over a socket or a pipe pair.

    Reads go through unbuffered raw files so select() on the fd never races a
    user-space buffer.
    """

    def __init__(self, read_file, write_file, timeout: float = DEFAULT_TIMEOUT,
                 child: subprocess.Popen | None = None):
        self._read = getattr(read_file, "raw", read_file)
        self._write = write_file
        self.timeout = timeout
        self._child = child

    @classmethod
    def from_socket(cls, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        sock.settimeout(timeout)
        f = sock.makefile("rwb", buffering=0)
        t = cls(f, f, timeout)
        t._sock = sock
        return t

    def send(self, data: bytes) -> None:
        self._write.write(data)
        self._write.flush()

    def recv_exact(self, n: int) -> bytes:
        deadline = time.monotonic() + self.timeout
        chunks = []
        remaining = n
        while remaining > 0:
            budget = deadline - time.monotonic()
            if budget <= 0:
                raise ProtocolError(f"timeout waiting for {remaining} of {n} bytes")
            ready, _, _ = select.select([self._read.fileno()], [], [], budget)
            if not ready:
                raise ProtocolError(f"timeout waiting for {remaining} of {n} bytes")
            chunk = self._read.read(remaining)
            if not chunk:
                if remaining == n:
                    raise ConnectionClosed("connection closed")
                raise ProtocolError(
                    f"connection closed mid-message ({remaining} of {n} bytes missing)")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        try:
            self._read.close()
            if self._write is not self._read:
                self._write.close()
        finally:
            if self._child is not None:
                self._child.terminate()
                self._child.wait(timeout=10)


def send_message(transport: Transport, header: dict, payload: bytes = b"") -> None:
    raw = json.dumps(header, separators=(",", ":")).encode("utf-8")
    transport.send(_LEN.pack(len(raw)) + raw + payload)


def recv_header(transport: Transport) -> dict:
    raw_len = transport.recv_exact(4)
    (length,) = _LEN.unpack(raw_len)
    if length == 0 or length > 1 << 20:
        raise ProtocolError(f"implausible header length {length}")
    try:
        header = json.loads(transport.recv_exact(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"malformed header: {e}")
    if not isinstance(header, dict) or "msg" not in header:
        raise ProtocolError("header is not an object with a 'msg' field")
    return header


def _tensor_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


class RemoteBackend:
    """Client for a guidance server; satisfies the backend contract.

    Requests are serialized: one in flight at a time from the single
    optimization thread.
    """

    def __init__(self, transport: Transport):
        self.transport = transport
        self.server_name = self._handshake()

    @classmethod
    def connect_tcp(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise ProtocolError(f"cannot connect to {host}:{port}: {e}")
        return cls(Transport.from_socket(sock, timeout))

    @classmethod
    def spawn(cls, argv: list[str], timeout: float = DEFAULT_TIMEOUT):
        try:
            child = subprocess.Popen(argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        except OSError as e:
            raise ProtocolError(f"cannot spawn {argv!r}: {e}")
        return cls(Transport(child.stdout, child.stdin, timeout, child=child))

    def _handshake(self) -> str:
        send_message(self.transport, {"msg": "hello", "version": PROTOCOL_VERSION})
        reply = recv_header(self.transport)
        if reply["msg"] == "error":
            raise ProtocolError(f"server rejected handshake: {reply.get('detail')}")
        if reply["msg"] != "hello" or reply.get("version") != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: client speaks {PROTOCOL_VERSION}, "
                f"server answered {reply.get('version')!r}")
        return str(reply.get("name", "unnamed"))

    def evaluate(self, x_aug: np.ndarray, condition: Condition, t: int,
                 noise_seed: int) -> GuidanceGrad:
        x = np.asarray(x_aug)
        h, w = x.shape[:2]
        eps = draw_epsilon(noise_seed, x.shape, dtype=np.float32)
        slots = ["x", "eps"]
        tensors = [x, eps]
        if condition.canny is not None:
            canny = condition.canny
            if canny.shape[2] == 1:
                canny = np.repeat(canny, 3, axis=2)
            slots.append("canny")
            tensors.append(canny)
        if condition.depth is not None:
            slots.append("depth")
            tensors.append(condition.depth)
        header = {
            "msg": "grad", "t": int(t), "h": int(h), "w": int(w), "c": 3,
            "prompt": condition.prompt, "uncond_prompt": condition.uncond_prompt,
            "canny_scale": float(condition.canny_scale),
            "depth_scale": float(condition.depth_scale),
            "slots": slots,
        }
        payload = b"".join(_tensor_bytes(a) for a in tensors)
        send_message(self.transport, header, payload)

        reply = recv_header(self.transport)
        if reply["msg"] == "error":
            raise ProtocolError(f"server error: {reply.get('detail')}")
        if reply["msg"] != "grad":
            raise ProtocolError(f"unexpected reply {reply['msg']!r}")
        if reply.get("slots") != ["grad_noise", "grad_sem"]:
            raise ProtocolError(f"unexpected reply slots {reply.get('slots')!r}")
        blob = self.transport.recv_exact(2 * slot_nbytes("grad_noise", h, w))
        grads = np.frombuffer(blob, dtype="<f4").reshape(2, h, w, 3)
        return GuidanceGrad(grad_noise=grads[0].copy(), grad_sem=grads[1].copy(), t=t)

    def close(self):
        self.transport.close()


def delta_grads_f32(x: np.ndarray, eps: np.ndarray, target_cond: np.ndarray,
                    target_uncond: np.ndarray, t: int,
                    schedule: NoiseSchedule) -> tuple[np.ndarray, np.ndarray]:
    """The delta-posterior gradient pair in float32.

    Formula order matches DeltaOracle exactly so results are bit-comparable
    with any conforming server implementation.
    """
    f32 = np.float32
    alpha, sigma, w = f32(schedule.alpha[t]), f32(schedule.sigma[t]), f32(schedule.w[t])
    x = x.astype(np.float32, copy=False)
    eps = eps.astype(np.float32, copy=False)
    target_c = target_cond.astype(np.float32, copy=False)
    target_u = target_uncond.astype(np.float32, copy=False)
    x_t = alpha * x + sigma * eps
    eps_hat_c = (x_t - alpha * target_c) / sigma
    eps_hat_u = (x_t - alpha * target_u) / sigma
    grad_noise = w * (eps_hat_c - eps)
    grad_sem = w * (eps_hat_c - eps_hat_u)
    return grad_noise, grad_sem


class EchoDeltaServer:
    """Reference in-process guidance server for protocol testing.

    Computes the delta-oracle gradients in float32 from the transmitted
    epsilon (the server draws no randomness of its own).
    """

    name = "echo-delta"

    def __init__(self, target_cond: np.ndarray, target_uncond: np.ndarray | None = None,
                 schedule: NoiseSchedule | None = None):
        self.target_cond = np.asarray(target_cond, dtype=np.float64)
        self.target_uncond = (self.target_cond if target_uncond is None
                              else np.asarray(target_uncond, dtype=np.float64))
        self.schedule = schedule or make_schedule()

    def handle_connection(self, transport: Transport) -> None:
        """Answer messages until the peer disconnects.

        Semantic errors (bad version, missing slot, bad timestep) get an error
        reply and the connection stays up; framing errors are unrecoverable,
        so the server answers once and drops the connection.
        """
        while True:
            try:
                header = recv_header(transport)
            except ConnectionClosed:
                return  # peer gone between messages
            except ProtocolError as e:
                self._try_send_error(transport, str(e))
                return
            try:
                reply, payload = self._dispatch(transport, header)
            except _FramingLost as e:
                self._try_send_error(transport, str(e))
                return
            except ProtocolError as e:
                self._try_send_error(transport, str(e))
                continue
            send_message(transport, reply, payload)

    @staticmethod
    def _try_send_error(transport: Transport, detail: str) -> None:
        try:
            send_message(transport, {"msg": "error", "detail": detail})
        except OSError:
            pass

    def _dispatch(self, transport: Transport, header: dict):
        msg = header["msg"]
        if msg == "hello":
            if header.get("version") != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"version mismatch: server speaks {PROTOCOL_VERSION}, "
                    f"client sent {header.get('version')!r}")
            return {"msg": "hello", "version": PROTOCOL_VERSION, "name": self.name}, b""
        if msg == "grad":
            return self._grad(transport, header)
        raise ProtocolError(f"unknown message {msg!r}")

    def _grad(self, transport: Transport, header: dict):
        try:
            t, h, w = int(header["t"]), int(header["h"]), int(header["w"])
            slots = list(header["slots"])
        except (KeyError, TypeError, ValueError) as e:
            raise _FramingLost(f"bad grad header: {e}")
        unknown = set(slots) - {"x", "eps", "canny", "depth"}
        if unknown:
            raise _FramingLost(f"unknown slots {sorted(unknown)}")
        try:
            payload = transport.recv_exact(sum(slot_nbytes(s, h, w) for s in slots))
        except ProtocolError as e:
            raise _FramingLost(str(e))
        tensors = {}
        offset = 0
        for s in slots:
            nbytes = slot_nbytes(s, h, w)
            channels = 1 if s == "depth" else 3
            tensors[s] = np.frombuffer(payload[offset:offset + nbytes],
                                       dtype="<f4").reshape(h, w, channels)
            offset += nbytes
        for required in ("x", "eps"):
            if required not in tensors:
                raise ProtocolError(f"missing required slot '{required}'")
        if not 0 < t <= self.schedule.t_max:
            raise ProtocolError(f"timestep {t} outside (0, {self.schedule.t_max}]")
        if self.target_cond.shape != (h, w, 3):
            raise ProtocolError(
                f"request shape ({h}, {w}, 3) does not match server target "
                f"{self.target_cond.shape}")
        grad_noise, grad_sem = delta_grads_f32(
            tensors["x"], tensors["eps"], self.target_cond, self.target_uncond,
            t, self.schedule)
        reply = {"msg": "grad", "slots": ["grad_noise", "grad_sem"]}
        return reply, _tensor_bytes(grad_noise) + _tensor_bytes(grad_sem)

    def serve_stdio(self) -> None:
        transport = Transport(sys.stdin.buffer, sys.stdout.buffer, timeout=1e9)
        self.handle_connection(transport)

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0):
        """Serve one connection at a time; returns the bound (host, port)."""
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        self._server_socket = server
        return server.getsockname()

    def accept_loop(self):
        while True:
            try:
                conn, _ = self._server_socket.accept()
            except OSError:
                return
            with conn:
                self.handle_connection(Transport.from_socket(conn, timeout=1e9))

    def shutdown(self):
        if hasattr(self, "_server_socket"):
            self._server_socket.close()
