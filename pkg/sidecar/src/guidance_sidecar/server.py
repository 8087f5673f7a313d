"""Protocol server: answers hello and grad messages over stdio or TCP.

One request is served at a time, matching the engine's serialized client.
Every well-formed request gets exactly one response; malformed input gets an
error message (and, when the stream position can no longer be trusted, the
connection drops).
"""

from __future__ import annotations

import logging
import socket
import sys

import numpy as np

from . import framing

log = logging.getLogger("guidance_sidecar")


class RequestError(RuntimeError):
    """Semantic problem with a request; the connection survives."""


class Server:
    def __init__(self, backend):
        self.backend = backend

    # -- message handling --------------------------------------------------

    def _handle_hello(self, header: dict):
        if header.get("version") != framing.PROTOCOL_VERSION:
            raise RequestError(
                f"version mismatch: server speaks {framing.PROTOCOL_VERSION}, "
                f"client sent {header.get('version')!r}")
        return {"msg": "hello", "version": framing.PROTOCOL_VERSION,
                "name": self.backend.name}, b""

    def _read_grad_payload(self, stream, header: dict) -> dict:
        try:
            h, w = int(header["h"]), int(header["w"])
            slots = list(header["slots"])
        except (KeyError, TypeError, ValueError) as e:
            raise framing.FramingError(f"bad grad header: {e}")
        unknown = set(slots) - set(framing.KNOWN_SLOTS)
        if unknown:
            raise framing.FramingError(f"unknown slots {sorted(unknown)}")
        payload = framing.read_exact(
            stream, sum(framing.slot_nbytes(s, h, w) for s in slots))
        tensors = {}
        offset = 0
        for s in slots:
            nbytes = framing.slot_nbytes(s, h, w)
            channels = 1 if s == "depth" else 3
            tensors[s] = np.frombuffer(payload[offset:offset + nbytes],
                                       dtype="<f4").reshape(h, w, channels)
            offset += nbytes
        return tensors

    def _handle_grad(self, stream, header: dict):
        tensors = self._read_grad_payload(stream, header)
        for required in ("x", "eps"):
            if required not in tensors:
                raise RequestError(f"missing required slot '{required}'")
        t = int(header["t"])
        if not 0 < t <= self.backend.schedule.t_max:
            raise RequestError(
                f"timestep {t} outside (0, {self.backend.schedule.t_max}]")
        expected = self.backend.expected_shape()
        if expected is not None and tensors["x"].shape != expected:
            raise RequestError(
                f"request shape {tensors['x'].shape} does not match server "
                f"target {expected}")
        request = dict(header)
        request["tensors"] = tensors
        grad_noise, grad_sem = self.backend.grads(
            tensors["x"], tensors["eps"], t, request)
        payload = (np.ascontiguousarray(grad_noise, dtype="<f4").tobytes()
                   + np.ascontiguousarray(grad_sem, dtype="<f4").tobytes())
        return {"msg": "grad", "slots": ["grad_noise", "grad_sem"]}, payload

    # -- connection loop ----------------------------------------------------

    def handle_connection(self, read_stream, write_stream) -> None:
        while True:
            try:
                header = framing.read_header(read_stream)
            except framing.PeerClosed:
                return
            except framing.FramingError as e:
                self._send_error(write_stream, str(e))
                return
            try:
                msg = header["msg"]
                if msg == "hello":
                    reply, payload = self._handle_hello(header)
                elif msg == "grad":
                    reply, payload = self._handle_grad(read_stream, header)
                else:
                    raise RequestError(f"unknown message {msg!r}")
            except RequestError as e:
                self._send_error(write_stream, str(e))
                continue
            except framing.FramingError as e:
                self._send_error(write_stream, str(e))
                return
            except Exception as e:  # backend failure: report, keep serving
                log.exception("backend error")
                self._send_error(write_stream, f"backend error: {e}")
                continue
            write_stream.write(framing.encode_message(reply, payload))
            write_stream.flush()

    @staticmethod
    def _send_error(write_stream, detail: str) -> None:
        try:
            write_stream.write(framing.encode_message({"msg": "error", "detail": detail}))
            write_stream.flush()
        except OSError:
            pass

    # -- transports ----------------------------------------------------------

    def serve_stdio(self) -> None:
        self.handle_connection(sys.stdin.buffer.raw, sys.stdout.buffer)

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        self._socket = server
        return server.getsockname()

    def accept_loop(self) -> None:
        while True:
            try:
                conn, peer = self._socket.accept()
            except OSError:
                return
            log.info("connection from %s", peer)
            with conn:
                f = conn.makefile("rwb", buffering=0)
                self.handle_connection(f, f)

    def shutdown(self) -> None:
        if hasattr(self, "_socket"):
            self._socket.close()
