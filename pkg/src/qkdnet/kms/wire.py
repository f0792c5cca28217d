"""Length-prefixed JSON key-delivery protocol over TCP or in-process calls.

A frame is a 4-byte big-endian length followed by a UTF-8 JSON object with
the fields ``op, ksid, index, qos, status, payload_b64`` (plus ``source``,
``destination``, ``endpoint``, ``detail`` and ``retry_after`` where relevant).
Requests carry ``op``; responses carry ``status`` ("ok" or an error status).
"""
from __future__ import annotations

import base64
import json
import socket
import socketserver
import struct
import threading
from typing import Optional

from qkdnet.kms.errors import BY_STATUS, KeyStarvation, KmsError
from qkdnet.kms.gkms import GlobalKMS, QoS

MAX_FRAME = 1 << 20
FIELDS = ("op", "ksid", "index", "qos", "status", "payload_b64", "source", "destination", "endpoint", "detail", "retry_after")


def encode_frame(msg: dict) -> bytes:
    unknown = set(msg) - set(FIELDS)
    if unknown:
        raise KmsError(f"unknown frame fields {sorted(unknown)}")
    body = json.dumps({k: msg[k] for k in FIELDS if k in msg}, separators=(",", ":")).encode("utf-8")
    if len(body) > MAX_FRAME:
        raise KmsError("frame too large")
    return struct.pack(">I", len(body)) + body


def decode_frame(data: bytes) -> dict:
    (n,) = struct.unpack(">I", data[:4])
    if n != len(data) - 4:
        raise KmsError("frame length prefix does not match body")
    return json.loads(data[4:].decode("utf-8"))


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("connection closed mid-frame")
        buf.extend(chunk)
    return bytes(buf)


def read_frame(sock: socket.socket) -> dict:
    head = _recv_exact(sock, 4)
    (n,) = struct.unpack(">I", head)
    if n > MAX_FRAME:
        raise KmsError("frame too large")
    return decode_frame(head + _recv_exact(sock, n))


def handle_request(kms: GlobalKMS, req: dict) -> dict:
    """Apply one request to ``kms`` and build the response frame."""
    op = req.get("op")
    try:
        if op == "open_connect":
            qos = QoS(**(req.get("qos") or {}))
            ksid = kms.open_connect(req["source"], req["destination"], qos, req.get("ksid"))
            return {"status": "ok", "ksid": ksid, "qos": qos.to_dict()}
        if op == "get_key":
            chunk, index, status = kms.get_key(req["ksid"], int(req["index"]), req["endpoint"])
            return {"status": status, "ksid": req["ksid"], "index": index, "payload_b64": base64.b64encode(chunk).decode()}
        if op == "close":
            kms.close(req["ksid"])
            return {"status": "ok", "ksid": req["ksid"]}
        return {"status": "error", "detail": f"unknown op {op!r}"}
    except KeyStarvation as exc:
        return {"status": exc.status, "detail": str(exc), "retry_after": exc.retry_after, "ksid": req.get("ksid")}
    except KmsError as exc:
        return {"status": exc.status, "detail": str(exc), "ksid": req.get("ksid")}
    except (KeyError, TypeError, ValueError) as exc:
        return {"status": "error", "detail": f"malformed request: {exc}"}


class InProcessTransport:
    """Round-trips frames through the codec without a socket."""

    def __init__(self, kms: GlobalKMS):
        self.kms = kms

    def request(self, msg: dict) -> dict:
        resp = handle_request(self.kms, decode_frame(encode_frame(msg)))
        return decode_frame(encode_frame(resp))

    def close(self):
        pass


class TcpTransport:
    def __init__(self, address: tuple[str, int], timeout: float = 10.0):
        self.sock = socket.create_connection(address, timeout=timeout)
        self._lock = threading.Lock()

    def request(self, msg: dict) -> dict:
        with self._lock:
            self.sock.sendall(encode_frame(msg))
            return read_frame(self.sock)

    def close(self):
        self.sock.close()


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        while True:
            try:
                req = read_frame(self.request)
            except (ConnectionError, OSError):
                return
            except (KmsError, ValueError) as exc:
                self.request.sendall(encode_frame({"status": "error", "detail": str(exc)}))
                return
            self.request.sendall(encode_frame(handle_request(self.server.kms, req)))


class KmsServer(socketserver.ThreadingTCPServer):
    """Threaded TCP front end; ``serve_in_background`` returns once listening."""

    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, kms: GlobalKMS, address=("127.0.0.1", 0)):
        super().__init__(address, _Handler)
        self.kms = kms
        self._thread: Optional[threading.Thread] = None

    def serve_in_background(self) -> tuple[str, int]:
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self.server_address[:2]

    def stop(self):
        self.shutdown()
        self.server_close()


class KmsClient:
    """Application-side key-delivery client bound to one node ``endpoint``."""

    def __init__(self, transport, endpoint: str):
        self.transport = transport
        self.endpoint = endpoint

    @staticmethod
    def _raise(resp: dict):
        status = resp.get("status")
        if status == "ok":
            return
        cls = BY_STATUS.get(status, KmsError)
        if cls is KeyStarvation:
            raise KeyStarvation(resp.get("detail", ""), retry_after=resp.get("retry_after", 1.0))
        raise cls(resp.get("detail", status))

    def open_connect(self, destination: str, qos: QoS = QoS(), ksid: Optional[str] = None) -> str:
        resp = self.transport.request(
            {"op": "open_connect", "source": self.endpoint, "destination": destination, "qos": qos.to_dict(), "ksid": ksid}
        )
        self._raise(resp)
        return resp["ksid"]

    def get_key(self, ksid: str, index: int) -> tuple[bytes, int, str]:
        resp = self.transport.request({"op": "get_key", "ksid": ksid, "index": index, "endpoint": self.endpoint})
        self._raise(resp)
        return base64.b64decode(resp["payload_b64"]), resp["index"], resp["status"]

    def close(self, ksid: str) -> None:
        self._raise(self.transport.request({"op": "close", "ksid": ksid}))
