"""TCP stream proxy carrying application traffic through a gateway tunnel.

``GatewayIngress`` accepts plaintext clients on the local LAN and forwards
sealed frames to a ``GatewayEgress``, which opens them and relays to the
protected server. An empty plaintext frame signals end-of-stream. A small
file server stands in for the protected application.
"""
from __future__ import annotations

import hashlib
import logging
import socket
import socketserver
import struct
import threading
from typing import Optional

from qkdnet.gateway.tunnel import (
    HEADER, HEADER_LEN, PING, PONG, GatewayEndpoint, HandshakeError, TagError, TunnelError,
)

log = logging.getLogger(__name__)

CHUNK = 16384


def _recv_exact(sock: socket.socket, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            return None if not buf else bytes(buf)
        buf.extend(part)
    return bytes(buf)


def read_tunnel_frame(sock: socket.socket) -> Optional[bytes]:
    head = _recv_exact(sock, HEADER_LEN)
    if head is None:
        return None
    if len(head) < HEADER_LEN:
        raise TunnelError("connection closed inside a frame header")
    length = HEADER.unpack(head)[-1]
    body = _recv_exact(sock, length)
    if body is None or len(body) < length:
        raise TunnelError("connection closed inside a frame body")
    return head + body


class _WireTap:
    """Records every byte string written towards the peer gateway."""

    def __init__(self):
        self.frames: list[bytes] = []
        self._lock = threading.Lock()

    def send(self, sock: socket.socket, data: bytes):
        with self._lock:
            self.frames.append(data)
        sock.sendall(data)


def _plain_to_tunnel(src, dst, ep: GatewayEndpoint, tap: _WireTap):
    try:
        while True:
            data = src.recv(CHUNK)
            tap.send(dst, ep.seal(data))
            if not data:
                return
    except OSError:
        return


def _tunnel_to_plain(src, dst, ep: GatewayEndpoint):
    try:
        while True:
            frame = read_tunnel_frame(src)
            if frame is None:
                return
            pt = ep.open(frame)
            if not pt:
                dst.shutdown(socket.SHUT_WR)
                return
            dst.sendall(pt)
    except TunnelError as exc:
        ep.alarms.append(f"proxy dropped connection: {exc}")
        for s in (src, dst):
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
    except OSError:
        return


def _duplex(plain, tunnel, ep, tap):
    t = threading.Thread(target=_tunnel_to_plain, args=(tunnel, plain, ep), daemon=True)
    t.start()
    _plain_to_tunnel(plain, tunnel, ep, tap)
    t.join()
    for s in (plain, tunnel):
        s.close()


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def serve_in_background(self) -> tuple[str, int]:
        threading.Thread(target=self.serve_forever, daemon=True).start()
        return self.server_address[:2]

    def stop(self):
        self.shutdown()
        self.server_close()


class GatewayIngress(_Server):
    """LAN-side gateway: plaintext in, frames out to ``peer``."""

    def __init__(self, listen, peer, endpoint: GatewayEndpoint):
        self.peer = tuple(peer)
        self.endpoint = endpoint
        self.tap = _WireTap()
        super().__init__(tuple(listen), _IngressHandler)


class _IngressHandler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: GatewayIngress = self.server
        ep = srv.endpoint
        tunnel = socket.create_connection(srv.peer)
        try:
            srv.tap.send(tunnel, ep.seal(PING))
            reply = read_tunnel_frame(tunnel)
            if reply is None or ep.open(reply) != PONG:
                raise HandshakeError("peer gateway did not answer the ping")
        except (TunnelError, OSError) as exc:
            ep.alarms.append(f"handshake failed: {exc}")
            tunnel.close()
            return
        _duplex(self.request, tunnel, ep, srv.tap)


class GatewayEgress(_Server):
    """Server-side gateway: frames in from peers, plaintext out to ``forward``."""

    def __init__(self, listen, forward, endpoint: GatewayEndpoint):
        self.forward = tuple(forward)
        self.endpoint = endpoint
        self.tap = _WireTap()
        super().__init__(tuple(listen), _EgressHandler)


class _EgressHandler(socketserver.BaseRequestHandler):
    def handle(self):
        srv: GatewayEgress = self.server
        ep = srv.endpoint
        try:
            first = read_tunnel_frame(self.request)
            if first is None or ep.open(first) != PING:
                raise HandshakeError("first frame was not a ping")
            srv.tap.send(self.request, ep.seal(PONG))
        except (TunnelError, OSError) as exc:
            ep.alarms.append(f"handshake failed: {exc}")
            return
        upstream = socket.create_connection(srv.forward)
        _duplex(upstream, self.request, ep, srv.tap)


class RekeyTimer:
    """Calls ``endpoint.rekey()`` every ``interval`` real seconds."""

    def __init__(self, endpoint: GatewayEndpoint, interval: float):
        self.endpoint, self.interval = endpoint, interval
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        while not self._stop.wait(self.interval):
            try:
                self.endpoint.rekey()
            except TunnelError as exc:
                self.endpoint.alarms.append(str(exc))
                return

    def start(self):
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()


# -- file server stand-in ------------------------------------------------

class FileStore:
    def __init__(self, files: Optional[dict] = None):
        self.files: dict[str, bytes] = dict(files or {})
        self.lock = threading.Lock()

    def handle(self, request: bytes) -> bytes:
        """Process one complete request and return the response bytes."""
        line, _, body = request.partition(b"\n")
        parts = line.decode("utf-8").split(" ")
        if parts[0] == "GET" and len(parts) == 2:
            with self.lock:
                data = self.files.get(parts[1])
            if data is None:
                return b"ERR not-found\n"
            return b"OK %d\n" % len(data) + data
        if parts[0] == "PUT" and len(parts) == 3 and int(parts[2]) == len(body):
            with self.lock:
                self.files[parts[1]] = body
            return b"OK " + hashlib.sha256(body).hexdigest().encode() + b"\n"
        return b"ERR bad-request\n"


def put_request(name: str, data: bytes) -> bytes:
    return f"PUT {name} {len(data)}\n".encode() + data


def get_request(name: str) -> bytes:
    return f"GET {name}\n".encode()


def parse_get_response(resp: bytes) -> bytes:
    line, _, body = resp.partition(b"\n")
    status = line.split(b" ")
    if status[0] != b"OK" or int(status[1]) != len(body):
        raise ValueError(f"bad file-server response {line!r}")
    return body


class _FileHandler(socketserver.BaseRequestHandler):
    def handle(self):
        buf = bytearray()
        while True:
            part = self.request.recv(CHUNK)
            if not part:
                break
            buf.extend(part)
        self.request.sendall(self.server.store.handle(bytes(buf)))


class FileServer(_Server):
    """One request per connection; the client half-closes after sending it."""

    def __init__(self, listen=("127.0.0.1", 0), store: Optional[FileStore] = None):
        self.store = store or FileStore()
        super().__init__(tuple(listen), _FileHandler)


def file_exchange(address, request: bytes, timeout: float = 10.0) -> bytes:
    with socket.create_connection(tuple(address), timeout=timeout) as s:
        s.sendall(request)
        s.shutdown(socket.SHUT_WR)
        out = bytearray()
        while True:
            part = s.recv(CHUNK)
            if not part:
                return bytes(out)
            out.extend(part)


def tunnel_exchange(client: GatewayEndpoint, server: GatewayEndpoint, store: FileStore, request: bytes) -> tuple[bytes, int]:
    """In-process round-trip of one file-server request through a tunnel.

    Returns the response and the number of frames that crossed the tunnel.
    """
    frames = [client.seal(request[i:i + CHUNK]) for i in range(0, len(request), CHUNK)] + [client.seal(b"")]
    got = b"".join(server.open(f) for f in frames)
    resp = store.handle(got)
    back = [server.seal(resp[i:i + CHUNK]) for i in range(0, len(resp), CHUNK)] + [server.seal(b"")]
    return b"".join(client.open(f) for f in back), len(frames) + len(back)
