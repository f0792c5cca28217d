"""AEAD tunnel endpoints keyed from KMS key streams.

Wire frame (big-endian)::

    "QGW1" | version:1 | ksid:16 | epoch:4 | seq:8 | length:4 | ciphertext+tag

The 37-byte header is the associated data. The 13-byte AES-GCM nonce is
``epoch || seq || direction``; each side seals with its own direction byte,
so the two directions never share a nonce under one epoch key.

Key ``epoch`` is KMS chunk ``index == epoch`` of the bound session. A new
epoch key replaces the previous one (no chaining); frames of the previous
epoch still open while it is within the two-epoch grace window.
"""
from __future__ import annotations

import struct
import threading
import uuid
from dataclasses import dataclass, field
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from qkdnet.kms.errors import KeyStarvation, KmsError

MAGIC = b"QGW1"
VERSION = 1
HEADER = struct.Struct(">4sB16sIQI")
HEADER_LEN = HEADER.size
TAG_LEN = 16
KEY_LEN = 32
MAX_EPOCH = 2**32 - 1
SUITES = {"AES-256-GCM": KEY_LEN}
PING = b"QGW-PING"
PONG = b"QGW-PONG"

INITIATOR = 1
RESPONDER = 2


class TunnelError(Exception):
    code = "tunnel_error"


class FrameFormatError(TunnelError):
    code = "bad_frame"


class TagError(TunnelError):
    code = "bad_tag"


class ReplayError(TunnelError):
    code = "replay"


class StaleEpochError(TunnelError):
    code = "stale_epoch"


class FutureEpochError(TunnelError):
    code = "future_epoch"


class EstablishmentError(TunnelError):
    """Key material unavailable while establishing (not an authentication failure)."""

    code = "no_key"


class HandshakeError(TunnelError):
    code = "handshake_failed"


class EpochExhausted(TunnelError):
    code = "epoch_exhausted"


class NotEstablished(TunnelError):
    code = "not_established"


@dataclass(frozen=True)
class TunnelConfig:
    ksid: str
    rekey_interval: float = 120.0
    cipher: str = "AES-256-GCM"
    replay_window: int = 1024
    local_address: Optional[tuple] = None
    peer_address: Optional[tuple] = None
    max_epoch: int = MAX_EPOCH
    max_skip: int = 8  # epochs a receiver may catch up when the peer rekeyed without traffic

    def __post_init__(self):
        if self.rekey_interval <= 0:
            raise ValueError("rekey_interval must be positive")
        if self.cipher not in SUITES:
            raise ValueError(f"unsupported cipher suite {self.cipher!r}")
        if self.replay_window < 1:
            raise ValueError("replay_window must be >= 1")
        if not 0 < self.max_epoch <= MAX_EPOCH:
            raise ValueError("max_epoch out of range")
        if self.max_skip < 1:
            raise ValueError("max_skip must be >= 1")
        uuid.UUID(self.ksid)

    @property
    def ksid_bytes(self) -> bytes:
        return uuid.UUID(self.ksid).bytes


@dataclass(frozen=True)
class TunnelFrame:
    ksid: bytes
    epoch: int
    seq: int
    ciphertext: bytes
    version: int = VERSION

    def header(self) -> bytes:
        return HEADER.pack(MAGIC, self.version, self.ksid, self.epoch, self.seq, len(self.ciphertext))

    def pack(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def unpack(cls, data: bytes) -> "TunnelFrame":
        if len(data) < HEADER_LEN + TAG_LEN:
            raise FrameFormatError("frame shorter than header and tag")
        magic, version, ksid, epoch, seq, length = HEADER.unpack_from(data)
        if magic != MAGIC:
            raise FrameFormatError("bad magic")
        if version != VERSION:
            raise FrameFormatError(f"unsupported version {version}")
        if length != len(data) - HEADER_LEN:
            raise FrameFormatError("length field does not match frame size")
        return cls(ksid, epoch, seq, data[HEADER_LEN:], version)


def make_nonce(epoch: int, seq: int, direction: int) -> bytes:
    return struct.pack(">IQB", epoch, seq, direction)


class _ReplayWindow:
    def __init__(self, size: int):
        self.size = size
        self.top = -1
        self.seen: set[int] = set()

    def check(self, seq: int) -> None:
        if seq <= self.top - self.size or seq in self.seen:
            raise ReplayError(f"sequence {seq} replayed or outside the window")

    def mark(self, seq: int) -> None:
        self.seen.add(seq)
        if seq > self.top:
            self.top = seq
            floor = self.top - self.size
            self.seen = {s for s in self.seen if s > floor}


@dataclass
class TunnelStats:
    frames_sealed: int = 0
    bytes_sealed: int = 0
    frames_opened: int = 0
    bytes_opened: int = 0
    rejected: dict = field(default_factory=dict)


class GatewayEndpoint:
    """One side of a tunnel.

    ``keys`` is any object with ``get_key(ksid, index) -> (bytes, index, status)``
    such as a :class:`~qkdnet.kms.wire.KmsClient`.
    """

    def __init__(self, cfg: TunnelConfig, keys, role: int = INITIATOR):
        if role not in (INITIATOR, RESPONDER):
            raise ValueError("role must be INITIATOR or RESPONDER")
        self.cfg = cfg
        self.keys = keys
        self.direction = role
        self.peer_direction = RESPONDER if role == INITIATOR else INITIATOR
        self.state = "new"
        self.alarms: list[str] = []
        self.stats = TunnelStats()
        self.nonce_log: set[tuple[int, bytes]] = set()
        self.epoch = 0
        self._seq = 0
        self._ciphers: dict[int, AESGCM] = {}
        self._windows: dict[int, _ReplayWindow] = {}
        self._send_lock = threading.Lock()
        self._recv_lock = threading.Lock()

    # -- key handling -------------------------------------------------------
    def _pull(self, epoch: int) -> AESGCM:
        key, index, _ = self.keys.get_key(self.cfg.ksid, epoch)
        if index != epoch or len(key) != SUITES[self.cfg.cipher]:
            raise KmsError(f"KMS returned an unusable key for epoch {epoch}")
        return AESGCM(bytes(key))

    def _install(self, epoch: int, cipher: AESGCM) -> None:
        self._ciphers[epoch] = cipher
        self._windows.setdefault(epoch, _ReplayWindow(self.cfg.replay_window))
        newest = max(self._ciphers)
        for e in [e for e in self._ciphers if e < newest - 1]:
            del self._ciphers[e]
            self._windows.pop(e, None)

    def establish(self) -> None:
        """Pull the epoch-0 key. Starvation is reported as :class:`EstablishmentError`."""
        try:
            cipher = self._pull(0)
        except KeyStarvation as exc:
            self.state = "degraded: no-key"
            self.alarms.append(f"epoch 0 key unavailable: {exc}")
            raise EstablishmentError(str(exc)) from exc
        with self._send_lock, self._recv_lock:
            self._install(0, cipher)
            self.epoch = 0
            self._seq = 0
            self.state = "up"

    def rekey(self) -> bool:
        """Advance the sending epoch; on starvation keep the old key and return False."""
        with self._send_lock:
            self._require_keyed()
            target = self.epoch + 1
            if target > self.cfg.max_epoch:
                self.state = "stopped"
                raise EpochExhausted(f"epoch counter reached its bound {self.cfg.max_epoch}")
            with self._recv_lock:
                have = target in self._ciphers
            if not have:
                try:
                    cipher = self._pull(target)
                except KeyStarvation as exc:
                    self.state = "degraded: no-rekey"
                    self.alarms.append(f"rekey to epoch {target} starved: {exc}")
                    return False
                with self._recv_lock:
                    self._install(target, cipher)
            self.epoch = target
            self._seq = 0
            self.state = "up"
            return True

    def _require_keyed(self):
        if self.state == "stopped":
            raise EpochExhausted("tunnel stopped")
        if not self._ciphers:
            raise NotEstablished("tunnel has no key yet")

    # -- frames -----------------------------------------------------------
    def seal(self, plaintext: bytes) -> bytes:
        with self._send_lock:
            self._require_keyed()
            with self._recv_lock:
                if self.epoch not in self._ciphers:
                    # the peer moved two epochs on; follow it rather than seal under a dropped key
                    self.epoch, self._seq = max(self._ciphers), 0
                cipher = self._ciphers[self.epoch]
            epoch, seq = self.epoch, self._seq
            self._seq += 1
            nonce = make_nonce(epoch, seq, self.direction)
            if (epoch, nonce) in self.nonce_log:
                raise TunnelError("nonce reuse detected")
            self.nonce_log.add((epoch, nonce))
            header = HEADER.pack(MAGIC, VERSION, self.cfg.ksid_bytes, epoch, seq, len(plaintext) + TAG_LEN)
            ct = cipher.encrypt(nonce, bytes(plaintext), header)
            self.stats.frames_sealed += 1
            self.stats.bytes_sealed += len(plaintext)
            return header + ct

    def _reject(self, exc: TunnelError):
        self.stats.rejected[exc.code] = self.stats.rejected.get(exc.code, 0) + 1
        raise exc

    def open(self, data: bytes) -> bytes:
        try:
            frame = TunnelFrame.unpack(data)
        except FrameFormatError as exc:
            self._reject(exc)
        if frame.ksid != self.cfg.ksid_bytes:
            self._reject(FrameFormatError("frame bound to another session"))
        with self._recv_lock:
            if not self._ciphers:
                self._reject(NotEstablished("tunnel has no key yet"))
            newest = max(self._ciphers)
            if frame.epoch < newest - 1:
                self._reject(StaleEpochError(f"epoch {frame.epoch} is older than the grace window"))
            if frame.epoch > newest + self.cfg.max_skip:
                self._reject(FutureEpochError(f"epoch {frame.epoch} skips ahead of {newest}"))
        # the peer rekeyed first: fetch the chunks it pulled, in order
        for epoch in range(newest + 1, frame.epoch + 1):
            try:
                cipher = self._pull(epoch)
            except KeyStarvation as exc:
                self.alarms.append(f"cannot follow peer to epoch {epoch}: {exc}")
                self._reject(EstablishmentError(str(exc)))
            with self._recv_lock:
                if epoch not in self._ciphers and epoch > max(self._ciphers) - 2:
                    self._install(epoch, cipher)
        with self._recv_lock:
            cipher = self._ciphers.get(frame.epoch)
            if cipher is None:
                self._reject(StaleEpochError(f"epoch {frame.epoch} key no longer held"))
            window = self._windows[frame.epoch]
            try:
                window.check(frame.seq)
            except ReplayError as exc:
                self._reject(exc)
            try:
                pt = cipher.decrypt(make_nonce(frame.epoch, frame.seq, self.peer_direction), frame.ciphertext, frame.header())
            except InvalidTag:
                self._reject(TagError(f"authentication failed for epoch {frame.epoch} seq {frame.seq}"))
            window.mark(frame.seq)
            self.stats.frames_opened += 1
            self.stats.bytes_opened += len(pt)
        if frame.epoch > self.epoch:
            self._follow(frame.epoch)
        return pt

    def _follow(self, epoch: int) -> None:
        # an authenticated frame from a newer epoch: seal replies under it too
        with self._send_lock:
            if epoch > self.epoch and self.state != "stopped":
                self.epoch, self._seq = epoch, 0
                if self.state.startswith("degraded"):
                    self.state = "up"


def establish_tunnel(initiator: GatewayEndpoint, responder: GatewayEndpoint) -> None:
    """Pull epoch-0 keys on both sides and confirm agreement with an encrypted ping."""
    initiator.establish()
    responder.establish()
    handshake(initiator, responder)


def handshake(initiator: GatewayEndpoint, responder: GatewayEndpoint) -> None:
    try:
        if responder.open(initiator.seal(PING)) != PING:
            raise HandshakeError("ping payload corrupted")
        if initiator.open(responder.seal(PONG)) != PONG:
            raise HandshakeError("pong payload corrupted")
    except TagError as exc:
        for ep in (initiator, responder):
            ep.state = "failed"
            ep.alarms.append(f"handshake: {exc}")
        raise HandshakeError(f"key agreement check failed: {exc}") from exc
