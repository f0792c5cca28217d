"""Authenticated classical message bus between KMS nodes.

Every message carries an HMAC-SHA256 tag under a key pre-shared by the
sender/receiver pair. A message whose tag fails to verify is dropped and an
alarm is recorded.
"""
from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from typing import Callable, Optional

from qkdnet.kms.errors import AuthenticationFailure


@dataclass(frozen=True)
class Message:
    src: str
    dst: str
    topic: str
    payload: bytes
    tag: bytes


class AuthenticatedBus:
    def __init__(self, secret: bytes = b"qkdnet-auth"):
        self._secret = secret
        self.transcript: list[Message] = []
        self.alarms: list[str] = []
        # Fault-injection hook: rewrites a message in flight.
        self.tamper: Optional[Callable[[Message], Message]] = None

    def pair_key(self, a: str, b: str) -> bytes:
        lo, hi = sorted((a, b))
        return hmac.new(self._secret, f"{lo}|{hi}".encode(), hashlib.sha256).digest()

    def _tag(self, src: str, dst: str, topic: str, payload: bytes) -> bytes:
        header = f"{src}>{dst}:{topic}:".encode()
        return hmac.new(self.pair_key(src, dst), header + payload, hashlib.sha256).digest()

    def send(self, src: str, dst: str, topic: str, payload: bytes) -> bytes:
        """Deliver ``payload`` from ``src`` to ``dst``; returns the verified payload."""
        msg = Message(src, dst, topic, payload, self._tag(src, dst, topic, payload))
        if self.tamper is not None:
            msg = self.tamper(msg)
        self.transcript.append(msg)
        if not hmac.compare_digest(msg.tag, self._tag(msg.src, msg.dst, msg.topic, msg.payload)):
            alarm = f"MAC failure on {topic} from {src} to {dst}"
            self.alarms.append(alarm)
            raise AuthenticationFailure(alarm)
        return msg.payload
