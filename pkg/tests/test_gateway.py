import hashlib
import os
import threading
import uuid

import numpy as np
import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from qkdnet.gateway import (
    INITIATOR, MAGIC, RESPONDER, EpochExhausted, EstablishmentError, FileServer, FileStore, FrameFormatError,
    FutureEpochError, GatewayEgress, GatewayEndpoint, GatewayIngress, HandshakeError, NotEstablished, ReplayError,
    StaleEpochError, TagError, TunnelConfig, TunnelFrame, establish_tunnel, file_exchange, get_request, make_nonce,
    parse_get_response, put_request, tunnel_exchange,
)
from qkdnet.gateway.tunnel import HEADER_LEN, TAG_LEN
from qkdnet.kms import GlobalKMS, InProcessTransport, KmsClient


def _kms(n_blocks=40, seed=1):
    k = GlobalKMS(seed=seed)
    k.add_node("A")
    k.add_node("C")
    k.add_link("AC", "A", "C")
    rng = np.random.default_rng(seed)
    for _ in range(n_blocks):
        k.push_key("AC", rng.bytes(32), rng.bytes(16))
    return k


def _pair(kms=None, **cfg):
    kms = kms or _kms()
    ksid = kms.open_connect("A", "C")
    a = GatewayEndpoint(TunnelConfig(ksid, **cfg), KmsClient(InProcessTransport(kms), "A"), INITIATOR)
    c = GatewayEndpoint(TunnelConfig(ksid, **cfg), KmsClient(InProcessTransport(kms), "C"), RESPONDER)
    return a, c


class FixedKeys:
    """Key source handing out a fixed key per epoch, for fault injection."""

    def __init__(self, key):
        self.key = key

    def get_key(self, ksid, index):
        return self.key, index, "ok"


def test_config_validation():
    with pytest.raises(ValueError):
        TunnelConfig(str(uuid.uuid4()), rekey_interval=0)
    with pytest.raises(ValueError):
        TunnelConfig(str(uuid.uuid4()), cipher="ROT13")
    with pytest.raises(ValueError):
        TunnelConfig("not-a-uuid")


def test_frame_layout():
    a, c = _pair()
    establish_tunnel(a, c)
    raw = a.seal(b"abc")
    assert raw[:4] == MAGIC and raw[4] == 1
    assert len(raw) == HEADER_LEN + 3 + TAG_LEN
    fr = TunnelFrame.unpack(raw)
    assert fr.ksid == uuid.UUID(a.cfg.ksid).bytes
    assert (fr.epoch, fr.seq) == (0, 1)  # seq 0 carried the ping
    assert make_nonce(1, 2, 3) == bytes([0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 2, 3])
    with pytest.raises(FrameFormatError):
        TunnelFrame.unpack(b"XGW1" + raw[4:])
    with pytest.raises(FrameFormatError):
        TunnelFrame.unpack(raw[:-1])


def test_roundtrip_many_frames_both_directions():
    a, c = _pair()
    establish_tunnel(a, c)
    rng = np.random.default_rng(1)
    for i in range(100_000):
        p = rng.bytes(int(rng.integers(0, 64)))
        src, dst = (a, c) if i % 2 else (c, a)
        assert dst.open(src.seal(p)) == p


def test_bit_flip_is_tag_failure():
    a, c = _pair()
    establish_tunnel(a, c)
    raw = bytearray(a.seal(b"payload"))
    for pos in (HEADER_LEN, len(raw) - 1, 10):  # ciphertext, tag, header ksid (bound as AD)
        bad = bytearray(raw)
        bad[pos] ^= 0x01
        with pytest.raises((TagError, FrameFormatError)):
            c.open(bytes(bad))
    bad = bytearray(raw)
    bad[HEADER_LEN + 2] ^= 0x80
    with pytest.raises(TagError):
        c.open(bytes(bad))
    assert c.open(bytes(raw)) == b"payload"
    assert c.stats.rejected["bad_tag"] >= 2


def test_duplicate_frame_accepted_exactly_once():
    a, c = _pair()
    establish_tunnel(a, c)
    f = a.seal(b"once")
    accepted = 0
    for _ in range(5):
        try:
            c.open(f)
            accepted += 1
        except ReplayError:
            pass
    assert accepted == 1
    assert c.stats.rejected["replay"] == 4


def test_out_of_order_within_window():
    a, c = _pair(replay_window=8)
    establish_tunnel(a, c)
    frames = [a.seal(bytes([i])) for i in range(20)]
    for f in reversed(frames[12:]):
        c.open(f)
    with pytest.raises(ReplayError):
        c.open(frames[0])  # older than the window


def test_traffic_across_rekey_boundaries_zero_loss():
    a, c = _pair()
    establish_tunnel(a, c)
    rng = np.random.default_rng(2)
    in_flight = []
    delivered = failures = 0
    for epoch in range(1, 12):
        in_flight += [a.seal(rng.bytes(40)) for _ in range(50)]
        assert a.rekey()
        assert a.epoch == epoch
        # frames sealed before the rekey arrive afterwards, interleaved with new-epoch frames
        fresh = [a.seal(rng.bytes(40)) for _ in range(50)]
        for f in in_flight + fresh:
            try:
                c.open(f)
                delivered += 1
            except Exception:
                failures += 1
        in_flight = []
    assert failures == 0
    assert delivered == 11 * 100
    assert a.stats.bytes_sealed == c.stats.bytes_opened


def test_two_epoch_grace_and_stale_rejection():
    a, c = _pair()
    establish_tunnel(a, c)
    old = a.seal(b"epoch0")
    a.rekey()
    mid = a.seal(b"epoch1")
    c.open(mid)
    assert c.open(old) == b"epoch0"  # previous epoch still inside the grace window
    stale = a.seal(b"epoch1-stale")
    a.rekey()
    c.open(a.seal(b"epoch2"))
    a.rekey()
    c.open(a.seal(b"epoch3"))
    with pytest.raises(StaleEpochError):
        c.open(stale)
    assert c.stats.rejected["stale_epoch"] == 1


def test_idle_rekeys_are_caught_up():
    a, c = _pair()
    establish_tunnel(a, c)
    for _ in range(3):
        a.rekey()  # timer-driven rekeys with no traffic in between
    assert c.open(a.seal(b"x")) == b"x"
    assert c.epoch == 3
    assert a.open(c.seal(b"reply")) == b"reply"  # the follower seals under the new epoch


def test_skip_beyond_bound_rejected():
    a, c = _pair(max_skip=2)
    establish_tunnel(a, c)
    a.rekey()
    a.rekey()
    a.rekey()
    with pytest.raises(FutureEpochError):
        c.open(a.seal(b"x"))
    assert c.stats.rejected["future_epoch"] == 1


def test_responder_rekey_and_initiator_follows():
    a, c = _pair()
    establish_tunnel(a, c)
    c.rekey()
    assert a.open(c.seal(b"from responder")) == b"from responder"
    a.rekey()  # the epoch-1 key is already held, no second pull
    assert c.open(a.seal(b"back")) == b"back"


def test_keys_are_replaced_not_chained():
    a, c = _pair()
    establish_tunnel(a, c)
    a.rekey()
    kms_key, idx, _ = c.keys.get_key(c.cfg.ksid, 1)
    assert idx == 1 and len(kms_key) == 32
    raw = a.seal(b"check")
    fr = TunnelFrame.unpack(raw)
    pt = AESGCM(kms_key).decrypt(make_nonce(1, fr.seq, INITIATOR), fr.ciphertext, fr.header())
    assert pt == b"check"


def test_epoch_overflow_hard_stop():
    a, c = _pair(max_epoch=3)
    establish_tunnel(a, c)
    for _ in range(3):
        assert a.rekey()
    with pytest.raises(EpochExhausted):
        a.rekey()
    assert a.state == "stopped"
    with pytest.raises(EpochExhausted):
        a.seal(b"after stop")


def test_empty_kms_is_establishment_error():
    k = GlobalKMS(seed=2)
    k.add_node("A")
    k.add_node("C")
    k.add_link("AC", "A", "C")
    a, c = _pair(k)
    with pytest.raises(EstablishmentError) as exc:
        establish_tunnel(a, c)
    assert not isinstance(exc.value, (TagError, HandshakeError))
    assert a.state == "degraded: no-key"
    assert a.alarms
    with pytest.raises(NotEstablished):
        a.seal(b"never plaintext")


def test_rekey_starvation_keeps_old_epoch():
    a, c = _pair(_kms(n_blocks=2))
    establish_tunnel(a, c)
    assert a.rekey()
    assert not a.rekey()
    assert a.state == "degraded: no-rekey"
    assert a.epoch == 1 and a.alarms
    assert c.open(a.seal(b"still protected")) == b"still protected"


def test_matched_keys_ping():
    key = os.urandom(32)
    ksid = str(uuid.uuid4())
    a = GatewayEndpoint(TunnelConfig(ksid), FixedKeys(key), INITIATOR)
    c = GatewayEndpoint(TunnelConfig(ksid), FixedKeys(key), RESPONDER)
    establish_tunnel(a, c)
    assert a.state == c.state == "up"


def test_mismatched_keys_abort_handshake():
    ksid = str(uuid.uuid4())
    a = GatewayEndpoint(TunnelConfig(ksid), FixedKeys(os.urandom(32)), INITIATOR)
    c = GatewayEndpoint(TunnelConfig(ksid), FixedKeys(os.urandom(32)), RESPONDER)
    with pytest.raises(HandshakeError):
        establish_tunnel(a, c)
    assert c.state == "failed"


def test_frame_bound_to_session():
    a, c = _pair()
    b, d = _pair(_kms(seed=2))
    establish_tunnel(a, c)
    establish_tunnel(b, d)
    with pytest.raises(FrameFormatError):
        d.open(a.seal(b"wrong tunnel"))


def test_nonce_uniqueness_audit():
    a, c = _pair()
    establish_tunnel(a, c)
    for _ in range(5):
        for _ in range(500):
            c.open(a.seal(b"x"))
            a.open(c.seal(b"y"))
        a.rekey()
        c.rekey()
    assert len(a.nonce_log) == a.stats.frames_sealed
    assert len(c.nonce_log) == c.stats.frames_sealed
    assert not a.nonce_log & c.nonce_log  # direction byte separates the two sides


def test_concurrent_sealers_unique_sequence():
    a, c = _pair()
    establish_tunnel(a, c)
    out = []
    lock = threading.Lock()

    def worker():
        frames = [a.seal(b"t") for _ in range(500)]
        with lock:
            out.extend(frames)

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    seqs = {TunnelFrame.unpack(f).seq for f in out}
    assert len(seqs) == len(out) == 4000
    for f in out:
        c.open(f)


def test_in_process_file_exchange():
    a, c = _pair()
    establish_tunnel(a, c)
    store = FileStore()
    data = os.urandom(200_000)
    resp, frames = tunnel_exchange(a, c, store, put_request("report.pdf", data))
    assert resp == b"OK " + hashlib.sha256(data).hexdigest().encode() + b"\n"
    resp, _ = tunnel_exchange(a, c, store, get_request("report.pdf"))
    assert parse_get_response(resp) == data
    assert frames > 3


def test_tcp_proxy_file_roundtrip_and_taint():
    a, c = _pair()
    establish_tunnel(a, c)
    base_a, base_c = a.stats.bytes_sealed, c.stats.bytes_sealed  # in-process ping and pong
    fs = FileServer()
    eg = GatewayEgress(("127.0.0.1", 0), fs.serve_in_background(), c)
    ig = GatewayIngress(("127.0.0.1", 0), eg.serve_in_background(), a)
    try:
        addr = ig.serve_in_background()
        marker = b"PLAINTEXT-MARKER-" * 4096
        put = file_exchange(addr, put_request("data.bin", marker))
        assert put.startswith(b"OK ")
        got = parse_get_response(file_exchange(addr, get_request("data.bin")))
        assert got == marker
        frames = ig.tap.frames + eg.tap.frames
        assert frames and all(f.startswith(MAGIC) for f in frames)
        assert not any(b"PLAINTEXT-MARKER" in f for f in frames)
        # throughput accounting equals plaintext sealed on the wire
        header_tag = HEADER_LEN + TAG_LEN
        assert a.stats.bytes_sealed - base_a == sum(len(f) - header_tag for f in ig.tap.frames)
        assert c.stats.bytes_sealed - base_c == sum(len(f) - header_tag for f in eg.tap.frames)
    finally:
        ig.stop()
        eg.stop()
        fs.stop()
