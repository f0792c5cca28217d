"""Quantum-secure gateway: AEAD tunnel fed by KMS keys, and a TCP proxy."""
from qkdnet.gateway.proxy import (
    FileServer, FileStore, GatewayEgress, GatewayIngress, RekeyTimer, file_exchange, get_request,
    parse_get_response, put_request, tunnel_exchange,
)
from qkdnet.gateway.tunnel import (
    INITIATOR, MAGIC, RESPONDER, EpochExhausted, EstablishmentError, FrameFormatError, FutureEpochError,
    GatewayEndpoint, HandshakeError, NotEstablished, ReplayError, StaleEpochError, TagError, TunnelConfig,
    TunnelError, TunnelFrame, establish_tunnel, handshake, make_nonce,
)
