"""Key management: local stores, key delivery sessions, relay and combining."""
from qkdnet.kms.bus import AuthenticatedBus, Message
from qkdnet.kms.errors import *  # noqa: F401,F403
from qkdnet.kms.gkms import (
    CombineRecipe, ExternalKeySource, GlobalKMS, KeyLedger, QoS, RelayOutcome, RelayPath, combine_keys, xor_bytes,
)
from qkdnet.kms.store import KeyBlock, KeyStore
from qkdnet.kms.wire import InProcessTransport, KmsClient, KmsServer, TcpTransport, decode_frame, encode_frame
