"""KMS error hierarchy. Each error carries the wire status it maps to."""


class KmsError(Exception):
    status = "error"


class KeyIdConflict(KmsError):
    status = "conflict"


class StoreFull(KmsError):
    status = "store_full"


class NoRoute(KmsError):
    status = "no_route"


class InsufficientKeyMaterial(KmsError):
    """QoS minimum rate cannot be met from the current store levels."""

    status = "qos_unsatisfiable"


class KeyStarvation(KmsError):
    status = "insufficient"

    def __init__(self, message: str, retry_after: float = 1.0):
        super().__init__(message)
        self.retry_after = retry_after


class SessionClosed(KmsError):
    status = "closed"


class UnknownSession(KmsError):
    status = "unknown_ksid"


class InvalidIndex(KmsError):
    status = "bad_index"


class RelayError(KmsError):
    status = "relay_failed"


class AuthenticationFailure(KmsError):
    status = "auth_failed"


class KeyMismatch(KmsError):
    status = "key_mismatch"


class DoubleDelivery(KmsError):
    status = "double_delivery"


BY_STATUS = {
    cls.status: cls
    for cls in (
        KmsError, KeyIdConflict, StoreFull, NoRoute, InsufficientKeyMaterial, KeyStarvation,
        SessionClosed, UnknownSession, InvalidIndex, RelayError, AuthenticationFailure,
        KeyMismatch, DoubleDelivery,
    )
}
