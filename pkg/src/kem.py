# kem.py - Key-encapsulation providers for TAP lockboxes
"""
A lockbox carries the TAP's AES-256 key wrapped for one recipient:

    encapsulated_key = kem_ciphertext || AES-256-GCM(kek, zero nonce, tap_key)

where kek = HKDF-SHA384(kem shared secret, info="acesim-lockbox" || alg id).
Every kek wraps exactly one key, so the nonce is fixed at zero.

TestKem (X25519, from `cryptography`) is always available. MlKem768 needs
the optional `kyber-py` package.
"""
import logging
import struct
from typing import Dict, Optional, Tuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from errors import AuthFailure, UnsupportedAlgorithm

try:
    from kyber_py.ml_kem import ML_KEM_768
except ImportError:  # optional provider
    ML_KEM_768 = None

logger = logging.getLogger(__name__)

ALG_MLKEM768 = 0x0001
ALG_TESTKEM = 0xFFFE

TAP_KEY_BYTES = 32
WRAPPED_KEY_BYTES = TAP_KEY_BYTES + 16
_ZERO_NONCE = bytes(12)


def _kek(shared: bytes, algorithm_id: int) -> bytes:
    return HKDF(
        algorithm=hashes.SHA384(),
        length=32,
        salt=None,
        info=b"acesim-lockbox" + struct.pack(">H", algorithm_id),
    ).derive(shared)


class KemProvider:
    algorithm_id = 0
    name = ""
    ciphertext_bytes = 0

    @property
    def encapsulated_bytes(self) -> int:
        return self.ciphertext_bytes + WRAPPED_KEY_BYTES

    def generate_keypair(self) -> Tuple[bytes, bytes]:
        raise NotImplementedError

    def encapsulate(self, public: bytes) -> Tuple[bytes, bytes]:
        """Returns (shared_secret, kem_ciphertext)."""
        raise NotImplementedError

    def decapsulate(self, private: bytes, ciphertext: bytes) -> bytes:
        raise NotImplementedError

    def wrap(self, public: bytes, tap_key: bytes) -> bytes:
        shared, ct = self.encapsulate(public)
        return ct + AESGCM(_kek(shared, self.algorithm_id)).encrypt(_ZERO_NONCE, tap_key, None)

    def unwrap(self, private: bytes, encapsulated: bytes) -> bytes:
        if len(encapsulated) != self.encapsulated_bytes:
            raise AuthFailure("lockbox length mismatch")
        ct, wrapped = encapsulated[:self.ciphertext_bytes], encapsulated[self.ciphertext_bytes:]
        try:
            shared = self.decapsulate(private, ct)
            return AESGCM(_kek(shared, self.algorithm_id)).decrypt(_ZERO_NONCE, wrapped, None)
        except (InvalidTag, ValueError) as exc:
            raise AuthFailure("lockbox does not open with this key") from exc


class TestKem(KemProvider):
    """Ephemeral-static X25519."""

    __test__ = False
    algorithm_id = ALG_TESTKEM
    name = "TestKem"
    ciphertext_bytes = 32

    def generate_keypair(self):
        private = X25519PrivateKey.generate()
        return public_from_private(private.private_bytes_raw()), private.private_bytes_raw()

    def encapsulate(self, public):
        eph = X25519PrivateKey.generate()
        shared = eph.exchange(X25519PublicKey.from_public_bytes(public))
        return shared, eph.public_key().public_bytes_raw()

    def decapsulate(self, private, ciphertext):
        key = X25519PrivateKey.from_private_bytes(private)
        return key.exchange(X25519PublicKey.from_public_bytes(ciphertext))


class MlKem768(KemProvider):
    algorithm_id = ALG_MLKEM768
    name = "MlKem768"
    ciphertext_bytes = 1088

    def generate_keypair(self):
        encaps_key, decaps_key = ML_KEM_768.keygen()
        return encaps_key, decaps_key

    def encapsulate(self, public):
        shared, ct = ML_KEM_768.encaps(public)
        return shared, ct

    def decapsulate(self, private, ciphertext):
        return ML_KEM_768.decaps(private, ciphertext)


def public_from_private(private: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(private).public_key().public_bytes_raw()


_PROVIDERS: Dict[int, KemProvider] = {ALG_TESTKEM: TestKem()}
if ML_KEM_768 is not None:
    _PROVIDERS[ALG_MLKEM768] = MlKem768()

# Names for every id the wire format knows, available or not
ALGORITHM_NAMES = {ALG_MLKEM768: "MlKem768", ALG_TESTKEM: "TestKem"}
ENCAPSULATED_BYTES = {ALG_MLKEM768: 1088 + WRAPPED_KEY_BYTES, ALG_TESTKEM: 32 + WRAPPED_KEY_BYTES}


def provider(algorithm_id: int) -> KemProvider:
    try:
        return _PROVIDERS[algorithm_id]
    except KeyError:
        raise UnsupportedAlgorithm(f"no KEM provider for algorithm {algorithm_id:#06x}") from None


def available_algorithms() -> Tuple[int, ...]:
    return tuple(sorted(_PROVIDERS))


def mlkem_available() -> bool:
    return ALG_MLKEM768 in _PROVIDERS


def algorithm_from_name(name: str) -> int:
    for alg, label in ALGORITHM_NAMES.items():
        if label.lower() == name.lower():
            return alg
    raise UnsupportedAlgorithm(f"unknown KEM algorithm: {name}")


def algorithm_label(algorithm_id: Optional[int]) -> str:
    return ALGORITHM_NAMES.get(algorithm_id, f"unknown({algorithm_id:#06x})")
